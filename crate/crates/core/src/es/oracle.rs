//! Reference solutions used to check what ES converges to.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ode::{integrate_rk4, TimeGrid};
use crate::scenario::{CostSpec, Dynamics, Scenario};
use crate::ControllerCoefficients;

/// Central-difference step used inside the gradient-flow oracle.
const FLOW_FD_STEP: f64 = 1e-5;
/// Largest accepted `step·(kα/2)·‖H‖` in the gradient-flow oracle.
const FLOW_STABILITY_LIMIT: f64 = 0.1;

/// `(cost(a + h·e_j) − cost(a − h·e_j)) / 2h` for every coordinate.
pub fn finite_diff_gradient<F>(mut cost_fn: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for j in 0..point.len() {
        x[j] = point[j] + h;
        let up = cost_fn(&x)?;
        x[j] = point[j] - h;
        let down = cost_fn(&x)?;
        x[j] = point[j];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Validation(format!(
                "cost not finite around coordinate {j}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Sampled solution of the averaged system.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPath {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl FlowPath {
    /// Linear interpolation of the path at time `t` (clamped to its span).
    pub fn at(&self, t: f64) -> Vec<f64> {
        let last = self.times.len() - 1;
        let h = self.times[1] - self.times[0];
        let pos = ((t - self.times[0]) / h).clamp(0.0, last as f64);
        let i = (pos.floor() as usize).min(last - 1);
        let w = pos - i as f64;
        self.points[i]
            .iter()
            .zip(&self.points[i + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }
}

/// RK4 integration of `dā/dt = −(kα/2)∇J(ā)` with finite-difference gradients.
///
/// Rejects steps with `step·(kα/2)·‖H‖ > 0.1`, where `‖H‖` is the row-sum
/// norm of a finite-difference Hessian at `a0`.
pub fn gradient_flow_reference<F>(
    mut cost_fn: F,
    a0: &[f64],
    k_alpha: f64,
    duration: f64,
    step: f64,
) -> Result<FlowPath>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0 && duration > 0.0 && k_alpha > 0.0) {
        return Err(Error::contract(
            "gradient flow needs positive step, duration and kα",
        ));
    }
    let rate = 0.5 * k_alpha;
    let h_norm = hessian_norm(&mut cost_fn, a0)?;
    if step * rate * h_norm > FLOW_STABILITY_LIMIT {
        return Err(Error::contract(format!(
            "flow step {step} too large: step·(kα/2)·‖H‖ = {}",
            step * rate * h_norm
        )));
    }
    let n_steps = ((duration / step).round() as usize).max(2);
    let grid = TimeGrid::new(0.0, duration, n_steps)?;
    let mut failure = None;
    let traj = integrate_rk4(
        |_, a, da| match finite_diff_gradient(&mut cost_fn, a, FLOW_FD_STEP) {
            Ok(g) => da.iter_mut().zip(g).for_each(|(d, gi)| *d = -rate * gi),
            Err(e) => {
                failure.get_or_insert(e);
                da.iter_mut().for_each(|d| *d = f64::NAN);
            }
        },
        a0,
        &grid,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let traj = traj.map_err(|e| match e {
        Error::IntegrationDiverged { step } => Error::OracleDiverged { step },
        other => other,
    })?;
    Ok(FlowPath {
        times: grid.nodes().collect(),
        points: traj.states().map(<[f64]>::to_vec).collect(),
    })
}

fn hessian_norm<F: FnMut(&[f64]) -> Result<f64>>(cost_fn: &mut F, a: &[f64]) -> Result<f64> {
    let h = 1e-3;
    let n = a.len();
    let mut x = a.to_vec();
    let mut rows = vec![0.0; n];
    for j in 0..n {
        x[j] = a[j] + h;
        let up = finite_diff_gradient(&mut *cost_fn, &x, h)?;
        x[j] = a[j] - h;
        let down = finite_diff_gradient(&mut *cost_fn, &x, h)?;
        x[j] = a[j];
        for (r, (u, d)) in rows.iter_mut().zip(up.iter().zip(&down)) {
            *r += ((u - d) / (2.0 * h)).abs();
        }
    }
    Ok(rows.into_iter().fold(0.0, f64::max))
}

/// `J(c) = j0 + gᵀc + cᵀHc`, recovered exactly from samples of a quadratic cost.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    pub j0: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl QuadraticModel {
    /// Samples `J` at `0`, `±e_i` and `e_i + e_j` (i < j) and solves for the coefficients.
    pub fn fit<F>(mut cost_fn: F, n: usize) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let mut x = vec![0.0; n];
        let j0 = cost_fn(&x)?;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            x[i] = 1.0;
            let up = cost_fn(&x)?;
            x[i] = -1.0;
            let down = cost_fn(&x)?;
            x[i] = 0.0;
            g[i] = 0.5 * (up - down);
            h[(i, i)] = 0.5 * (up + down - 2.0 * j0);
        }
        for i in 0..n {
            for j in i + 1..n {
                x[i] = 1.0;
                x[j] = 1.0;
                let both = cost_fn(&x)?;
                x[i] = 0.0;
                x[j] = 0.0;
                let hij = 0.5 * (both - j0 - g[i] - g[j] - h[(i, i)] - h[(j, j)]);
                h[(i, j)] = hij;
                h[(j, i)] = hij;
            }
        }
        Ok(QuadraticModel {
            j0,
            gradient: g,
            hessian: h,
        })
    }

    pub fn value(&self, c: &[f64]) -> f64 {
        let c = DVector::from_column_slice(c);
        self.j0 + self.gradient.dot(&c) + c.dot(&(&self.hessian * &c))
    }

    pub fn gradient_at(&self, c: &[f64]) -> Vec<f64> {
        let c = DVector::from_column_slice(c);
        (&self.gradient + 2.0 * (&self.hessian * c))
            .as_slice()
            .to_vec()
    }

    /// Solves `2Hc = −g`.
    pub fn minimizer(&self) -> Result<Vec<f64>> {
        let chol = (2.0 * &self.hessian)
            .cholesky()
            .ok_or_else(|| Error::Validation("quadratic form is not positive definite".into()))?;
        Ok(chol.solve(&(-&self.gradient)).as_slice().to_vec())
    }
}

/// Best controller within the scenario's basis.
#[derive(Debug, Clone)]
pub struct RestrictedOptimum {
    pub model: QuadraticModel,
    pub coeffs: ControllerCoefficients,
    /// Simulated cost at `coeffs`, summed over initial conditions.
    pub cost: f64,
}

/// Minimizes the summed cost of a linear-quadratic scenario over its basis coefficients.
pub fn restricted_optimum(scenario: &Scenario, slow_time: f64) -> Result<RestrictedOptimum> {
    if !matches!(scenario.dynamics(), Dynamics::Linear(_))
        || !matches!(scenario.cost(), CostSpec::Quadratic(_))
    {
        return Err(Error::contract(
            "restricted optimum needs linear dynamics and a quadratic cost",
        ));
    }
    let (p, per) = (scenario.control_dim(), scenario.basis().n_functions());
    let cost = |c: &[f64]| {
        scenario.cost_of(
            &ControllerCoefficients::from_flat(p, per, c.to_vec())?,
            slow_time,
        )
    };
    let model = QuadraticModel::fit(cost, p * per)?;
    let coeffs = ControllerCoefficients::from_flat(p, per, model.minimizer()?)?;
    let cost = scenario.cost_of(&coeffs, slow_time)?;
    Ok(RestrictedOptimum {
        model,
        coeffs,
        cost,
    })
}
