//! Finite-horizon linear-quadratic optimum, used as ground truth.
//!
//! With the half-weighted cost the optimal control is
//! `u = −K(τ)x + R⁻¹Bᵀv(τ)` where `K = R⁻¹BᵀS` and
//!
//! ```text
//! −Ṡ = AᵀS + SA − SBR⁻¹BᵀS + CᵀQC,   S(T) = CᵀPC
//! −v̇ = (A − BK)ᵀv + CᵀQr,            v(T) = CᵀPr(T)
//! ```
//!
//! Both are integrated jointly by RK4 in reversed time `σ = T − τ`. Values on
//! the half-step lattice come from cubic Hermite interpolation with the ODE
//! slopes, so the forward closed-loop RK4 sees gains at its midpoint stages.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::es::format_f64;
use crate::linalg::{matvec_add, matvec_into, spd_inverse, symmetrize};
use crate::ode::{integrate_rk4_staged, rk4_step, Rk4Workspace, StateTrajectory, TimeGrid};
use crate::scenario::{QuadraticCostSpec, Scenario};

/// Eigenvalue floor for `S(τ)` when the terminal weight is PSD.
pub const RICCATI_PSD_TOLERANCE: f64 = -1e-8;

/// `S`, `K` and `v` tabulated on the half-step lattice of a grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    grid: TimeGrid,
    n: usize,
    p: usize,
    tracking: bool,
    s: Vec<DMatrix<f64>>,
    k: Vec<DMatrix<f64>>,
    v: Vec<DVector<f64>>,
    /// `R⁻¹Bᵀv` on the half lattice.
    feedforward: Vec<DVector<f64>>,
}

impl RiccatiSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.p
    }

    /// `S(τ_i)` at node `i`.
    pub fn s(&self, i: usize) -> &DMatrix<f64> {
        &self.s[2 * i]
    }

    pub fn k(&self, i: usize) -> &DMatrix<f64> {
        &self.k[2 * i]
    }

    pub fn v(&self, i: usize) -> &DVector<f64> {
        &self.v[2 * i]
    }

    /// Optimal feedforward input `R⁻¹Bᵀv(τ_i)` at node `i`.
    pub fn feedforward(&self, i: usize) -> &DVector<f64> {
        &self.feedforward[2 * i]
    }

    /// Gain at half-lattice index `q`.
    pub fn k_half(&self, q: usize) -> &DMatrix<f64> {
        &self.k[q]
    }

    pub fn s0(&self) -> &DMatrix<f64> {
        &self.s[0]
    }

    /// `½x0ᵀS(0)x0`; only meaningful for regulation (`r ≡ 0`).
    pub fn optimal_cost_quadratic_form(&self, x0: &[f64]) -> Result<f64> {
        if self.tracking {
            return Err(Error::contract(
                "quadratic-form cost needs a zero reference",
            ));
        }
        if x0.len() != self.n {
            return Err(Error::contract(format!(
                "x0 has {} components, state has {}",
                x0.len(),
                self.n
            )));
        }
        let x = DVector::from_column_slice(x0);
        Ok(0.5 * x.dot(&(&self.s[0] * &x)))
    }

    /// Writes `tau,K_1_1,...,K_p_n,v_1,...,v_n` at every node.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["tau".to_string()];
        for r in 0..self.p {
            header.extend((0..self.n).map(|c| format!("K_{}_{}", r + 1, c + 1)));
        }
        header.extend((0..self.n).map(|c| format!("v_{}", c + 1)));
        w.write_record(&header)?;
        for i in 0..self.grid.n_nodes() {
            let mut row = vec![format_f64(self.grid.node(i))];
            let k = self.k(i);
            for r in 0..self.p {
                row.extend((0..self.n).map(|c| format_f64(k[(r, c)])));
            }
            row.extend(self.v(i).iter().map(|x| format_f64(*x)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct RiccatiRhs<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    brb: DMatrix<f64>,
    r_inv_bt: DMatrix<f64>,
    ctqc: DMatrix<f64>,
    ctq: DMatrix<f64>,
    cost: &'a QuadraticCostSpec,
    horizon: f64,
    n: usize,
}

impl RiccatiRhs<'_> {
    /// `d/dσ (S, v)` for the flattened state `y = [vec(S); v]`.
    fn eval(&self, sigma: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.n;
        let s = DMatrix::from_column_slice(n, n, &y[..n * n]);
        let v = DVector::from_column_slice(&y[n * n..]);
        let ds = self.a.transpose() * &s + &s * self.a - &s * &self.brb * &s + &self.ctqc;
        let k = &self.r_inv_bt * &s;
        let closed = self.a - self.b * k;
        let r = DVector::from_vec(
            self.cost
                .reference
                .eval(self.horizon - sigma, self.cost.output_dim()),
        );
        let dv = closed.transpose() * v + &self.ctq * r;
        dy[..n * n].copy_from_slice(ds.as_slice());
        dy[n * n..].copy_from_slice(dv.as_slice());
    }
}

/// Solves the Riccati and feedforward equations for frozen `(A, B)` on `grid`.
///
/// When `P` is PSD every `S(τ)` must stay PSD within [`RICCATI_PSD_TOLERANCE`]
/// (relative to `‖S‖`). With an indefinite `P` only finiteness is checked.
pub fn solve_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cost: &QuadraticCostSpec,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    let (n, p) = (a.nrows(), b.ncols());
    if !a.is_square() || b.nrows() != n || cost.c.ncols() != n || cost.r.nrows() != p {
        return Err(Error::contract(
            "inconsistent dimensions in Riccati problem",
        ));
    }
    let r_inv = spd_inverse(&cost.r, "R")?;
    let r_inv_bt = &r_inv * b.transpose();
    let rhs = RiccatiRhs {
        a,
        b,
        brb: b * &r_inv_bt,
        ctqc: cost.c.transpose() * &cost.q * &cost.c,
        ctq: cost.c.transpose() * &cost.q,
        r_inv_bt: r_inv_bt.clone(),
        cost,
        horizon: grid.t_end(),
        n,
    };
    let sigma_grid = TimeGrid::new(0.0, grid.span(), grid.n_steps())?;
    let check_psd = cost.terminal_is_psd();
    let dim = n * n + n;

    let r_t = DVector::from_vec(cost.reference.eval(grid.t_end(), cost.output_dim()));
    let mut y = vec![0.0; dim];
    y[..n * n].copy_from_slice((cost.c.transpose() * &cost.p * &cost.c).as_slice());
    y[n * n..].copy_from_slice((cost.c.transpose() * &cost.p * r_t).as_slice());

    let n_nodes = grid.n_nodes();
    let mut nodes: Vec<Vec<f64>> = Vec::with_capacity(n_nodes);
    let mut slopes: Vec<Vec<f64>> = Vec::with_capacity(n_nodes);
    let mut ws = Rk4Workspace::new(dim);
    let mut f = |stage: crate::ode::Stage, y: &[f64], dy: &mut [f64]| rhs.eval(stage.time, y, dy);
    for j in 0..n_nodes {
        let node = n_nodes - 1 - j;
        check_node(&y, n, node, check_psd)?;
        let mut dy = vec![0.0; dim];
        rhs.eval(sigma_grid.node(j), &y, &mut dy);
        nodes.push(y.clone());
        slopes.push(dy);
        if j + 1 < n_nodes {
            rk4_step(&mut f, &sigma_grid, j, &mut y, &mut ws);
            let mut s = DMatrix::from_column_slice(n, n, &y[..n * n]);
            symmetrize(&mut s);
            y[..n * n].copy_from_slice(s.as_slice());
        }
    }

    // σ-ordered samples to τ-ordered half lattice via cubic Hermite midpoints.
    let h = sigma_grid.step();
    let mut half: Vec<Vec<f64>> = Vec::with_capacity(2 * n_nodes - 1);
    for j in (0..n_nodes).rev() {
        if j + 1 < n_nodes {
            let mid: Vec<f64> = (0..dim)
                .map(|c| {
                    0.5 * (nodes[j][c] + nodes[j + 1][c])
                        + h / 8.0 * (slopes[j][c] - slopes[j + 1][c])
                })
                .collect();
            half.push(mid);
        }
        half.push(nodes[j].clone());
    }

    let mut s_half = Vec::with_capacity(half.len());
    let mut k_half = Vec::with_capacity(half.len());
    let mut v_half = Vec::with_capacity(half.len());
    let mut ff_half = Vec::with_capacity(half.len());
    for y in &half {
        let mut s = DMatrix::from_column_slice(n, n, &y[..n * n]);
        symmetrize(&mut s);
        let v = DVector::from_column_slice(&y[n * n..]);
        k_half.push(&r_inv_bt * &s);
        ff_half.push(&r_inv_bt * &v);
        s_half.push(s);
        v_half.push(v);
    }
    Ok(RiccatiSolution {
        grid: *grid,
        n,
        p,
        tracking: !cost.reference.is_zero(),
        s: s_half,
        k: k_half,
        v: v_half,
        feedforward: ff_half,
    })
}

fn check_node(y: &[f64], n: usize, node: usize, check_psd: bool) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::RiccatiInstability {
            node,
            reason: "non-finite value".into(),
        });
    }
    if check_psd {
        let s = DMatrix::from_column_slice(n, n, &y[..n * n]);
        let lo = s.clone().symmetric_eigenvalues().min();
        let scale = s.amax().max(1.0);
        if lo < RICCATI_PSD_TOLERANCE * scale {
            return Err(Error::RiccatiInstability {
                node,
                reason: format!("S has eigenvalue {lo}"),
            });
        }
    }
    Ok(())
}

/// Riccati solution for a linear-quadratic scenario frozen at `slow_time`.
pub fn solve_for_scenario(scenario: &Scenario, slow_time: f64) -> Result<RiccatiSolution> {
    let (a, b) = scenario
        .linear_at(slow_time)
        .ok_or_else(|| Error::contract("Riccati oracle needs linear dynamics"))?;
    let cost = scenario
        .quadratic_cost()
        .ok_or_else(|| Error::contract("Riccati oracle needs a quadratic cost"))?;
    solve_riccati(&a, &b, cost, scenario.grid())
}

/// Closed-loop run of the optimal controller.
#[derive(Debug, Clone)]
pub struct OptimalOutcome {
    pub trajectory: StateTrajectory,
    /// Control samples at every node, row-major `n_nodes × p`.
    pub controls: Vec<f64>,
    pub cost: f64,
}

/// Integrates the plant under `u = −Kx + R⁻¹Bᵀv` from `x0` and scores it like an episode.
pub fn simulate_optimal(
    scenario: &Scenario,
    slow_time: f64,
    x0: &[f64],
    riccati: &RiccatiSolution,
) -> Result<OptimalOutcome> {
    if riccati.grid != *scenario.grid() {
        return Err(Error::contract(
            "Riccati solution was computed on a different grid",
        ));
    }
    let (a, b) = scenario
        .linear_at(slow_time)
        .ok_or_else(|| Error::contract("optimal simulation needs linear dynamics"))?;
    if x0.len() != riccati.n {
        return Err(Error::contract(format!(
            "x0 has {} components, state has {}",
            x0.len(),
            riccati.n
        )));
    }
    let p = riccati.p;
    let mut u = vec![0.0; p];
    let control = |q: usize, x: &[f64], u: &mut [f64]| {
        matvec_into(&riccati.k[q], x, u);
        for (ui, w) in u.iter_mut().zip(riccati.feedforward[q].iter()) {
            *ui = w - *ui;
        }
    };
    let trajectory = integrate_rk4_staged(
        |stage, x, dx| {
            control(stage.half_index, x, &mut u);
            matvec_into(&a, x, dx);
            matvec_add(&b, &u, dx);
        },
        x0,
        scenario.grid(),
    )
    .map_err(|e| Error::Episode {
        slow_time,
        source: Box::new(e),
    })?;
    let mut controls = vec![0.0; trajectory.len() * p];
    for (i, x) in trajectory.states().enumerate() {
        control(2 * i, x, &mut controls[i * p..(i + 1) * p]);
    }
    let cost = scenario.evaluate_cost(&trajectory, &controls);
    Ok(OptimalOutcome {
        trajectory,
        controls,
        cost,
    })
}

/// Optimal cost summed over the scenario's initial conditions.
pub fn optimal_total_cost(scenario: &Scenario, slow_time: f64) -> Result<f64> {
    let ric = solve_for_scenario(scenario, slow_time)?;
    scenario
        .initial_conditions()
        .iter()
        .map(|x0| simulate_optimal(scenario, slow_time, x0, &ric).map(|o| o.cost))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::scenario::{
        CostSpec, Dynamics, LinearDynamics, NoiseModel, Reference, ScenarioParts,
    };

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_scenario(
        a: f64,
        b: f64,
        cost: QuadraticCostSpec,
        n_steps: usize,
        x0: f64,
    ) -> Scenario {
        Scenario::new(ScenarioParts {
            id: "scalar".into(),
            dynamics: Dynamics::Linear(LinearDynamics::constant(m1(a), m1(b))),
            cost: CostSpec::Quadratic(cost),
            grid: TimeGrid::horizon(1.0, n_steps).unwrap(),
            initial_conditions: vec![vec![x0]],
            noise: NoiseModel::noiseless(),
            basis: BasisSpec::fourier(2, 1.0, 0.1).unwrap(),
            slow_time_dependence: false,
            batch_period: None,
        })
        .unwrap()
    }

    #[test]
    fn integrator_riccati_closed_form() {
        let p0 = 3.0;
        let cost = QuadraticCostSpec::regulator(m1(p0), m1(0.0), m1(1.0));
        let grid = TimeGrid::horizon(1.0, 1000).unwrap();
        let sol = solve_riccati(&m1(0.0), &m1(1.0), &cost, &grid).unwrap();
        for i in 0..grid.n_nodes() {
            let expect = p0 / (1.0 + p0 * (1.0 - grid.node(i)));
            assert!((sol.s(i)[(0, 0)] - expect).abs() < 1e-8, "node {i}");
        }
        assert_eq!(sol.s(grid.n_steps())[(0, 0)], p0);
        assert!(sol.v(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_example_closed_form() {
        // dS/dσ = −½(S − s₊)(S − s₋) with s± = 2 ± 2√2.
        let cost = QuadraticCostSpec::regulator(m1(2.0), m1(2.0), m1(2.0));
        let grid = TimeGrid::horizon(1.0, 1000).unwrap();
        let sol = solve_riccati(&m1(1.0), &m1(1.0), &cost, &grid).unwrap();
        let (sp, sm) = (2.0 + 2.0 * 2f64.sqrt(), 2.0 - 2.0 * 2f64.sqrt());
        let rho0 = (2.0 - sp) / (2.0 - sm);
        for i in 0..grid.n_nodes() {
            let sigma = 1.0 - grid.node(i);
            let rho = rho0 * (-(sp - sm) * sigma / 2.0).exp();
            let expect = (sp - rho * sm) / (1.0 - rho);
            assert!((sol.s(i)[(0, 0)] - expect).abs() < 1e-7, "node {i}");
            assert!((sol.k(i)[(0, 0)] - expect / 2.0).abs() < 1e-7);
        }
    }

    #[test]
    fn half_lattice_gain_is_accurate() {
        let p0 = 3.0;
        let cost = QuadraticCostSpec::regulator(m1(p0), m1(0.0), m1(1.0));
        let grid = TimeGrid::horizon(1.0, 200).unwrap();
        let sol = solve_riccati(&m1(0.0), &m1(1.0), &cost, &grid).unwrap();
        let err =
            |q: usize| (sol.k_half(q)[(0, 0)] - p0 / (1.0 + p0 * (1.0 - grid.half_node(q)))).abs();
        let node_err = (0..grid.n_half_nodes())
            .step_by(2)
            .map(err)
            .fold(0.0, f64::max);
        let mid_err = (1..grid.n_half_nodes())
            .step_by(2)
            .map(err)
            .fold(0.0, f64::max);
        assert!(
            node_err < 1e-8 && mid_err < 1e-7,
            "{node_err:e} {mid_err:e}"
        );
    }

    #[test]
    fn simulated_optimum_matches_quadratic_form() {
        let s = scalar_scenario(
            1.0,
            1.0,
            QuadraticCostSpec::regulator(m1(2.0), m1(2.0), m1(2.0)),
            1000,
            2.0,
        );
        let ric = solve_for_scenario(&s, 0.0).unwrap();
        let sim = simulate_optimal(&s, 0.0, &[2.0], &ric).unwrap();
        let form = ric.optimal_cost_quadratic_form(&[2.0]).unwrap();
        assert!((sim.cost - form).abs() < 1e-5);
        let e2 = std::f64::consts::E.powi(2);
        assert!(sim.cost < 4.0 * e2 + 2.0 * (e2 - 1.0));
        assert!((ric.optimal_cost_quadratic_form(&[4.0]).unwrap() - 4.0 * form).abs() < 1e-10);
        assert_eq!(ric.optimal_cost_quadratic_form(&[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn regulator_at_origin_stays_put() {
        let s = scalar_scenario(
            1.0,
            1.0,
            QuadraticCostSpec::regulator(m1(2.0), m1(2.0), m1(2.0)),
            100,
            0.0,
        );
        let ric = solve_for_scenario(&s, 0.0).unwrap();
        let sim = simulate_optimal(&s, 0.0, &[0.0], &ric).unwrap();
        assert!(sim.trajectory.states().all(|x| x[0] == 0.0));
        assert_eq!(sim.cost, 0.0);
    }

    #[test]
    fn tracking_rejects_quadratic_form() {
        let mut cost = QuadraticCostSpec::regulator(m1(2.0), m1(20.0), m1(0.02));
        cost.reference = Reference::Constant { value: vec![1.0] };
        let s = scalar_scenario(1.0, 1.0, cost, 200, 0.0);
        let ric = solve_for_scenario(&s, 0.0).unwrap();
        assert_eq!(
            ric.optimal_cost_quadratic_form(&[1.0]).unwrap_err().kind(),
            "contract-violation"
        );
        assert!(ric.v(0)[0] != 0.0);
    }

    #[test]
    fn tracking_optimum_beats_perturbed_feedforward() {
        // Perturbing the optimal control by any δu(τ) must not lower the cost.
        let mut cost = QuadraticCostSpec::regulator(m1(2.0), m1(20.0), m1(0.02));
        cost.reference = Reference::Sinusoid {
            offset: vec![0.0],
            amplitude: vec![1.0],
            period: 1.0,
            phase: 0.0,
        };
        let s = scalar_scenario(1.0, 1.0, cost, 1000, 0.5);
        let ric = solve_for_scenario(&s, 0.0).unwrap();
        let best = simulate_optimal(&s, 0.0, &[0.5], &ric).unwrap();
        // The optimal open-loop input reproduces the optimal cost.
        let u_half: Vec<f64> = (0..s.grid().n_half_nodes())
            .map(|q| {
                if q % 2 == 0 {
                    best.controls[q / 2]
                } else {
                    0.5 * (best.controls[q / 2] + best.controls[q / 2 + 1])
                }
            })
            .collect();
        for eps in [-0.05, 0.05] {
            let pert: Vec<f64> = u_half
                .iter()
                .enumerate()
                .map(|(q, u)| u + eps * (std::f64::consts::PI * s.grid().half_node(q)).sin())
                .collect();
            let (_, _, j) = s.simulate_open_loop(&pert, &[0.5], 0.0).unwrap();
            assert!(j > best.cost);
        }
    }

    #[test]
    fn psd_violation_is_reported() {
        // Q indefinite is rejected at scenario load; feed it straight to the solver instead.
        let cost = QuadraticCostSpec::regulator(m1(0.0), m1(-50.0), m1(1.0));
        let grid = TimeGrid::horizon(1.0, 100).unwrap();
        let err = solve_riccati(&m1(0.0), &m1(1.0), &cost, &grid).unwrap_err();
        match err {
            Error::RiccatiInstability { node, .. } => assert!(node < grid.n_steps()),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let cost = QuadraticCostSpec::regulator(m1(2.0), m1(2.0), m1(2.0));
        let grid = TimeGrid::horizon(1.0, 4).unwrap();
        let sol = solve_riccati(&m1(1.0), &m1(1.0), &cost, &grid).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "tau,K_1_1,v_1");
        assert_eq!(lines.len(), 6);
        let last: Vec<f64> = lines[5].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(last[0], 1.0);
        assert!((last[1] - 1.0).abs() < 1e-15 && last[2] == 0.0);
    }
}
