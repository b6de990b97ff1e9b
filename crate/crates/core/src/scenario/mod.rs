//! Repeatable optimal-control problems and their episodes.
//!
//! A [`Scenario`] fixes the plant, the cost, the fast-time grid, the initial
//! condition(s), the controller basis and the cost-measurement noise. One
//! episode re-initializes the plant, applies a basis controller over `[0, T]`
//! and returns the true cost `J` and the measured `Ĵ = J + n`.
//!
//! Quadratic costs use the half-weighted convention
//! `J = ½ eᵀ(T) P e(T) + ½∫ (eᵀQe + uᵀRu) dτ` with `e = Cx − r(τ)`.
//! A cost stated as `x²(T) + ∫ (x² + u²)` is therefore loaded with `P = Q = R = 2`.

mod noise;

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use noise::{standard_normal, NoiseModel};

use crate::basis::{BasisSpec, BasisTable, ControllerCoefficients};
use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, matvec_add, matvec_into, min_eigenvalue, quad_form};
use crate::ode::{integrate_rk4_staged, trapezoid_unchecked, StateTrajectory, TimeGrid};

/// Eigenvalue floor for the PSD weights `P` and `Q`.
pub const PSD_TOLERANCE: f64 = -1e-10;
/// Eigenvalue floor for the PD control weight `R`.
pub const PD_TOLERANCE: f64 = 1e-10;

/// Scalar multiplier applied to a constant base matrix as a function of slow time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeProfile {
    Constant,
    /// `offset + t / time_scale`
    Ramp {
        offset: f64,
        time_scale: f64,
    },
    /// `offset + amplitude · sin(2πt / period)`
    Sinusoid {
        offset: f64,
        amplitude: f64,
        period: f64,
    },
}

impl TimeProfile {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Constant => 1.0,
            TimeProfile::Ramp { offset, time_scale } => offset + t / time_scale,
            TimeProfile::Sinusoid {
                offset,
                amplitude,
                period,
            } => offset + amplitude * (TAU * t / period).sin(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            TimeProfile::Constant => true,
            TimeProfile::Ramp { offset, time_scale } => {
                offset.is_finite() && time_scale.is_finite() && time_scale != 0.0
            }
            TimeProfile::Sinusoid {
                offset,
                amplitude,
                period,
            } => offset.is_finite() && amplitude.is_finite() && period.is_finite() && period > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid time profile {self:?}")))
        }
    }
}

/// `base · profile(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSchedule {
    pub base: DMatrix<f64>,
    pub profile: TimeProfile,
}

impl MatrixSchedule {
    pub fn constant(base: DMatrix<f64>) -> Self {
        MatrixSchedule {
            base,
            profile: TimeProfile::Constant,
        }
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self.profile {
            TimeProfile::Constant => self.base.clone(),
            p => &self.base * p.value(t),
        }
    }
}

/// `dx/dτ = A(t)x + B(t)u` with `A`, `B` frozen at the episode's slow time.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub a: MatrixSchedule,
    pub b: MatrixSchedule,
}

impl LinearDynamics {
    pub fn constant(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        LinearDynamics {
            a: MatrixSchedule::constant(a),
            b: MatrixSchedule::constant(b),
        }
    }
}

pub type RateFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// `dx/dτ = f(τ, x, u)` for an arbitrary plant.
#[derive(Clone)]
pub struct GeneralDynamics {
    pub state_dim: usize,
    pub control_dim: usize,
    pub rate: Arc<RateFn>,
}

impl fmt::Debug for GeneralDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralDynamics")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum Dynamics {
    General(GeneralDynamics),
    Linear(LinearDynamics),
}

impl Dynamics {
    pub fn state_dim(&self) -> usize {
        match self {
            Dynamics::General(g) => g.state_dim,
            Dynamics::Linear(l) => l.a.base.nrows(),
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Dynamics::General(g) => g.control_dim,
            Dynamics::Linear(l) => l.b.base.ncols(),
        }
    }
}

/// Reference trajectory `r(τ)` for the output `Cx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Reference {
    Zero,
    Constant {
        value: Vec<f64>,
    },
    /// `offset_k + amplitude_k · sin(2πτ/period + phase)` per output component.
    Sinusoid {
        offset: Vec<f64>,
        amplitude: Vec<f64>,
        period: f64,
        phase: f64,
    },
}

impl Reference {
    pub fn is_zero(&self) -> bool {
        match self {
            Reference::Zero => true,
            Reference::Constant { value } => value.iter().all(|v| *v == 0.0),
            Reference::Sinusoid {
                offset, amplitude, ..
            } => offset.iter().chain(amplitude).all(|v| *v == 0.0),
        }
    }

    pub fn eval_into(&self, tau: f64, out: &mut [f64]) {
        match self {
            Reference::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Reference::Constant { value } => out.copy_from_slice(value),
            Reference::Sinusoid {
                offset,
                amplitude,
                period,
                phase,
            } => {
                let s = (TAU * tau / period + phase).sin();
                for ((o, c), a) in out.iter_mut().zip(offset).zip(amplitude) {
                    *o = c + a * s;
                }
            }
        }
    }

    pub fn eval(&self, tau: f64, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.eval_into(tau, &mut out);
        out
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        match self {
            Reference::Zero => Ok(()),
            Reference::Constant { value } if value.len() != dim => bad(format!(
                "reference has {} components, output has {dim}",
                value.len()
            )),
            Reference::Sinusoid {
                offset,
                amplitude,
                period,
                ..
            } if offset.len() != dim
                || amplitude.len() != dim
                || period.is_nan()
                || *period <= 0.0 =>
            {
                bad(format!(
                    "sinusoidal reference must have {dim} components and a positive period"
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Half-weighted LQ tracking cost.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCostSpec {
    pub c: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub reference: Reference,
    /// Accept a symmetric but indefinite terminal weight `P`.
    pub allow_indefinite_terminal: bool,
}

impl QuadraticCostSpec {
    /// Regulator cost with `C = I`.
    pub fn regulator(p: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        let n = q.nrows();
        QuadraticCostSpec {
            c: DMatrix::identity(n, n),
            p,
            q,
            r,
            reference: Reference::Zero,
            allow_indefinite_terminal: false,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn terminal_is_psd(&self) -> bool {
        min_eigenvalue(&self.p) >= PSD_TOLERANCE
    }

    fn validate(&self, n: usize, p_dim: usize) -> Result<()> {
        let q_dim = self.c.nrows();
        if self.c.ncols() != n {
            return Err(Error::Validation(format!(
                "C must be {q_dim}×{n}, got {}×{}",
                self.c.nrows(),
                self.c.ncols()
            )));
        }
        for (name, m, d) in [
            ("P", &self.p, q_dim),
            ("Q", &self.q, q_dim),
            ("R", &self.r, p_dim),
        ] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Validation(format!(
                    "{name} must be {d}×{d}, got {}×{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{name} has non-finite entries")));
            }
            if !is_symmetric(m, 1e-12) {
                return Err(Error::Validation(format!("{name} not symmetric")));
            }
        }
        if !self.allow_indefinite_terminal && min_eigenvalue(&self.p) < PSD_TOLERANCE {
            return Err(Error::Validation("P not positive semidefinite".into()));
        }
        if min_eigenvalue(&self.q) < PSD_TOLERANCE {
            return Err(Error::Validation("Q not positive semidefinite".into()));
        }
        if min_eigenvalue(&self.r) < PD_TOLERANCE {
            return Err(Error::Validation("R not positive definite".into()));
        }
        self.reference.validate(q_dim)
    }
}

pub type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
pub type RunningFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// `J = F(x(T)) + ∫ G(x, u) dτ`.
#[derive(Clone)]
pub struct GeneralCostSpec {
    pub terminal: Arc<TerminalFn>,
    pub running: Arc<RunningFn>,
}

impl fmt::Debug for GeneralCostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralCostSpec").finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum CostSpec {
    Quadratic(QuadraticCostSpec),
    General(GeneralCostSpec),
}

/// Everything needed to build a [`Scenario`].
#[derive(Debug, Clone)]
pub struct ScenarioParts {
    pub id: String,
    pub dynamics: Dynamics,
    pub cost: CostSpec,
    pub grid: TimeGrid,
    pub initial_conditions: Vec<Vec<f64>>,
    pub noise: NoiseModel,
    pub basis: BasisSpec,
    /// Evaluate `A(t)`, `B(t)` at the episode's slow time; otherwise at `t = 0`.
    pub slow_time_dependence: bool,
    /// Plant time elapsed per batch. `None` uses the ES clock `sΔ`.
    pub batch_period: Option<f64>,
}

/// A validated, immutable problem definition.
#[derive(Debug, Clone)]
pub struct Scenario {
    parts: ScenarioParts,
    table: Arc<BasisTable>,
    /// `r(τ_i)` at every node, row-major.
    reference_nodes: Arc<Vec<f64>>,
}

/// One episode of the plant under a basis controller.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub trajectory: StateTrajectory,
    /// Control samples at every node, row-major `n_nodes × p`.
    pub controls: Vec<f64>,
    pub cost: f64,
    pub measured: f64,
}

/// One batch: an episode per initial condition and a single measurement of their sum.
#[derive(Debug, Clone)]
pub struct MultiEpisodeOutcome {
    pub episodes: Vec<EpisodeOutcome>,
    pub total: f64,
    pub measured: f64,
}

impl Scenario {
    pub fn new(parts: ScenarioParts) -> Result<Self> {
        let n = parts.dynamics.state_dim();
        let p = parts.dynamics.control_dim();
        if n == 0 || p == 0 {
            return Err(Error::Validation(
                "state and control dimensions must be positive".into(),
            ));
        }
        if let Dynamics::Linear(lin) = &parts.dynamics {
            let (a, b) = (&lin.a.base, &lin.b.base);
            if !a.is_square() {
                return Err(Error::Validation(format!(
                    "A must be square, got {}×{}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            if b.nrows() != n {
                return Err(Error::Validation(format!(
                    "B must have {n} rows, got {}",
                    b.nrows()
                )));
            }
            if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Validation("A and B must be finite".into()));
            }
            lin.a.profile.validate()?;
            lin.b.profile.validate()?;
        }
        if let CostSpec::Quadratic(q) = &parts.cost {
            q.validate(n, p)?;
        }
        if parts.initial_conditions.is_empty() {
            return Err(Error::Validation(
                "at least one initial condition is required".into(),
            ));
        }
        for (k, x0) in parts.initial_conditions.iter().enumerate() {
            if x0.len() != n {
                return Err(Error::Validation(format!(
                    "initial condition {k} has dimension {}, state dimension is {n}",
                    x0.len()
                )));
            }
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "initial condition {k} is not finite"
                )));
            }
        }
        parts.noise.validate()?;
        if parts.grid.t_start() != 0.0 {
            return Err(Error::Validation("episode grid must start at τ = 0".into()));
        }
        if (parts.grid.t_end() - parts.basis.horizon()).abs() > 1e-12 * parts.basis.horizon() {
            return Err(Error::Validation(format!(
                "grid horizon {} differs from basis horizon {}",
                parts.grid.t_end(),
                parts.basis.horizon()
            )));
        }
        if let Some(bp) = parts.batch_period {
            if !(bp.is_finite() && bp > 0.0) {
                return Err(Error::Validation(format!(
                    "batch period must be positive, got {bp}"
                )));
            }
        }
        let table = parts.basis.tabulate(&parts.grid)?;
        let reference_nodes = match &parts.cost {
            CostSpec::Quadratic(q) => {
                let d = q.output_dim();
                let mut r = vec![0.0; parts.grid.n_nodes() * d];
                for (i, row) in r.chunks_exact_mut(d).enumerate() {
                    q.reference.eval_into(parts.grid.node(i), row);
                }
                r
            }
            CostSpec::General(_) => Vec::new(),
        };
        Ok(Scenario {
            parts,
            table: Arc::new(table),
            reference_nodes: Arc::new(reference_nodes),
        })
    }

    pub fn id(&self) -> &str {
        &self.parts.id
    }

    pub fn parts(&self) -> &ScenarioParts {
        &self.parts
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.parts.dynamics
    }

    pub fn cost(&self) -> &CostSpec {
        &self.parts.cost
    }

    pub fn quadratic_cost(&self) -> Option<&QuadraticCostSpec> {
        match &self.parts.cost {
            CostSpec::Quadratic(q) => Some(q),
            CostSpec::General(_) => None,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.parts.grid
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.parts.basis
    }

    pub fn basis_table(&self) -> &BasisTable {
        &self.table
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.parts.noise
    }

    pub fn initial_conditions(&self) -> &[Vec<f64>] {
        &self.parts.initial_conditions
    }

    pub fn state_dim(&self) -> usize {
        self.parts.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.parts.dynamics.control_dim()
    }

    /// Number of scalar open-loop coefficients.
    pub fn n_coeffs(&self) -> usize {
        self.control_dim() * self.parts.basis.n_functions()
    }

    pub fn zero_coeffs(&self) -> ControllerCoefficients {
        ControllerCoefficients::zeros(self.control_dim(), self.parts.basis.n_functions())
    }

    /// Same problem with different initial conditions.
    pub fn with_initial_conditions(&self, ics: Vec<Vec<f64>>) -> Result<Self> {
        let mut parts = self.parts.clone();
        parts.initial_conditions = ics;
        Scenario::new(parts)
    }

    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        let mut parts = self.parts.clone();
        parts.noise = noise;
        Scenario::new(parts)
    }

    pub fn with_basis(&self, basis: BasisSpec) -> Result<Self> {
        let mut parts = self.parts.clone();
        parts.basis = basis;
        Scenario::new(parts)
    }

    pub fn with_grid(&self, grid: TimeGrid) -> Result<Self> {
        let mut parts = self.parts.clone();
        parts.grid = grid;
        Scenario::new(parts)
    }

    /// Plant slow time of batch `s` given the ES iteration step `es_delta`.
    pub fn slow_time(&self, s: usize, es_delta: f64) -> f64 {
        s as f64 * self.parts.batch_period.unwrap_or(es_delta)
    }

    /// `(A(t), B(t))` for linear plants, honoring `slow_time_dependence`.
    pub fn linear_at(&self, slow_time: f64) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        match &self.parts.dynamics {
            Dynamics::Linear(l) => {
                let t = if self.parts.slow_time_dependence {
                    slow_time
                } else {
                    0.0
                };
                Some((l.a.at(t), l.b.at(t)))
            }
            Dynamics::General(_) => None,
        }
    }

    pub(crate) fn reference_at_node(&self, i: usize) -> &[f64] {
        let d = self.reference_nodes.len() / self.parts.grid.n_nodes();
        &self.reference_nodes[i * d..(i + 1) * d]
    }

    /// Cost of a simulated episode; `controls` holds node samples row-major.
    pub fn evaluate_cost(&self, trajectory: &StateTrajectory, controls: &[f64]) -> f64 {
        let grid = &self.parts.grid;
        let p = self.control_dim();
        match &self.parts.cost {
            CostSpec::Quadratic(qc) => {
                let d = qc.output_dim();
                let mut e = vec![0.0; d];
                let mut running = Vec::with_capacity(grid.n_nodes());
                for (i, x) in trajectory.states().enumerate() {
                    matvec_into(&qc.c, x, &mut e);
                    for (ek, rk) in e.iter_mut().zip(self.reference_at_node(i)) {
                        *ek -= rk;
                    }
                    let u = &controls[i * p..(i + 1) * p];
                    running.push(0.5 * (quad_form(&qc.q, &e) + quad_form(&qc.r, u)));
                }
                // e holds the terminal error after the loop
                0.5 * quad_form(&qc.p, &e) + trapezoid_unchecked(&running, grid.step())
            }
            CostSpec::General(gc) => {
                let running: Vec<f64> = trajectory
                    .states()
                    .enumerate()
                    .map(|(i, x)| (gc.running)(x, &controls[i * p..(i + 1) * p]))
                    .collect();
                (gc.terminal)(trajectory.terminal()) + trapezoid_unchecked(&running, grid.step())
            }
        }
    }

    /// Integrates the plant from `x0` under the open-loop input tabulated on the half lattice.
    pub(crate) fn simulate_open_loop(
        &self,
        u_half: &[f64],
        x0: &[f64],
        slow_time: f64,
    ) -> Result<(StateTrajectory, Vec<f64>, f64)> {
        let p = self.control_dim();
        let grid = self.parts.grid;
        let traj = match &self.parts.dynamics {
            Dynamics::Linear(_) => {
                let (a, b) = self.linear_at(slow_time).expect("linear");
                integrate_rk4_staged(
                    |stage, x, dx| {
                        matvec_into(&a, x, dx);
                        matvec_add(
                            &b,
                            &u_half[stage.half_index * p..(stage.half_index + 1) * p],
                            dx,
                        );
                    },
                    x0,
                    &grid,
                )
            }
            Dynamics::General(g) => integrate_rk4_staged(
                |stage, x, dx| {
                    (g.rate)(
                        stage.time,
                        x,
                        &u_half[stage.half_index * p..(stage.half_index + 1) * p],
                        dx,
                    )
                },
                x0,
                &grid,
            ),
        }
        .map_err(|e| Error::Episode {
            slow_time,
            source: Box::new(e),
        })?;
        let controls: Vec<f64> = (0..grid.n_nodes())
            .flat_map(|i| u_half[2 * i * p..(2 * i + 1) * p].iter().copied())
            .collect();
        let cost = self.evaluate_cost(&traj, &controls);
        Ok((traj, controls, cost))
    }

    fn episode_from(&self, u_half: &[f64], x0: &[f64], slow_time: f64) -> Result<EpisodeOutcome> {
        let (trajectory, controls, cost) = self.simulate_open_loop(u_half, x0, slow_time)?;
        if !cost.is_finite() {
            return Err(Error::Episode {
                slow_time,
                source: Box::new(Error::IntegrationDiverged {
                    step: self.parts.grid.n_steps(),
                }),
            });
        }
        Ok(EpisodeOutcome {
            trajectory,
            controls,
            cost,
            measured: cost,
        })
    }

    /// One episode from the first initial condition; `Ĵ` uses noise draw `noise_position`.
    pub fn run_episode(
        &self,
        coeffs: &ControllerCoefficients,
        slow_time: f64,
        noise_position: u64,
    ) -> Result<EpisodeOutcome> {
        coeffs.check_shape(&self.parts.basis, self.control_dim())?;
        let u_half = self.table.synthesize(coeffs);
        let mut out = self.episode_from(&u_half, &self.parts.initial_conditions[0], slow_time)?;
        out.measured = self.parts.noise.measure(out.cost, noise_position);
        Ok(out)
    }

    /// One episode per initial condition; a single noise draw is added to the summed cost.
    pub fn run_multi_episode(
        &self,
        coeffs: &ControllerCoefficients,
        slow_time: f64,
        noise_position: u64,
    ) -> Result<MultiEpisodeOutcome> {
        coeffs.check_shape(&self.parts.basis, self.control_dim())?;
        let u_half = self.table.synthesize(coeffs);
        let episodes = self
            .parts
            .initial_conditions
            .iter()
            .map(|x0| self.episode_from(&u_half, x0, slow_time))
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = episodes.iter().map(|e| e.cost).sum();
        Ok(MultiEpisodeOutcome {
            measured: self.parts.noise.measure(total, noise_position),
            total,
            episodes,
        })
    }

    /// Noise-free summed cost over all initial conditions.
    pub fn cost_of(&self, coeffs: &ControllerCoefficients, slow_time: f64) -> Result<f64> {
        Ok(self.run_multi_episode(coeffs, slow_time, 0)?.total)
    }
}
