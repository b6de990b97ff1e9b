//! Learning a time-varying state-feedback gain `K_ES(τ)` by extremum seeking.
//!
//! Every entry `k_{l,q}(τ)` of the `p×n` gain is a basis expansion; the
//! control is `u = −K_ES(τ)x + V_ES(τ)` with an optional feedforward `V_ES`
//! expanded in the same basis. ES minimizes the cost summed over `n`
//! linearly independent initial conditions, which pins down a gain that is
//! good for every initial condition.
//!
//! Coefficient layout: gain entries row-major (`(l, q)` at `l·n + q`), each
//! holding the basis coefficients; the feedforward channels follow.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisSpec, BasisTable, ControllerCoefficients};
use crate::error::{Error, Result};
use crate::es::{
    format_f64, make_frequency_schedule, run_es_strided, DitherPhase, EsConfig, EsRunRecord,
    FrequencyRange, Measurement, Objective,
};
use crate::lqr::RiccatiSolution;
use crate::ode::{integrate_rk4_staged, quadrature_trapezoid, StateTrajectory, TimeGrid};
use crate::scenario::Scenario;

/// Gain (and optional feedforward) expansions in a shared basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GainField {
    n: usize,
    p: usize,
    basis: BasisSpec,
    gain: ControllerCoefficients,
    feedforward: Option<ControllerCoefficients>,
}

impl GainField {
    pub fn zeros(n: usize, p: usize, basis: BasisSpec, with_feedforward: bool) -> Self {
        let nf = basis.n_functions();
        GainField {
            n,
            p,
            gain: ControllerCoefficients::zeros(p * n, nf),
            feedforward: with_feedforward.then(|| ControllerCoefficients::zeros(p, nf)),
            basis,
        }
    }

    /// Number of scalar coefficients for the given shape.
    pub fn coefficient_count(
        n: usize,
        p: usize,
        n_functions: usize,
        with_feedforward: bool,
    ) -> usize {
        (p * n + if with_feedforward { p } else { 0 }) * n_functions
    }

    /// Wraps a flat coefficient vector in the documented layout.
    pub fn from_flat(
        n: usize,
        p: usize,
        basis: BasisSpec,
        flat: &[f64],
        with_feedforward: bool,
    ) -> Result<Self> {
        let nf = basis.n_functions();
        let expect = GainField::coefficient_count(n, p, nf, with_feedforward);
        if flat.len() != expect {
            return Err(Error::contract(format!(
                "gain field needs {expect} coefficients, got {}",
                flat.len()
            )));
        }
        let split = p * n * nf;
        let gain = ControllerCoefficients::from_flat(p * n, nf, flat[..split].to_vec())?;
        let feedforward = if with_feedforward {
            Some(ControllerCoefficients::from_flat(
                p,
                nf,
                flat[split..].to_vec(),
            )?)
        } else {
            None
        };
        Ok(GainField {
            n,
            p,
            basis,
            gain,
            feedforward,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.gain.as_flat().to_vec();
        if let Some(ff) = &self.feedforward {
            v.extend_from_slice(ff.as_flat());
        }
        v
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.p
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn has_feedforward(&self) -> bool {
        self.feedforward.is_some()
    }

    /// Coefficients of entry `(l, q)`.
    pub fn entry(&self, l: usize, q: usize) -> &[f64] {
        self.gain.channel(l * self.n + q)
    }

    /// `K_ES(τ)` for `τ ∈ [0, T]`.
    pub fn eval_gain(&self, tau: f64) -> Result<DMatrix<f64>> {
        let phi = self.basis.eval_functions(tau)?;
        Ok(DMatrix::from_fn(self.p, self.n, |l, q| {
            dot(self.entry(l, q), &phi)
        }))
    }

    /// `V_ES(τ)`, zero when the field has no feedforward.
    pub fn eval_feedforward(&self, tau: f64) -> Result<DVector<f64>> {
        let phi = self.basis.eval_functions(tau)?;
        Ok(match &self.feedforward {
            Some(ff) => DVector::from_fn(self.p, |l, _| dot(ff.channel(l), &phi)),
            None => DVector::zeros(self.p),
        })
    }

    /// Gains on the half lattice folded into the plant frozen at `(A, B)`.
    fn tabulate(&self, table: &BasisTable, a: &DMatrix<f64>, b: &DMatrix<f64>) -> TabulatedField {
        let (n, p) = (self.n, self.p);
        let gain = table.synthesize(&self.gain);
        let feedforward = self.feedforward.as_ref().map(|ff| table.synthesize(ff));
        let nq = table.grid().n_half_nodes();
        let mut closed = Vec::with_capacity(nq * n * n);
        let mut drive = feedforward.as_ref().map(|_| Vec::with_capacity(nq * n));
        for q in 0..nq {
            let k = &gain[q * p * n..(q + 1) * p * n];
            // Column-major n×n block of A − B·K.
            for c in 0..n {
                for r in 0..n {
                    let bk: f64 = (0..p).map(|l| b[(r, l)] * k[l * n + c]).sum();
                    closed.push(a[(r, c)] - bk);
                }
            }
            if let (Some(d), Some(ff)) = (drive.as_mut(), feedforward.as_ref()) {
                let v = &ff[q * p..(q + 1) * p];
                d.extend((0..n).map(|r| (0..p).map(|l| b[(r, l)] * v[l]).sum::<f64>()));
            }
        }
        TabulatedField {
            gain,
            feedforward,
            closed,
            drive,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per half node: gain rows (`p·n`, row-major), feedforward (`p`),
/// closed-loop matrix `A − BK` (`n·n`, column-major) and drive `B·V` (`n`).
struct TabulatedField {
    gain: Vec<f64>,
    feedforward: Option<Vec<f64>>,
    closed: Vec<f64>,
    drive: Option<Vec<f64>>,
}

/// Closed-loop episode under a gain field.
#[derive(Debug, Clone)]
pub struct FeedbackOutcome {
    pub trajectory: StateTrajectory,
    /// Control samples at every node, row-major `n_nodes × p`.
    pub controls: Vec<f64>,
    pub cost: f64,
}

fn check_field(scenario: &Scenario, field: &GainField) -> Result<()> {
    if field.n != scenario.state_dim() || field.p != scenario.control_dim() {
        return Err(Error::contract(format!(
            "gain field is {}×{}, scenario needs {}×{}",
            field.p,
            field.n,
            scenario.control_dim(),
            scenario.state_dim()
        )));
    }
    if scenario.linear_at(0.0).is_none() {
        return Err(Error::contract("feedback episodes need linear dynamics"));
    }
    Ok(())
}

fn closed_loop(
    scenario: &Scenario,
    tab: &TabulatedField,
    x0: &[f64],
    slow_time: f64,
) -> Result<FeedbackOutcome> {
    let (n, p) = (scenario.state_dim(), scenario.control_dim());
    if x0.len() != n {
        return Err(Error::contract(format!(
            "x0 has {} components, state has {n}",
            x0.len()
        )));
    }
    let trajectory = integrate_rk4_staged(
        |stage, x, dx| {
            let q = stage.half_index;
            let m = &tab.closed[q * n * n..(q + 1) * n * n];
            match &tab.drive {
                Some(d) => dx.copy_from_slice(&d[q * n..(q + 1) * n]),
                None => dx.iter_mut().for_each(|v| *v = 0.0),
            }
            for (c, xc) in x.iter().enumerate() {
                for (o, mv) in dx.iter_mut().zip(&m[c * n..(c + 1) * n]) {
                    *o += mv * xc;
                }
            }
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
        let q = 2 * i;
        let k = &tab.gain[q * p * n..(q + 1) * p * n];
        for (l, ul) in controls[i * p..(i + 1) * p].iter_mut().enumerate() {
            *ul = -dot(&k[l * n..(l + 1) * n], x);
            if let Some(ff) = &tab.feedforward {
                *ul += ff[q * p + l];
            }
        }
    }
    let cost = scenario.evaluate_cost(&trajectory, &controls);
    if !cost.is_finite() {
        return Err(Error::Episode {
            slow_time,
            source: Box::new(Error::IntegrationDiverged {
                step: scenario.grid().n_steps(),
            }),
        });
    }
    Ok(FeedbackOutcome {
        trajectory,
        controls,
        cost,
    })
}

/// Runs the plant from `x0` under `u = −K_ES(τ)x + V_ES(τ)`.
pub fn run_feedback_episode(
    scenario: &Scenario,
    field: &GainField,
    x0: &[f64],
    slow_time: f64,
) -> Result<FeedbackOutcome> {
    check_field(scenario, field)?;
    let table = field.basis.tabulate(scenario.grid())?;
    let (a, b) = scenario.linear_at(slow_time).expect("checked linear");
    closed_loop(scenario, &field.tabulate(&table, &a, &b), x0, slow_time)
}

/// Noise-free closed-loop cost summed over the scenario's initial conditions.
pub fn feedback_total_cost(scenario: &Scenario, field: &GainField, slow_time: f64) -> Result<f64> {
    check_field(scenario, field)?;
    let table = field.basis.tabulate(scenario.grid())?;
    let (a, b) = scenario.linear_at(slow_time).expect("checked linear");
    let tab = field.tabulate(&table, &a, &b);
    scenario
        .initial_conditions()
        .iter()
        .map(|x0| closed_loop(scenario, &tab, x0, slow_time).map(|o| o.cost))
        .sum()
}

/// ES objective: one batch over all initial conditions under the gain field.
#[derive(Debug, Clone)]
pub struct FeedbackObjective {
    scenario: Scenario,
    with_feedforward: bool,
    table: BasisTable,
}

impl FeedbackObjective {
    pub fn new(scenario: Scenario, with_feedforward: bool) -> Result<Self> {
        if scenario.linear_at(0.0).is_none() {
            return Err(Error::contract("feedback synthesis needs linear dynamics"));
        }
        let table = scenario.basis().tabulate(scenario.grid())?;
        Ok(FeedbackObjective {
            scenario,
            with_feedforward,
            table,
        })
    }

    pub fn field(&self, flat: &[f64]) -> Result<GainField> {
        GainField::from_flat(
            self.scenario.state_dim(),
            self.scenario.control_dim(),
            self.scenario.basis().clone(),
            flat,
            self.with_feedforward,
        )
    }
}

impl Objective for FeedbackObjective {
    fn label(&self) -> &str {
        self.scenario.id()
    }

    fn n_coeffs(&self) -> usize {
        GainField::coefficient_count(
            self.scenario.state_dim(),
            self.scenario.control_dim(),
            self.scenario.basis().n_functions(),
            self.with_feedforward,
        )
    }

    fn measure(&mut self, coeffs: &[f64], s: usize, es_delta: f64) -> Result<Measurement> {
        let field = self.field(coeffs)?;
        let t = self.scenario.slow_time(s, es_delta);
        let (a, b) = self.scenario.linear_at(t).expect("checked linear");
        let tab = field.tabulate(&self.table, &a, &b);
        let mut total = 0.0;
        for x0 in self.scenario.initial_conditions() {
            total += closed_loop(&self.scenario, &tab, x0, t)?.cost;
        }
        Ok(Measurement {
            cost: total,
            measured: self.scenario.noise().measure(total, s as u64),
        })
    }
}

/// Upper band edges (as multiples of `ω0`) for `bands` dither bands.
///
/// Two bands reproduce the split `[1, 1.35]`, `[1.35, 1.75]`; otherwise
/// `[1, 1.75]` is divided evenly.
pub fn band_edges(bands: usize) -> Vec<f64> {
    if bands == 2 {
        return vec![1.0, 1.35, 1.75];
    }
    (0..=bands)
        .map(|i| 1.0 + 0.75 * i as f64 / bands as f64)
        .collect()
}

/// Dither schedule for a gain field.
///
/// Entry `(l, q)` uses band `l·⌈n/2⌉ + ⌊q/2⌋` with cosine for even `q` and sine
/// for odd `q`, so the two columns of a row share a band with orthogonal
/// dithers. Feedforward channel `l` uses band `B_gain + ⌊l/2⌋` with the same
/// parity rule. Within a band of a Fourier basis, `a_j` takes the `j`-th
/// frequency and `b_j` the `(m + j)`-th.
pub fn feedback_es_config(
    k: f64,
    alpha: f64,
    omega0: f64,
    n: usize,
    p: usize,
    basis: &BasisSpec,
    with_feedforward: bool,
) -> Result<EsConfig> {
    let nf = basis.n_functions();
    let col_bands = n.div_ceil(2);
    let gain_bands = p * col_bands;
    let ff_bands = if with_feedforward { p.div_ceil(2) } else { 0 };
    let bands = gain_bands + ff_bands;
    let edges = band_edges(bands);
    let ranges: Vec<FrequencyRange> = edges
        .windows(2)
        .map(|w| FrequencyRange::new(w[0], w[1], nf))
        .collect();
    let all = make_frequency_schedule(omega0, bands * nf, &ranges)?;
    let band = |b: usize| &all[b * nf..(b + 1) * nf];
    let slot = |c: usize| {
        if nf.is_multiple_of(2) {
            (c % 2) * (nf / 2) + c / 2
        } else {
            c
        }
    };
    let phase = |parity: usize| {
        if parity == 0 {
            DitherPhase::Cosine
        } else {
            DitherPhase::Sine
        }
    };

    let mut freqs = Vec::with_capacity(GainField::coefficient_count(n, p, nf, with_feedforward));
    let mut phases = Vec::with_capacity(freqs.capacity());
    for l in 0..p {
        for q in 0..n {
            let b = band(l * col_bands + q / 2);
            for c in 0..nf {
                freqs.push(b[slot(c)]);
                phases.push(phase(q % 2));
            }
        }
    }
    if with_feedforward {
        for l in 0..p {
            let b = band(gain_bands + l / 2);
            for c in 0..nf {
                freqs.push(b[slot(c)]);
                phases.push(phase(l % 2));
            }
        }
    }
    EsConfig::new(k, alpha, omega0, freqs, phases)
}

/// Smallest singular value of the matrix whose columns are the initial conditions.
pub fn initial_condition_independence(ics: &[Vec<f64>]) -> f64 {
    let n = ics.first().map_or(0, Vec::len);
    if n == 0 {
        return 0.0;
    }
    let m = DMatrix::from_fn(n, ics.len(), |r, c| ics[c][r]);
    m.singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Learned field together with the ES trace that produced it.
#[derive(Debug, Clone)]
pub struct Synthesis {
    /// Field at the final ES iterate.
    pub field: GainField,
    /// Field at the coefficients averaged over the final slowest-dither period.
    pub averaged_field: GainField,
    pub record: EsRunRecord,
}

/// Learns a gain field from exactly `n` linearly independent initial conditions.
pub fn synthesize_gain(
    scenario: &Scenario,
    config: &EsConfig,
    n_iterations: usize,
    with_feedforward: bool,
    snapshot_stride: usize,
) -> Result<Synthesis> {
    let n = scenario.state_dim();
    let ics = scenario.initial_conditions();
    if ics.len() != n {
        return Err(Error::IllPosedSynthesis(format!(
            "{} initial conditions for a {n}-dimensional state; exactly {n} are required",
            ics.len()
        )));
    }
    let sigma = initial_condition_independence(ics);
    if sigma.is_nan() || sigma <= 1e-8 {
        return Err(Error::IllPosedSynthesis(format!(
            "initial conditions are linearly dependent (smallest singular value {sigma:e})"
        )));
    }
    let mut objective = FeedbackObjective::new(scenario.clone(), with_feedforward)?;
    let record = run_es_strided(&mut objective, config, n_iterations, None, snapshot_stride)?;
    let field = objective.field(record.final_coeffs())?;
    let averaged_field = objective.field(record.period_averaged_coeffs())?;
    Ok(Synthesis {
        field,
        averaged_field,
        record,
    })
}

/// Least-squares fit of the oracle gain (and feedforward `R⁻¹Bᵀv`) into `basis`,
/// weighted by the trapezoid rule on the oracle's grid.
pub fn project_oracle(
    riccati: &RiccatiSolution,
    basis: &BasisSpec,
    with_feedforward: bool,
) -> Result<GainField> {
    let grid = riccati.grid();
    let (n, p) = (riccati.state_dim(), riccati.control_dim());
    let table = basis.tabulate(grid)?;
    let nf = basis.n_functions();
    let h = grid.step();
    let mut gram = DMatrix::zeros(nf, nf);
    let n_targets = p * n + if with_feedforward { p } else { 0 };
    let mut rhs = DMatrix::zeros(nf, n_targets);
    for i in 0..grid.n_nodes() {
        let w = if i == 0 || i == grid.n_steps() {
            0.5 * h
        } else {
            h
        };
        let phi = DVector::from_column_slice(table.at_node(i));
        gram += w * &phi * phi.transpose();
        let k = riccati.k(i);
        let mut targets = Vec::with_capacity(n_targets);
        for l in 0..p {
            targets.extend((0..n).map(|q| k[(l, q)]));
        }
        if with_feedforward {
            targets.extend(riccati.feedforward(i).iter());
        }
        for (c, t) in targets.iter().enumerate() {
            for j in 0..nf {
                rhs[(j, c)] += w * phi[j] * t;
            }
        }
    }
    let sol = gram
        .cholesky()
        .ok_or_else(|| Error::Validation("basis Gram matrix is singular on this grid".into()))?
        .solve(&rhs);
    let flat: Vec<f64> = (0..n_targets)
        .flat_map(|c| sol.column(c).iter().copied().collect::<Vec<_>>())
        .collect();
    GainField::from_flat(n, p, basis.clone(), &flat, with_feedforward)
}

/// `sqrt(∫ ‖K_ES(τ) − K(τ)‖_F² dτ)` on the oracle's grid.
pub fn gain_l2_distance(field: &GainField, riccati: &RiccatiSolution) -> Result<f64> {
    let grid = riccati.grid();
    let table = field.basis.tabulate(grid)?;
    let (n, p) = (field.n, field.p);
    let mut sq = Vec::with_capacity(grid.n_nodes());
    for i in 0..grid.n_nodes() {
        let phi = table.at_node(i);
        let k = riccati.k(i);
        let mut acc = 0.0;
        for l in 0..p {
            for q in 0..n {
                acc += (dot(field.entry(l, q), phi) - k[(l, q)]).powi(2);
            }
        }
        sq.push(acc);
    }
    Ok(quadrature_trapezoid(&sq, grid)?.sqrt())
}

/// Writes `tau,K_1_1,...,K_p_n[,V_1,...,V_p][,Kopt_1_1,...]` at every node of `grid`.
pub fn write_gain_csv<W: Write>(
    field: &GainField,
    grid: &TimeGrid,
    oracle: Option<&RiccatiSolution>,
    writer: W,
) -> Result<()> {
    let (n, p) = (field.n, field.p);
    if let Some(ric) = oracle {
        if ric.grid() != grid {
            return Err(Error::contract("oracle grid differs from export grid"));
        }
    }
    let table = field.basis.tabulate(grid)?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["tau".to_string()];
    let entry_names = |prefix: &'static str| {
        (0..p).flat_map(move |l| (0..n).map(move |q| format!("{prefix}_{}_{}", l + 1, q + 1)))
    };
    header.extend(entry_names("K"));
    if field.feedforward.is_some() {
        header.extend((0..p).map(|l| format!("V_{}", l + 1)));
    }
    if oracle.is_some() {
        header.extend(entry_names("Kopt"));
    }
    w.write_record(&header)?;
    for i in 0..grid.n_nodes() {
        let phi = table.at_node(i);
        let mut row = vec![format_f64(grid.node(i))];
        for l in 0..p {
            row.extend((0..n).map(|q| format_f64(dot(field.entry(l, q), phi))));
        }
        if let Some(ff) = &field.feedforward {
            row.extend((0..p).map(|l| format_f64(dot(ff.channel(l), phi))));
        }
        if let Some(ric) = oracle {
            let k = ric.k(i);
            for l in 0..p {
                row.extend((0..n).map(|q| format_f64(k[(l, q)])));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
