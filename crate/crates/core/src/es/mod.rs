//! Sinusoidally perturbed extremum seeking.
//!
//! Every scalar coefficient `a_j` carries its own dither frequency `ω_j` and
//! is updated once per episode:
//!
//! ```text
//! a_j(s+1) = a_j(s) + Δ·sqrt(α·ω_j)·phase_j(ω_j·s·Δ + k·Ĵ(s))
//! ```
//!
//! where `Ĵ(s)` is the measured cost under `a(s)` and `phase_j` is cosine or
//! sine. For large `ω_0` the period average of `a` follows the gradient flow
//! `dā/dt = −(kα/2)∇J(ā)`.

mod oracle;

use std::f64::consts::TAU;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{NoiseModel, Scenario};
use crate::ControllerCoefficients;

pub use oracle::{
    finite_diff_gradient, gradient_flow_reference, restricted_optimum, FlowPath, QuadraticModel,
    RestrictedOptimum,
};

/// Minimum number of samples per period of the fastest dither.
pub const MIN_SAMPLES_PER_PERIOD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DitherPhase {
    Cosine,
    Sine,
}

impl DitherPhase {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            DitherPhase::Cosine => x.cos(),
            DitherPhase::Sine => x.sin(),
        }
    }
}

/// Cosine on even indices, sine on odd ones: the `a_j ↔ cos`, `b_j ↔ sin` pairing.
pub fn alternating_phases(n: usize) -> Vec<DitherPhase> {
    (0..n)
        .map(|j| {
            if j % 2 == 0 {
                DitherPhase::Cosine
            } else {
                DitherPhase::Sine
            }
        })
        .collect()
}

/// `count` frequencies evenly spaced over `[low, high]·ω0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRange {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

impl FrequencyRange {
    pub fn new(low: f64, high: f64, count: usize) -> Self {
        FrequencyRange { low, high, count }
    }
}

/// Builds the dither frequencies for `n_coeffs` coefficients.
///
/// Ranges must be ascending and may only touch at an endpoint. When a range
/// opens at the previous range's upper edge, it is subdivided into `count`
/// steps and its first point is dropped, so the shared edge appears once.
pub fn make_frequency_schedule(
    omega0: f64,
    n_coeffs: usize,
    ranges: &[FrequencyRange],
) -> Result<Vec<f64>> {
    if !(omega0.is_finite() && omega0 > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "omega0 must be positive, got {omega0}"
        )));
    }
    let total: usize = ranges.iter().map(|r| r.count).sum();
    if total != n_coeffs {
        return Err(Error::InvalidConfig(format!(
            "frequency ranges hold {total} frequencies for {n_coeffs} coefficients"
        )));
    }
    let mut out = Vec::with_capacity(n_coeffs);
    let mut prev_high: Option<f64> = None;
    for r in ranges {
        if !(r.low.is_finite() && r.high.is_finite() && r.low > 0.0 && r.high >= r.low)
            || r.count == 0
        {
            return Err(Error::InvalidConfig(format!(
                "bad frequency range ({}, {}, {})",
                r.low, r.high, r.count
            )));
        }
        let touches = match prev_high {
            Some(h) if r.low < h => {
                return Err(Error::InvalidConfig(format!(
                    "frequency range starting at {} overlaps",
                    r.low
                )));
            }
            Some(h) => r.low == h,
            None => false,
        };
        if touches {
            let step = (r.high - r.low) / r.count as f64;
            out.extend((1..=r.count).map(|i| omega0 * (r.low + step * i as f64)));
        } else if r.count == 1 {
            out.push(omega0 * r.low);
        } else {
            let step = (r.high - r.low) / (r.count - 1) as f64;
            out.extend((0..r.count).map(|i| omega0 * (r.low + step * i as f64)));
        }
        prev_high = Some(r.high);
    }
    check_distinct(&out)?;
    Ok(out)
}

fn check_distinct(freqs: &[f64]) -> Result<()> {
    let mut sorted = freqs.to_vec();
    sorted.sort_by(f64::total_cmp);
    match sorted.windows(2).find(|w| w[0] == w[1]) {
        Some(w) => Err(Error::ScheduleCollision(format!(
            "frequency {} appears twice",
            w[0]
        ))),
        None => Ok(()),
    }
}

/// Optimizer parameters. Index `j` of `frequencies` and `phases` belongs to coefficient `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    pub k: f64,
    pub alpha: f64,
    pub omega0: f64,
    pub frequencies: Vec<f64>,
    pub delta: f64,
    pub phases: Vec<DitherPhase>,
}

impl EsConfig {
    /// Config with the default step `Δ = 2π/(10·max ω_j)`.
    pub fn new(
        k: f64,
        alpha: f64,
        omega0: f64,
        frequencies: Vec<f64>,
        phases: Vec<DitherPhase>,
    ) -> Result<Self> {
        let delta = default_delta(&frequencies)?;
        let c = EsConfig {
            k,
            alpha,
            omega0,
            frequencies,
            delta,
            phases,
        };
        c.validate()?;
        Ok(c)
    }

    /// `n` distinct frequencies over `[1, 1.75]·ω0` with alternating cos/sin dithers.
    pub fn open_loop(k: f64, alpha: f64, omega0: f64, n: usize) -> Result<Self> {
        let freqs = make_frequency_schedule(omega0, n, &[FrequencyRange::new(1.0, 1.75, n)])?;
        EsConfig::new(k, alpha, omega0, freqs, alternating_phases(n))
    }

    pub fn with_delta(self, delta: f64) -> Result<Self> {
        let c = EsConfig { delta, ..self };
        c.validate()?;
        Ok(c)
    }

    pub fn n_coeffs(&self) -> usize {
        self.frequencies.len()
    }

    /// Checks gains, sampling and dither distinctness.
    ///
    /// Distinctness is required of `(ω, phase)` pairs: a cosine and a sine
    /// dither at the same frequency are orthogonal and may share it.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.k.is_finite() && self.k > 0.0) {
            return bad(format!("k must be positive, got {}", self.k));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return bad(format!("omega0 must be positive, got {}", self.omega0));
        }
        if self.frequencies.is_empty() {
            return bad("empty frequency schedule".into());
        }
        if self.phases.len() != self.frequencies.len() {
            return bad(format!(
                "{} dither phases for {} frequencies",
                self.phases.len(),
                self.frequencies.len()
            ));
        }
        if let Some(w) = self
            .frequencies
            .iter()
            .find(|w| !(w.is_finite() && **w > 0.0))
        {
            return bad(format!("frequency {w} is not positive"));
        }
        for phase in [DitherPhase::Cosine, DitherPhase::Sine] {
            let same: Vec<f64> = self
                .frequencies
                .iter()
                .zip(&self.phases)
                .filter(|(_, p)| **p == phase)
                .map(|(w, _)| *w)
                .collect();
            check_distinct(&same)?;
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        let limit = TAU / MIN_SAMPLES_PER_PERIOD;
        if self.delta * self.max_frequency() > limit * (1.0 + 1e-12) {
            return bad(format!(
                "delta·max(ω) = {} exceeds 2π/{MIN_SAMPLES_PER_PERIOD}",
                self.delta * self.max_frequency()
            ));
        }
        Ok(())
    }

    pub fn max_frequency(&self) -> f64 {
        self.frequencies.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn min_frequency(&self) -> f64 {
        self.frequencies.iter().copied().fold(f64::MAX, f64::min)
    }

    /// Per-step update bound `Δ·sqrt(α·ω_j)`.
    pub fn amplitude(&self, j: usize) -> f64 {
        self.delta * (self.alpha * self.frequencies[j]).sqrt()
    }

    /// Iterations in one period of the slowest dither, `⌈2π/(Δ·ω_min)⌉`.
    pub fn slowest_period_steps(&self) -> usize {
        (TAU / (self.delta * self.min_frequency())).ceil() as usize
    }

    /// Slow time `s·Δ`.
    pub fn time(&self, s: usize) -> f64 {
        s as f64 * self.delta
    }
}

pub fn default_delta(frequencies: &[f64]) -> Result<f64> {
    let max = frequencies.iter().copied().fold(f64::NAN, f64::max);
    if !(max.is_finite() && max > 0.0) {
        return Err(Error::InvalidConfig(
            "frequency schedule needs a positive maximum".into(),
        ));
    }
    Ok(TAU / (MIN_SAMPLES_PER_PERIOD * max))
}

/// Applies one update in place. The coefficients are left untouched on error.
pub fn es_step_in_place(
    coeffs: &mut [f64],
    measured: f64,
    s: usize,
    config: &EsConfig,
) -> Result<()> {
    if coeffs.len() != config.n_coeffs() {
        return Err(Error::contract(format!(
            "{} coefficients for a {}-frequency schedule",
            coeffs.len(),
            config.n_coeffs()
        )));
    }
    if !measured.is_finite() {
        return Err(Error::MeasurementInvalid {
            step: s,
            value: measured,
        });
    }
    if let Some(j) = coeffs.iter().position(|c| !c.is_finite()) {
        return Err(Error::contract(format!("coefficient {j} is not finite")));
    }
    let sd = s as f64 * config.delta;
    let kj = config.k * measured;
    for ((a, &w), &phase) in coeffs
        .iter_mut()
        .zip(&config.frequencies)
        .zip(&config.phases)
    {
        *a += config.delta * (config.alpha * w).sqrt() * phase.apply(w * sd + kj);
    }
    Ok(())
}

/// `a(s+1)` from `a(s)` and the measurement `Ĵ(s)`.
pub fn es_step(coeffs: &[f64], measured: f64, s: usize, config: &EsConfig) -> Result<Vec<f64>> {
    let mut next = coeffs.to_vec();
    es_step_in_place(&mut next, measured, s, config)?;
    Ok(next)
}

/// True cost and its measurement for one ES iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub cost: f64,
    pub measured: f64,
}

/// Anything that maps a coefficient vector at iteration `s` to a cost measurement.
pub trait Objective {
    fn label(&self) -> &str;
    fn n_coeffs(&self) -> usize;
    fn measure(&mut self, coeffs: &[f64], s: usize, es_delta: f64) -> Result<Measurement>;
}

/// Open-loop basis controller applied to a scenario.
///
/// With `multi` set, each measurement is one batch over all initial
/// conditions; otherwise only the first initial condition is run.
#[derive(Debug, Clone)]
pub struct OpenLoopObjective {
    scenario: Scenario,
    multi: bool,
}

impl OpenLoopObjective {
    pub fn new(scenario: Scenario) -> Self {
        let multi = scenario.initial_conditions().len() > 1;
        OpenLoopObjective { scenario, multi }
    }

    pub fn single(scenario: Scenario) -> Self {
        OpenLoopObjective {
            scenario,
            multi: false,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
}

impl Objective for OpenLoopObjective {
    fn label(&self) -> &str {
        self.scenario.id()
    }

    fn n_coeffs(&self) -> usize {
        self.scenario.n_coeffs()
    }

    fn measure(&mut self, coeffs: &[f64], s: usize, es_delta: f64) -> Result<Measurement> {
        let c = ControllerCoefficients::from_flat(
            self.scenario.control_dim(),
            self.scenario.basis().n_functions(),
            coeffs.to_vec(),
        )?;
        let t = self.scenario.slow_time(s, es_delta);
        if self.multi {
            let out = self.scenario.run_multi_episode(&c, t, s as u64)?;
            Ok(Measurement {
                cost: out.total,
                measured: out.measured,
            })
        } else {
            let out = self.scenario.run_episode(&c, t, s as u64)?;
            Ok(Measurement {
                cost: out.cost,
                measured: out.measured,
            })
        }
    }
}

pub type StaticCost = dyn Fn(&[f64], f64) -> f64 + Send + Sync;

/// A cost given directly as a function of coefficients and slow time `sΔ`, with no plant.
#[derive(Clone)]
pub struct StaticObjective {
    label: String,
    n_coeffs: usize,
    cost: Arc<StaticCost>,
    noise: NoiseModel,
}

impl std::fmt::Debug for StaticObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StaticObjective")
            .field("label", &self.label)
            .field("n_coeffs", &self.n_coeffs)
            .field("noise", &self.noise)
            .finish_non_exhaustive()
    }
}

impl StaticObjective {
    pub fn new(
        label: impl Into<String>,
        n_coeffs: usize,
        cost: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        StaticObjective {
            label: label.into(),
            n_coeffs,
            cost: Arc::new(cost),
            noise: NoiseModel::noiseless(),
        }
    }

    pub fn with_noise(self, noise: NoiseModel) -> Self {
        StaticObjective { noise, ..self }
    }
}

impl Objective for StaticObjective {
    fn label(&self) -> &str {
        &self.label
    }

    fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    fn measure(&mut self, coeffs: &[f64], s: usize, es_delta: f64) -> Result<Measurement> {
        let cost = (self.cost)(coeffs, s as f64 * es_delta);
        Ok(Measurement {
            cost,
            measured: self.noise.measure(cost, s as u64),
        })
    }
}

/// Everything an ES run produced.
///
/// `costs[s]` and `measured[s]` are `J(s)` and `Ĵ(s)` for every `s` in
/// `0..=n_iterations`. Coefficient snapshots are kept every
/// `snapshot_stride` steps, always including `s = 0` and `s = n_iterations`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EsRunRecord {
    pub scenario_id: String,
    pub config: EsConfig,
    pub n_iterations: usize,
    pub snapshot_stride: usize,
    pub costs: Vec<f64>,
    pub measured: Vec<f64>,
    snapshot_steps: Vec<usize>,
    snapshots: Vec<f64>,
    final_period_mean: Vec<f64>,
}

impl EsRunRecord {
    pub fn n_coeffs(&self) -> usize {
        self.config.n_coeffs()
    }

    pub fn snapshot_steps(&self) -> &[usize] {
        &self.snapshot_steps
    }

    pub fn n_snapshots(&self) -> usize {
        self.snapshot_steps.len()
    }

    /// Coefficients of the `i`-th stored snapshot.
    pub fn snapshot(&self, i: usize) -> &[f64] {
        let n = self.n_coeffs();
        &self.snapshots[i * n..(i + 1) * n]
    }

    pub fn snapshots(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.snapshot_steps
            .iter()
            .copied()
            .zip(self.snapshots.chunks(self.n_coeffs()))
    }

    pub fn final_coeffs(&self) -> &[f64] {
        self.snapshot(self.n_snapshots() - 1)
    }

    /// Stored values of coefficient `j`, one per snapshot.
    pub fn coefficient_path(&self, j: usize) -> Vec<f64> {
        self.snapshots
            .chunks(self.n_coeffs())
            .map(|c| c[j])
            .collect()
    }

    /// Window used for convergence statistics: one slowest-dither period, capped by the run length.
    pub fn period_window(&self) -> usize {
        self.config
            .slowest_period_steps()
            .clamp(1, self.costs.len())
    }

    /// Mean of `J` over the final slowest-dither period.
    pub fn period_averaged_cost(&self) -> f64 {
        let w = self.period_window();
        self.costs[self.costs.len() - w..].iter().sum::<f64>() / w as f64
    }

    /// Mean coefficients over the same final window (accumulated during the run).
    pub fn period_averaged_coeffs(&self) -> &[f64] {
        &self.final_period_mean
    }

    /// Writes `s,t,J,J_hat,c0,c1,...` for every stored snapshot.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["s".to_string(), "t".into(), "J".into(), "J_hat".into()];
        header.extend((0..self.n_coeffs()).map(|j| format!("c{j}")));
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for (s, c) in self.snapshots() {
            row.clear();
            row.push(s.to_string());
            row.push(format_f64(self.config.time(s)));
            row.push(format_f64(self.costs[s]));
            row.push(format_f64(self.measured[s]));
            row.extend(c.iter().map(|v| format_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest representation that round-trips to the same `f64`.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Runs `n_iterations` ES updates from `initial` (zeros by default), keeping every snapshot.
pub fn run_es<O: Objective + ?Sized>(
    objective: &mut O,
    config: &EsConfig,
    n_iterations: usize,
    initial: Option<&[f64]>,
) -> Result<EsRunRecord> {
    run_es_strided(objective, config, n_iterations, initial, 1)
}

/// As [`run_es`], storing coefficients only every `stride` steps.
pub fn run_es_strided<O: Objective + ?Sized>(
    objective: &mut O,
    config: &EsConfig,
    n_iterations: usize,
    initial: Option<&[f64]>,
    stride: usize,
) -> Result<EsRunRecord> {
    config.validate()?;
    if n_iterations == 0 {
        return Err(Error::contract("n_iterations must be at least 1"));
    }
    if stride == 0 {
        return Err(Error::contract("snapshot stride must be at least 1"));
    }
    let n = config.n_coeffs();
    if objective.n_coeffs() != n {
        return Err(Error::contract(format!(
            "objective has {} coefficients, schedule has {n}",
            objective.n_coeffs()
        )));
    }
    let mut a = match initial {
        Some(c) if c.len() != n => {
            return Err(Error::contract(format!(
                "{} initial coefficients, expected {n}",
                c.len()
            )));
        }
        Some(c) => c.to_vec(),
        None => vec![0.0; n],
    };

    let window = config.slowest_period_steps().clamp(1, n_iterations + 1);
    let window_start = n_iterations + 1 - window;
    let mut mean = vec![0.0; n];
    let mut costs = Vec::with_capacity(n_iterations + 1);
    let mut measured = Vec::with_capacity(n_iterations + 1);
    let n_snap = n_iterations / stride + 2;
    let mut snapshot_steps = Vec::with_capacity(n_snap);
    let mut snapshots = Vec::with_capacity(n_snap * n);

    for s in 0..=n_iterations {
        let wrap = |e: Error| Error::Iteration {
            iteration: s,
            source: Box::new(e),
        };
        let m = objective.measure(&a, s, config.delta).map_err(wrap)?;
        costs.push(m.cost);
        measured.push(m.measured);
        if s % stride == 0 || s == n_iterations {
            snapshot_steps.push(s);
            snapshots.extend_from_slice(&a);
        }
        if s >= window_start {
            mean.iter_mut().zip(&a).for_each(|(acc, v)| *acc += v);
        }
        if s < n_iterations {
            es_step_in_place(&mut a, m.measured, s, config).map_err(wrap)?;
        }
    }
    mean.iter_mut().for_each(|v| *v /= window as f64);

    Ok(EsRunRecord {
        scenario_id: objective.label().to_string(),
        config: config.clone(),
        n_iterations,
        snapshot_stride: stride,
        costs,
        measured,
        snapshot_steps,
        snapshots,
        final_period_mean: mean,
    })
}

/// Centered moving average of `path` over `window` samples; edges use the available half-window.
pub fn moving_average(path: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut prefix = Vec::with_capacity(path.len() + 1);
    prefix.push(0.0);
    for v in path {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..path.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(path.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}
