//! Experiment orchestration: load a scenario, run ES or the oracle, write artifacts.
//!
//! Every run writes into one output directory:
//!
//! | file | columns |
//! |------|---------|
//! | `iterations.csv` | `s,t,J,J_hat,c0,c1,...` (ES modes) |
//! | `trajectory.csv` | `label,ic,tau,x_1..x_n,u_1..u_p`; label is `first`, `last` or `oracle` |
//! | `gains.csv` | `tau,K_l_q...,[V_l...],[Kopt_l_q...]` (feedback mode) |
//! | `riccati.csv` | `tau,K_l_q...,v_k...` (oracle and compare modes) |
//! | `summary.json` | [`RunSummary`] |
//!
//! All floats are written in shortest round-trip form, so identical inputs
//! give byte-identical CSV files.

mod file;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use file::{
    apply_override, load_scenario, load_scenario_file, parse_scenario, BasisSection, BasisTerm,
    CostSection, DynamicsSection, EsSection, GridSection, Rows, ScenarioFile, TermShape,
};

use crate::basis::ControllerCoefficients;
use crate::error::{Error, Result};
use crate::es::{format_f64, restricted_optimum, run_es_strided, EsConfig, OpenLoopObjective};
use crate::feedback::{
    feedback_es_config, run_feedback_episode, synthesize_gain, write_gain_csv, GainField,
};
use crate::lqr::{simulate_optimal, solve_for_scenario, RiccatiSolution};
use crate::ode::StateTrajectory;
use crate::scenario::{CostSpec, Dynamics, Scenario};

/// Environment variable naming the default parent directory for run outputs.
pub const OUT_DIR_ENV: &str = "ESCTL_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OpenLoopEs,
    FeedbackEs,
    OracleOnly,
    /// ES (open-loop or feedback, as the scenario's `es.feedback` says) plus the oracle.
    Compare,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::OpenLoopEs => "open-loop-es",
            Mode::FeedbackEs => "feedback-es",
            Mode::OracleOnly => "oracle-only",
            Mode::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub scenario_path: PathBuf,
    pub mode: Mode,
    /// Overrides `es.iterations` from the scenario file.
    pub n_iterations: Option<usize>,
    /// Overrides the scenario's noise seed.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// `key.path=value` edits applied to the scenario file before validation.
    pub overrides: Vec<String>,
}

/// `$ESCTL_OUT_DIR/<id>` if the variable is set, else `runs/<id>`.
pub fn default_out_dir(scenario_id: &str) -> PathBuf {
    let parent = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    parent.join(scenario_id)
}

/// Closed-loop cost of the learned field from an initial condition outside the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCost {
    pub x0: Vec<f64>,
    pub cost: f64,
    pub optimal: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario_id: String,
    pub mode: Mode,
    /// Mean true cost over the final slowest-dither period.
    pub j_avg: Option<f64>,
    /// Noise-free cost at the period-averaged coefficients.
    pub j_at_averaged_coeffs: Option<f64>,
    /// Oracle optimum at the final slow time.
    pub j_star: Option<f64>,
    /// `(j_avg − j_star)/j_star`.
    pub relative_gap: Option<f64>,
    /// Best cost reachable within the basis (open-loop compare runs).
    pub j_restricted: Option<f64>,
    /// `(j_avg − j_restricted)/j_restricted`.
    pub restricted_gap: Option<f64>,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub seed: u64,
    pub es_config: Option<EsConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validation: Vec<ValidationCost>,
}

fn gap(j: Option<f64>, reference: Option<f64>) -> Option<f64> {
    match (j, reference) {
        (Some(j), Some(r)) if r > 0.0 => Some((j - r) / r),
        _ => None,
    }
}

fn is_linear_quadratic(s: &Scenario) -> bool {
    matches!(s.dynamics(), Dynamics::Linear(_)) && matches!(s.cost(), CostSpec::Quadratic(_))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

struct TrajectoryWriter {
    w: csv::Writer<BufWriter<File>>,
}

impl TrajectoryWriter {
    fn new(dir: &Path, n: usize, p: usize) -> Result<Self> {
        let mut w = csv::Writer::from_writer(create(dir, "trajectory.csv")?);
        let mut header = vec!["label".to_string(), "ic".into(), "tau".into()];
        header.extend((1..=n).map(|k| format!("x_{k}")));
        header.extend((1..=p).map(|k| format!("u_{k}")));
        w.write_record(&header)?;
        Ok(TrajectoryWriter { w })
    }

    fn write(
        &mut self,
        label: &str,
        ic: usize,
        traj: &StateTrajectory,
        controls: &[f64],
    ) -> Result<()> {
        let p = controls.len() / traj.len();
        for (i, x) in traj.states().enumerate() {
            let mut row = vec![
                label.to_string(),
                ic.to_string(),
                format_f64(traj.grid().node(i)),
            ];
            row.extend(x.iter().map(|v| format_f64(*v)));
            row.extend(controls[i * p..(i + 1) * p].iter().map(|v| format_f64(*v)));
            self.w.write_record(&row)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Loads the scenario named by `spec`, runs it and writes all artifacts.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunSummary> {
    let start = Instant::now();
    let mut file = load_scenario_file(&spec.scenario_path, &spec.overrides)?;
    if let Some(seed) = spec.seed {
        file.noise.seed = seed;
    }
    let scenario = file.build()?;
    std::fs::create_dir_all(&spec.out_dir)?;
    let mut summary = match spec.mode {
        Mode::OracleOnly => run_oracle(&scenario, &spec.out_dir)?,
        mode => {
            let es = file.es.clone().ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "mode {} needs an [es] section in the scenario",
                    mode.as_str()
                ))
            })?;
            let feedback = match mode {
                Mode::FeedbackEs => true,
                Mode::OpenLoopEs => false,
                _ => es.feedback,
            };
            let n_iter = spec.n_iterations.unwrap_or(es.iterations);
            if feedback {
                run_feedback(&scenario, &file, &es, n_iter, mode, &spec.out_dir)?
            } else {
                run_open_loop(&scenario, &es, n_iter, mode, &spec.out_dir)?
            }
        }
    };
    summary.wall_time_s = start.elapsed().as_secs_f64();
    summary.seed = scenario.noise().seed;
    let mut w = create(&spec.out_dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(summary)
}

fn empty_summary(scenario: &Scenario, mode: Mode) -> RunSummary {
    RunSummary {
        scenario_id: scenario.id().to_string(),
        mode,
        j_avg: None,
        j_at_averaged_coeffs: None,
        j_star: None,
        relative_gap: None,
        j_restricted: None,
        restricted_gap: None,
        iterations: 0,
        wall_time_s: 0.0,
        seed: scenario.noise().seed,
        es_config: None,
        validation: Vec::new(),
    }
}

fn write_oracle_artifacts(
    scenario: &Scenario,
    slow_time: f64,
    dir: &Path,
    traj: &mut TrajectoryWriter,
) -> Result<(RiccatiSolution, f64)> {
    let ric = solve_for_scenario(scenario, slow_time)?;
    ric.write_csv(create(dir, "riccati.csv")?)?;
    let mut total = 0.0;
    for (k, x0) in scenario.initial_conditions().iter().enumerate() {
        let out = simulate_optimal(scenario, slow_time, x0, &ric)?;
        traj.write("oracle", k, &out.trajectory, &out.controls)?;
        total += out.cost;
    }
    Ok((ric, total))
}

fn run_oracle(scenario: &Scenario, dir: &Path) -> Result<RunSummary> {
    let mut traj = TrajectoryWriter::new(dir, scenario.state_dim(), scenario.control_dim())?;
    let (_, j_star) = write_oracle_artifacts(scenario, 0.0, dir, &mut traj)?;
    traj.finish()?;
    Ok(RunSummary {
        j_star: Some(j_star),
        ..empty_summary(scenario, Mode::OracleOnly)
    })
}

fn stride_of(es: &EsSection, n_iter: usize) -> usize {
    es.snapshot_stride
        .unwrap_or_else(|| (n_iter / 20_000).max(1))
}

fn with_delta(config: EsConfig, es: &EsSection) -> Result<EsConfig> {
    match es.delta {
        Some(d) => config.with_delta(d),
        None => Ok(config),
    }
}

fn run_open_loop(
    scenario: &Scenario,
    es: &EsSection,
    n_iter: usize,
    mode: Mode,
    dir: &Path,
) -> Result<RunSummary> {
    let config = with_delta(
        EsConfig::open_loop(es.k, es.alpha, es.omega0, scenario.n_coeffs())?,
        es,
    )?;
    let mut objective = OpenLoopObjective::new(scenario.clone());
    let record = run_es_strided(&mut objective, &config, n_iter, None, stride_of(es, n_iter))?;
    record.write_csv(create(dir, "iterations.csv")?)?;

    let (p, per) = (scenario.control_dim(), scenario.basis().n_functions());
    let coeffs = |c: &[f64]| ControllerCoefficients::from_flat(p, per, c.to_vec());
    let t_end = scenario.slow_time(n_iter, config.delta);
    let mut traj = TrajectoryWriter::new(dir, scenario.state_dim(), p)?;
    for (label, c, t) in [
        ("first", record.snapshot(0), 0.0),
        ("last", record.final_coeffs(), t_end),
    ] {
        let c = coeffs(c)?;
        for (k, x0) in scenario.initial_conditions().iter().enumerate() {
            let single = scenario.with_initial_conditions(vec![x0.clone()])?;
            let out = single.run_episode(&c, t, 0)?;
            traj.write(label, k, &out.trajectory, &out.controls)?;
        }
    }
    let j_avg = record.period_averaged_cost();
    let mut summary = RunSummary {
        j_avg: Some(j_avg),
        j_at_averaged_coeffs: Some(
            scenario.cost_of(&coeffs(record.period_averaged_coeffs())?, t_end)?,
        ),
        iterations: n_iter,
        ..empty_summary(scenario, mode)
    };
    if mode == Mode::Compare && is_linear_quadratic(scenario) {
        let (_, j_star) = write_oracle_artifacts(scenario, t_end, dir, &mut traj)?;
        let restricted = restricted_optimum(scenario, t_end)?.cost;
        summary.j_star = Some(j_star);
        summary.relative_gap = gap(Some(j_avg), Some(j_star));
        summary.j_restricted = Some(restricted);
        summary.restricted_gap = gap(Some(j_avg), Some(restricted));
    }
    traj.finish()?;
    summary.es_config = Some(record.config);
    Ok(summary)
}

fn run_feedback(
    scenario: &Scenario,
    file: &ScenarioFile,
    es: &EsSection,
    n_iter: usize,
    mode: Mode,
    dir: &Path,
) -> Result<RunSummary> {
    let (n, p) = (scenario.state_dim(), scenario.control_dim());
    let config = with_delta(
        feedback_es_config(
            es.k,
            es.alpha,
            es.omega0,
            n,
            p,
            scenario.basis(),
            es.feedforward,
        )?,
        es,
    )?;
    let syn = synthesize_gain(
        scenario,
        &config,
        n_iter,
        es.feedforward,
        stride_of(es, n_iter),
    )?;
    syn.record.write_csv(create(dir, "iterations.csv")?)?;
    let t_end = scenario.slow_time(n_iter, config.delta);
    let oracle = if is_linear_quadratic(scenario) {
        Some(solve_for_scenario(scenario, t_end)?)
    } else {
        None
    };
    write_gain_csv(
        &syn.averaged_field,
        scenario.grid(),
        oracle.as_ref(),
        create(dir, "gains.csv")?,
    )?;

    let first = GainField::from_flat(
        n,
        p,
        scenario.basis().clone(),
        syn.record.snapshot(0),
        es.feedforward,
    )?;
    let mut traj = TrajectoryWriter::new(dir, n, p)?;
    let mut j_averaged = 0.0;
    for (k, x0) in scenario.initial_conditions().iter().enumerate() {
        let out = run_feedback_episode(scenario, &first, x0, 0.0)?;
        traj.write("first", k, &out.trajectory, &out.controls)?;
        let out = run_feedback_episode(scenario, &syn.averaged_field, x0, t_end)?;
        traj.write("last", k, &out.trajectory, &out.controls)?;
        j_averaged += out.cost;
    }

    let mut summary = RunSummary {
        j_avg: Some(syn.record.period_averaged_cost()),
        j_at_averaged_coeffs: Some(j_averaged),
        iterations: n_iter,
        ..empty_summary(scenario, mode)
    };
    if let Some(ric) = &oracle {
        let mut j_star = 0.0;
        for (k, x0) in scenario.initial_conditions().iter().enumerate() {
            let out = simulate_optimal(scenario, t_end, x0, ric)?;
            if mode == Mode::Compare {
                traj.write("oracle", k, &out.trajectory, &out.controls)?;
            }
            j_star += out.cost;
        }
        summary.j_star = Some(j_star);
        summary.relative_gap = gap(summary.j_avg, Some(j_star));
        for x0 in &file.validation_conditions {
            let cost = run_feedback_episode(scenario, &syn.averaged_field, x0, t_end)?.cost;
            let optimal = simulate_optimal(scenario, t_end, x0, ric)?.cost;
            summary.validation.push(ValidationCost {
                x0: x0.clone(),
                cost,
                optimal,
                ratio: cost / optimal,
            });
        }
        if mode == Mode::Compare {
            ric.write_csv(create(dir, "riccati.csv")?)?;
        }
    }
    traj.finish()?;
    summary.es_config = Some(syn.record.config);
    Ok(summary)
}

/// Scenario files (`*.scn`) in `dir`, sorted by path, with their ids.
pub fn list_scenarios(dir: &Path) -> Result<Vec<(PathBuf, String)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let f = load_scenario_file(&p, &[])?;
            Ok((p, f.id))
        })
        .collect()
}

#[cfg(test)]
mod tests;
