//! Scenario files.
//!
//! A scenario file is TOML. Top-level keys come first, then one table per
//! section:
//!
//! ```toml
//! id = "example2-scalar"
//! description = "free text"
//! initial_conditions = [[2.0]]
//! validation_conditions = [[-2.0, 3.0]]   # optional, feedback runs only
//!
//! [dynamics]                  # dx/dτ = a_profile(t)·A x + b_profile(t)·B u
//! a = [[1.0]]                 # matrices are lists of rows
//! b = [[1.0]]
//! a_profile = { kind = "ramp", offset = 1.0, time_scale = 12000.0 }
//! b_profile = { kind = "sinusoid", offset = 1.0, amplitude = 0.25, period = 3000.0 }
//! slow_time = true            # evaluate profiles at the batch's slow time
//! batch_period = 1.0          # plant time per batch; omit to use the ES clock sΔ
//!
//! [cost]                      # ½e(T)ᵀPe(T) + ½∫(eᵀQe + uᵀRu), e = Cx − r(τ)
//! c = [[1.0]]                 # optional, identity by default
//! p = [[2.0]]
//! q = [[2.0]]
//! r = [[2.0]]
//! reference = { kind = "sinusoid", offset = [0.0], amplitude = [1.0], period = 1.0, phase = 0.0 }
//! allow_indefinite_terminal = false
//!
//! [grid]
//! horizon = 1.0
//! steps = 1000
//!
//! [basis]                     # or kind = "terms" with terms = [{ shape = "cos", harmonic = 1 }]
//! kind = "fourier"
//! pairs = 5
//! extension = 0.1
//!
//! [noise]
//! std_dev = 0.0
//! seed = 0
//!
//! [es]                        # default hyperparameters for experiments
//! k = 2.0
//! alpha = 2.0
//! omega0 = 1000.0
//! iterations = 20000
//! feedback = false            # learn a gain field instead of an open-loop control
//! feedforward = false         # feedback only: also learn V(τ)
//! ```
//!
//! Profiles are `constant`, `ramp` (`offset + t/time_scale`) and `sinusoid`
//! (`offset + amplitude·sin(2πt/period)`). References are `zero`,
//! `constant { value }` and `sinusoid { offset, amplitude, period, phase }`.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, SampledBasis};
use crate::error::{Error, Result};
use crate::ode::TimeGrid;
use crate::scenario::{
    CostSpec, Dynamics, LinearDynamics, MatrixSchedule, NoiseModel, QuadraticCostSpec, Reference,
    Scenario, ScenarioParts, TimeProfile,
};

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub initial_conditions: Rows,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validation_conditions: Rows,
    pub dynamics: DynamicsSection,
    pub cost: CostSection,
    pub grid: GridSection,
    pub basis: BasisSection,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub es: Option<EsSection>,
}

fn constant_profile() -> TimeProfile {
    TimeProfile::Constant
}

fn is_constant(p: &TimeProfile) -> bool {
    *p == TimeProfile::Constant
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_zero_reference(r: &Reference) -> bool {
    *r == Reference::Zero
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub a: Rows,
    pub b: Rows,
    #[serde(default = "constant_profile", skip_serializing_if = "is_constant")]
    pub a_profile: TimeProfile,
    #[serde(default = "constant_profile", skip_serializing_if = "is_constant")]
    pub b_profile: TimeProfile,
    #[serde(default, skip_serializing_if = "is_false")]
    pub slow_time: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_period: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Rows>,
    pub p: Rows,
    pub q: Rows,
    pub r: Rows,
    #[serde(default = "zero_reference", skip_serializing_if = "is_zero_reference")]
    pub reference: Reference,
    #[serde(default, skip_serializing_if = "is_false")]
    pub allow_indefinite_terminal: bool,
}

fn zero_reference() -> Reference {
    Reference::Zero
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermShape {
    Cos,
    Sin,
}

/// `cos` or `sin` of `2π·harmonic·τ/(T + extension)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisTerm {
    pub shape: TermShape,
    pub harmonic: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BasisSection {
    Fourier {
        pairs: usize,
        #[serde(default)]
        extension: f64,
    },
    Terms {
        terms: Vec<BasisTerm>,
        #[serde(default)]
        extension: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsSection {
    pub k: f64,
    pub alpha: f64,
    pub omega0: f64,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "is_false")]
    pub feedback: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub feedforward: bool,
    /// Iteration step; the default is `2π/(10·max ω)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Keep coefficient snapshots every this many iterations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
}

fn matrix(name: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return Err(Error::Validation(format!("{name} is empty")));
    }
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Validation(format!(
            "{name} has rows of different lengths"
        )));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ScenarioFile {
    /// Validates and resolves the file into a [`Scenario`].
    pub fn build(&self) -> Result<Scenario> {
        let d = &self.dynamics;
        let dynamics = Dynamics::Linear(LinearDynamics {
            a: MatrixSchedule {
                base: matrix("A", &d.a)?,
                profile: d.a_profile,
            },
            b: MatrixSchedule {
                base: matrix("B", &d.b)?,
                profile: d.b_profile,
            },
        });
        let n = dynamics.state_dim();
        let c = &self.cost;
        let cost = QuadraticCostSpec {
            c: match &c.c {
                Some(rows) => matrix("C", rows)?,
                None => DMatrix::identity(n, n),
            },
            p: matrix("P", &c.p)?,
            q: matrix("Q", &c.q)?,
            r: matrix("R", &c.r)?,
            reference: c.reference.clone(),
            allow_indefinite_terminal: c.allow_indefinite_terminal,
        };
        let grid = TimeGrid::horizon(self.grid.horizon, self.grid.steps).map_err(as_validation)?;
        let basis = self.basis_spec(&grid)?;
        for (k, x0) in self.validation_conditions.iter().enumerate() {
            if x0.len() != n {
                return Err(Error::Validation(format!(
                    "validation condition {k} has dimension {}, state dimension is {n}",
                    x0.len()
                )));
            }
        }
        if let Some(es) = &self.es {
            if es.feedforward && !es.feedback {
                return Err(Error::Validation(
                    "es.feedforward requires es.feedback".into(),
                ));
            }
        }
        Scenario::new(ScenarioParts {
            id: self.id.clone(),
            dynamics,
            cost: CostSpec::Quadratic(cost),
            grid,
            initial_conditions: self.initial_conditions.clone(),
            noise: self.noise,
            basis,
            slow_time_dependence: d.slow_time,
            batch_period: d.batch_period,
        })
    }

    fn basis_spec(&self, grid: &TimeGrid) -> Result<BasisSpec> {
        let horizon = self.grid.horizon;
        match &self.basis {
            BasisSection::Fourier { pairs, extension } => {
                BasisSpec::fourier(*pairs, horizon, *extension).map_err(as_validation)
            }
            BasisSection::Terms { terms, extension } => {
                if !(extension.is_finite() && *extension >= 0.0) {
                    return Err(Error::Validation(format!(
                        "basis extension must be >= 0, got {extension}"
                    )));
                }
                if terms
                    .iter()
                    .any(|t| t.harmonic == 0 && t.shape == TermShape::Sin)
                {
                    return Err(Error::Validation(
                        "basis term sin with harmonic 0 is identically zero".into(),
                    ));
                }
                let period = horizon + extension;
                let sampled = SampledBasis::from_fn(*grid, terms.len(), |j, tau| {
                    let x = TAU * f64::from(terms[j].harmonic) * tau / period;
                    match terms[j].shape {
                        TermShape::Cos => x.cos(),
                        TermShape::Sin => x.sin(),
                    }
                })
                .map_err(as_validation)?;
                Ok(BasisSpec::custom(sampled))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self)
            .map_err(|e| Error::Validation(format!("cannot serialize scenario: {e}")))
    }

    /// Matrices as rows, for callers building files in code.
    pub fn rows(m: &DMatrix<f64>) -> Rows {
        rows_of(m)
    }
}

fn as_validation(e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Validation(m),
        other => other,
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())]
        .bytes()
        .filter(|b| *b == b'\n')
        .count()
        + 1
}

fn parse_error(text: &str, e: toml::de::Error) -> Error {
    let line = e.span().map_or(0, |s| line_of(text, s.start));
    Error::Parse {
        line,
        message: e.message().to_string(),
    }
}

/// Parses scenario text, applying `key.path=value` overrides before schema checks.
pub fn parse_scenario(text: &str, overrides: &[String]) -> Result<ScenarioFile> {
    if overrides.is_empty() {
        return toml::from_str(text).map_err(|e| parse_error(text, e));
    }
    let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| {
            Error::Validation(format!("scenario invalid after overrides: {}", e.message()))
        })
}

/// Sets `path = value` inside `table`, creating intermediate tables.
/// The value is read as TOML, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override '{assignment}' is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidConfig(format!(
            "override '{assignment}' has an empty key"
        )));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys
        .split_last()
        .expect("split on '.' yields at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override '{assignment}': '{k}' is not a table"))
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn load_scenario_file(path: &Path, overrides: &[String]) -> Result<ScenarioFile> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text, overrides)
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    load_scenario_file(path, &[])?.build()
}
