//! Fixed-step integration on the fast time scale.
//!
//! Every episode uses the same uniform [`TimeGrid`], so RK4 stage times land on
//! a half-step lattice: node `i` sits at half-index `2i` and the two midpoint
//! stages of step `i` share half-index `2i + 1`. Callers that tabulate inputs
//! (controls, gains) on that lattice can look them up by [`Stage::half_index`]
//! instead of recomputing basis functions inside the derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of steps per episode.
pub const DEFAULT_STEPS: usize = 1000;

/// Uniform discretization of `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TryFrom<RawGrid> for TimeGrid {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        TimeGrid::new(raw.t_start, raw.t_end, raw.n_steps)
    }
}

impl From<TimeGrid> for RawGrid {
    fn from(g: TimeGrid) -> Self {
        RawGrid {
            t_start: g.t_start,
            t_end: g.t_end,
            n_steps: g.n_steps,
        }
    }
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::contract(format!(
                "time grid needs t_end > t_start, got [{t_start}, {t_end}]"
            )));
        }
        if n_steps < 2 {
            return Err(Error::contract(format!(
                "time grid needs n_steps >= 2, got {n_steps}"
            )));
        }
        Ok(TimeGrid {
            t_start,
            t_end,
            n_steps,
        })
    }

    /// Grid over `[0, horizon]`.
    pub fn horizon(horizon: f64, n_steps: usize) -> Result<Self> {
        TimeGrid::new(0.0, horizon, n_steps)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn span(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Time of node `i`.
    pub fn node(&self, i: usize) -> f64 {
        self.half_node(2 * i)
    }

    /// Time of half-index `q` (node `q / 2` when `q` is even, a midpoint otherwise).
    pub fn half_node(&self, q: usize) -> f64 {
        if q == 2 * self.n_steps {
            self.t_end
        } else {
            self.t_start + q as f64 * 0.5 * self.step()
        }
    }

    pub fn n_half_nodes(&self) -> usize {
        2 * self.n_steps + 1
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(move |i| self.node(i))
    }

    /// Same span with twice as many steps.
    pub fn refined(&self) -> Self {
        TimeGrid {
            n_steps: 2 * self.n_steps,
            ..*self
        }
    }
}

/// One RK4 stage: its time and its position on the half-step lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub time: f64,
    pub half_index: usize,
}

/// States sampled at every node of a grid, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    grid: TimeGrid,
    dim: usize,
    data: Vec<f64>,
}

impl StateTrajectory {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn initial(&self) -> &[f64] {
        self.state(0)
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Samples of one state component across all nodes.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.states().map(|x| x[k]).collect()
    }
}

/// Scratch buffers for one RK4 step of a `dim`-dimensional system.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(dim: usize) -> Self {
        Rk4Workspace {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// Advances `x` in place by one classical RK4 step of size `h` starting at node `i`.
pub fn rk4_step<F>(
    derivative: &mut F,
    grid: &TimeGrid,
    i: usize,
    x: &mut [f64],
    ws: &mut Rk4Workspace,
) where
    F: FnMut(Stage, &[f64], &mut [f64]),
{
    let h = grid.step();
    let s0 = Stage {
        time: grid.half_node(2 * i),
        half_index: 2 * i,
    };
    let s_mid = Stage {
        time: grid.half_node(2 * i + 1),
        half_index: 2 * i + 1,
    };
    let s1 = Stage {
        time: grid.half_node(2 * i + 2),
        half_index: 2 * i + 2,
    };

    derivative(s0, x, &mut ws.k1);
    for ((t, xi), k) in ws.tmp.iter_mut().zip(x.iter()).zip(&ws.k1) {
        *t = xi + 0.5 * h * k;
    }
    derivative(s_mid, &ws.tmp, &mut ws.k2);
    for ((t, xi), k) in ws.tmp.iter_mut().zip(x.iter()).zip(&ws.k2) {
        *t = xi + 0.5 * h * k;
    }
    derivative(s_mid, &ws.tmp, &mut ws.k3);
    for ((t, xi), k) in ws.tmp.iter_mut().zip(x.iter()).zip(&ws.k3) {
        *t = xi + h * k;
    }
    derivative(s1, &ws.tmp, &mut ws.k4);
    for (j, xi) in x.iter_mut().enumerate() {
        *xi += h / 6.0 * (ws.k1[j] + 2.0 * ws.k2[j] + 2.0 * ws.k3[j] + ws.k4[j]);
    }
}

/// Classical fixed-step RK4 with access to the stage lattice.
pub fn integrate_rk4_staged<F>(
    mut derivative: F,
    x0: &[f64],
    grid: &TimeGrid,
) -> Result<StateTrajectory>
where
    F: FnMut(Stage, &[f64], &mut [f64]),
{
    let dim = x0.len();
    if dim == 0 {
        return Err(Error::contract(
            "initial state must have at least one component",
        ));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationDiverged { step: 0 });
    }
    let mut data = Vec::with_capacity(dim * grid.n_nodes());
    data.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut ws = Rk4Workspace::new(dim);
    for i in 0..grid.n_steps() {
        rk4_step(&mut derivative, grid, i, &mut x, &mut ws);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationDiverged { step: i + 1 });
        }
        data.extend_from_slice(&x);
    }
    Ok(StateTrajectory {
        grid: *grid,
        dim,
        data,
    })
}

/// Classical fixed-step RK4 for `dx/dt = f(t, x)`.
pub fn integrate_rk4<F>(mut derivative: F, x0: &[f64], grid: &TimeGrid) -> Result<StateTrajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    integrate_rk4_staged(|stage, x, dx| derivative(stage.time, x, dx), x0, grid)
}

/// Composite trapezoid rule over the grid nodes.
pub fn quadrature_trapezoid(samples: &[f64], grid: &TimeGrid) -> Result<f64> {
    if samples.len() != grid.n_nodes() {
        return Err(Error::contract(format!(
            "quadrature expects {} samples, got {}",
            grid.n_nodes(),
            samples.len()
        )));
    }
    Ok(trapezoid_unchecked(samples, grid.step()))
}

pub(crate) fn trapezoid_unchecked(samples: &[f64], h: f64) -> f64 {
    let n = samples.len();
    let interior: f64 = samples[1..n - 1].iter().sum();
    h * (0.5 * (samples[0] + samples[n - 1]) + interior)
}
