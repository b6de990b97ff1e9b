//! Controllers as finite linear combinations of basis functions.
//!
//! The Fourier family uses period `T + ΔT`. With `ΔT = 0` every basis
//! function is `T`-periodic, which forces `u(0) = u(T)`; a small extension
//! frees the endpoint values.
//!
//! Coefficients are stored channel-major. Within a channel the Fourier
//! coefficients are interleaved `(a_1, b_1, a_2, b_2, ...)` where `a_j`
//! multiplies `cos(2πjτ/(T+ΔT))` and `b_j` multiplies `sin(2πjτ/(T+ΔT))`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{quadrature_trapezoid, TimeGrid};

/// Basis functions tabulated on the half-step lattice of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBasis {
    grid: TimeGrid,
    n_functions: usize,
    /// `values[q * n_functions + j]` is function `j` at half-index `q`.
    values: Vec<f64>,
}

impl SampledBasis {
    /// Samples `f(j, τ)` for `j < n_functions` on every half node.
    pub fn from_fn(
        grid: TimeGrid,
        n_functions: usize,
        f: impl Fn(usize, f64) -> f64,
    ) -> Result<Self> {
        if n_functions == 0 {
            return Err(Error::contract("custom basis needs at least one function"));
        }
        let mut values = Vec::with_capacity(grid.n_half_nodes() * n_functions);
        for q in 0..grid.n_half_nodes() {
            let tau = grid.half_node(q);
            values.extend((0..n_functions).map(|j| f(j, tau)));
        }
        Ok(SampledBasis {
            grid,
            n_functions,
            values,
        })
    }

    /// Builds from per-function samples at the grid nodes; midpoints are linearly interpolated.
    pub fn from_node_columns(grid: TimeGrid, columns: &[Vec<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::contract("custom basis needs at least one function"));
        }
        for (j, c) in columns.iter().enumerate() {
            if c.len() != grid.n_nodes() {
                return Err(Error::contract(format!(
                    "custom basis column {j} has {} samples, grid has {} nodes",
                    c.len(),
                    grid.n_nodes()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!(
                    "custom basis column {j} is not finite"
                )));
            }
        }
        let n_functions = columns.len();
        let mut values = Vec::with_capacity(grid.n_half_nodes() * n_functions);
        for q in 0..grid.n_half_nodes() {
            for col in columns {
                let v = if q % 2 == 0 {
                    col[q / 2]
                } else {
                    0.5 * (col[q / 2] + col[q / 2 + 1])
                };
                values.push(v);
            }
        }
        Ok(SampledBasis {
            grid,
            n_functions,
            values,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_functions(&self) -> usize {
        self.n_functions
    }

    /// Node samples of function `j`.
    pub fn node_column(&self, j: usize) -> Vec<f64> {
        (0..self.grid.n_nodes())
            .map(|i| self.values[2 * i * self.n_functions + j])
            .collect()
    }

    fn at_half(&self, q: usize) -> &[f64] {
        &self.values[q * self.n_functions..(q + 1) * self.n_functions]
    }

    /// Linear interpolation on the half-step lattice.
    fn eval_into(&self, tau: f64, out: &mut [f64]) {
        let hh = 0.5 * self.grid.step();
        let pos =
            ((tau - self.grid.t_start()) / hh).clamp(0.0, (self.grid.n_half_nodes() - 1) as f64);
        let q0 = (pos.floor() as usize).min(self.grid.n_half_nodes() - 2);
        let w = pos - q0 as f64;
        let (lo, hi) = (self.at_half(q0), self.at_half(q0 + 1));
        for ((o, a), b) in out.iter_mut().zip(lo).zip(hi) {
            *o = (1.0 - w) * a + w * b;
        }
    }
}

/// Which family of functions spans the controller.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisKind {
    FourierPairs { pairs: usize },
    CustomSampled(Arc<SampledBasis>),
}

/// A controller basis on the horizon `[0, T]`, optionally built on `[0, T + ΔT]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    kind: BasisKind,
    horizon: f64,
    extension: f64,
}

impl BasisSpec {
    pub fn fourier(pairs: usize, horizon: f64, extension: f64) -> Result<Self> {
        if pairs == 0 {
            return Err(Error::contract(
                "fourier basis needs at least one harmonic pair",
            ));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::contract(format!(
                "basis horizon must be positive, got {horizon}"
            )));
        }
        if !(extension.is_finite() && extension >= 0.0) {
            return Err(Error::contract(format!(
                "basis extension must be >= 0, got {extension}"
            )));
        }
        Ok(BasisSpec {
            kind: BasisKind::FourierPairs { pairs },
            horizon,
            extension,
        })
    }

    /// Fourier basis with the default extension `ΔT = 0.1·T`.
    pub fn fourier_default(pairs: usize, horizon: f64) -> Result<Self> {
        BasisSpec::fourier(pairs, horizon, 0.1 * horizon)
    }

    pub fn custom(sampled: SampledBasis) -> Self {
        let horizon = sampled.grid().t_end();
        BasisSpec {
            kind: BasisKind::CustomSampled(Arc::new(sampled)),
            horizon,
            extension: 0.0,
        }
    }

    pub fn kind(&self) -> &BasisKind {
        &self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn extension(&self) -> f64 {
        self.extension
    }

    pub fn period(&self) -> f64 {
        self.horizon + self.extension
    }

    pub fn n_functions(&self) -> usize {
        match &self.kind {
            BasisKind::FourierPairs { pairs } => 2 * pairs,
            BasisKind::CustomSampled(s) => s.n_functions(),
        }
    }

    /// Angular frequency `ν_j = 2πj/(T+ΔT)` of harmonic `j` (1-based).
    pub fn harmonic(&self, j: usize) -> f64 {
        2.0 * PI * j as f64 / self.period()
    }

    fn check_tau(&self, tau: f64) -> Result<()> {
        let tol = 1e-12 * self.horizon;
        if !(tau >= -tol && tau <= self.horizon + tol) {
            return Err(Error::contract(format!(
                "τ = {tau} outside the horizon [0, {}]",
                self.horizon
            )));
        }
        Ok(())
    }

    /// All basis functions at `τ`.
    pub fn eval_functions(&self, tau: f64) -> Result<Vec<f64>> {
        self.check_tau(tau)?;
        let mut out = vec![0.0; self.n_functions()];
        self.eval_into(tau, &mut out);
        Ok(out)
    }

    fn eval_into(&self, tau: f64, out: &mut [f64]) {
        match &self.kind {
            BasisKind::FourierPairs { pairs } => {
                for j in 1..=*pairs {
                    let (s, c) = (self.harmonic(j) * tau).sin_cos();
                    out[2 * (j - 1)] = c;
                    out[2 * (j - 1) + 1] = s;
                }
            }
            BasisKind::CustomSampled(s) => s.eval_into(tau, out),
        }
    }

    /// Tabulates the basis on the half-step lattice of `grid` for use inside RK4.
    pub fn tabulate(&self, grid: &TimeGrid) -> Result<BasisTable> {
        if grid.t_start() < -1e-12 * self.horizon || grid.t_end() > self.horizon * (1.0 + 1e-12) {
            return Err(Error::contract(format!(
                "grid [{}, {}] exceeds basis horizon {}",
                grid.t_start(),
                grid.t_end(),
                self.horizon
            )));
        }
        let n = self.n_functions();
        if let BasisKind::CustomSampled(s) = &self.kind {
            if s.grid() == grid {
                return Ok(BasisTable {
                    grid: *grid,
                    n_functions: n,
                    values: s.values.clone(),
                });
            }
        }
        let mut values = vec![0.0; grid.n_half_nodes() * n];
        for (q, row) in values.chunks_exact_mut(n).enumerate() {
            self.eval_into(grid.half_node(q), row);
        }
        Ok(BasisTable {
            grid: *grid,
            n_functions: n,
            values,
        })
    }
}

/// Basis values at every RK4 stage time of a grid.
#[derive(Debug, Clone)]
pub struct BasisTable {
    grid: TimeGrid,
    n_functions: usize,
    values: Vec<f64>,
}

impl BasisTable {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_functions(&self) -> usize {
        self.n_functions
    }

    pub fn at_half(&self, q: usize) -> &[f64] {
        &self.values[q * self.n_functions..(q + 1) * self.n_functions]
    }

    pub fn at_node(&self, i: usize) -> &[f64] {
        self.at_half(2 * i)
    }

    /// Synthesizes every channel of `coeffs` on the half lattice: row `q` holds `u(τ_q)`.
    pub fn synthesize(&self, coeffs: &ControllerCoefficients) -> Vec<f64> {
        let (p, nf, nq) = (
            coeffs.n_channels(),
            self.n_functions,
            self.grid.n_half_nodes(),
        );
        // Row-major q×nf values are the column-major nf×nq matrix Φᵀ; U (p×nq) = C·Φᵀ.
        let phi_t = DMatrixView::from_slice(&self.values, nf, nq);
        let c = DMatrix::from_row_slice(p, nf, coeffs.as_flat());
        let out = c * phi_t;
        out.data.into()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Slow-time decision variables: one coefficient row per control channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerCoefficients {
    n_channels: usize,
    per_channel: usize,
    values: Vec<f64>,
}

impl ControllerCoefficients {
    pub fn zeros(n_channels: usize, per_channel: usize) -> Self {
        ControllerCoefficients {
            n_channels,
            per_channel,
            values: vec![0.0; n_channels * per_channel],
        }
    }

    /// Wraps a flat channel-major vector.
    pub fn from_flat(n_channels: usize, per_channel: usize, values: Vec<f64>) -> Result<Self> {
        if n_channels == 0 || per_channel == 0 {
            return Err(Error::contract(
                "coefficients need at least one channel and one function",
            ));
        }
        if values.len() != n_channels * per_channel {
            return Err(Error::contract(format!(
                "expected {} coefficients ({n_channels}×{per_channel}), got {}",
                n_channels * per_channel,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("coefficient {i} is not finite")));
        }
        Ok(ControllerCoefficients {
            n_channels,
            per_channel,
            values,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn per_channel(&self) -> usize {
        self.per_channel
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.values[i * self.per_channel..(i + 1) * self.per_channel]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ControllerCoefficients {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub(crate) fn check_shape(&self, basis: &BasisSpec, n_channels: usize) -> Result<()> {
        if self.per_channel != basis.n_functions() || self.n_channels != n_channels {
            return Err(Error::contract(format!(
                "coefficients are {}×{}, expected {}×{}",
                self.n_channels,
                self.per_channel,
                n_channels,
                basis.n_functions()
            )));
        }
        Ok(())
    }
}

/// `u_i(τ) = Σ_j c_{i,j} φ_j(τ)` for every channel.
pub fn eval_controller(
    coeffs: &ControllerCoefficients,
    basis: &BasisSpec,
    tau: f64,
) -> Result<Vec<f64>> {
    coeffs.check_shape(basis, coeffs.n_channels())?;
    let phi = basis.eval_functions(tau)?;
    Ok((0..coeffs.n_channels())
        .map(|ch| dot(coeffs.channel(ch), &phi))
        .collect())
}

/// `sqrt(∫ ‖u(τ)‖² dτ)` by trapezoid on `grid`.
pub fn controller_l2_norm(
    coeffs: &ControllerCoefficients,
    basis: &BasisSpec,
    grid: &TimeGrid,
) -> Result<f64> {
    coeffs.check_shape(basis, coeffs.n_channels())?;
    let table = basis.tabulate(grid)?;
    let p = coeffs.n_channels();
    let u = table.synthesize(coeffs);
    let sq: Vec<f64> = (0..grid.n_nodes())
        .map(|i| u[2 * i * p..(2 * i + 1) * p].iter().map(|v| v * v).sum())
        .collect();
    Ok(quadrature_trapezoid(&sq, grid)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(values: Vec<f64>) -> ControllerCoefficients {
        let n = values.len();
        ControllerCoefficients::from_flat(1, n, values).unwrap()
    }

    #[test]
    fn zero_coefficients_give_zero_control() {
        let basis = BasisSpec::fourier(3, 1.0, 0.1).unwrap();
        let c = ControllerCoefficients::zeros(2, 6);
        for tau in [0.0, 0.3, 1.0] {
            assert_eq!(eval_controller(&c, &basis, tau).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn cosine_at_origin() {
        let basis = BasisSpec::fourier(1, 1.0, 0.0).unwrap();
        let u = eval_controller(&single(vec![1.0, 0.0]), &basis, 0.0).unwrap();
        assert_eq!(u, vec![1.0]);
    }

    #[test]
    fn four_term_sum_by_direct_substitution() {
        let basis = BasisSpec::fourier(2, 1.0, 0.1).unwrap();
        let c = single(vec![0.5, -0.2, 0.1, 0.3]);
        let tau: f64 = 0.4;
        let w = 2.0 * PI / 1.1;
        let expect = 0.5 * (w * tau).cos() - 0.2 * (w * tau).sin()
            + 0.1 * (2.0 * w * tau).cos()
            + 0.3 * (2.0 * w * tau).sin();
        assert_relative_eq!(
            eval_controller(&c, &basis, tau).unwrap()[0],
            expect,
            epsilon = 1e-14
        );
    }

    #[test]
    fn out_of_horizon_is_rejected() {
        let basis = BasisSpec::fourier(1, 1.0, 0.1).unwrap();
        let c = single(vec![1.0, 0.0]);
        assert!(matches!(
            eval_controller(&c, &basis, 1.05),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            eval_controller(&c, &basis, -0.01),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let basis = BasisSpec::fourier(2, 1.0, 0.1).unwrap();
        assert!(eval_controller(&single(vec![1.0, 0.0]), &basis, 0.0).is_err());
    }

    #[test]
    fn l2_norm_examples() {
        let grid = TimeGrid::horizon(1.0, 1000).unwrap();
        let basis = BasisSpec::fourier(1, 1.0, 0.0).unwrap();
        assert_eq!(
            controller_l2_norm(&single(vec![0.0, 0.0]), &basis, &grid).unwrap(),
            0.0
        );
        let c = single(vec![1.0, 0.0]);
        let n = controller_l2_norm(&c, &basis, &grid).unwrap();
        assert!((n - 0.5f64.sqrt()).abs() < 1e-6);
        let n2 = controller_l2_norm(&c.scaled(2.0), &basis, &grid).unwrap();
        assert_relative_eq!(n2, 2.0 * n, max_relative = 1e-12);
    }

    #[test]
    fn custom_basis_interpolates_midpoints() {
        let grid = TimeGrid::horizon(1.0, 4).unwrap();
        let col: Vec<f64> = grid.nodes().map(|t| 2.0 * t).collect();
        let basis = BasisSpec::custom(SampledBasis::from_node_columns(grid, &[col]).unwrap());
        let u = eval_controller(&single(vec![1.5]), &basis, 0.375).unwrap();
        assert_relative_eq!(u[0], 1.5 * 0.75, epsilon = 1e-14);
        let table = basis.tabulate(&grid).unwrap();
        assert_relative_eq!(table.at_half(1)[0], 0.25, epsilon = 1e-14);
    }

    #[test]
    fn table_matches_direct_evaluation() {
        let grid = TimeGrid::horizon(1.0, 50).unwrap();
        let basis = BasisSpec::fourier(4, 1.0, 0.1).unwrap();
        let table = basis.tabulate(&grid).unwrap();
        for q in [0, 1, 37, 100] {
            let direct = basis.eval_functions(grid.half_node(q)).unwrap();
            for (a, b) in table.at_half(q).iter().zip(&direct) {
                assert_relative_eq!(*a, *b, epsilon = 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn evaluation_is_linear(
            c1 in prop::collection::vec(-3.0f64..3.0, 10),
            c2 in prop::collection::vec(-3.0f64..3.0, 10),
            tau in 0.0f64..1.0,
        ) {
            let basis = BasisSpec::fourier(5, 1.0, 0.1).unwrap();
            let sum: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
            let u1 = eval_controller(&single(c1), &basis, tau).unwrap()[0];
            let u2 = eval_controller(&single(c2), &basis, tau).unwrap()[0];
            let us = eval_controller(&single(sum), &basis, tau).unwrap()[0];
            prop_assert!((us - u1 - u2).abs() < 1e-12);
        }

        #[test]
        fn unextended_basis_is_periodic(c in prop::collection::vec(-3.0f64..3.0, 10)) {
            let basis = BasisSpec::fourier(5, 1.0, 0.0).unwrap();
            let c = single(c);
            let u0 = eval_controller(&c, &basis, 0.0).unwrap()[0];
            let u1 = eval_controller(&c, &basis, 1.0).unwrap()[0];
            prop_assert!((u0 - u1).abs() < 1e-12);
        }

        #[test]
        fn extended_basis_breaks_periodicity(c in prop::collection::vec(0.5f64..3.0, 10)) {
            let basis = BasisSpec::fourier(5, 1.0, 0.1).unwrap();
            let c = single(c);
            let u0 = eval_controller(&c, &basis, 0.0).unwrap()[0];
            let u1 = eval_controller(&c, &basis, 1.0).unwrap()[0];
            prop_assert!((u0 - u1).abs() > 1e-6);
        }
    }
}
