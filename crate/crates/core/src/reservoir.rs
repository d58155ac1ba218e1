//! The fixed random recurrent network and its driven hidden sequences.
//!
//! Preactivation of step `n+1` for input `yⁿ` and previous state `hⁿ`:
//!
//! ```text
//! z0ⁿ⁺¹ = ω·hⁿ + v·yⁿ + c        (interval set to zero)
//! zⁿ⁺¹  = z0ⁿ⁺¹ + b·τ
//! hⁿ⁺¹  = tanh(zⁿ⁺¹)
//! ```

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trial::Trajectory;

/// Name of the generator behind [`build`], recorded in run reports.
pub const PRNG_NAME: &str = "ChaCha8Rng/seed_from_u64";

const POWER_ITERATION_TOL: f64 = 1e-10;
const POWER_ITERATION_MAX: usize = 10_000;

/// Which 2-norm the recurrent matrix is scaled to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Entrywise 2-norm `sqrt(Σ ω²ᵢⱼ)`, as used by the common TensorFlow
    /// ESN cell. Upper-bounds the largest singular value.
    #[default]
    Frobenius,
    /// Largest singular value, by power iteration.
    Spectral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirParams {
    pub n_neurons: usize,
    /// Fraction of structurally nonzero entries of ω.
    pub connectivity: f64,
    /// Target 2-norm of ω, measured as selected by `norm_kind`.
    pub spectral_norm: f64,
    #[serde(default)]
    pub norm_kind: NormKind,
    /// Scale applied to the uniform[−1, 1] entries of v, b and c.
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
    pub seed: u64,
}

fn default_input_scale() -> f64 {
    1.0
}

impl Default for ReservoirParams {
    fn default() -> Self {
        Self {
            n_neurons: 200,
            connectivity: 0.1,
            spectral_norm: 10.0,
            norm_kind: NormKind::Frobenius,
            input_scale: 1.0,
            seed: 0,
        }
    }
}

impl ReservoirParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_neurons == 0 {
            return Err(Error::InvalidConfig("reservoir needs at least one neuron".into()));
        }
        if !(self.connectivity > 0.0 && self.connectivity <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "connectivity must lie in (0, 1], got {}",
                self.connectivity
            )));
        }
        if !(self.spectral_norm > 0.0 && self.spectral_norm.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "target norm must be positive, got {}",
                self.spectral_norm
            )));
        }
        if !self.input_scale.is_finite() {
            return Err(Error::InvalidConfig("input_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Anything that can apply `A·x` and `Aᵀ·x`.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self * x
    }
    fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        self.tr_mul(x)
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted = triplets.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; nrows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            col_idx.push(c);
            values.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self::from_triplets(nrows, ncols, &[])
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, n, &t)
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != 0.0 {
                    t.push((r, c, m[(r, c)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &t)
    }

    /// Number of stored (structurally nonzero) entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.col_idx[k], self.values[k]))
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

impl LinearOperator for CsrMatrix {
    fn nrows(&self) -> usize {
        self.nrows
    }
    fn ncols(&self) -> usize {
        self.ncols
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        DVector::from_fn(self.nrows, |r, _| {
            (self.row_ptr[r]..self.row_ptr[r + 1])
                .map(|k| self.values[k] * x[self.col_idx[k]])
                .sum()
        })
    }
    fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = DVector::zeros(self.ncols);
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.values[k] * x[r];
            }
        }
        out
    }
}

/// Largest singular value by power iteration on `mᵀm`.
///
/// Stops when successive Rayleigh-quotient estimates agree to 1e-10
/// (relative) or after 10⁴ iterations.
pub fn spectral_norm<M: LinearOperator + ?Sized>(m: &M) -> Result<f64> {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return Err(Error::DegenerateMatrix("empty matrix has no 2-norm"));
    }
    // Fixed pseudo-random start, so no structured matrix is orthogonal to it by accident.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_2a0e);
    let mut x = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    x.normalize_mut();
    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATION_MAX {
        let mx = m.apply(&x);
        let sq = mx.norm_squared();
        let next = m.apply_transpose(&mx);
        let len = next.norm();
        if len == 0.0 || !len.is_finite() {
            if estimate == 0.0 {
                return Err(Error::DegenerateMatrix("zero matrix has no usable 2-norm"));
            }
            break;
        }
        let converged = (sq - estimate).abs() <= POWER_ITERATION_TOL * sq;
        estimate = sq;
        x = next / len;
        if converged {
            break;
        }
    }
    Ok(estimate.sqrt())
}

/// Rescales `omega` in place so its `kind` norm equals `target`.
pub fn scale_to_norm(omega: &mut CsrMatrix, kind: NormKind, target: f64) -> Result<()> {
    if omega.is_zero() {
        return Err(Error::DegenerateMatrix(
            "sampled recurrent matrix is identically zero; retry with another seed or higher connectivity",
        ));
    }
    let current = match kind {
        NormKind::Frobenius => omega.frobenius_norm(),
        NormKind::Spectral => spectral_norm(omega)?,
    };
    omega.scale(target / current);
    Ok(())
}

/// Fixed reservoir weights `(ω, v, b, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir {
    omega: CsrMatrix,
    v: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    params: ReservoirParams,
}

/// Samples a reservoir for inputs of dimension `dim`.
///
/// Exactly `round(connectivity·N²)` positions of ω are drawn without
/// replacement and filled with uniform[−1, 1] values, then ω is rescaled to
/// the target norm. v (N×d), b and c are dense uniform[−1, 1]·input_scale.
/// The draw order is fixed, so the result is a pure function of
/// `(params, dim)`.
pub fn build(params: &ReservoirParams, dim: usize) -> Result<Reservoir> {
    params.validate()?;
    if dim == 0 {
        return Err(Error::InvalidConfig("input dimension must be positive".into()));
    }
    let n = params.n_neurons;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let total = n * n;
    let count = ((params.connectivity * total as f64).round() as usize).min(total);
    let mut positions = rand::seq::index::sample(&mut rng, total, count).into_vec();
    positions.sort_unstable();
    let triplets: Vec<_> = positions
        .into_iter()
        .map(|p| (p / n, p % n, rng.random_range(-1.0..=1.0)))
        .collect();
    let mut omega = CsrMatrix::from_triplets(n, n, &triplets);
    scale_to_norm(&mut omega, params.norm_kind, params.spectral_norm)?;

    let s = params.input_scale;
    let mut uniform = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..=1.0) * s).collect()
    };
    let v = DMatrix::from_row_slice(n, dim, &uniform(n * dim));
    let b = DVector::from_vec(uniform(n));
    let c = DVector::from_vec(uniform(n));

    Ok(Reservoir {
        omega,
        v,
        b,
        c,
        params: params.clone(),
    })
}

impl Reservoir {
    /// Assembles a reservoir from explicit weights, without any rescaling.
    pub fn from_parts(
        omega: CsrMatrix,
        v: DMatrix<f64>,
        b: DVector<f64>,
        c: DVector<f64>,
        params: ReservoirParams,
    ) -> Result<Self> {
        let n = omega.nrows;
        let mismatch = |what, actual| Error::DimensionMismatch {
            what,
            expected: n,
            actual,
        };
        if omega.ncols != n {
            return Err(mismatch("recurrent matrix columns", omega.ncols));
        }
        if v.nrows() != n {
            return Err(mismatch("input matrix rows", v.nrows()));
        }
        if b.len() != n {
            return Err(mismatch("interval coupling", b.len()));
        }
        if c.len() != n {
            return Err(mismatch("bias", c.len()));
        }
        Ok(Self {
            omega,
            v,
            b,
            c,
            params,
        })
    }

    pub fn n_neurons(&self) -> usize {
        self.b.len()
    }

    pub fn input_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn omega(&self) -> &CsrMatrix {
        &self.omega
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn params(&self) -> &ReservoirParams {
        &self.params
    }

    /// Preactivations `(z, z0)` for one step.
    pub fn preactivation(
        &self,
        h: &DVector<f64>,
        input: &DVector<f64>,
        tau: f64,
    ) -> (DVector<f64>, DVector<f64>) {
        let z0 = self.omega.apply(h) + &self.v * input + &self.c;
        let z = &z0 + &self.b * tau;
        (z, z0)
    }

    /// Teacher-forced drive: one step per input point, starting from `h0`.
    pub fn drive(&self, inputs: &Trajectory, h0: &DVector<f64>) -> Result<HiddenSequence> {
        let n = self.n_neurons();
        if inputs.is_empty() {
            return Err(Error::LengthMismatch {
                expected: 1,
                actual: 0,
            });
        }
        if inputs.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "reservoir input",
                expected: self.input_dim(),
                actual: inputs.dim(),
            });
        }
        if h0.len() != n {
            return Err(Error::DimensionMismatch {
                what: "initial hidden state",
                expected: n,
                actual: h0.len(),
            });
        }
        let steps = inputs.len();
        let tau = inputs.tau();
        let mut seq = HiddenSequence {
            tau,
            h: DMatrix::zeros(n, steps + 1),
            z: DMatrix::zeros(n, steps),
            z0: DMatrix::zeros(n, steps),
            sig: DMatrix::zeros(n, steps),
            sig_dot: DMatrix::zeros(n, steps),
            sig0: DMatrix::zeros(n, steps),
        };
        seq.h.set_column(0, h0);
        let mut h = h0.clone();
        for (k, y) in inputs.states().iter().enumerate() {
            let (z, z0) = self.preactivation(&h, y, tau);
            h = z.map(f64::tanh);
            seq.sig_dot.set_column(k, &h.map(|s| 1.0 - s * s));
            seq.sig0.set_column(k, &z0.map(f64::tanh));
            seq.sig.set_column(k, &h);
            seq.z.set_column(k, &z);
            seq.z0.set_column(k, &z0);
            seq.h.set_column(k + 1, &h);
        }
        Ok(seq)
    }

    /// Debug dump: matrix-market style triplets for ω, dense rows for v, b, c.
    pub fn write_dump(&self, mut out: impl Write) -> io::Result<()> {
        let n = self.n_neurons();
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(out, "% omega")?;
        writeln!(out, "{n} {n} {}", self.omega.nnz())?;
        for (r, c, v) in self.omega.triplets() {
            writeln!(out, "{} {} {:.16e}", r + 1, c + 1, v)?;
        }
        writeln!(out, "% v {n} {}", self.input_dim())?;
        for r in 0..n {
            let row: Vec<String> = self.v.row(r).iter().map(|x| format!("{x:.16e}")).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        for (name, vec) in [("b", &self.b), ("c", &self.c)] {
            writeln!(out, "% {name} {n}")?;
            for x in vec.iter() {
                writeln!(out, "{x:.16e}")?;
            }
        }
        Ok(())
    }
}

/// Cached hidden data of a teacher-forced drive. Column `k` of every
/// per-step matrix belongs to the step fed by input `k`; `h` has one extra
/// leading column holding the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence {
    tau: f64,
    h: DMatrix<f64>,
    z: DMatrix<f64>,
    z0: DMatrix<f64>,
    sig: DMatrix<f64>,
    sig_dot: DMatrix<f64>,
    sig0: DMatrix<f64>,
}

impl HiddenSequence {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n_steps(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_neurons(&self) -> usize {
        self.z.nrows()
    }

    /// Hidden states, N × (steps + 1).
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn z0(&self) -> &DMatrix<f64> {
        &self.z0
    }
    /// σ(z), N × steps.
    pub fn sig(&self) -> &DMatrix<f64> {
        &self.sig
    }
    /// σ̇(z) = 1 − σ(z)².
    pub fn sig_dot(&self) -> &DMatrix<f64> {
        &self.sig_dot
    }
    /// σ(z0).
    pub fn sig0(&self) -> &DMatrix<f64> {
        &self.sig0
    }

    /// Drops the first `n` steps (washout). The new initial hidden state is
    /// the one reached after them.
    pub fn skip(&self, n: usize) -> Result<Self> {
        if n > self.n_steps() {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: self.n_steps(),
            });
        }
        let keep = self.n_steps() - n;
        let cols = |m: &DMatrix<f64>| m.columns(n, keep).into_owned();
        Ok(Self {
            tau: self.tau,
            h: self.h.columns(n, keep + 1).into_owned(),
            z: cols(&self.z),
            z0: cols(&self.z0),
            sig: cols(&self.sig),
            sig_dot: cols(&self.sig_dot),
            sig0: cols(&self.sig0),
        })
    }

    /// First `n` steps only.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n > self.n_steps() {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: self.n_steps(),
            });
        }
        let cols = |m: &DMatrix<f64>| m.columns(0, n).into_owned();
        Ok(Self {
            tau: self.tau,
            h: self.h.columns(0, n + 1).into_owned(),
            z: cols(&self.z),
            z0: cols(&self.z0),
            sig: cols(&self.sig),
            sig_dot: cols(&self.sig_dot),
            sig0: cols(&self.sig0),
        })
    }
}
