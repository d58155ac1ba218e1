//! Readout maps, the three constraint residual families and their
//! Jacobians with respect to the readout matrix.
//!
//! Notation per step `k` (column `k` of the hidden cache):
//! `σ = σ(z)`, `σ̇ = 1 − σ²`, `σ₀ = σ(z − bτ)` and `p = σ + τ·b⊙σ̇`, the
//! τ-derivative of `τ·σ(z(τ))`.
//!
//! Residual vectors are stacked family-major, then step, then component:
//! `row = family·P·d + k·d + i`. Readout entries are flattened row-major:
//! `col = j·N + m` for output component `j` and neuron `m`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::problems::OdeSystem;
use crate::regression::LeastSquaresProblem;
use crate::reservoir::{HiddenSequence, LinearOperator, Reservoir};
use crate::trial::Trajectory;

/// d × N readout weights.
pub type ReadoutMatrix = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintOptions {
    /// Replace `f` inside e₃ by the readout terms that e₁/e₂ pin it to,
    /// which keeps e₃ polynomial in the weights. When off, `f` is
    /// evaluated directly.
    #[serde(default = "yes")]
    pub e3_substitution: bool,
    /// Multipliers of the three family losses.
    #[serde(default = "unit_weights")]
    pub family_weights: [f64; 3],
}

fn yes() -> bool {
    true
}

fn unit_weights() -> [f64; 3] {
    [1.0; 3]
}

impl Default for ConstraintOptions {
    fn default() -> Self {
        Self {
            e3_substitution: true,
            family_weights: unit_weights(),
        }
    }
}

impl ConstraintOptions {
    pub fn validate(&self) -> Result<()> {
        if self.family_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig(
                "family weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major flattening of a readout matrix.
pub fn flatten(w: &ReadoutMatrix) -> DVector<f64> {
    DVector::from_iterator(w.len(), w.transpose().iter().copied())
}

/// Inverse of [`flatten`].
pub fn unflatten(x: &DVector<f64>, rows: usize, cols: usize) -> ReadoutMatrix {
    assert_eq!(x.len(), rows * cols);
    DMatrix::from_row_slice(rows, cols, x.as_slice())
}

/// One readout step `anchor + τ·w·σ`. Shared by every readout so teacher
/// forcing and closed-loop generation agree to the bit.
pub fn advance(
    anchor: &DVector<f64>,
    w: &ReadoutMatrix,
    sig: &DVector<f64>,
    tau: f64,
) -> DVector<f64> {
    anchor + (w * sig) * tau
}

/// Residual families of one stage, each `n_steps × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageResiduals {
    pub e1: DMatrix<f64>,
    pub e2: DMatrix<f64>,
    pub e3: DMatrix<f64>,
    pub weights: [f64; 3],
}

impl StageResiduals {
    pub fn new(e1: DMatrix<f64>, e2: DMatrix<f64>, e3: DMatrix<f64>, weights: [f64; 3]) -> Self {
        Self { e1, e2, e3, weights }
    }

    pub fn families(&self) -> [&DMatrix<f64>; 3] {
        [&self.e1, &self.e2, &self.e3]
    }

    /// Weighted sum of squares per family.
    pub fn loss_by_family(&self) -> [f64; 3] {
        let f = self.families();
        [0, 1, 2].map(|i| self.weights[i] * f[i].norm_squared())
    }

    pub fn loss_total(&self) -> f64 {
        self.loss_by_family().iter().sum()
    }

    /// Stacked residual vector whose squared norm is [`Self::loss_total`].
    pub fn stacked(&self) -> DVector<f64> {
        let len: usize = self.families().iter().map(|e| e.len()).sum();
        let mut out = DVector::zeros(len);
        let mut at = 0;
        for (e, w) in self.families().into_iter().zip(self.weights) {
            let s = w.sqrt();
            // Row-major walk: step, then component.
            for k in 0..e.nrows() {
                for i in 0..e.ncols() {
                    out[at] = s * e[(k, i)];
                    at += 1;
                }
            }
        }
        out
    }

    fn check_finite(&self) -> Result<()> {
        for e in self.families() {
            ensure_finite("constraint residuals", e.iter())?;
        }
        Ok(())
    }
}

/// `∂(stacked residuals)/∂(flattened readout)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualJacobian {
    pub j: DMatrix<f64>,
    pub n_steps: usize,
    pub dim: usize,
    pub n_neurons: usize,
}

impl ResidualJacobian {
    fn zeros(n_steps: usize, dim: usize, n_neurons: usize) -> Self {
        Self {
            j: DMatrix::zeros(3 * n_steps * dim, dim * n_neurons),
            n_steps,
            dim,
            n_neurons,
        }
    }

    pub fn row(&self, family: usize, step: usize, component: usize) -> usize {
        family * self.n_steps * self.dim + step * self.dim + component
    }

    pub fn col(&self, output: usize, neuron: usize) -> usize {
        output * self.n_neurons + neuron
    }

    /// Rows of one family.
    pub fn family_block(&self, family: usize) -> DMatrix<f64> {
        let rows = self.n_steps * self.dim;
        self.j.rows(family * rows, rows).into_owned()
    }

    /// Fills the block of `family` from `entry(k, i, j, m)`, scaled by
    /// `sqrt(weight)`.
    fn fill(
        &mut self,
        family: usize,
        weight: f64,
        mut entry: impl FnMut(usize, usize, usize, usize) -> f64,
    ) {
        let s = weight.sqrt();
        let (p, d, n) = (self.n_steps, self.dim, self.n_neurons);
        let base = family * p * d;
        for j in 0..d {
            for m in 0..n {
                let mut col = self.j.column_mut(j * n + m);
                for k in 0..p {
                    for i in 0..d {
                        col[base + k * d + i] = s * entry(k, i, j, m);
                    }
                }
            }
        }
    }
}

fn kron(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

fn check_readout(w: &ReadoutMatrix, d: usize, n: usize) -> Result<()> {
    if w.nrows() != d {
        return Err(Error::DimensionMismatch {
            what: "readout rows",
            expected: d,
            actual: w.nrows(),
        });
    }
    if w.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "readout columns",
            expected: n,
            actual: w.ncols(),
        });
    }
    ensure_finite("readout weights", w.iter())
}

fn check_compatible(system: &OdeSystem, res: &Reservoir, hs: &HiddenSequence) -> Result<()> {
    if res.input_dim() != system.dim() {
        return Err(Error::DimensionMismatch {
            what: "reservoir input dimension",
            expected: system.dim(),
            actual: res.input_dim(),
        });
    }
    if hs.n_neurons() != res.n_neurons() {
        return Err(Error::DimensionMismatch {
            what: "hidden sequence width",
            expected: res.n_neurons(),
            actual: hs.n_neurons(),
        });
    }
    if hs.n_steps() == 0 {
        return Err(Error::LengthMismatch {
            expected: 1,
            actual: 0,
        });
    }
    Ok(())
}

/// `σ + τ·b⊙σ̇`, column per step.
fn tau_derivative(res: &Reservoir, hs: &HiddenSequence) -> DMatrix<f64> {
    let tau = hs.tau();
    let b = res.b();
    DMatrix::from_fn(hs.n_neurons(), hs.n_steps(), |m, k| {
        hs.sig()[(m, k)] + tau * b[m] * hs.sig_dot()[(m, k)]
    })
}

fn column(m: &DMatrix<f64>, k: usize) -> DVector<f64> {
    m.column(k).into_owned()
}

/// Stage one: hidden states driven by the fixed trial solution, readout
/// accumulating from its own previous value.
#[derive(Debug, Clone)]
pub struct StageOne {
    system: OdeSystem,
    tau: f64,
    t0: f64,
    y_start: DVector<f64>,
    sig: DMatrix<f64>,
    sig0: DMatrix<f64>,
    p: DMatrix<f64>,
    /// `σ̇⊙(ω·σ₀)`.
    q: DMatrix<f64>,
    /// Running sums `Σ_{l<k} σˡ`, N × (P+1).
    cum: DMatrix<f64>,
    opts: ConstraintOptions,
}

impl StageOne {
    /// `y_start` is the first kept trial point, at time `t0`.
    pub fn new(
        system: OdeSystem,
        res: &Reservoir,
        hs: &HiddenSequence,
        y_start: &DVector<f64>,
        t0: f64,
        opts: ConstraintOptions,
    ) -> Result<Self> {
        check_compatible(&system, res, hs)?;
        opts.validate()?;
        if y_start.len() != system.dim() {
            return Err(Error::DimensionMismatch {
                what: "readout anchor",
                expected: system.dim(),
                actual: y_start.len(),
            });
        }
        let (n, steps) = (hs.n_neurons(), hs.n_steps());
        let mut q = DMatrix::zeros(n, steps);
        for k in 0..steps {
            let w_sig0 = res.omega().apply(&column(hs.sig0(), k));
            q.set_column(k, &hs.sig_dot().column(k).component_mul(&w_sig0));
        }
        let mut cum = DMatrix::zeros(n, steps + 1);
        for k in 0..steps {
            let next = cum.column(k) + hs.sig().column(k);
            cum.set_column(k + 1, &next);
        }
        Ok(Self {
            system,
            tau: hs.tau(),
            t0,
            y_start: y_start.clone(),
            sig: hs.sig().clone(),
            sig0: hs.sig0().clone(),
            p: tau_derivative(res, hs),
            q,
            cum,
            opts,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.sig.ncols()
    }

    pub fn n_neurons(&self) -> usize {
        self.sig.nrows()
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    fn states(&self, w: &ReadoutMatrix) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.n_steps() + 1);
        out.push(self.y_start.clone());
        for k in 0..self.n_steps() {
            let next = advance(&out[k], w, &column(&self.sig, k), self.tau);
            out.push(next);
        }
        out
    }

    /// `ȳ⁰ = y_start`, `ȳᵏ⁺¹ = ȳᵏ + τ·w·σᵏ`; P+1 points.
    pub fn readout(&self, w: &ReadoutMatrix) -> Result<Trajectory> {
        check_readout(w, self.dim(), self.n_neurons())?;
        Trajectory::new(self.t0, self.tau, self.states(w))
    }

    pub fn residuals(&self, w: &ReadoutMatrix) -> Result<StageResiduals> {
        check_readout(w, self.dim(), self.n_neurons())?;
        let (p, d) = (self.n_steps(), self.dim());
        let y = self.states(w);
        let f: Vec<_> = y.iter().map(|yk| self.system.rhs(yk)).collect();
        let wp = w * &self.p;
        let ws0 = w * &self.sig0;
        let wq = w * &self.q;
        let mut e1 = DMatrix::zeros(p, d);
        let mut e2 = DMatrix::zeros(p, d);
        let mut e3 = DMatrix::zeros(p, d);
        for k in 0..p {
            for i in 0..d {
                e1[(k, i)] = f[k + 1][i] - wp[(i, k)];
                e2[(k, i)] = f[k][i] - ws0[(i, k)];
                e3[(k, i)] = if self.opts.e3_substitution {
                    wq[(i, k)] - wp[(i, k)] + ws0[(i, k)]
                } else {
                    wq[(i, k)] + f[k][i] - f[k + 1][i]
                };
            }
        }
        let r = StageResiduals::new(e1, e2, e3, self.opts.family_weights);
        r.check_finite()?;
        Ok(r)
    }

    pub fn jacobian(&self, w: &ReadoutMatrix) -> Result<ResidualJacobian> {
        check_readout(w, self.dim(), self.n_neurons())?;
        let (p, d, n) = (self.n_steps(), self.dim(), self.n_neurons());
        let tau = self.tau;
        let y = self.states(w);
        let jf: Vec<_> = y.iter().map(|yk| self.system.jacobian(yk)).collect();
        let (cum, pm, s0, q) = (&self.cum, &self.p, &self.sig0, &self.q);
        let wts = self.opts.family_weights;
        let mut jac = ResidualJacobian::zeros(p, d, n);
        jac.fill(0, wts[0], |k, i, j, m| {
            tau * jf[k + 1][(i, j)] * cum[(m, k + 1)] - kron(i, j) * pm[(m, k)]
        });
        jac.fill(1, wts[1], |k, i, j, m| {
            tau * jf[k][(i, j)] * cum[(m, k)] - kron(i, j) * s0[(m, k)]
        });
        if self.opts.e3_substitution {
            jac.fill(2, wts[2], |k, i, j, m| {
                kron(i, j) * (q[(m, k)] - pm[(m, k)] + s0[(m, k)])
            });
        } else {
            jac.fill(2, wts[2], |k, i, j, m| {
                kron(i, j) * q[(m, k)]
                    + tau * (jf[k][(i, j)] * cum[(m, k)] - jf[k + 1][(i, j)] * cum[(m, k + 1)])
            });
        }
        ensure_finite("residual jacobian", jac.j.iter())?;
        Ok(jac)
    }
}

/// Stage two: hidden states driven by the stage-one output; every readout
/// step is anchored on the corresponding stage-one point.
#[derive(Debug, Clone)]
pub struct StageTwo {
    system: OdeSystem,
    tau: f64,
    t0: f64,
    anchors: Vec<DVector<f64>>,
    f_anchor: Vec<DVector<f64>>,
    sig: DMatrix<f64>,
    sig0: DMatrix<f64>,
    sig_dot: DMatrix<f64>,
    p: DMatrix<f64>,
    v: DMatrix<f64>,
    /// `σ̇⊙(v·f(ȳᵏ))`, used when f is evaluated directly inside e₃.
    vf: DMatrix<f64>,
    opts: ConstraintOptions,
}

impl StageTwo {
    /// `ybar` holds the stage-one points; the first `hs.n_steps()` of them
    /// are the anchors (and the inputs that drove `hs`).
    pub fn new(
        system: OdeSystem,
        res: &Reservoir,
        hs: &HiddenSequence,
        ybar: &Trajectory,
        opts: ConstraintOptions,
    ) -> Result<Self> {
        check_compatible(&system, res, hs)?;
        opts.validate()?;
        let steps = hs.n_steps();
        if ybar.len() < steps {
            return Err(Error::LengthMismatch {
                expected: steps,
                actual: ybar.len(),
            });
        }
        if ybar.dim() != system.dim() {
            return Err(Error::DimensionMismatch {
                what: "stage-one trajectory",
                expected: system.dim(),
                actual: ybar.dim(),
            });
        }
        let anchors = ybar.states()[..steps].to_vec();
        let f_anchor: Vec<_> = anchors.iter().map(|y| system.rhs(y)).collect();
        let mut vf = DMatrix::zeros(hs.n_neurons(), steps);
        for k in 0..steps {
            let col = hs.sig_dot().column(k).component_mul(&(res.v() * &f_anchor[k]));
            vf.set_column(k, &col);
        }
        Ok(Self {
            system,
            tau: hs.tau(),
            t0: ybar.t0(),
            anchors,
            f_anchor,
            sig: hs.sig().clone(),
            sig0: hs.sig0().clone(),
            sig_dot: hs.sig_dot().clone(),
            p: tau_derivative(res, hs),
            v: res.v().clone(),
            vf,
            opts,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.sig.ncols()
    }

    pub fn n_neurons(&self) -> usize {
        self.sig.nrows()
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    /// `yᵏ⁺¹ = ȳᵏ + τ·w·σᵏ` for each step.
    fn outputs(&self, w: &ReadoutMatrix) -> Vec<DVector<f64>> {
        (0..self.n_steps())
            .map(|k| advance(&self.anchors[k], w, &column(&self.sig, k), self.tau))
            .collect()
    }

    /// `[ȳ⁰, y¹, …, yᴾ]`; P+1 points aligned with the stage-one output.
    pub fn readout(&self, w: &ReadoutMatrix) -> Result<Trajectory> {
        check_readout(w, self.dim(), self.n_neurons())?;
        let mut states = Vec::with_capacity(self.n_steps() + 1);
        states.push(self.anchors[0].clone());
        states.extend(self.outputs(w));
        Trajectory::new(self.t0, self.tau, states)
    }

    /// `σ̇ ⊙ (v·w·σ₀)`, column per step.
    fn feedback(&self, w: &ReadoutMatrix) -> DMatrix<f64> {
        let g = &self.v * (w * &self.sig0);
        self.sig_dot.component_mul(&g)
    }

    pub fn residuals(&self, w: &ReadoutMatrix) -> Result<StageResiduals> {
        check_readout(w, self.dim(), self.n_neurons())?;
        let (p, d, tau) = (self.n_steps(), self.dim(), self.tau);
        let y = self.outputs(w);
        let wp = w * &self.p;
        let ws0 = w * &self.sig0;
        let third = if self.opts.e3_substitution {
            w * self.feedback(w)
        } else {
            w * &self.vf
        };
        let mut e1 = DMatrix::zeros(p, d);
        let mut e2 = DMatrix::zeros(p, d);
        let mut e3 = DMatrix::zeros(p, d);
        for k in 0..p {
            let f_next = self.system.rhs(&y[k]);
            let f_here = &self.f_anchor[k];
            for i in 0..d {
                e1[(k, i)] = f_next[i] - wp[(i, k)];
                e2[(k, i)] = f_here[i] - ws0[(i, k)];
                e3[(k, i)] = if self.opts.e3_substitution {
                    tau * third[(i, k)] - (wp[(i, k)] - ws0[(i, k)])
                } else {
                    tau * third[(i, k)] + f_here[i] - f_next[i]
                };
            }
        }
        let r = StageResiduals::new(e1, e2, e3, self.opts.family_weights);
        r.check_finite()?;
        Ok(r)
    }

    pub fn jacobian(&self, w: &ReadoutMatrix) -> Result<ResidualJacobian> {
        check_readout(w, self.dim(), self.n_neurons())?;
        let (p, d, n, tau) = (self.n_steps(), self.dim(), self.n_neurons(), self.tau);
        let y = self.outputs(w);
        let jf: Vec<_> = y.iter().map(|yk| self.system.jacobian(yk)).collect();
        let (sig, pm, s0) = (&self.sig, &self.p, &self.sig0);
        let wts = self.opts.family_weights;
        let mut jac = ResidualJacobian::zeros(p, d, n);
        jac.fill(0, wts[0], |k, i, j, m| {
            tau * jf[k][(i, j)] * sig[(m, k)] - kron(i, j) * pm[(m, k)]
        });
        jac.fill(1, wts[1], |k, i, j, m| -kron(i, j) * s0[(m, k)]);
        if self.opts.e3_substitution {
            let a = self.feedback(w);
            // w·diag(σ̇ᵏ)·v, d × d per step.
            let mix: Vec<DMatrix<f64>> = (0..p)
                .map(|k| {
                    let mut scaled = self.v.clone();
                    for (m, mut row) in scaled.row_iter_mut().enumerate() {
                        row *= self.sig_dot[(m, k)];
                    }
                    w * scaled
                })
                .collect();
            jac.fill(2, wts[2], |k, i, j, m| {
                kron(i, j) * (tau * a[(m, k)] - pm[(m, k)] + s0[(m, k)])
                    + tau * mix[k][(i, j)] * s0[(m, k)]
            });
        } else {
            let vf = &self.vf;
            jac.fill(2, wts[2], |k, i, j, m| {
                kron(i, j) * tau * vf[(m, k)] - tau * jf[k][(i, j)] * sig[(m, k)]
            });
        }
        ensure_finite("residual jacobian", jac.j.iter())?;
        Ok(jac)
    }
}

impl LeastSquaresProblem for StageOne {
    fn shape(&self) -> (usize, usize) {
        (self.dim(), self.n_neurons())
    }
    fn residuals(&self, w: &ReadoutMatrix) -> Result<StageResiduals> {
        StageOne::residuals(self, w)
    }
    fn jacobian(&self, w: &ReadoutMatrix) -> Result<ResidualJacobian> {
        StageOne::jacobian(self, w)
    }
}

impl LeastSquaresProblem for StageTwo {
    fn shape(&self) -> (usize, usize) {
        (self.dim(), self.n_neurons())
    }
    fn residuals(&self, w: &ReadoutMatrix) -> Result<StageResiduals> {
        StageTwo::residuals(self, w)
    }
    fn jacobian(&self, w: &ReadoutMatrix) -> Result<ResidualJacobian> {
        StageTwo::jacobian(self, w)
    }
}

/// Central-difference Jacobian of `residual` (a map from readout matrices
/// to stacked residual vectors), one readout entry at a time.
pub fn fd_jacobian<F>(residual: F, w: &ReadoutMatrix, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&ReadoutMatrix) -> Result<DVector<f64>>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (d, n) = w.shape();
    let rows = residual(w)?.len();
    let mut out = DMatrix::zeros(rows, d * n);
    let mut probe = w.clone();
    for j in 0..d {
        for m in 0..n {
            let orig = probe[(j, m)];
            probe[(j, m)] = orig + step;
            let plus = residual(&probe)?;
            probe[(j, m)] = orig - step;
            let minus = residual(&probe)?;
            probe[(j, m)] = orig;
            out.set_column(j * n + m, &((plus - minus) / (2.0 * step)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{e3_oracle_stage1, e3_oracle_stage2, relative_error};
    use crate::problems::{self, harmonic, lorenz, van_der_pol};
    use crate::reservoir::{build, CsrMatrix, NormKind, ReservoirParams};
    use crate::trial::{euler, refine_downsample};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_reservoir(omega: f64, v: f64, b: f64, c: f64) -> Reservoir {
        let omega = if omega == 0.0 {
            CsrMatrix::zeros(1, 1)
        } else {
            CsrMatrix::from_triplets(1, 1, &[(0, 0, omega)])
        };
        Reservoir::from_parts(
            omega,
            DMatrix::from_element(1, 1, v),
            DVector::from_element(1, b),
            DVector::from_element(1, c),
            ReservoirParams::default(),
        )
        .unwrap()
    }

    fn constant_field() -> OdeSystem {
        fn rhs(_: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, 1.0)
        }
        fn jac(_: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(1, 1)
        }
        OdeSystem::new("constant", 1, rhs, jac)
    }

    fn decay() -> OdeSystem {
        fn rhs(y: &DVector<f64>) -> DVector<f64> {
            -y
        }
        fn jac(_: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, -1.0)
        }
        OdeSystem::new("decay", 1, rhs, jac)
    }

    fn line(n: usize, tau: f64, value: f64) -> Trajectory {
        Trajectory::new(0.0, tau, vec![DVector::from_element(1, value); n]).unwrap()
    }

    fn random_readout(d: usize, n: usize, scale: f64, seed: u64) -> ReadoutMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(d, n, |_, _| rng.random_range(-scale..scale))
    }

    /// Seeded small instance of both stages for `system`.
    struct Case {
        res: Reservoir,
        inputs1: Trajectory,
        hs1: HiddenSequence,
        ybar: Trajectory,
        hs2: HiddenSequence,
        stage1: StageOne,
        stage2: StageTwo,
        w: ReadoutMatrix,
    }

    fn case(system: OdeSystem, y0: &[f64], tau: f64, n: usize, steps: usize, seed: u64, opts: ConstraintOptions) -> Case {
        let d = system.dim();
        let res = build(
            &ReservoirParams {
                n_neurons: n,
                connectivity: 0.2,
                spectral_norm: 10.0,
                norm_kind: NormKind::Frobenius,
                input_scale: 1.0,
                seed,
            },
            d,
        )
        .unwrap();
        let washout = 5;
        let trial = refine_downsample(&system, &DVector::from_row_slice(y0), tau, washout + steps, 4).unwrap();
        let h0 = DVector::zeros(n);
        let hs1 = res.drive(&trial.slice(0, washout + steps).unwrap(), &h0).unwrap().skip(washout).unwrap();
        let kept = trial.slice(washout, steps + 1).unwrap();
        let w = random_readout(d, n, 0.5, seed ^ 0x55);
        let stage1 = StageOne::new(system, &res, &hs1, kept.state(0), kept.t0(), opts).unwrap();
        let ybar = stage1.readout(&w).unwrap();
        let inputs2 = trial.slice(0, washout).unwrap().concat(&ybar.slice(0, steps).unwrap()).unwrap();
        let hs2 = res.drive(&inputs2, &h0).unwrap().skip(washout).unwrap();
        let stage2 = StageTwo::new(system, &res, &hs2, &ybar, opts).unwrap();
        Case {
            res,
            inputs1: trial.slice(washout, steps).unwrap(),
            hs1,
            ybar,
            hs2,
            stage1,
            stage2,
            w,
        }
    }

    fn benchmarks() -> Vec<(OdeSystem, Vec<f64>, f64)> {
        vec![
            (harmonic(), vec![1.0, 0.0], 0.05),
            (van_der_pol(), vec![2.0, 0.0], 0.1),
            (lorenz(), vec![1.0, 1.0, 1.0], 0.03),
        ]
    }

    #[test]
    fn zero_readout_freezes_stage_one() {
        let c = case(harmonic(), &[1.0, 0.0], 0.05, 10, 5, 1, ConstraintOptions::default());
        let w = DMatrix::zeros(2, 10);
        let y = c.stage1.readout(&w).unwrap();
        let start = y.state(0).clone();
        assert!(y.states().iter().all(|s| s == &start));
        let r = c.stage1.residuals(&w).unwrap();
        let f = harmonic().rhs(&start);
        for k in 0..5 {
            for i in 0..2 {
                assert_eq!(r.e1[(k, i)], f[i]);
                assert_eq!(r.e2[(k, i)], f[i]);
                assert_eq!(r.e3[(k, i)], 0.0);
            }
        }
    }

    #[test]
    fn constant_increment_readout() {
        let res = scalar_reservoir(0.0, 0.0, 0.0, 0.5f64.atanh());
        let hs = res.drive(&line(6, 0.1, 0.0), &DVector::zeros(1)).unwrap();
        let s = StageOne::new(decay(), &res, &hs, &DVector::zeros(1), 0.0, ConstraintOptions::default()).unwrap();
        let y = s.readout(&DMatrix::from_element(1, 1, 2.0)).unwrap();
        for (n, p) in y.states().iter().enumerate() {
            assert_relative_eq!(p[0], 0.1 * n as f64, epsilon = 1e-14);
        }
    }

    #[test]
    fn stage_one_readout_telescopes() {
        let c = case(van_der_pol(), &[2.0, 0.0], 0.1, 8, 9, 3, ConstraintOptions::default());
        let y = c.stage1.readout(&c.w).unwrap();
        let mut sum = DVector::zeros(8);
        for n in 0..=9 {
            let expected = y.state(0) + &c.w * &sum * 0.1;
            assert_relative_eq!(y.state(n).clone(), expected, epsilon = 1e-13);
            if n < 9 {
                sum += c.hs1.sig().column(n);
            }
        }
    }

    #[test]
    fn constructed_fit_zeroes_e2() {
        // σ₀ ≡ 0.5 and f ≡ 1, so w = 2 satisfies w·σ₀ = f exactly.
        let res = scalar_reservoir(0.0, 0.0, 0.0, 0.5f64.atanh());
        let hs = res.drive(&line(4, 0.1, 0.0), &DVector::zeros(1)).unwrap();
        let w = DMatrix::from_element(1, 1, 2.0);
        let s1 = StageOne::new(constant_field(), &res, &hs, &DVector::zeros(1), 0.0, ConstraintOptions::default()).unwrap();
        assert!(s1.residuals(&w).unwrap().e2.amax() < 1e-15);
        let ybar = s1.readout(&w).unwrap();
        let s2 = StageTwo::new(constant_field(), &res, &hs, &ybar, ConstraintOptions::default()).unwrap();
        assert!(s2.residuals(&w).unwrap().e2.amax() < 1e-15);
    }

    #[test]
    fn e1_rate_matches_tau_derivative() {
        let c = case(van_der_pol(), &[2.0, 0.0], 0.1, 6, 4, 5, ConstraintOptions::default());
        let tau = 0.1;
        let h = 1e-5;
        let pm = tau_derivative(&c.res, &c.hs1);
        for k in 0..4 {
            let z0 = c.hs1.z0().column(k).into_owned();
            let g = |t: f64| &c.w * (&z0 + c.res.b() * t).map(f64::tanh) * t;
            let fd = (g(tau + h) - g(tau - h)) / (2.0 * h);
            let analytic = &c.w * pm.column(k);
            assert_relative_eq!(fd, analytic, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_readout_stage_two() {
        let c = case(van_der_pol(), &[2.0, 0.0], 0.1, 10, 5, 2, ConstraintOptions::default());
        let w = DMatrix::zeros(2, 10);
        let y = c.stage2.readout(&w).unwrap();
        let r = c.stage2.residuals(&w).unwrap();
        for k in 0..5 {
            assert_eq!(y.state(k + 1), c.ybar.state(k));
            let f = van_der_pol().rhs(c.ybar.state(k));
            for i in 0..2 {
                assert_eq!(r.e1[(k, i)], f[i]);
                assert_eq!(r.e2[(k, i)], f[i]);
                assert_eq!(r.e3[(k, i)], 0.0);
            }
        }
    }

    #[test]
    fn stage_two_hand_case() {
        // σ = σ₀ = 0.5, σ̇ = 0.75, v = 1, b = 0, τ = 0.1, w = 1.
        let res = scalar_reservoir(0.0, 1.0, 0.0, 0.5f64.atanh());
        let ybar = line(3, 0.1, 0.0);
        let hs = res.drive(&ybar.slice(0, 2).unwrap(), &DVector::zeros(1)).unwrap();
        let s = StageTwo::new(decay(), &res, &hs, &ybar, ConstraintOptions::default()).unwrap();
        let r = s.residuals(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        for k in 0..2 {
            assert_relative_eq!(r.e3[(k, 0)], 0.0375, epsilon = 1e-15);
        }
    }

    #[test]
    fn one_step_stages_coincide() {
        let c = case(lorenz(), &[1.0, 1.0, 1.0], 0.03, 12, 4, 8, ConstraintOptions::default());
        let s2 = StageTwo::new(lorenz(), &c.res, &c.hs1, &c.stage1.readout(&c.w).unwrap(), ConstraintOptions::default()).unwrap();
        let a = c.stage1.readout(&c.w).unwrap();
        let b = s2.readout(&c.w).unwrap();
        assert_eq!(a.state(1), b.state(1));
    }

    #[test]
    fn stage_two_matches_dense_recomputation() {
        let c = case(van_der_pol(), &[2.0, 0.0], 0.1, 7, 5, 4, ConstraintOptions::default());
        let y = c.stage2.readout(&c.w).unwrap();
        for k in 0..5 {
            let mut inc = DVector::zeros(2);
            for i in 0..2 {
                for m in 0..7 {
                    inc[i] += c.w[(i, m)] * c.hs2.sig()[(m, k)];
                }
            }
            let expected = c.ybar.state(k) + inc * 0.1;
            assert_relative_eq!(y.state(k + 1).clone(), expected, epsilon = 1e-15);
        }
    }

    fn check_fd(system: OdeSystem, y0: &[f64], tau: f64, opts: ConstraintOptions) {
        let c = case(system, y0, tau, 10, 5, 11, opts);
        for (stage, name) in [
            (&c.stage1 as &dyn LeastSquaresProblem, "stage1"),
            (&c.stage2 as &dyn LeastSquaresProblem, "stage2"),
        ] {
            let analytic = stage.jacobian(&c.w).unwrap();
            let fd = fd_jacobian(|x| Ok(stage.residuals(x)?.stacked()), &c.w, 1e-6).unwrap();
            let err = relative_error(&analytic.j, &fd);
            assert!(err < 1e-5, "{} {name}: {err:e}", system.name());
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for (system, y0, tau) in benchmarks() {
            check_fd(system, &y0, tau, ConstraintOptions::default());
        }
    }

    #[test]
    fn jacobians_match_without_substitution_and_with_weights() {
        let opts = ConstraintOptions {
            e3_substitution: false,
            family_weights: [1.0, 0.5, 2.0],
        };
        for (system, y0, tau) in benchmarks() {
            check_fd(system, &y0, tau, opts);
        }
    }

    #[test]
    fn linear_field_gives_constant_e2_block() {
        let c = case(harmonic(), &[1.0, 0.0], 0.05, 10, 5, 6, ConstraintOptions::default());
        let a = c.stage1.jacobian(&c.w).unwrap().family_block(1);
        let b = c.stage1.jacobian(&(&c.w * 3.0)).unwrap().family_block(1);
        assert_eq!(a, b);
    }

    #[test]
    fn stage_two_e2_block_is_minus_sigma0() {
        let c = case(van_der_pol(), &[2.0, 0.0], 0.1, 6, 4, 9, ConstraintOptions::default());
        let jac = c.stage2.jacobian(&c.w).unwrap();
        let other = c.stage2.jacobian(&(&c.w * -2.0)).unwrap();
        assert_eq!(jac.family_block(1), other.family_block(1));
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..2 {
                    for m in 0..6 {
                        let expected = if i == j { -c.hs2.sig0()[(m, k)] } else { 0.0 };
                        assert_eq!(jac.j[(jac.row(1, k, i), jac.col(j, m))], expected);
                    }
                }
            }
        }
    }

    #[test]
    fn e3_rows_vanish_without_recurrence_or_coupling() {
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let res = Reservoir::from_parts(
            CsrMatrix::zeros(n, n),
            DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0)),
            DVector::zeros(n),
            DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            ReservoirParams::default(),
        )
        .unwrap();
        let trial = euler(&harmonic(), &DVector::from_row_slice(&[1.0, 0.0]), 0.05, 6).unwrap();
        let hs = res.drive(&trial.slice(0, 6).unwrap(), &DVector::zeros(n)).unwrap();
        let s = StageOne::new(harmonic(), &res, &hs, trial.state(0), 0.0, ConstraintOptions::default()).unwrap();
        let w = random_readout(2, n, 1.0, 3);
        assert!(s.jacobian(&w).unwrap().family_block(2).iter().all(|&x| x == 0.0));
        assert!(s.residuals(&w).unwrap().e3.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stage_two_e3_scaling() {
        let c = case(van_der_pol(), &[2.0, 0.0], 0.1, 8, 5, 12, ConstraintOptions::default());
        let e3 = |w: &ReadoutMatrix| c.stage2.residuals(w).unwrap().e3;
        let (plus, minus) = (e3(&c.w), e3(&(-&c.w)));
        let quad = (&plus + &minus) / 2.0;
        let lin = (&plus - &minus) / 2.0;
        assert_relative_eq!(e3(&(&c.w * 2.0)), &quad * 4.0 + &lin * 2.0, epsilon = 1e-12);
        let j3 = |w: &ReadoutMatrix| c.stage2.jacobian(w).unwrap().family_block(2);
        let j0 = j3(&DMatrix::zeros(2, 8));
        let growth = j3(&(&c.w * 2.0)) - &j0;
        assert_relative_eq!(growth, (j3(&c.w) - &j0) * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn fd_jacobian_of_affine_map_is_exact() {
        let a = random_readout(7, 6, 1.0, 4);
        let w = random_readout(2, 3, 1.0, 5);
        let fd = fd_jacobian(|x| Ok(&a * flatten(x)), &w, 1e-3).unwrap();
        assert_relative_eq!(fd, a, epsilon = 1e-10);
        assert!(fd_jacobian(|x| Ok(flatten(x)), &w, 0.0).is_err());
    }

    #[test]
    fn fd_jacobian_is_step_robust() {
        let c = case(lorenz(), &[1.0, 1.0, 1.0], 0.03, 8, 4, 13, ConstraintOptions::default());
        let f = |x: &ReadoutMatrix| Ok(c.stage2.residuals(x)?.stacked());
        let a = fd_jacobian(f, &c.w, 1e-6).unwrap();
        let b = fd_jacobian(f, &c.w, 1e-7).unwrap();
        assert!(relative_error(&a, &b) < 1e-4);
    }

    #[test]
    fn e3_matches_directional_oracles() {
        for (system, y0, tau) in benchmarks() {
            let c = case(system, &y0, tau, 12, 6, 21, ConstraintOptions::default());
            let o1 = e3_oracle_stage1(&c.res, &c.hs1, &c.inputs1, &c.ybar, &c.w, 1e-6);
            let got1 = c.stage1.residuals(&c.w).unwrap().e3;
            assert!((&got1 - &o1).amax() < 1e-6, "{} stage1", system.name());
            let o2 = e3_oracle_stage2(&c.res, &c.hs2, &c.ybar, &c.w, 1e-6);
            let got2 = c.stage2.residuals(&c.w).unwrap().e3;
            assert!((&got2 - &o2).amax() < 1e-6, "{} stage2", system.name());
        }
    }

    #[test]
    fn flatten_round_trips_row_major() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = flatten(&w);
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unflatten(&x, 2, 3), w);
    }

    #[test]
    fn rejects_bad_readout_shape() {
        let c = case(harmonic(), &[1.0, 0.0], 0.05, 5, 3, 1, ConstraintOptions::default());
        assert!(matches!(
            c.stage1.residuals(&DMatrix::zeros(3, 5)),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut w = DMatrix::zeros(2, 5);
        w[(0, 0)] = f64::NAN;
        assert!(matches!(c.stage2.residuals(&w), Err(Error::NonFinite { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn loss_is_squared_norm_of_stacked(
            seed in any::<u64>(), w1 in 0.0f64..3.0, w2 in 0.0f64..3.0, w3 in 0.0f64..3.0
        ) {
            let opts = ConstraintOptions { e3_substitution: true, family_weights: [w1, w2, w3] };
            let c = case(problems::van_der_pol(), &[2.0, 0.0], 0.1, 6, 5, seed, opts);
            for r in [c.stage1.residuals(&c.w).unwrap(), c.stage2.residuals(&c.w).unwrap()] {
                let by = r.loss_by_family();
                prop_assert!((r.loss_total() - by.iter().sum::<f64>()).abs() <= 1e-12 * r.loss_total().max(1.0));
                let stacked = r.stacked().norm_squared();
                prop_assert!((r.loss_total() - stacked).abs() <= 1e-12 * stacked.max(1.0));
            }
        }

        #[test]
        fn jacobians_match_fd_on_random_seeds(seed in 0u64..10_000, which in 0usize..3) {
            let (system, y0, tau) = benchmarks().swap_remove(which);
            let c = case(system, &y0, tau, 8, 4, seed, ConstraintOptions::default());
            for stage in [&c.stage1 as &dyn LeastSquaresProblem, &c.stage2] {
                let analytic = stage.jacobian(&c.w).unwrap();
                let fd = fd_jacobian(|x| Ok(stage.residuals(x)?.stacked()), &c.w, 1e-6).unwrap();
                prop_assert!(relative_error(&analytic.j, &fd) < 1e-5);
            }
        }
    }
}
