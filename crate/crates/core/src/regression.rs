//! Ridge initial guess and the regularised Gauss-Newton iteration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constraints::{flatten, unflatten, ReadoutMatrix, ResidualJacobian, StageResiduals};
use crate::error::{ensure_finite, Error, Result};
use crate::reservoir::HiddenSequence;
use crate::trial::Trajectory;

/// Smallest regularisation ever used in a solve.
pub const LAMBDA_FLOOR: f64 = 1e-12;

const REFINE_SWEEPS: usize = 2;

/// A least-squares problem in a d × N readout matrix.
pub trait LeastSquaresProblem {
    /// `(d, N)` of the readout matrix.
    fn shape(&self) -> (usize, usize);
    fn residuals(&self, w: &ReadoutMatrix) -> Result<StageResiduals>;
    fn jacobian(&self, w: &ReadoutMatrix) -> Result<ResidualJacobian>;
}

/// How each Gauss-Newton update is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// The new weights minimise the linearised loss plus `λ‖w‖²`,
    /// i.e. `(JᵀJ + λI)Δ = −(Jᵀe + λw)`. A fixed point is a stationary
    /// point of the regularised loss, so the iteration settles.
    #[default]
    Ridge,
    /// Plain damped step `(JᵀJ + λI)Δ = −Jᵀe`.
    Damped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnConfig {
    pub lambda: f64,
    pub max_iters: usize,
    #[serde(default = "default_rel_loss_tol")]
    pub rel_loss_tol: f64,
    #[serde(default = "yes")]
    pub backtracking: bool,
    #[serde(default = "default_halvings")]
    pub backtrack_max_halvings: usize,
    #[serde(default)]
    pub step_rule: StepRule,
}

fn default_rel_loss_tol() -> f64 {
    1e-5
}

fn yes() -> bool {
    true
}

fn default_halvings() -> usize {
    20
}

impl Default for GnConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-7,
            max_iters: 10,
            rel_loss_tol: default_rel_loss_tol(),
            backtracking: true,
            backtrack_max_halvings: default_halvings(),
            step_rule: StepRule::Ridge,
        }
    }
}

impl GnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.rel_loss_tol >= 0.0) {
            return Err(Error::InvalidConfig("rel_loss_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// One Gauss-Newton iteration as accepted by the line search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub loss: f64,
    pub loss_by_family: [f64; 3],
    /// Quantity the line search keeps from increasing: `loss + λ‖w‖²_F`
    /// under [`StepRule::Ridge`], `loss` under [`StepRule::Damped`].
    pub objective: f64,
    /// `‖Δw‖_F / ‖w‖_F` of the accepted step (plain `‖Δw‖_F` from w = 0).
    pub rel_step: f64,
    /// `|ΔL / L|`.
    pub rel_loss_change: f64,
    pub halvings: usize,
    /// No halving of the step reduced the objective; the weights were kept.
    pub stalled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    /// Lowest-loss weights seen.
    pub w: ReadoutMatrix,
    pub history: Vec<IterationRecord>,
    pub initial_loss: f64,
    pub initial_loss_by_family: [f64; 3],
    pub initial_objective: f64,
}

impl StageOutcome {
    /// Data loss of the returned weights.
    pub fn final_loss(&self) -> f64 {
        let mut best = (self.initial_objective, self.initial_loss);
        for r in &self.history {
            if r.objective < best.0 {
                best = (r.objective, r.loss);
            }
        }
        best.1
    }

    /// First iteration whose relative loss change fell below `tol`.
    pub fn converged_at(&self, tol: f64) -> Option<usize> {
        self.history
            .iter()
            .find(|r| r.rel_loss_change < tol)
            .map(|r| r.iter)
    }
}

/// `argmin ‖A·x − rhs‖² + λ‖x‖²`, column by column of `rhs`.
///
/// Tall systems use the n × n normal matrix `AᵀA + λI`; wide ones the
/// m × m form `Aᵀ(AAᵀ + λI)⁻¹`. Both are Cholesky-factorised, followed by
/// a few sweeps of iterative refinement with residuals formed from `A`
/// itself, since the normal matrix squares the condition number.
pub fn ridge_solve(a: &DMatrix<f64>, rhs: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if rhs.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch {
            what: "least-squares right-hand side",
            expected: a.nrows(),
            actual: rhs.nrows(),
        });
    }
    ensure_finite("least-squares matrix", a.iter())?;
    ensure_finite("least-squares right-hand side", rhs.iter())?;
    let lambda = lambda.max(LAMBDA_FLOOR);
    let (m, n) = a.shape();
    let at = a.transpose();
    let x = if m >= n {
        let mut normal = &at * a;
        for i in 0..n {
            normal[(i, i)] += lambda;
        }
        let chol = normal.cholesky().ok_or(Error::SingularSystem)?;
        let mut x = chol.solve(&(&at * rhs));
        for _ in 0..REFINE_SWEEPS {
            let r = &at * (rhs - a * &x) - &x * lambda;
            x += chol.solve(&r);
        }
        x
    } else {
        let mut gram = a * &at;
        for i in 0..m {
            gram[(i, i)] += lambda;
        }
        let chol = gram.cholesky().ok_or(Error::SingularSystem)?;
        let mut y = chol.solve(rhs);
        for _ in 0..REFINE_SWEEPS {
            let r = rhs - a * (&at * &y) - &y * lambda;
            y += chol.solve(&r);
        }
        &at * y
    };
    ensure_finite("least-squares solution", x.iter())?;
    Ok(x)
}

fn ridge_solve_vec(a: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let rhs = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
    let x = ridge_solve(a, &rhs, lambda)?;
    Ok(x.column(0).into_owned())
}

/// Readout that makes `yᵏ + τ·w·σᵏ` replicate the next trial point, in the
/// ridge sense. `kept` must hold one more point than `hs` has steps.
pub fn ridge_initial_guess(
    hs: &HiddenSequence,
    kept: &Trajectory,
    lambda: f64,
) -> Result<ReadoutMatrix> {
    let p = hs.n_steps();
    if kept.len() != p + 1 {
        return Err(Error::LengthMismatch {
            expected: p + 1,
            actual: kept.len(),
        });
    }
    let tau = kept.tau();
    let d = kept.dim();
    let features = hs.sig().transpose();
    let targets = DMatrix::from_fn(p, d, |k, i| {
        (kept.state(k + 1)[i] - kept.state(k)[i]) / tau
    });
    Ok(ridge_solve(&features, &targets, lambda)?.transpose())
}

/// Damped Gauss-Newton step: solves `(JᵀJ + λI)·Δ = −Jᵀe`.
pub fn gn_step(j: &DMatrix<f64>, e: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    ridge_solve_vec(j, &(-e), lambda)
}

/// Step to the minimiser of `‖e + J·(u − w)‖² + λ‖u‖²`, i.e.
/// `(JᵀJ + λI)·Δ = −(Jᵀe + λw)`.
pub fn ridge_step(
    j: &DMatrix<f64>,
    e: &DVector<f64>,
    w: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let target = j * w - e;
    Ok(ridge_solve_vec(j, &target, lambda)? - w)
}

impl StepRule {
    /// Line-search objective for data loss `loss` at weights `w`.
    pub fn objective(self, loss: f64, w: &ReadoutMatrix, lambda: f64) -> f64 {
        match self {
            StepRule::Ridge => loss + lambda.max(LAMBDA_FLOOR) * w.norm_squared(),
            StepRule::Damped => loss,
        }
    }
}

/// Iterates Gauss-Newton steps from `w0`.
///
/// With backtracking the step is halved until the step rule's objective
/// does not increase; if every halving fails the weights are kept, the
/// record is flagged as stalled and iteration stops. Stops early once the
/// data loss changes by less than `rel_loss_tol` (relative). Returns the
/// weights with the lowest objective seen.
pub fn solve_stage<P>(problem: &P, w0: &ReadoutMatrix, cfg: &GnConfig) -> Result<StageOutcome>
where
    P: LeastSquaresProblem + ?Sized,
{
    cfg.validate()?;
    let (d, n) = problem.shape();
    if w0.shape() != (d, n) {
        return Err(Error::DimensionMismatch {
            what: "initial readout",
            expected: d * n,
            actual: w0.len(),
        });
    }
    let mut w = w0.clone();
    let mut res = problem.residuals(&w)?;
    let mut loss = res.loss_total();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "initial loss",
            index: 0,
        });
    }
    let merit = |loss: f64, w: &ReadoutMatrix| cfg.step_rule.objective(loss, w, cfg.lambda);
    let mut objective = merit(loss, &w);
    let initial_loss = loss;
    let initial_loss_by_family = res.loss_by_family();
    let initial_objective = objective;
    let mut best = (objective, w.clone());
    let mut history = Vec::new();

    for iter in 1..=cfg.max_iters {
        let jac = problem.jacobian(&w)?;
        let e = res.stacked();
        let x = flatten(&w);
        let delta = match cfg.step_rule {
            StepRule::Ridge => ridge_step(&jac.j, &e, &x, cfg.lambda)?,
            StepRule::Damped => gn_step(&jac.j, &e, cfg.lambda)?,
        };

        let mut scale = 1.0;
        let mut halvings = 0;
        let accepted = loop {
            let candidate = unflatten(&(&x + &delta * scale), d, n);
            let trial = problem
                .residuals(&candidate)
                .ok()
                .filter(|r| r.loss_total().is_finite());
            match trial {
                Some(r) if !cfg.backtracking || merit(r.loss_total(), &candidate) <= objective => {
                    break Some((candidate, r));
                }
                None if !cfg.backtracking => break None,
                _ => {}
            }
            if halvings == cfg.backtrack_max_halvings {
                break None;
            }
            scale *= 0.5;
            halvings += 1;
        };

        let Some((candidate, new_res)) = accepted else {
            log::warn!("iteration {iter}: no step reduced the objective, keeping best weights");
            history.push(IterationRecord {
                iter,
                loss,
                loss_by_family: res.loss_by_family(),
                objective,
                rel_step: 0.0,
                rel_loss_change: 0.0,
                halvings,
                stalled: true,
            });
            break;
        };

        let new_loss = new_res.loss_total();
        let new_objective = merit(new_loss, &candidate);
        let step_norm = delta.norm() * scale;
        let w_norm = x.norm();
        let rel_step = if w_norm > 0.0 { step_norm / w_norm } else { step_norm };
        let rel_loss_change = if loss > 0.0 {
            (new_loss - loss).abs() / loss
        } else {
            0.0
        };
        let record = IterationRecord {
            iter,
            loss: new_loss,
            loss_by_family: new_res.loss_by_family(),
            objective: new_objective,
            rel_step,
            rel_loss_change,
            halvings,
            stalled: false,
        };
        log::debug!(
            "iter {iter}: loss {new_loss:.6e} rel_step {rel_step:.3e} rel_loss {rel_loss_change:.3e} halvings {halvings}"
        );
        history.push(record);
        w = candidate;
        res = new_res;
        loss = new_loss;
        objective = new_objective;
        if objective < best.0 {
            best = (objective, w.clone());
        }
        if rel_loss_change < cfg.rel_loss_tol {
            break;
        }
    }

    Ok(StageOutcome {
        w: best.1,
        history,
        initial_loss,
        initial_loss_by_family,
        initial_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{ConstraintOptions, StageTwo};
    use crate::problems;
    use crate::reservoir::{self, NormKind, ReservoirParams};
    use crate::trial;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn normal_equation_gap(j: &DMatrix<f64>, e: &DVector<f64>, delta: &DVector<f64>, lambda: f64) -> f64 {
        let jte = j.transpose() * e;
        let lhs = j.transpose() * (j * delta) + delta * lambda + &jte;
        lhs.norm() / jte.norm()
    }

    /// `e(w) = A·vec(w) − β`, reported as a single family.
    struct Affine {
        a: DMatrix<f64>,
        beta: DVector<f64>,
        d: usize,
        n: usize,
    }

    impl LeastSquaresProblem for Affine {
        fn shape(&self) -> (usize, usize) {
            (self.d, self.n)
        }
        fn residuals(&self, w: &ReadoutMatrix) -> Result<StageResiduals> {
            let e = &self.a * flatten(w) - &self.beta;
            let e1 = DMatrix::from_column_slice(e.len(), 1, e.as_slice());
            Ok(StageResiduals::new(
                e1,
                DMatrix::zeros(0, 1),
                DMatrix::zeros(0, 1),
                [1.0; 3],
            ))
        }
        fn jacobian(&self, _: &ReadoutMatrix) -> Result<ResidualJacobian> {
            Ok(ResidualJacobian {
                j: self.a.clone(),
                n_steps: self.a.nrows(),
                dim: 1,
                n_neurons: self.n,
            })
        }
    }

    fn affine(m: usize, d: usize, n: usize, seed: u64) -> Affine {
        Affine {
            a: random_matrix(m, d * n, seed),
            beta: random_matrix(m, 1, seed + 1).column(0).into_owned(),
            d,
            n,
        }
    }

    #[test]
    fn ridge_solve_satisfies_normal_equations_in_both_forms() {
        for (m, n) in [(40, 12), (12, 40)] {
            let a = random_matrix(m, n, 3);
            let b = random_matrix(m, 2, 4);
            let lambda = 1e-3;
            let x = ridge_solve(&a, &b, lambda).unwrap();
            let gap = a.transpose() * (&a * &x - &b) + &x * lambda;
            assert!(gap.norm() < 1e-10 * (a.transpose() * &b).norm(), "{m}x{n}");
        }
    }

    #[test]
    fn ridge_solve_vanishes_for_huge_lambda() {
        let a = random_matrix(30, 8, 5);
        let b = random_matrix(30, 1, 6);
        assert!(ridge_solve(&a, &b, 1e12).unwrap().norm() < 1e-9);
    }

    #[test]
    fn ridge_solve_rejects_non_finite_input() {
        let mut a = random_matrix(5, 3, 1);
        a[(2, 1)] = f64::NAN;
        let b = random_matrix(5, 1, 2);
        assert!(matches!(ridge_solve(&a, &b, 1e-3), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn initial_guess_recovers_a_feature() {
        let res = reservoir::build(
            &ReservoirParams {
                n_neurons: 6,
                connectivity: 0.5,
                spectral_norm: 1.0,
                norm_kind: NormKind::Frobenius,
                input_scale: 1.0,
                seed: 2,
            },
            1,
        )
        .unwrap();
        let tau = 0.1;
        let inputs = trial::Trajectory::new(
            0.0,
            tau,
            (0..40).map(|k| DVector::from_element(1, (k as f64 * 0.3).sin())).collect(),
        )
        .unwrap();
        let hs = res.drive(&inputs, &DVector::zeros(6)).unwrap();
        // Targets equal to the first hidden feature.
        let mut states = vec![DVector::zeros(1)];
        for k in 0..40 {
            let next = &states[k] + DVector::from_element(1, tau * hs.sig()[(0, k)]);
            states.push(next);
        }
        let kept = trial::Trajectory::new(0.0, tau, states).unwrap();
        let lambda = 1e-10;
        let w = ridge_initial_guess(&hs, &kept, lambda).unwrap();
        assert_relative_eq!(w[(0, 0)], 1.0, epsilon = 1e-4);
        for m in 1..6 {
            assert!(w[(0, m)].abs() < 1e-4);
        }
        assert!(ridge_initial_guess(&hs, &kept, 1e14).unwrap().norm() < 1e-10);
    }

    #[test]
    fn gn_step_damping_limit() {
        let j = random_matrix(20, 6, 1);
        let e = random_matrix(20, 1, 2).column(0).into_owned();
        let delta = gn_step(&j, &e, 1e12).unwrap();
        let expected = (j.transpose() * &e).norm() / 1e12;
        assert!(delta.norm() <= 1.01 * expected);
    }

    #[test]
    fn gn_step_is_exact_on_affine_residuals() {
        let p = affine(30, 2, 5, 9);
        let lambda = 1e-12;
        let w0 = DMatrix::zeros(2, 5);
        let e0 = p.residuals(&w0).unwrap().stacked();
        let d1 = gn_step(&p.a, &e0, lambda).unwrap();
        let optimum = ridge_solve_vec(&p.a, &p.beta, lambda).unwrap();
        assert_relative_eq!(d1, optimum, epsilon = 1e-10);
        let w1 = unflatten(&d1, 2, 5);
        let e1 = p.residuals(&w1).unwrap().stacked();
        let d2 = gn_step(&p.a, &e1, lambda).unwrap();
        assert!(d2.norm() < 1e-10);
    }

    #[test]
    fn solve_stage_is_exact_on_affine_residuals() {
        for (m, seed) in [(30, 1), (8, 2)] {
            let p = affine(m, 2, 7, seed);
            let cfg = GnConfig {
                lambda: 1e-6,
                ..GnConfig::default()
            };
            let out = solve_stage(&p, &DMatrix::zeros(2, 7), &cfg).unwrap();
            assert!(out.history.len() >= 2);
            assert_eq!(out.history[0].halvings, 0);
            assert!(out.history[1].rel_step < 1e-8, "{}", out.history[1].rel_step);
            let optimum = ridge_solve_vec(&p.a, &p.beta, 1e-6).unwrap();
            assert_relative_eq!(flatten(&out.w), optimum, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_iteration_gives_single_record() {
        let p = affine(20, 1, 4, 3);
        let cfg = GnConfig {
            max_iters: 1,
            ..GnConfig::default()
        };
        let out = solve_stage(&p, &DMatrix::zeros(1, 4), &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].iter, 1);
    }

    #[test]
    fn config_validation() {
        assert!(GnConfig { lambda: 0.0, ..GnConfig::default() }.validate().is_err());
        assert!(GnConfig { max_iters: 0, ..GnConfig::default() }.validate().is_err());
        assert!(GnConfig::default().validate().is_ok());
    }

    fn nonlinear_instance(seed: u64) -> (StageTwo, ReadoutMatrix) {
        let system = problems::van_der_pol();
        let res = reservoir::build(
            &ReservoirParams {
                n_neurons: 8,
                connectivity: 0.4,
                spectral_norm: 3.0,
                norm_kind: NormKind::Frobenius,
                input_scale: 1.0,
                seed,
            },
            2,
        )
        .unwrap();
        let ybar = trial::euler(&system, &DVector::from_row_slice(&[2.0, 0.0]), 0.1, 12).unwrap();
        let inputs = ybar.slice(0, 12).unwrap();
        let hs = res.drive(&inputs, &DVector::zeros(8)).unwrap();
        let stage = StageTwo::new(system, &res, &hs, &ybar, ConstraintOptions::default()).unwrap();
        let w = random_matrix(2, 8, seed ^ 0xabc);
        (stage, w)
    }

    #[test]
    fn damped_step_descends_on_nonlinear_instance() {
        let (stage, w) = nonlinear_instance(4);
        let r = stage.residuals(&w).unwrap();
        let jac = stage.jacobian(&w).unwrap();
        let delta = gn_step(&jac.j, &r.stacked(), 1e-6).unwrap();
        let shorter = unflatten(&(flatten(&w) + delta * 1e-3), 2, 8);
        assert!(stage.residuals(&shorter).unwrap().loss_total() < r.loss_total());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gn_step_satisfies_normal_equations(
            seed in any::<u64>(), m in 1usize..40, n in 1usize..40, log_lambda in -8.0f64..2.0
        ) {
            let j = random_matrix(m, n, seed);
            let e = random_matrix(m, 1, seed.wrapping_add(1)).column(0).into_owned();
            let lambda = 10f64.powf(log_lambda);
            let delta = gn_step(&j, &e, lambda).unwrap();
            prop_assert!(normal_equation_gap(&j, &e, &delta, lambda) <= 1e-8);
        }

        #[test]
        fn accepted_losses_never_increase(seed in 0u64..1000, rule in prop_oneof![Just(StepRule::Ridge), Just(StepRule::Damped)]) {
            let (stage, w) = nonlinear_instance(seed);
            let cfg = GnConfig {
                lambda: 1e-6,
                max_iters: 6,
                rel_loss_tol: 0.0,
                step_rule: rule,
                ..GnConfig::default()
            };
            let out = solve_stage(&stage, &w, &cfg).unwrap();
            let mut prev = out.initial_objective;
            for rec in &out.history {
                prop_assert!(rec.objective <= prev);
                prop_assert!(rec.loss.is_finite() && rec.loss >= 0.0);
                prev = rec.objective;
            }
            let last = out.history.last().unwrap();
            prop_assert_eq!(out.final_loss(), last.loss);
            prop_assert_eq!(stage.residuals(&out.w).unwrap().loss_total(), last.loss);
        }
    }
}
