//! Finite-difference checks of the analytic Jacobians and of e₃ on a
//! shrunken copy of a run configuration.

use nalgebra::{DMatrix, DVector};

use crate::config::RunConfig;
use crate::constraints::{fd_jacobian, ReadoutMatrix, StageOne, StageTwo};
use crate::error::{Error, Result};
use crate::pipeline::trial_solution;
use crate::problems::OdeSystem;
use crate::regression::{ridge_initial_guess, LeastSquaresProblem};
use crate::reservoir::{self, HiddenSequence, Reservoir};
use crate::trial::Trajectory;

/// Largest accepted `max|analytic − fd| / max|fd|`.
pub const JACOBIAN_TOL: f64 = 1e-5;
/// Largest accepted absolute e₃ deviation from the directional oracle.
pub const E3_TOL: f64 = 1e-6;
/// Neuron and step caps of the shrunken instance.
pub const MAX_NEURONS: usize = 20;
pub const MAX_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub fd_step: f64,
    /// Negates the e₂ block of the analytic Jacobians before comparing.
    /// A negative control: the check must then fail.
    pub corrupt_sign: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-6,
            corrupt_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub problem: String,
    pub n_neurons: usize,
    pub n_steps: usize,
    pub stage1_jacobian: f64,
    pub stage2_jacobian: f64,
    pub stage1_e3: f64,
    pub stage2_e3: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.stage1_jacobian < JACOBIAN_TOL && self.stage2_jacobian < JACOBIAN_TOL
    }
}

/// `max|analytic − reference| / max|reference|`.
pub fn relative_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = reference.amax();
    let diff = (analytic - reference).amax();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Analytic vs central-difference Jacobian of `problem` at `w`.
pub fn jacobian_error<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    w: &ReadoutMatrix,
    step: f64,
    corrupt_sign: bool,
) -> Result<f64> {
    let mut analytic = problem.jacobian(w)?;
    if corrupt_sign {
        let rows = analytic.n_steps * analytic.dim;
        let mut block = analytic.j.rows_mut(rows, rows);
        block *= -1.0;
    }
    let fd = fd_jacobian(|x| Ok(problem.residuals(x)?.stacked()), w, step)?;
    Ok(relative_error(&analytic.j, &fd))
}

/// Independent re-evaluation of one reservoir step.
struct Step<'a> {
    res: &'a Reservoir,
    h: DVector<f64>,
    tau: f64,
}

impl Step<'_> {
    fn z0(&self, h: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        let omega = self.res.omega().to_dense();
        omega * h + self.res.v() * input + self.res.c()
    }

    fn increment(&self, w: &ReadoutMatrix, h: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        let z = self.z0(h, input) + self.res.b() * self.tau;
        w * z.map(f64::tanh) * self.tau
    }

    /// `(σ₀, σ + τ·b⊙σ̇)` at the unperturbed point.
    fn activations(&self, input: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let z0 = self.z0(&self.h, input);
        let sig0 = z0.map(f64::tanh);
        let sig = (&z0 + self.res.b() * self.tau).map(f64::tanh);
        let p = DVector::from_fn(sig.len(), |m, _| {
            sig[m] + self.tau * self.res.b()[m] * (1.0 - sig[m] * sig[m])
        });
        (sig0, p)
    }
}

/// Stage-one e₃ from its definition: the directional derivative of
/// `ȳᵏ⁺¹` along `σ₀/τ` in hidden-state space, plus `w·σ₀ − w·p`.
/// `inputs` are the trial points that drove `hs`; `ybar` the stage-one
/// output. Central differences with step `eps`; returns `P × d`.
pub fn e3_oracle_stage1(
    res: &Reservoir,
    hs: &HiddenSequence,
    inputs: &Trajectory,
    ybar: &Trajectory,
    w: &ReadoutMatrix,
    eps: f64,
) -> DMatrix<f64> {
    let (p, d) = (hs.n_steps(), w.nrows());
    let mut out = DMatrix::zeros(p, d);
    for k in 0..p {
        let step = Step {
            res,
            h: hs.h().column(k).into_owned(),
            tau: hs.tau(),
        };
        let u = inputs.state(k);
        let (sig0, pm) = step.activations(u);
        let dir = &sig0 / step.tau;
        let anchor = ybar.state(k);
        let plus = anchor + step.increment(w, &(&step.h + &dir * eps), u);
        let minus = anchor + step.increment(w, &(&step.h - &dir * eps), u);
        let deriv = (plus - minus) / (2.0 * eps);
        let e3 = w * &sig0 + deriv - w * &pm;
        out.set_row(k, &e3.transpose());
    }
    out
}

/// Stage-two e₃ from its definition: the directional derivative of
/// `yᵏ⁺¹(ȳᵏ)` along `w·σ₀` minus `w·(σ + τ·b⊙σ̇)`. `ybar` holds the
/// inputs that drove `hs`. Returns `P × d`.
pub fn e3_oracle_stage2(
    res: &Reservoir,
    hs: &HiddenSequence,
    ybar: &Trajectory,
    w: &ReadoutMatrix,
    eps: f64,
) -> DMatrix<f64> {
    let (p, d) = (hs.n_steps(), w.nrows());
    let mut out = DMatrix::zeros(p, d);
    for k in 0..p {
        let step = Step {
            res,
            h: hs.h().column(k).into_owned(),
            tau: hs.tau(),
        };
        let y = ybar.state(k);
        let (sig0, pm) = step.activations(y);
        let dir = w * &sig0;
        let at = |x: &DVector<f64>| x + step.increment(w, &step.h, x);
        let deriv = (at(&(y + &dir * eps)) - at(&(y - &dir * eps))) / (2.0 * eps);
        let e3 = deriv - w * &pm;
        out.set_row(k, &e3.transpose());
    }
    out
}

/// Everything needed to check both stages on a small instance.
pub struct Instance {
    pub system: OdeSystem,
    pub reservoir: Reservoir,
    pub stage1_inputs: Trajectory,
    pub stage1_hidden: HiddenSequence,
    pub stage1: StageOne,
    pub w1: ReadoutMatrix,
    pub ybar: Trajectory,
    pub stage2_hidden: HiddenSequence,
    pub stage2: StageTwo,
    pub w2: ReadoutMatrix,
}

/// Shrinks `cfg` to at most 20 neurons and 10 steps and assembles both
/// stages at the ridge initial guess.
pub fn shrunken_instance(cfg: &RunConfig) -> Result<Instance> {
    let mut cfg = cfg.clone();
    cfg.reservoir.n_neurons = cfg.reservoir.n_neurons.min(MAX_NEURONS);
    cfg.n_points = cfg.n_points.min(MAX_STEPS);
    cfg.validate()?;
    let system = cfg.system()?;
    let opts = cfg.constraint_options();
    let (wl, p) = (cfg.n_washout, cfg.n_points);

    let trial = trial_solution(&cfg)?;
    let res = reservoir::build(&cfg.reservoir, system.dim())?;
    let h0 = DVector::zeros(res.n_neurons());
    let hs1 = res.drive(&trial.slice(0, wl + p)?, &h0)?.skip(wl)?;
    let kept = trial.slice(wl, p + 1)?;
    let w1 = ridge_initial_guess(&hs1, &kept, cfg.stage1.lambda)?;
    let stage1 = StageOne::new(system, &res, &hs1, kept.state(0), kept.t0(), opts)?;
    let ybar = stage1.readout(&w1)?;

    let inputs2 = trial.slice(0, wl)?.concat(&ybar.slice(0, p)?)?;
    let hs2 = res.drive(&inputs2, &h0)?.skip(wl)?;
    let stage2 = StageTwo::new(system, &res, &hs2, &ybar, opts)?;
    // Perturb away from w̄ so stage two is not checked at a special point.
    let w2 = w1.map(|x| 0.9 * x);

    Ok(Instance {
        system,
        reservoir: res,
        stage1_inputs: trial.slice(wl, p)?,
        stage1_hidden: hs1,
        stage1,
        w1,
        ybar,
        stage2_hidden: hs2,
        stage2,
        w2,
    })
}

fn e3_gap(analytic: &DMatrix<f64>, oracle: &DMatrix<f64>) -> Result<f64> {
    if analytic.shape() != oracle.shape() {
        return Err(Error::DimensionMismatch {
            what: "e3 oracle",
            expected: analytic.len(),
            actual: oracle.len(),
        });
    }
    Ok((analytic - oracle).amax())
}

/// Runs both Jacobian checks and both e₃ checks.
pub fn run(cfg: &RunConfig, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let inst = shrunken_instance(cfg)?;
    let stage1_jacobian = jacobian_error(&inst.stage1, &inst.w1, opts.fd_step, opts.corrupt_sign)?;
    let stage2_jacobian = jacobian_error(&inst.stage2, &inst.w2, opts.fd_step, opts.corrupt_sign)?;

    // e₃ is checked in its substituted form, whatever the config says.
    let mut sub = cfg.constraint_options();
    sub.e3_substitution = true;
    let s1 = StageOne::new(
        inst.system,
        &inst.reservoir,
        &inst.stage1_hidden,
        inst.ybar.state(0),
        inst.ybar.t0(),
        sub,
    )?;
    let s2 = StageTwo::new(inst.system, &inst.reservoir, &inst.stage2_hidden, &inst.ybar, sub)?;
    let oracle1 = e3_oracle_stage1(
        &inst.reservoir,
        &inst.stage1_hidden,
        &inst.stage1_inputs,
        &inst.ybar,
        &inst.w1,
        opts.fd_step,
    );
    let oracle2 = e3_oracle_stage2(
        &inst.reservoir,
        &inst.stage2_hidden,
        &inst.ybar,
        &inst.w2,
        opts.fd_step,
    );
    let stage1_e3 = e3_gap(&s1.residuals(&inst.w1)?.e3, &oracle1)?;
    let stage2_e3 = e3_gap(&s2.residuals(&inst.w2)?.e3, &oracle2)?;

    Ok(GradcheckReport {
        problem: cfg.problem.clone(),
        n_neurons: inst.reservoir.n_neurons(),
        n_steps: inst.stage1_hidden.n_steps(),
        stage1_jacobian,
        stage2_jacobian,
        stage1_e3,
        stage2_e3,
    })
}
