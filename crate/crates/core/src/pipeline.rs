//! Two-pass training, closed-loop generation and evaluation.
//!
//! 1. Euler trial solution over washout + kept span.
//! 2. Stage one: reservoir driven by the trial, readout fitted from a ridge
//!    replication guess, output ȳ accumulated from the first kept point.
//! 3. Stage two: reservoir re-driven by the washout inputs followed by ȳ,
//!    readout warm-started from stage one, each output anchored on ȳ.
//! 4. Metrics against the exact flow when known, else a fine RK4 oracle.

use std::time::Instant;

use nalgebra::DVector;

use crate::config::RunConfig;
use crate::constraints::{advance, ReadoutMatrix, StageOne, StageResiduals, StageTwo};
use crate::error::{ensure_finite, Error, Phase, Result};
use crate::problems::OdeSystem;
use crate::regression::{ridge_initial_guess, solve_stage, IterationRecord, StageOutcome};
use crate::reservoir::{self, HiddenSequence, Reservoir, PRNG_NAME};
use crate::trial::{self, Trajectory};

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub system: OdeSystem,
    pub reservoir: Reservoir,
    pub w_stage1: ReadoutMatrix,
    pub w_stage2: ReadoutMatrix,
    /// Full trial solution, washout included.
    pub trial: Trajectory,
    /// Stage-one output, P+1 points from the first kept trial point.
    pub ybar: Trajectory,
    /// Stage-two output aligned with `ybar`.
    pub y_final: Trajectory,
    /// Trial points that condition the hidden state before the kept span.
    pub washout_inputs: Trajectory,
    /// Hidden data of the stage-two drive, washout removed.
    pub stage2_hidden: HiddenSequence,
}

impl TrainedModel {
    pub fn tau(&self) -> f64 {
        self.ybar.tau()
    }

    /// One closed-loop step: next hidden state and next output.
    pub fn autonomous_step(
        &self,
        h: &DVector<f64>,
        y: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let (z, _) = self.reservoir.preactivation(h, y, self.tau());
        let h_next = z.map(f64::tanh);
        let y_next = advance(y, &self.w_stage2, &h_next, self.tau());
        (h_next, y_next)
    }
}

/// Per-component and overall errors of one trajectory against another.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub max_abs: Vec<f64>,
    pub rmse: Vec<f64>,
    pub max_abs_overall: f64,
    pub rmse_overall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub initial_loss: f64,
    pub initial_loss_by_family: [f64; 3],
    pub final_loss: f64,
    pub history: Vec<IterationRecord>,
    pub converged_at: Option<usize>,
    pub residuals: StageResiduals,
}

impl StageReport {
    fn new(outcome: &StageOutcome, tol: f64, residuals: StageResiduals) -> Self {
        Self {
            initial_loss: outcome.initial_loss,
            initial_loss_by_family: outcome.initial_loss_by_family,
            final_loss: outcome.final_loss(),
            history: outcome.history.clone(),
            converged_at: outcome.converged_at(tol),
            residuals,
        }
    }
}

/// Where the reference trajectory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Analytic,
    Rk4,
}

impl ReferenceKind {
    pub fn name(self) -> &'static str {
        match self {
            ReferenceKind::Analytic => "analytic",
            ReferenceKind::Rk4 => "rk4",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: RunConfig,
    pub stage1: StageReport,
    pub stage2: StageReport,
    pub reference_kind: ReferenceKind,
    pub reference: Trajectory,
    /// Stage-two output against the reference.
    pub metrics: Metrics,
    pub metrics_stage1: Metrics,
    /// Kept trial span against the reference.
    pub metrics_trial: Metrics,
    pub autonomous: Option<Trajectory>,
    pub metrics_autonomous: Option<Metrics>,
    /// Wall-clock seconds per phase, in execution order.
    pub timing: Vec<(&'static str, f64)>,
    pub prng: &'static str,
    pub seed: u64,
}

struct Clock {
    start: Instant,
    laps: Vec<(&'static str, f64)>,
}

impl Clock {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            laps: Vec::new(),
        }
    }

    fn lap(&mut self, name: &'static str) {
        let now = Instant::now();
        let secs = (now - self.start).as_secs_f64();
        log::info!("{name} done in {secs:.3} s");
        self.laps.push((name, secs));
        self.start = now;
    }
}

/// Euler trial over washout + kept span (`n_washout + n_points + 1` points).
pub fn trial_solution(cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let system = cfg.system()?;
    trial::refine_downsample(
        &system,
        &cfg.initial_state(),
        cfg.tau,
        cfg.n_washout + cfg.n_points,
        cfg.refine_factor,
    )
    .map_err(|e| Error::TrialDiverged(Box::new(e)).in_phase(Phase::Trial))
}

/// Reference on the kept span, starting at `y_start`: the exact flow when
/// the system has one, otherwise RK4 at `τ / reference_refine`.
pub fn reference_solution(
    cfg: &RunConfig,
    system: &OdeSystem,
    y_start: &DVector<f64>,
    t_start: f64,
) -> Result<(ReferenceKind, Trajectory)> {
    if system.has_exact_flow() {
        let states = (0..=cfg.n_points)
            .map(|k| system.exact_flow(y_start, k as f64 * cfg.tau).unwrap())
            .collect();
        return Ok((ReferenceKind::Analytic, Trajectory::new(t_start, cfg.tau, states)?));
    }
    let fine = trial::rk4_refined(system, y_start, cfg.tau, cfg.n_points, cfg.reference_refine)
        .map_err(|e| e.in_phase(Phase::Reference))?;
    let shifted = Trajectory::new(t_start, fine.tau(), fine.states().to_vec())?;
    Ok((ReferenceKind::Rk4, shifted))
}

/// Full two-pass training run.
pub fn train(cfg: &RunConfig) -> Result<(TrainedModel, RunReport)> {
    cfg.validate()?;
    let system = cfg.system()?;
    let opts = cfg.constraint_options();
    let (w_len, p) = (cfg.n_washout, cfg.n_points);
    let mut clock = Clock::new();

    let trial = trial_solution(cfg)?;
    clock.lap("trial");

    let res = reservoir::build(&cfg.reservoir, system.dim()).map_err(|e| e.in_phase(Phase::Reservoir))?;
    clock.lap("reservoir");

    // Stage one.
    let tag1 = |e: Error| e.in_phase(Phase::Stage1);
    let drive_inputs = trial.slice(0, w_len + p).map_err(tag1)?;
    let h0 = DVector::zeros(res.n_neurons());
    let hs1 = res
        .drive(&drive_inputs, &h0)
        .and_then(|hs| hs.skip(w_len))
        .map_err(tag1)?;
    let kept = trial.slice(w_len, p + 1).map_err(tag1)?;
    let y_start = kept.state(0).clone();
    let w_init = ridge_initial_guess(&hs1, &kept, cfg.stage1.lambda).map_err(tag1)?;
    let stage1 = StageOne::new(system, &res, &hs1, &y_start, kept.t0(), opts).map_err(tag1)?;
    let out1 = solve_stage(&stage1, &w_init, &cfg.stage1).map_err(tag1)?;
    let ybar = stage1.readout(&out1.w).map_err(tag1)?;
    let res1 = stage1.residuals(&out1.w).map_err(tag1)?;
    clock.lap("stage1");

    // Stage two.
    let tag2 = |e: Error| e.in_phase(Phase::Stage2);
    let washout_inputs = trial.slice(0, w_len).map_err(tag2)?;
    let inputs2 = washout_inputs
        .concat(&ybar.slice(0, p).map_err(tag2)?)
        .map_err(tag2)?;
    let hs2 = res
        .drive(&inputs2, &h0)
        .and_then(|hs| hs.skip(w_len))
        .map_err(tag2)?;
    let stage2 = StageTwo::new(system, &res, &hs2, &ybar, opts).map_err(tag2)?;
    let out2 = solve_stage(&stage2, &out1.w, &cfg.stage2).map_err(tag2)?;
    let y_final = stage2.readout(&out2.w).map_err(tag2)?;
    let res2 = stage2.residuals(&out2.w).map_err(tag2)?;
    clock.lap("stage2");

    let (reference_kind, reference) = reference_solution(cfg, &system, &y_start, kept.t0())?;
    clock.lap("reference");

    let model = TrainedModel {
        system,
        reservoir: res,
        w_stage1: out1.w.clone(),
        w_stage2: out2.w.clone(),
        trial,
        ybar,
        y_final,
        washout_inputs,
        stage2_hidden: hs2,
    };

    let autonomous = match generate(&model, &y_start, p) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("autonomous generation failed: {e}");
            None
        }
    };
    clock.lap("autonomous");

    let metrics = evaluate(&model.y_final, &reference)?;
    let metrics_stage1 = evaluate(&model.ybar, &reference)?;
    let metrics_trial = evaluate(&kept, &reference)?;
    let metrics_autonomous = autonomous
        .as_ref()
        .map(|a| evaluate(a, &reference))
        .transpose()?;
    clock.lap("evaluate");

    let report = RunReport {
        config: cfg.clone(),
        stage1: StageReport::new(&out1, cfg.stage1.rel_loss_tol, res1),
        stage2: StageReport::new(&out2, cfg.stage2.rel_loss_tol, res2),
        reference_kind,
        reference,
        metrics,
        metrics_stage1,
        metrics_trial,
        autonomous,
        metrics_autonomous,
        timing: clock.laps,
        prng: PRNG_NAME,
        seed: cfg.reservoir.seed,
    };
    Ok((model, report))
}

/// Closed-loop run with the stage-two readout: the hidden state is
/// conditioned on the stored washout inputs, then each output is fed back
/// as the next input. Returns `n_steps + 1` points starting at `y_start`.
pub fn generate(model: &TrainedModel, y_start: &DVector<f64>, n_steps: usize) -> Result<Trajectory> {
    let tag = |e: Error| e.in_phase(Phase::Autonomous);
    let n = model.reservoir.n_neurons();
    if y_start.len() != model.system.dim() {
        return Err(tag(Error::DimensionMismatch {
            what: "autonomous start",
            expected: model.system.dim(),
            actual: y_start.len(),
        }));
    }
    let mut h = DVector::zeros(n);
    if !model.washout_inputs.is_empty() {
        let hs = model
            .reservoir
            .drive(&model.washout_inputs, &h)
            .map_err(tag)?;
        h = hs.h().column(hs.n_steps()).into_owned();
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(y_start.clone());
    for k in 0..n_steps {
        let (h_next, y_next) = model.autonomous_step(&h, &states[k]);
        ensure_finite("autonomous output", y_next.iter()).map_err(|_| {
            tag(Error::NonFinite {
                what: "autonomous output",
                index: k + 1,
            })
        })?;
        h = h_next;
        states.push(y_next);
    }
    Trajectory::new(model.ybar.t0(), model.tau(), states).map_err(tag)
}

/// Max-abs and RMSE of `candidate − reference`, per component and overall.
pub fn evaluate(candidate: &Trajectory, reference: &Trajectory) -> Result<Metrics> {
    if candidate.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            actual: candidate.len(),
        });
    }
    if candidate.is_empty() {
        return Err(Error::LengthMismatch {
            expected: 1,
            actual: 0,
        });
    }
    if candidate.dim() != reference.dim() {
        return Err(Error::DimensionMismatch {
            what: "evaluated trajectory",
            expected: reference.dim(),
            actual: candidate.dim(),
        });
    }
    if (candidate.tau() - reference.tau()).abs() > 1e-12 * reference.tau() {
        return Err(Error::InvalidConfig(format!(
            "interval mismatch: {} vs {}",
            candidate.tau(),
            reference.tau()
        )));
    }
    let d = reference.dim();
    let count = candidate.len() as f64;
    let mut max_abs = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for (a, b) in candidate.states().iter().zip(reference.states()) {
        for i in 0..d {
            let diff = (a[i] - b[i]).abs();
            max_abs[i] = max_abs[i].max(diff);
            sq[i] += diff * diff;
        }
    }
    let rmse: Vec<f64> = sq.iter().map(|s| (s / count).sqrt()).collect();
    let max_abs_overall = max_abs.iter().copied().fold(0.0, f64::max);
    let rmse_overall = (sq.iter().sum::<f64>() / (count * d as f64)).sqrt();
    Ok(Metrics {
        max_abs,
        rmse,
        max_abs_overall,
        rmse_overall,
    })
}
