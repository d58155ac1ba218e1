//! Uniform-grid trajectories: Euler trial solutions, the RK4 reference and
//! washout cropping.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::problems::OdeSystem;

/// States on a uniform grid `t0 + n·tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    t0: f64,
    tau: f64,
    states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(t0: f64, tau: f64, states: Vec<DVector<f64>>) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("interval must be positive, got {tau}")));
        }
        if let Some(first) = states.first() {
            let d = first.len();
            if let Some(bad) = states.iter().find(|s| s.len() != d) {
                return Err(Error::DimensionMismatch {
                    what: "trajectory state",
                    expected: d,
                    actual: bad.len(),
                });
            }
        }
        Ok(Self { t0, tau, states })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State dimension (0 for an empty trajectory).
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.tau
    }

    pub fn state(&self, n: usize) -> &DVector<f64> {
        &self.states[n]
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn first(&self) -> Option<&DVector<f64>> {
        self.states.first()
    }

    pub fn last(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }

    /// Points `start..start + len` as a new trajectory with shifted origin.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::LengthMismatch {
                expected: start + len,
                actual: self.len(),
            });
        }
        Ok(Self {
            t0: self.time(start),
            tau: self.tau,
            states: self.states[start..start + len].to_vec(),
        })
    }

    /// Appends `other`'s states; the grid of `self` is kept.
    pub fn concat(&self, other: &Trajectory) -> Result<Self> {
        if !self.is_empty() && !other.is_empty() && self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                what: "concatenated trajectory",
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        let mut states = self.states.clone();
        states.extend(other.states.iter().cloned());
        Ok(Self {
            t0: self.t0,
            tau: self.tau,
            states,
        })
    }
}

fn check_inputs(system: &OdeSystem, y0: &DVector<f64>, tau: f64, n_steps: usize) -> Result<()> {
    if y0.len() != system.dim() {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: system.dim(),
            actual: y0.len(),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!("interval must be positive, got {tau}")));
    }
    if n_steps == 0 {
        return Err(Error::InvalidConfig("at least one step is required".into()));
    }
    Ok(())
}

fn integrate(
    system: &OdeSystem,
    y0: &DVector<f64>,
    tau: f64,
    n_steps: usize,
    substeps: usize,
    step: impl Fn(&DVector<f64>, f64) -> DVector<f64>,
) -> Result<Trajectory> {
    check_inputs(system, y0, tau, n_steps)?;
    if substeps == 0 {
        return Err(Error::InvalidConfig("refinement factor must be at least 1".into()));
    }
    let h = tau / substeps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut y = y0.clone();
    states.push(y.clone());
    for n in 0..n_steps {
        for _ in 0..substeps {
            y = step(&y, h);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "integrated state",
                index: n + 1,
            });
        }
        states.push(y.clone());
    }
    Trajectory::new(0.0, tau, states)
}

fn euler_step(system: &OdeSystem, y: &DVector<f64>, h: f64) -> DVector<f64> {
    y + system.rhs(y) * h
}

fn rk4_step(system: &OdeSystem, y: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = system.rhs(y);
    let k2 = system.rhs(&(y + &k1 * (h / 2.0)));
    let k3 = system.rhs(&(y + &k2 * (h / 2.0)));
    let k4 = system.rhs(&(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Explicit Euler, `n_steps + 1` points starting at `t = 0`.
pub fn euler(system: &OdeSystem, y0: &DVector<f64>, tau: f64, n_steps: usize) -> Result<Trajectory> {
    integrate(system, y0, tau, n_steps, 1, |y, h| euler_step(system, y, h))
}

/// Classical fourth-order Runge-Kutta.
pub fn rk4(system: &OdeSystem, y0: &DVector<f64>, tau: f64, n_steps: usize) -> Result<Trajectory> {
    integrate(system, y0, tau, n_steps, 1, |y, h| rk4_step(system, y, h))
}

/// RK4 at `tau / factor`, keeping every `factor`-th point.
pub fn rk4_refined(
    system: &OdeSystem,
    y0: &DVector<f64>,
    tau: f64,
    n_steps: usize,
    factor: usize,
) -> Result<Trajectory> {
    integrate(system, y0, tau, n_steps, factor, |y, h| rk4_step(system, y, h))
}

/// Euler at `tau / factor` for `n_steps · factor` steps, keeping every
/// `factor`-th point. The output grid has spacing `tau`.
pub fn refine_downsample(
    system: &OdeSystem,
    y0: &DVector<f64>,
    tau: f64,
    n_steps: usize,
    factor: usize,
) -> Result<Trajectory> {
    integrate(system, y0, tau, n_steps, factor, |y, h| euler_step(system, y, h))
}

/// Splits off the first `n_drop` points and keeps the following `n_keep`.
pub fn washout_crop(
    traj: &Trajectory,
    n_drop: usize,
    n_keep: usize,
) -> Result<(Trajectory, Trajectory)> {
    if n_drop + n_keep > traj.len() {
        return Err(Error::LengthMismatch {
            expected: n_drop + n_keep,
            actual: traj.len(),
        });
    }
    Ok((traj.slice(0, n_drop)?, traj.slice(n_drop, n_keep)?))
}
