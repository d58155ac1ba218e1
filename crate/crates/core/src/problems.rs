//! Autonomous benchmark systems `dy/dt = f(y)`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type RhsFn = fn(&DVector<f64>) -> DVector<f64>;
pub type JacobianFn = fn(&DVector<f64>) -> DMatrix<f64>;
/// Exact flow map: state reached after elapsed time `t` from `y0`.
pub type FlowFn = fn(&DVector<f64>, f64) -> DVector<f64>;

/// An autonomous vector field with its analytic Jacobian.
///
/// Systems are plain function pointers, so values are `Copy` and can be
/// shared freely between threads.
#[derive(Clone, Copy)]
pub struct OdeSystem {
    name: &'static str,
    dim: usize,
    rhs: RhsFn,
    jac: JacobianFn,
    flow: Option<FlowFn>,
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("has_exact_flow", &self.flow.is_some())
            .finish()
    }
}

impl OdeSystem {
    /// Builds a user system. `rhs` and `jac` must be pure.
    pub fn new(name: &'static str, dim: usize, rhs: RhsFn, jac: JacobianFn) -> Self {
        assert!(dim >= 1, "system dimension must be positive");
        Self {
            name,
            dim,
            rhs,
            jac,
            flow: None,
        }
    }

    pub fn with_exact_flow(mut self, flow: FlowFn) -> Self {
        self.flow = Some(flow);
        self
    }

    /// Looks up a builtin by its CLI/config name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "harmonic" => Ok(harmonic()),
            "vdp" | "van_der_pol" => Ok(van_der_pol()),
            "lorenz" => Ok(lorenz()),
            other => Err(Error::UnknownSystem(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rhs(&self, y: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(y.len(), self.dim);
        (self.rhs)(y)
    }

    /// `∂f/∂y` at `y`, row `i` holding the gradient of `f_i`.
    pub fn jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        debug_assert_eq!(y.len(), self.dim);
        (self.jac)(y)
    }

    pub fn has_exact_flow(&self) -> bool {
        self.flow.is_some()
    }

    /// Exact solution through `y0` after elapsed time `t`, when known.
    pub fn exact_flow(&self, y0: &DVector<f64>, t: f64) -> Option<DVector<f64>> {
        self.flow.map(|flow| flow(y0, t))
    }
}

/// Simple harmonic oscillator `ẏ₁ = y₂, ẏ₂ = −y₁`.
pub fn harmonic() -> OdeSystem {
    fn rhs(y: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![y[1], -y[0]])
    }
    fn jac(_: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
    }
    // Rotation by t: (A cos(t+φ), −A sin(t+φ)) with A, φ fixed by y0.
    fn flow(y0: &DVector<f64>, t: f64) -> DVector<f64> {
        let (s, c) = t.sin_cos();
        DVector::from_vec(vec![y0[0] * c + y0[1] * s, -y0[0] * s + y0[1] * c])
    }
    OdeSystem::new("harmonic", 2, rhs, jac).with_exact_flow(flow)
}

/// Van der Pol oscillator with unit damping, `f(y) = (y₂, y₂ − y₁ − y₁²y₂)`.
pub fn van_der_pol() -> OdeSystem {
    fn rhs(y: &DVector<f64>) -> DVector<f64> {
        let (a, b) = (y[0], y[1]);
        DVector::from_vec(vec![b, b - a - a * a * b])
    }
    fn jac(y: &DVector<f64>) -> DMatrix<f64> {
        let (a, b) = (y[0], y[1]);
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0 - 2.0 * a * b, 1.0 - a * a])
    }
    OdeSystem::new("vdp", 2, rhs, jac)
}

pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_RHO: f64 = 28.0;
pub const LORENZ_BETA: f64 = 8.0 / 3.0;

/// Lorenz system at the classical chaotic parameters σ=10, ρ=28, β=8/3.
pub fn lorenz() -> OdeSystem {
    fn rhs(y: &DVector<f64>) -> DVector<f64> {
        let (a, b, c) = (y[0], y[1], y[2]);
        DVector::from_vec(vec![
            LORENZ_SIGMA * (b - a),
            a * (LORENZ_RHO - c) - b,
            a * b - LORENZ_BETA * c,
        ])
    }
    fn jac(y: &DVector<f64>) -> DMatrix<f64> {
        let (a, b, c) = (y[0], y[1], y[2]);
        DMatrix::from_row_slice(
            3,
            3,
            &[
                -LORENZ_SIGMA,
                LORENZ_SIGMA,
                0.0,
                LORENZ_RHO - c,
                -1.0,
                -a,
                b,
                a,
                -LORENZ_BETA,
            ],
        )
    }
    OdeSystem::new("lorenz", 3, rhs, jac)
}
