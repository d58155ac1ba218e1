//! Run configuration: a JSON document plus dotted `key=value` overrides.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::constraints::ConstraintOptions;
use crate::error::{Error, Result};
use crate::problems::OdeSystem;
use crate::regression::GnConfig;
use crate::reservoir::ReservoirParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `harmonic`, `vdp` or `lorenz`.
    pub problem: String,
    pub y0: Vec<f64>,
    pub tau: f64,
    /// Steps in the kept span (the kept trial has one more point).
    pub n_points: usize,
    pub n_washout: usize,
    /// Euler substeps per output interval of the trial solution.
    #[serde(default = "one")]
    pub refine_factor: usize,
    pub reservoir: ReservoirParams,
    pub stage1: GnConfig,
    pub stage2: GnConfig,
    #[serde(default = "yes")]
    pub e3_substitution: bool,
    #[serde(default = "unit_weights")]
    pub family_weights: [f64; 3],
    /// RK4 substeps per interval for the reference oracle.
    #[serde(default = "default_reference_refine")]
    pub reference_refine: usize,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn unit_weights() -> [f64; 3] {
    [1.0; 3]
}

fn default_reference_refine() -> usize {
    100
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a JSON document and applies `key=value` overrides on top.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        let system = self.system()?;
        if self.y0.len() != system.dim() {
            return Err(Error::InvalidConfig(format!(
                "y0 has {} components but {} needs {}",
                self.y0.len(),
                self.problem,
                system.dim()
            )));
        }
        if self.y0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("y0 must be finite".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("n_points", self.n_points),
            ("refine_factor", self.refine_factor),
            ("reference_refine", self.reference_refine),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        self.reservoir.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.constraint_options().validate()
    }

    pub fn system(&self) -> Result<OdeSystem> {
        OdeSystem::by_name(&self.problem)
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.y0)
    }

    pub fn constraint_options(&self) -> ConstraintOptions {
        ConstraintOptions {
            e3_substitution: self.e3_substitution,
            family_weights: self.family_weights,
        }
    }

    /// Flattened `config.*` entries, nested objects joined with dots.
    pub fn flat_entries(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        let value = serde_json::to_value(self).expect("config serialises");
        flatten_into("config", &value, &mut out);
        out
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten_into(&format!("{prefix}.{k}"), v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses, otherwise as a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::InvalidConfig(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "override `{key}`: `{}` is not an object",
                parts[..depth].join(".")
            ))
        })?;
        if depth + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}
