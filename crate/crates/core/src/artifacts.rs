//! On-disk artifacts of a run and the tolerant reader behind `report`.
//!
//! Every file is written to a temporary name and renamed into place, so a
//! failed run never leaves a half-written artifact. Artifacts contain no
//! timestamps; wall-clock timings live in `timing.json` only.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::constraints::StageResiduals;
use crate::error::{Error, Result};
use crate::pipeline::{Metrics, RunReport, TrainedModel};
use crate::regression::IterationRecord;
use crate::trial::Trajectory;

pub const TRIAL_CSV: &str = "trial.csv";
pub const STAGE1_CSV: &str = "ybar_stage1.csv";
pub const STAGE2_CSV: &str = "y_stage2.csv";
pub const AUTONOMOUS_CSV: &str = "y_autonomous.csv";
pub const REFERENCE_CSV: &str = "reference.csv";
pub const RESIDUALS1_CSV: &str = "residuals_stage1.csv";
pub const RESIDUALS2_CSV: &str = "residuals_stage2.csv";
pub const CONVERGENCE1_LOG: &str = "convergence_stage1.log";
pub const CONVERGENCE2_LOG: &str = "convergence_stage2.log";
pub const REPORT_JSON: &str = "report.json";
pub const TIMING_JSON: &str = "timing.json";

/// Files a complete `run` produces, in listing order.
pub const RUN_ARTIFACTS: [&str; 11] = [
    TRIAL_CSV,
    STAGE1_CSV,
    STAGE2_CSV,
    AUTONOMOUS_CSV,
    REFERENCE_CSV,
    RESIDUALS1_CSV,
    RESIDUALS2_CSV,
    CONVERGENCE1_LOG,
    CONVERGENCE2_LOG,
    REPORT_JSON,
    TIMING_JSON,
];

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// `t,y1,…,yd` followed by one row per point.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t");
    for i in 1..=traj.dim() {
        write!(out, ",y{i}").unwrap();
    }
    out.push('\n');
    for (n, y) in traj.states().iter().enumerate() {
        out.push_str(&num(traj.time(n)));
        for v in y.iter() {
            out.push(',');
            out.push_str(&num(*v));
        }
        out.push('\n');
    }
    out
}

/// One row per step: `step,e1_1,…,e1_d,e2_1,…,e3_d`. Step `n` is the
/// residual attached to output `n` (1-based).
pub fn residuals_csv(res: &StageResiduals) -> String {
    let d = res.e1.ncols();
    let mut out = String::from("step");
    for fam in 1..=3 {
        for i in 1..=d {
            write!(out, ",e{fam}_{i}").unwrap();
        }
    }
    out.push('\n');
    for k in 0..res.e1.nrows() {
        write!(out, "{}", k + 1).unwrap();
        for e in res.families() {
            for i in 0..d {
                out.push(',');
                out.push_str(&num(e[(k, i)]));
            }
        }
        out.push('\n');
    }
    out
}

/// One line per Gauss-Newton iteration.
pub fn convergence_log(history: &[IterationRecord]) -> String {
    let mut out = String::new();
    for r in history {
        writeln!(
            out,
            "iter={} loss={} e1={} e2={} e3={} objective={} rel_step={} rel_loss_change={} halvings={}{}",
            r.iter,
            num(r.loss),
            num(r.loss_by_family[0]),
            num(r.loss_by_family[1]),
            num(r.loss_by_family[2]),
            num(r.objective),
            num(r.rel_step),
            num(r.rel_loss_change),
            r.halvings,
            if r.stalled { " stalled" } else { "" },
        )
        .unwrap();
    }
    out
}

fn float(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

fn floats(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| float(x)).collect())
}

fn insert_metrics(map: &mut Map<String, Value>, prefix: &str, m: &Metrics) {
    map.insert(format!("{prefix}.max_abs"), floats(&m.max_abs));
    map.insert(format!("{prefix}.rmse"), floats(&m.rmse));
    map.insert(format!("{prefix}.max_abs_overall"), float(m.max_abs_overall));
    map.insert(format!("{prefix}.rmse_overall"), float(m.rmse_overall));
}

/// Flat key → value map. Keys are sorted, so output is deterministic.
pub fn report_json(report: &RunReport) -> Value {
    let mut map = Map::new();
    for (k, v) in report.config.flat_entries() {
        map.insert(k, v);
    }
    for (name, stage) in [("stage1", &report.stage1), ("stage2", &report.stage2)] {
        map.insert(format!("{name}.initial_loss"), float(stage.initial_loss));
        map.insert(format!("{name}.final_loss"), float(stage.final_loss));
        map.insert(
            format!("{name}.final_loss_by_family"),
            floats(&stage.residuals.loss_by_family()),
        );
        map.insert(format!("{name}.iterations"), Value::from(stage.history.len()));
        map.insert(
            format!("{name}.converged_at"),
            stage.converged_at.map_or(Value::Null, Value::from),
        );
    }
    insert_metrics(&mut map, "metrics", &report.metrics);
    insert_metrics(&mut map, "metrics.stage1", &report.metrics_stage1);
    insert_metrics(&mut map, "metrics.trial", &report.metrics_trial);
    if let Some(m) = &report.metrics_autonomous {
        insert_metrics(&mut map, "metrics.autonomous", m);
    }
    map.insert("reference.kind".into(), Value::from(report.reference_kind.name()));
    map.insert("prng.name".into(), Value::from(report.prng));
    map.insert("seed".into(), Value::from(report.seed));
    Value::Object(map)
}

pub fn timing_json(report: &RunReport) -> Value {
    let mut map = Map::new();
    let mut total = 0.0;
    for (phase, secs) in &report.timing {
        map.insert(format!("timing.{phase}"), float(*secs));
        total += secs;
    }
    map.insert("timing.total".into(), float(total));
    Value::Object(map)
}

fn pretty(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json values serialise");
    s.push('\n');
    s
}

/// Writes `contents` under a temporary name in the same directory, then
/// renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidConfig(format!("bad artifact path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the trial solution only.
pub fn write_trial(dir: &Path, trial: &Trajectory) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(TRIAL_CSV);
    write_atomic(&path, &trajectory_csv(trial))?;
    Ok(path)
}

/// Renders every artifact first, then writes them all.
pub fn write_run(dir: &Path, model: &TrainedModel, report: &RunReport) -> Result<Vec<PathBuf>> {
    let mut files = vec![
        (TRIAL_CSV, trajectory_csv(&model.trial)),
        (STAGE1_CSV, trajectory_csv(&model.ybar)),
        (STAGE2_CSV, trajectory_csv(&model.y_final)),
        (REFERENCE_CSV, trajectory_csv(&report.reference)),
        (RESIDUALS1_CSV, residuals_csv(&report.stage1.residuals)),
        (RESIDUALS2_CSV, residuals_csv(&report.stage2.residuals)),
        (CONVERGENCE1_LOG, convergence_log(&report.stage1.history)),
        (CONVERGENCE2_LOG, convergence_log(&report.stage2.history)),
        (REPORT_JSON, pretty(&report_json(report))),
        (TIMING_JSON, pretty(&timing_json(report))),
    ];
    if let Some(auto) = &report.autonomous {
        files.push((AUTONOMOUS_CSV, trajectory_csv(auto)));
    }
    ensure_dir(dir)?;
    let mut written = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(name);
        write_atomic(&path, &contents)?;
        written.push(path);
    }
    Ok(written)
}

/// What the tolerant reader found in an output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactSummary {
    pub files: Vec<(&'static str, bool)>,
    pub report: Option<Map<String, Value>>,
    pub timing: Option<Map<String, Value>>,
}

fn read_object(path: &Path) -> Option<Map<String, Value>> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Some(m),
        _ => {
            log::warn!("{} is not a JSON object, treating it as missing", path.display());
            None
        }
    }
}

/// Reads whatever artifacts exist. Fails only when the directory is
/// missing or holds none of them.
pub fn read_summary(dir: &Path) -> Result<ArtifactSummary> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory not found"),
        ));
    }
    let files: Vec<_> = RUN_ARTIFACTS
        .iter()
        .map(|&name| (name, dir.join(name).is_file()))
        .collect();
    if files.iter().all(|(_, present)| !present) {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no run artifacts found"),
        ));
    }
    Ok(ArtifactSummary {
        files,
        report: read_object(&dir.join(REPORT_JSON)),
        timing: read_object(&dir.join(TIMING_JSON)),
    })
}

const REPORT_ROWS: [&str; 18] = [
    "config.problem",
    "seed",
    "prng.name",
    "reference.kind",
    "stage1.initial_loss",
    "stage1.final_loss",
    "stage1.iterations",
    "stage1.converged_at",
    "stage2.initial_loss",
    "stage2.final_loss",
    "stage2.iterations",
    "stage2.converged_at",
    "metrics.max_abs",
    "metrics.rmse",
    "metrics.stage1.max_abs",
    "metrics.trial.max_abs",
    "metrics.trial.rmse",
    "metrics.autonomous.max_abs",
];

const TIMING_ROWS: [&str; 8] = [
    "timing.trial",
    "timing.reservoir",
    "timing.stage1",
    "timing.stage2",
    "timing.reference",
    "timing.autonomous",
    "timing.evaluate",
    "timing.total",
];

fn cell(map: Option<&Map<String, Value>>, key: &str) -> String {
    match map.and_then(|m| m.get(key)) {
        Some(Value::String(s)) => s.clone(),
        Some(v) => v.to_string(),
        None => "missing".into(),
    }
}

/// Human-readable table; values are copied verbatim from the JSON files.
pub fn render_table(summary: &ArtifactSummary) -> String {
    let width = REPORT_ROWS
        .iter()
        .chain(TIMING_ROWS.iter())
        .map(|k| k.len())
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    for key in REPORT_ROWS {
        writeln!(out, "{key:<width$}  {}", cell(summary.report.as_ref(), key)).unwrap();
    }
    for key in TIMING_ROWS {
        writeln!(out, "{key:<width$}  {}", cell(summary.timing.as_ref(), key)).unwrap();
    }
    for (name, present) in &summary.files {
        let status = if *present { "present" } else { "missing" };
        writeln!(out, "{name:<width$}  {status}").unwrap();
    }
    out
}
