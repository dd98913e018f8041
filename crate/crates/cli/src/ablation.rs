//! Parameter sweeps over distillation settings.

use std::path::Path;

use log::{info, warn};
use lrds_core::influence::SelectionOrder;
use lrds_core::losses::RightPartLoss;
use lrds_core::model::{MlpModel, ModelSpec};
use lrds_core::revision::EtaMode;
use lrds_core::trainer::DistillConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Experiment;
use crate::pipeline::{prepare_teacher_and_scores, run_student, split_for, write_split_plan, write_student_outputs};
use crate::CliError;

pub const SUMMARY_FILE: &str = "ablation_summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationParam {
    Lambda1,
    Lambda2,
    Eta,
    Pct,
    Order,
    RightPartLoss,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Lambda1 => "lambda1",
            AblationParam::Lambda2 => "lambda2",
            AblationParam::Eta => "eta",
            AblationParam::Pct => "pct",
            AblationParam::Order => "order",
            AblationParam::RightPartLoss => "right_part_loss",
        }
    }

    /// Sets this parameter in `cfg`.
    pub fn apply(self, cfg: &mut DistillConfig, value: &Value) -> Result<(), CliError> {
        let bad = || CliError::Usage(format!("invalid value {value} for {}", self.name()));
        let number = || value.as_f64().ok_or_else(bad);
        match self {
            AblationParam::Lambda1 => cfg.loss.lambda1 = number()?,
            AblationParam::Lambda2 => cfg.loss.lambda2 = number()?,
            AblationParam::Pct => cfg.pct = number()?,
            AblationParam::Eta => {
                cfg.eta_mode = match value {
                    Value::Number(_) => EtaMode::Fixed(number()?),
                    _ => serde_json::from_value::<EtaMode>(value.clone()).map_err(|_| bad())?,
                }
            }
            AblationParam::Order => {
                cfg.order = serde_json::from_value::<SelectionOrder>(value.clone()).map_err(|_| bad())?
            }
            AblationParam::RightPartLoss => {
                cfg.loss.right_part_loss = serde_json::from_value::<RightPartLoss>(value.clone()).map_err(|_| bad())?
            }
        }
        cfg.validate().map_err(|e| CliError::Usage(format!("{} = {value}: {e}", self.name())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub parameter: AblationParam,
    pub values: Vec<Value>,
}

/// A sweep over one parameter, optionally crossed with a second one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub parameter: AblationParam,
    pub values: Vec<Value>,
    pub seeds: Vec<u64>,
    /// Second axis; every value pair becomes one cell.
    #[serde(default)]
    pub cross: Option<Axis>,
}

impl AblationSpec {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid ablation spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read ablation spec {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Usage("ablation needs at least one value and one seed".into()));
        }
        if let Some(c) = &self.cross {
            if c.values.is_empty() {
                return Err(CliError::Usage("cross axis needs at least one value".into()));
            }
            if c.parameter == self.parameter {
                return Err(CliError::Usage("cross axis repeats the main parameter".into()));
            }
        }
        Ok(())
    }

    pub fn parameter_label(&self) -> String {
        match &self.cross {
            Some(c) => format!("{}+{}", self.parameter.name(), c.parameter.name()),
            None => self.parameter.name().to_string(),
        }
    }

    /// Grid cells as `(label, [(param, value)])`, main axis outermost.
    pub fn cells(&self) -> Vec<(String, Vec<(AblationParam, Value)>)> {
        let mut cells = Vec::new();
        for v in &self.values {
            match &self.cross {
                None => cells.push((value_label(v), vec![(self.parameter, v.clone())])),
                Some(c) => {
                    for w in &c.values {
                        cells.push((
                            format!("{}+{}", value_label(v), value_label(w)),
                            vec![(self.parameter, v.clone()), (c.parameter, w.clone())],
                        ));
                    }
                }
            }
        }
        cells
    }
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub dt_count: Option<usize>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub parameter: String,
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(|r| r.test_acc.is_none())
    }

    /// Writes per-seed rows then one `mean` row per cell:
    /// `parameter,value,seed,test_acc,test_acc_std,dt_count,status`.
    pub fn write_csv(&self, path: &Path, header_comment: &str) -> Result<(), CliError> {
        let io = |e: std::io::Error| lrds_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut file = std::fs::File::create(path).map_err(io)?;
        use std::io::Write;
        writeln!(file, "# {header_comment}").map_err(io)?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
        w.write_record(["parameter", "value", "seed", "test_acc", "test_acc_std", "dt_count", "status"])
            .map_err(csv_err)?;
        let opt = |x: Option<String>| x.unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                self.parameter.clone(),
                r.value.clone(),
                r.seed.to_string(),
                opt(r.test_acc.map(|a| a.to_string())),
                String::new(),
                opt(r.dt_count.map(|c| c.to_string())),
                r.status.clone(),
            ])
            .map_err(csv_err)?;
        }
        let mut values: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !values.contains(&r.value.as_str()) {
                values.push(&r.value);
            }
        }
        for v in values {
            let cell: Vec<&AblationRow> = self.rows.iter().filter(|r| r.value == v).collect();
            let accs: Vec<f64> = cell.iter().filter_map(|r| r.test_acc).collect();
            let ok = !accs.is_empty();
            let (mean, std) = mean_std(&accs);
            w.write_record([
                self.parameter.clone(),
                v.to_string(),
                "mean".into(),
                if ok { mean.to_string() } else { String::new() },
                if ok { std.to_string() } else { String::new() },
                opt(cell.iter().find_map(|r| r.dt_count).map(|c| c.to_string())),
                format!("{}/{} ok", accs.len(), cell.len()),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| lrds_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(())
    }
}

fn cell_dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Runs every cell and seed against one teacher and one score set. Each
/// seed replaces the student's initialisation seed and the distillation seed.
/// Per-run outputs go to `out/ablation/<parameter>=<cell>/seed_<s>/`.
pub fn run_ablation(
    exp: &Experiment,
    spec: &AblationSpec,
    teacher: &MlpModel,
    scores: &[f64],
    out: &Path,
) -> Result<AblationSummary, CliError> {
    spec.validate()?;
    let (train, test) = exp.load_data()?;
    if test.is_none() {
        warn!("no test set configured; accuracy is measured on the training set");
    }
    let student = exp.config.student_spec()?;
    let parameter = spec.parameter_label();
    let mut rows = Vec::new();
    for (label, settings) in spec.cells() {
        let mut cfg = exp.config.distill.clone();
        for (p, v) in &settings {
            p.apply(&mut cfg, v)?;
        }
        for &seed in &spec.seeds {
            let run_cfg = DistillConfig { seed, ..cfg.clone() };
            let spec_s = ModelSpec {
                seed,
                ..student.clone()
            };
            let dir = out
                .join("ablation")
                .join(cell_dir_name(&format!("{parameter}={label}")))
                .join(format!("seed_{seed}"));
            // The plan is written first so that failed runs can still be audited.
            let row = match split_for(scores, &run_cfg)
                .and_then(|plan| write_split_plan(exp, &plan, &dir).map(|_| plan))
                .and_then(|plan| run_student(teacher, &spec_s, plan, &train, test.as_ref(), &run_cfg))
                .and_then(|run| write_student_outputs(exp, &run, &dir).map(|_| run))
            {
                Ok(run) => {
                    info!("{parameter}={label} seed {seed}: {}", run.test_acc);
                    AblationRow {
                        value: label.clone(),
                        seed,
                        test_acc: Some(run.test_acc),
                        dt_count: Some(run.plan.dt_indices.len()),
                        status: "ok".into(),
                    }
                }
                Err(e) => {
                    warn!("{parameter}={label} seed {seed} failed: {e}");
                    AblationRow {
                        value: label.clone(),
                        seed,
                        test_acc: None,
                        dt_count: None,
                        status: format!("error: {e}"),
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(AblationSummary { parameter, rows })
}

/// Full sweep: prepares teacher and scores if not given, runs the grid and
/// writes the summary CSV. Fails when every run failed.
pub fn cmd_ablate(
    exp: &Experiment,
    spec: &AblationSpec,
    teacher_path: Option<&Path>,
    scores_path: Option<&Path>,
    out: &Path,
) -> Result<AblationSummary, CliError> {
    std::fs::create_dir_all(out).map_err(|e| lrds_core::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let (teacher, scores) = prepare_teacher_and_scores(exp, teacher_path, scores_path, out)?;
    let summary = run_ablation(exp, spec, &teacher, &scores, out)?;
    summary.write_csv(&out.join(SUMMARY_FILE), &format!("config_hash={}", exp.hash))?;
    if summary.all_failed() {
        return Err(CliError::Failed("every ablation run failed".into()));
    }
    Ok(summary)
}
