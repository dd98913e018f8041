//! The teach / score / distill / eval stages and the variant comparison.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use lrds_core::data::Dataset;
use lrds_core::influence::{self, rank_and_split, read_scores_csv, score_dataset, SelectionOrder, SplitPlan};
use lrds_core::losses::LossKind;
use lrds_core::model::{params_checksum, Checkpoint, Differentiable, MeanEstimator, MlpModel, ModelSpec};
use lrds_core::numcore::tempered_softmax;
use lrds_core::revision::{revise_label, write_revision_csv};
use lrds_core::trainer::{distill, evaluate, train_teacher, DistillConfig, TrainLog};
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, TeacherConfig};
use crate::CliError;

pub const TEACHER_FILE: &str = "teacher.json";
pub const TEACHER_LOG_FILE: &str = "teacher_log.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const STUDENT_FILE: &str = "student.json";
pub const STUDENT_LOG_FILE: &str = "student_log.csv";
pub const SPLIT_PLAN_FILE: &str = "split_plan.json";
pub const REVISED_LABELS_FILE: &str = "revised_labels.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MeanCheckpoint {
    format_version: u32,
    kind: String,
    theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

/// A trained teacher of either supported kind.
#[derive(Debug, Clone)]
pub enum Teacher {
    Mlp(MlpModel),
    Mean(MeanEstimator),
}

impl Teacher {
    pub fn model(&self) -> &dyn Differentiable {
        match self {
            Teacher::Mlp(m) => m,
            Teacher::Mean(m) => m,
        }
    }

    pub fn checksum(&self) -> String {
        params_checksum(self.model().params())
    }

    pub fn as_mlp(&self) -> Result<&MlpModel, CliError> {
        match self {
            Teacher::Mlp(m) => Ok(m),
            Teacher::Mean(_) => Err(CliError::Usage("this stage needs an MLP teacher".into())),
        }
    }

    pub fn to_json(&self, config_hash: &str) -> Result<String, CliError> {
        Ok(match self {
            Teacher::Mlp(m) => Checkpoint {
                config_hash: Some(config_hash.to_string()),
                ..m.to_checkpoint()
            }
            .to_json()?,
            Teacher::Mean(m) => {
                let ck = MeanCheckpoint {
                    format_version: Checkpoint::FORMAT_VERSION,
                    kind: "mean_estimator".into(),
                    theta: m.theta(),
                    config_hash: Some(config_hash.to_string()),
                };
                serde_json::to_string_pretty(&ck).map_err(lrds_core::Error::from)? + "\n"
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: not a checkpoint: {e}", path.display())))?;
        if value.get("kind").and_then(|k| k.as_str()) == Some("mean_estimator") {
            let ck: MeanCheckpoint = serde_json::from_value(value)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            return Ok(Teacher::Mean(MeanEstimator::new(ck.theta)));
        }
        Ok(Teacher::Mlp(load_mlp(path)?))
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn load_mlp(path: &Path) -> Result<MlpModel, CliError> {
    let ck = Checkpoint::from_json(&read(path)?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(MlpModel::from_checkpoint(&ck)?)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| lrds_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| lrds_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn hash_comment(exp: &Experiment) -> String {
    format!("config_hash={}", exp.hash)
}

/// Dimension mismatches between a model file and the data are validation failures.
fn check_teacher_fits(teacher: &Teacher, data: &Dataset) -> Result<(), CliError> {
    teacher
        .model()
        .check_data(data)
        .map_err(|e| CliError::Validation(format!("teacher does not match the dataset: {e}")))
}

pub struct TeachOutcome {
    pub teacher: Teacher,
    pub log: TrainLog,
    pub train_acc: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Trains the teacher and writes its checkpoint and log into `out`.
pub fn cmd_teach(exp: &Experiment, out: &Path) -> Result<TeachOutcome, CliError> {
    create_dir(out)?;
    let (train, test) = exp.load_data()?;
    let (teacher, log, train_acc) = match &exp.config.teacher {
        TeacherConfig::Mlp { model, .. } => {
            info!("training teacher {:?} on {} samples", model.layer_dims, train.len());
            let (m, log) = train_teacher(model, &train, &exp.config.teacher_training(), test.as_ref())?;
            let acc = evaluate(&m, &train)?;
            info!("teacher train accuracy {acc}");
            (Teacher::Mlp(m), log, Some(acc))
        }
        TeacherConfig::MeanEstimator => (Teacher::Mean(MeanEstimator::fit(&train)), TrainLog::default(), None),
    };
    let checkpoint = out.join(TEACHER_FILE);
    write_file(&checkpoint, &teacher.to_json(&exp.hash)?)?;
    if let Teacher::Mlp(_) = teacher {
        log.write_csv(&out.join(TEACHER_LOG_FILE), Some(&hash_comment(exp)))?;
    }
    Ok(TeachOutcome {
        teacher,
        log,
        train_acc,
        checkpoint,
    })
}

/// Scores every training sample against the teacher and writes the scores CSV.
pub fn cmd_score(exp: &Experiment, teacher_path: &Path, out: &Path) -> Result<PathBuf, CliError> {
    create_dir(out)?;
    let (train, _) = exp.load_data()?;
    let teacher = Teacher::load(teacher_path)?;
    check_teacher_fits(&teacher, &train)?;
    let cfg = &exp.config.influence;
    info!("scoring {} samples ({:?} solver)", train.len(), cfg.solver);
    let report = score_dataset(teacher.model(), &train, cfg)?;
    let ranks = influence::ranks(&report.scores, SelectionOrder::HighestFirst, 0);
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), exp.hash.clone());
    meta.insert("teacher_checksum".to_string(), report.teacher_checksum);
    meta.insert("dataset_checksum".to_string(), report.dataset_checksum);
    meta.insert("damping".to_string(), cfg.damping.to_string());
    meta.insert("solver".to_string(), enum_name(&cfg.solver));
    meta.insert("scalarization".to_string(), enum_name(&cfg.scalarization));
    let path = out.join(SCORES_FILE);
    influence::write_scores_csv(&path, &report.scores, &ranks, &meta)?;
    Ok(path)
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Scores read back from disk after checking they belong to this teacher and dataset.
pub fn load_scores(path: &Path, teacher: &Teacher, data: &Dataset) -> Result<Vec<f64>, CliError> {
    let file = read_scores_csv(path)?;
    let stale = |what: &str| {
        CliError::Validation(format!(
            "{}: {what} does not match; rerun score",
            path.display()
        ))
    };
    if file.meta.get("dataset_checksum").map(String::as_str) != Some(data.checksum()) {
        return Err(stale("dataset checksum"));
    }
    if file.meta.get("teacher_checksum") != Some(&teacher.checksum()) {
        return Err(stale("teacher checksum"));
    }
    if file.scores.len() != data.len() {
        return Err(CliError::Validation(format!(
            "{}: {} scores for {} samples",
            path.display(),
            file.scores.len(),
            data.len()
        )));
    }
    Ok(file.scores)
}

/// One distilled student with its split.
pub struct StudentRun {
    pub student: MlpModel,
    pub log: TrainLog,
    pub plan: SplitPlan,
    pub test_acc: f64,
}

#[derive(Serialize)]
struct SplitPlanFile<'a> {
    config_hash: &'a str,
    dt_count: usize,
    ds_count: usize,
    #[serde(flatten)]
    plan: &'a SplitPlan,
}

/// Split of the training set for `cfg` (pct, order and seed).
pub fn split_for(scores: &[f64], cfg: &DistillConfig) -> Result<SplitPlan, CliError> {
    Ok(rank_and_split(scores, cfg.pct, cfg.order, cfg.seed)?)
}

/// Distils a fresh student under `plan` and evaluates it on `test`
/// (or on the training set when there is no test set).
pub fn run_student(
    teacher: &MlpModel,
    student_spec: &ModelSpec,
    plan: SplitPlan,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &DistillConfig,
) -> Result<StudentRun, CliError> {
    let (student, log) = distill(teacher, student_spec, train, &plan, cfg, test)?;
    let test_acc = evaluate(&student, test.unwrap_or(train))?;
    Ok(StudentRun {
        student,
        log,
        plan,
        test_acc,
    })
}

/// Writes `split_plan.json` into `dir`.
pub fn write_split_plan(exp: &Experiment, plan: &SplitPlan, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    let file = SplitPlanFile {
        config_hash: &exp.hash,
        dt_count: plan.dt_indices.len(),
        ds_count: plan.ds_indices.len(),
        plan,
    };
    let json = serde_json::to_string_pretty(&file).map_err(lrds_core::Error::from)? + "\n";
    write_file(&dir.join(SPLIT_PLAN_FILE), &json)
}

/// Writes a student's checkpoint, log and split plan into `dir`.
pub fn write_student_outputs(exp: &Experiment, run: &StudentRun, dir: &Path) -> Result<(), CliError> {
    write_split_plan(exp, &run.plan, dir)?;
    let ck = Checkpoint {
        config_hash: Some(exp.hash.clone()),
        ..run.student.to_checkpoint()
    };
    write_file(&dir.join(STUDENT_FILE), &ck.to_json()?)?;
    run.log.write_csv(&dir.join(STUDENT_LOG_FILE), Some(&hash_comment(exp)))?;
    Ok(())
}

/// Revised labels for the teacher-supervised samples the teacher gets wrong.
fn write_revisions(
    exp: &Experiment,
    teacher: &MlpModel,
    train: &Dataset,
    plan: &SplitPlan,
    cfg: &DistillConfig,
    path: &Path,
) -> Result<(), CliError> {
    let mut rows = Vec::new();
    if cfg.label_revision && cfg.loss.kind == LossKind::Lrds {
        let mut dt = plan.dt_indices.clone();
        dt.sort_unstable();
        for i in dt {
            let p_t = tempered_softmax(&teacher.forward(train.row(i))?, 1.0)?;
            let r = revise_label(&p_t, train.label(i), cfg.eta_mode)?;
            if r.teacher_pred != r.target {
                rows.push((i, r));
            }
        }
    }
    write_revision_csv(path, &rows, Some(&hash_comment(exp)))?;
    Ok(())
}

pub struct DistillOutcome {
    pub run: StudentRun,
    pub dir: PathBuf,
}

/// Distils the configured student using a saved teacher and scores file.
pub fn cmd_distill(exp: &Experiment, teacher_path: &Path, scores_path: &Path, out: &Path) -> Result<DistillOutcome, CliError> {
    let (train, test) = exp.load_data()?;
    let teacher = Teacher::load(teacher_path)?;
    check_teacher_fits(&teacher, &train)?;
    let scores = load_scores(scores_path, &teacher, &train)?;
    let mlp = teacher.as_mlp()?;
    let cfg = &exp.config.distill;
    let plan = split_for(&scores, cfg)?;
    write_split_plan(exp, &plan, out)?;
    let run = run_student(mlp, exp.config.student_spec()?, plan, &train, test.as_ref(), cfg)?;
    info!(
        "student test accuracy {} with |dt| = {}",
        run.test_acc,
        run.plan.dt_indices.len()
    );
    write_student_outputs(exp, &run, out)?;
    write_revisions(exp, mlp, &train, &run.plan, cfg, &out.join(REVISED_LABELS_FILE))?;
    Ok(DistillOutcome {
        run,
        dir: out.to_path_buf(),
    })
}

/// Accuracy of a saved MLP on the test set, or the training set without one.
pub fn cmd_eval(exp: &Experiment, model_path: &Path) -> Result<f64, CliError> {
    let (train, test) = exp.load_data()?;
    let model = load_mlp(model_path)?;
    let data = test.as_ref().unwrap_or(&train);
    if model.input_dim() != data.dim() || model.class_count() < data.class_count() {
        return Err(CliError::Validation(format!(
            "model {:?} does not match data with {} features and {} classes",
            model.spec().layer_dims,
            data.dim(),
            data.class_count()
        )));
    }
    Ok(evaluate(&model, data)?)
}

/// The five training variants of the comparison table, derived from `base`.
pub fn comparison_variants(base: &DistillConfig) -> Vec<(&'static str, DistillConfig)> {
    let with = |pct: f64, kind: LossKind, revision: bool| {
        let mut c = base.clone();
        c.pct = pct;
        c.loss.kind = kind;
        c.label_revision = revision;
        c
    };
    vec![
        ("ce_only", with(0.0, LossKind::Lrds, false)),
        ("vanilla_kd", with(1.0, LossKind::VanillaKd, false)),
        ("lr_only", with(1.0, LossKind::Lrds, true)),
        ("ds_only", with(base.pct, LossKind::Lrds, false)),
        ("lr_ds", with(base.pct, LossKind::Lrds, true)),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: String,
    pub seed: u64,
    pub test_acc: f64,
}

/// Trains every comparison variant once per seed. Seeds replace the
/// student's initialisation seed and the distillation seed.
pub fn run_comparison(
    exp: &Experiment,
    teacher: &MlpModel,
    scores: &[f64],
    train: &Dataset,
    test: Option<&Dataset>,
    seeds: &[u64],
) -> Result<Vec<ComparisonRow>, CliError> {
    let base_spec = exp.config.student_spec()?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let spec = ModelSpec {
            seed,
            ..base_spec.clone()
        };
        for (name, cfg) in comparison_variants(&exp.config.distill) {
            let cfg = DistillConfig { seed, ..cfg };
            let run = run_student(teacher, &spec, split_for(scores, &cfg)?, train, test, &cfg)?;
            info!("{name} seed {seed}: {}", run.test_acc);
            rows.push(ComparisonRow {
                variant: name.to_string(),
                seed,
                test_acc: run.test_acc,
            });
        }
    }
    Ok(rows)
}

/// Mean test accuracy per variant, in table order.
pub fn comparison_means(rows: &[ComparisonRow]) -> Vec<(String, f64, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.variant == n).map(|r| r.test_acc).collect();
            let (mean, std) = crate::ablation::mean_std(&accs);
            (n.to_string(), mean, std)
        })
        .collect()
}

pub fn write_comparison_csv(exp: &Experiment, rows: &[ComparisonRow], path: &Path) -> Result<(), CliError> {
    let io = |e: std::io::Error| lrds_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "# {}", hash_comment(exp)).map_err(io)?;
    writeln!(f, "variant,seed,test_acc,test_acc_std").map_err(io)?;
    for r in rows {
        writeln!(f, "{},{},{},", r.variant, r.seed, r.test_acc).map_err(io)?;
    }
    for (name, mean, std) in comparison_means(rows) {
        writeln!(f, "{name},mean,{mean},{std}").map_err(io)?;
    }
    f.flush().map_err(io)?;
    Ok(())
}

/// Teacher and scores for multi-run commands: loaded when given, otherwise
/// produced with `teach` and `score` into `out`.
pub fn prepare_teacher_and_scores(
    exp: &Experiment,
    teacher_path: Option<&Path>,
    scores_path: Option<&Path>,
    out: &Path,
) -> Result<(MlpModel, Vec<f64>), CliError> {
    let (train, _) = exp.load_data()?;
    let teacher_path = match teacher_path {
        Some(p) => p.to_path_buf(),
        None => cmd_teach(exp, out)?.checkpoint,
    };
    let teacher = Teacher::load(&teacher_path)?;
    check_teacher_fits(&teacher, &train)?;
    let scores_path = match scores_path {
        Some(p) => p.to_path_buf(),
        None => cmd_score(exp, &teacher_path, out)?,
    };
    let scores = load_scores(&scores_path, &teacher, &train)?;
    Ok((teacher.as_mlp()?.clone(), scores))
}

pub fn cmd_compare(
    exp: &Experiment,
    seeds: &[u64],
    teacher_path: Option<&Path>,
    scores_path: Option<&Path>,
    out: &Path,
) -> Result<Vec<ComparisonRow>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is needed".into()));
    }
    create_dir(out)?;
    let (teacher, scores) = prepare_teacher_and_scores(exp, teacher_path, scores_path, out)?;
    let (train, test) = exp.load_data()?;
    let rows = run_comparison(exp, &teacher, &scores, &train, test.as_ref(), seeds)?;
    write_comparison_csv(exp, &rows, &out.join(COMPARISON_FILE))?;
    Ok(rows)
}
