//! Teacher training and LR/DS distillation with momentum SGD.
//!
//! Every epoch draws independent permutations of the teacher-supervised set
//! `dt` and the label-supervised set `ds`, then deals them into batches that
//! keep the global `dt : ds` ratio. The batch loss is the mean CE over the
//! `ds` part plus the configured distillation loss over the `dt` part.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::influence::{SelectionOrder, SplitPlan};
use crate::losses::{LossKind, LossSpec, Supervision};
use crate::model::{Example, MlpModel, ModelSpec, ParamVector};
use crate::numcore::{argmax_unchecked, tempered_softmax, ProbVector, SeededRng};
use crate::revision::{revise_label, EtaMode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Loss applied to the teacher-supervised part of each batch.
    pub loss: LossSpec,
    pub eta_mode: EtaMode,
    /// Replace the teacher's wrong predictions with revised labels.
    pub label_revision: bool,
    /// Fraction of the training set routed to teacher supervision.
    pub pct: f64,
    pub order: SelectionOrder,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    /// Seeds batch shuffling (and random split order).
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            eta_mode: EtaMode::default(),
            label_revision: true,
            pct: 0.8,
            order: SelectionOrder::HighestFirst,
            epochs: 120,
            batch_size: 64,
            lr0: 0.05,
            lr_decay_epochs: vec![60, 90, 105],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.eta_mode.validate()?;
        if self.loss.kind == LossKind::MseProbs {
            return Err(Error::invalid("mse_probs needs a soft label for every sample; use lrds"));
        }
        if !(0.0..=1.0).contains(&self.pct) {
            return Err(Error::invalid(format!("pct must lie in [0, 1], got {}", self.pct)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("lr_decay_epochs must be strictly increasing"));
        }
        if let Some(&last) = self.lr_decay_epochs.last() {
            if last >= self.epochs {
                return Err(Error::invalid(format!(
                    "decay epoch {last} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// `lr0 * factor^(number of decay epochs <= epoch)`.
pub fn lr_schedule(epoch: usize, cfg: &DistillConfig) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr0 * cfg.lr_decay_factor.powi(decays as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: ParamVector,
}

impl MomentumState {
    pub fn new(len: usize) -> Self {
        Self {
            velocity: ParamVector::zeros(len),
        }
    }
}

/// `v = momentum * v + grad; params -= lr * v`.
pub fn sgd_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.velocity.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} params, {} gradient entries, {} velocity entries",
            params.len(),
            grad.len(),
            state.velocity.len()
        )));
    }
    for ((p, v), g) in params.iter_mut().zip(state.velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// One minibatch: sample indices supervised by the teacher and by labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CombinedBatch {
    pub teacher: Vec<usize>,
    pub label: Vec<usize>,
}

impl CombinedBatch {
    pub fn len(&self) -> usize {
        self.teacher.len() + self.label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One epoch of batches. `dt` and `ds` are permuted independently (in that
/// order) and each batch takes `ceil(batch_size * |dt| / N)` teacher samples,
/// filling the remainder from `ds`. When one side runs out the other fills
/// whole batches.
pub fn make_combined_batches(
    dt: &[usize],
    ds: &[usize],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<CombinedBatch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let n = dt.len() + ds.len();
    if n == 0 {
        return Err(Error::invalid("both index sets are empty"));
    }
    let mut dt = dt.to_vec();
    let mut ds = ds.to_vec();
    rng.shuffle(&mut dt);
    rng.shuffle(&mut ds);
    let per_batch = (batch_size * dt.len()).div_ceil(n);
    let (mut it, mut is) = (0, 0);
    let mut batches = Vec::with_capacity(n.div_ceil(batch_size));
    while it < dt.len() || is < ds.len() {
        let mut t = per_batch.min(dt.len() - it);
        let s = (batch_size - t).min(ds.len() - is);
        t += (batch_size - t - s).min(dt.len() - it - t);
        batches.push(CombinedBatch {
            teacher: dt[it..it + t].to_vec(),
            label: ds[is..is + s].to_vec(),
        });
        it += t;
        is += s;
    }
    Ok(batches)
}

/// Per-batch loss terms, each a group mean.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchTerms {
    pub total: f64,
    /// CE over the label-supervised part; 0 when that part is empty.
    pub ce_ds: f64,
    pub ce_right: f64,
    pub distill_right: f64,
    pub mse_wrong: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means of the total loss and of each term.
    pub loss: BatchTerms,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Writes one CSV row per epoch; an empty `test_acc` cell means no test set.
    pub fn write_csv(&self, path: &Path, header_comment: Option<&str>) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        if let Some(c) = header_comment {
            writeln!(w, "# {c}").map_err(io)?;
        }
        writeln!(
            w,
            "epoch,lr,loss_total,loss_ce_ds,loss_ce_right,loss_distill_right,loss_mse_wrong,test_acc"
        )
        .map_err(io)?;
        for r in &self.records {
            let l = &r.loss;
            let acc = r.test_acc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.lr, l.total, l.ce_ds, l.ce_right, l.distill_right, l.mse_wrong, acc
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let logits = model.logits_for(data)?;
    let correct = logits
        .iter()
        .zip(data.labels())
        .filter(|(z, &y)| argmax_unchecked(z) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Frozen teacher outputs and revised labels for one training set.
pub struct DistillContext<'a> {
    data: &'a Dataset,
    cfg: DistillConfig,
    teacher_logits: Vec<Vec<f64>>,
    /// Present for samples the teacher gets wrong, when revision is on.
    revised: Vec<Option<ProbVector>>,
}

impl<'a> DistillContext<'a> {
    /// Without a teacher only label-supervised batches can be scored.
    pub fn new(teacher: Option<&MlpModel>, data: &'a Dataset, cfg: &DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let teacher_logits = match teacher {
            Some(t) => t.logits_for(data)?,
            None => vec![],
        };
        let mut revised = vec![None; data.len()];
        if cfg.label_revision && cfg.loss.kind == LossKind::Lrds {
            for (i, z) in teacher_logits.iter().enumerate() {
                let y = data.label(i);
                if argmax_unchecked(z) != y {
                    let p_t = tempered_softmax(z, 1.0)?;
                    revised[i] = Some(revise_label(&p_t, y, cfg.eta_mode)?.p);
                }
            }
        }
        Ok(Self {
            data,
            cfg: cfg.clone(),
            teacher_logits,
            revised,
        })
    }

    pub fn teacher_logits(&self, i: usize) -> &[f64] {
        &self.teacher_logits[i]
    }

    pub fn revised(&self, i: usize) -> Option<&ProbVector> {
        self.revised[i].as_ref()
    }

    /// Number of samples the teacher misclassifies.
    pub fn wrong_count(&self) -> usize {
        self.revised.iter().filter(|r| r.is_some()).count()
    }

    /// Loss terms for `batch` at the student's current parameters, and the gradient.
    pub fn batch_loss_and_grad(&self, student: &MlpModel, batch: &CombinedBatch) -> Result<(BatchTerms, ParamVector)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut terms = BatchTerms::default();
        let mut grad = ParamVector::zeros(student.param_count());
        if !batch.label.is_empty() {
            let examples: Vec<Example> = batch
                .label
                .iter()
                .map(|&i| Example {
                    x: self.data.row(i),
                    sup: Supervision::label(self.data.label(i)),
                })
                .collect();
            let (loss, g) = student.loss_and_grad(&examples, &LossSpec::of_kind(LossKind::Ce))?;
            terms.ce_ds = loss;
            terms.total += loss;
            grad.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b);
        }
        if !batch.teacher.is_empty() {
            if self.teacher_logits.is_empty() {
                return Err(Error::invalid("batch has teacher-supervised samples but no teacher was given"));
            }
            let examples: Vec<Example> = batch
                .teacher
                .iter()
                .map(|&i| Example {
                    x: self.data.row(i),
                    sup: Supervision {
                        label: self.data.label(i),
                        teacher_logits: Some(&self.teacher_logits[i]),
                        revised: self.revised[i].as_ref(),
                    },
                })
                .collect();
            let (loss, b, g) = student.loss_and_grad_detailed(&examples, &self.cfg.loss)?;
            terms.ce_right = b.ce;
            terms.distill_right = b.distill;
            terms.mse_wrong = b.mse_wrong;
            terms.total += loss;
            grad.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b);
        }
        Ok((terms, grad))
    }
}

fn run_loop(
    model: &mut MlpModel,
    ctx: &DistillContext<'_>,
    plan: &SplitPlan,
    cfg: &DistillConfig,
    test: Option<&Dataset>,
) -> Result<TrainLog> {
    let mut rng = SeededRng::new(cfg.seed);
    let mut state = MomentumState::new(model.param_count());
    let mut log = TrainLog::default();
    let mut params = model.flatten();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let batches = make_combined_batches(&plan.dt_indices, &plan.ds_indices, cfg.batch_size, &mut rng)?;
        let mut sum = BatchTerms::default();
        for (step, batch) in batches.iter().enumerate() {
            let (terms, grad) = ctx.batch_loss_and_grad(model, batch).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, step {step}: {m}")),
                other => other,
            })?;
            let parts = [terms.total, terms.ce_ds, terms.ce_right, terms.distill_right, terms.mse_wrong];
            if parts.iter().any(|v| !v.is_finite()) || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {epoch}, step {step} (loss {})",
                    terms.total
                )));
            }
            sgd_step(&mut params, &grad, &mut state, lr, cfg.momentum)?;
            model.unflatten(params.clone())?;
            sum.total += terms.total;
            sum.ce_ds += terms.ce_ds;
            sum.ce_right += terms.ce_right;
            sum.distill_right += terms.distill_right;
            sum.mse_wrong += terms.mse_wrong;
        }
        let k = batches.len() as f64;
        let loss = BatchTerms {
            total: sum.total / k,
            ce_ds: sum.ce_ds / k,
            ce_right: sum.ce_right / k,
            distill_right: sum.distill_right / k,
            mse_wrong: sum.mse_wrong / k,
        };
        let test_acc = test.map(|t| evaluate(model, t)).transpose()?;
        log.records.push(EpochRecord { epoch, lr, loss, test_acc });
    }
    Ok(log)
}

fn check_fit(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    spec.validate()?;
    if spec.input_dim() != data.dim() {
        return Err(Error::invalid(format!(
            "model expects {} features, data has {}",
            spec.input_dim(),
            data.dim()
        )));
    }
    if spec.class_count() < data.class_count() {
        return Err(Error::invalid(format!(
            "model has {} outputs, data has {} classes",
            spec.class_count(),
            data.class_count()
        )));
    }
    Ok(())
}

/// Plain CE training with the same batching, optimiser and schedule as [`distill`].
pub fn train_teacher(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &DistillConfig,
    test: Option<&Dataset>,
) -> Result<(MlpModel, TrainLog)> {
    check_fit(spec, data)?;
    let cfg = DistillConfig {
        pct: 0.0,
        ..cfg.clone()
    };
    cfg.validate()?;
    let mut model = MlpModel::init(spec)?;
    let plan = SplitPlan::all_labels(data.len());
    let ctx = DistillContext::new(None, data, &cfg)?;
    let log = run_loop(&mut model, &ctx, &plan, &cfg, test)?;
    Ok((model, log))
}

/// Trains a fresh student from `student_spec` under `plan`.
pub fn distill(
    teacher: &MlpModel,
    student_spec: &ModelSpec,
    data: &Dataset,
    plan: &SplitPlan,
    cfg: &DistillConfig,
    test: Option<&Dataset>,
) -> Result<(MlpModel, TrainLog)> {
    cfg.validate()?;
    check_fit(student_spec, data)?;
    if teacher.class_count() != student_spec.class_count() {
        return Err(Error::invalid(format!(
            "teacher has {} classes, student has {}",
            teacher.class_count(),
            student_spec.class_count()
        )));
    }
    if teacher.input_dim() != data.dim() {
        return Err(Error::invalid(format!(
            "teacher expects {} features, data has {}",
            teacher.input_dim(),
            data.dim()
        )));
    }
    plan.validate(data.len())?;
    let ctx = DistillContext::new(Some(teacher), data, cfg)?;
    let mut student = MlpModel::init(student_spec)?;
    let log = run_loop(&mut student, &ctx, plan, cfg, test)?;
    Ok((student, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, BlobSpec};
    use crate::influence::rank_and_split;
    use crate::losses::{vanilla_kd_loss, RightPartLoss};

    fn blobs(seed: u64, per_class: usize) -> Dataset {
        gen_blobs(&BlobSpec {
            class_count: 2,
            samples_per_class: per_class,
            centers: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            spread: vec![0.5, 0.5],
            label_noise_rate: 0.0,
            seed,
        })
        .unwrap()
    }

    fn short_cfg(epochs: usize) -> DistillConfig {
        DistillConfig {
            epochs,
            batch_size: 16,
            lr_decay_epochs: vec![],
            ..DistillConfig::default()
        }
    }

    #[test]
    fn schedule_values() {
        let cfg = DistillConfig {
            epochs: 240,
            lr_decay_epochs: vec![150, 180, 210],
            ..DistillConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.05);
        assert_eq!(lr_schedule(149, &cfg), 0.05);
        assert!((lr_schedule(200, &cfg) - 0.0005).abs() < 1e-15);
        assert!((lr_schedule(240, &cfg) - 0.00005).abs() < 1e-16);
        for e in 0..300 {
            assert!(lr_schedule(e + 1, &cfg) <= lr_schedule(e, &cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = [
            DistillConfig { lr_decay_epochs: vec![60, 60], ..DistillConfig::default() },
            DistillConfig { lr_decay_epochs: vec![120], ..DistillConfig::default() },
            DistillConfig { batch_size: 0, ..DistillConfig::default() },
            DistillConfig { pct: 1.5, ..DistillConfig::default() },
            DistillConfig { lr0: 0.0, ..DistillConfig::default() },
            DistillConfig { eta_mode: EtaMode::Fixed(1.0), ..DistillConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn momentum_steps() {
        let g = [1.0, -2.0];
        let mut p = vec![0.0, 0.0];
        let mut s = MomentumState::new(2);
        sgd_step(&mut p, &g, &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![-0.1, 0.2]);

        let mut p = vec![0.0, 0.0];
        let mut s = MomentumState::new(2);
        sgd_step(&mut p, &g, &mut s, 1.0, 0.9).unwrap();
        sgd_step(&mut p, &g, &mut s, 1.0, 0.9).unwrap();
        assert!((p[0] + 2.9).abs() < 1e-15 && (p[1] - 5.8).abs() < 1e-15);

        for _ in 0..5 {
            sgd_step(&mut p, &[0.0, 0.0], &mut s, 1.0, 0.9).unwrap();
        }
        assert!((s.velocity[0] - 1.9 * 0.9f64.powi(5)).abs() < 1e-15);
        assert!(sgd_step(&mut p, &[0.0], &mut s, 1.0, 0.9).is_err());
    }

    #[test]
    fn batch_composition() {
        let mut rng = SeededRng::new(0);
        let b = make_combined_batches(&[0, 1, 2, 3], &[4], 5, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!((b[0].teacher.len(), b[0].label.len()), (4, 1));

        let b = make_combined_batches(&[0, 1, 2], &[], 2, &mut rng).unwrap();
        assert!(b.iter().all(|x| x.label.is_empty()));
        assert_eq!(b.iter().map(CombinedBatch::len).collect::<Vec<_>>(), vec![2, 1]);

        assert!(make_combined_batches(&[], &[], 4, &mut rng).is_err());
        assert!(make_combined_batches(&[0], &[], 0, &mut rng).is_err());
    }

    #[test]
    fn batches_cover_each_sample_once() {
        let mut rng = SeededRng::new(11);
        for (nt, ns, bs) in [(80, 20, 64), (3, 97, 10), (50, 50, 7), (0, 13, 4), (13, 0, 4), (1, 1, 100)] {
            let dt: Vec<usize> = (0..nt).collect();
            let ds: Vec<usize> = (nt..nt + ns).collect();
            let batches = make_combined_batches(&dt, &ds, bs, &mut rng).unwrap();
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.teacher.iter().chain(&b.label).copied()).collect();
            seen.sort();
            assert_eq!(seen, (0..nt + ns).collect::<Vec<_>>());
            assert!(batches.iter().all(|b| b.len() <= bs && !b.is_empty()));
            assert!(batches.iter().all(|b| b.teacher.iter().all(|&i| i < nt)));
            let k = (bs * nt).div_ceil(nt + ns);
            assert!(batches[0].teacher.len() == k.min(nt));
        }
    }

    #[test]
    fn teacher_fits_separable_blobs() {
        let data = blobs(1, 100);
        let spec = ModelSpec::new(vec![2, 8, 2], 0);
        let (m, log) = train_teacher(&spec, &data, &short_cfg(200), None).unwrap();
        assert_eq!(log.records.len(), 200);
        assert!(evaluate(&m, &data).unwrap() >= 0.99);
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let data = blobs(2, 20);
        let spec = ModelSpec::new(vec![2, 4, 2], 5);
        let (m0, log) = train_teacher(&spec, &data, &short_cfg(0), None).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(m0.params(), MlpModel::init(&spec).unwrap().params());
        let (a, _) = train_teacher(&spec, &data, &short_cfg(5), Some(&data)).unwrap();
        let (b, _) = train_teacher(&spec, &data, &short_cfg(5), Some(&data)).unwrap();
        assert_eq!(a.params().0, b.params().0);
    }

    #[test]
    fn evaluate_cases() {
        // Constant logits predict class 0 everywhere.
        let spec = ModelSpec::new(vec![2, 4], 0);
        let m = MlpModel::from_params(&spec, vec![0.0; 12]).unwrap();
        let data = Dataset::new("b", vec![0.0; 16], 2, vec![0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
        assert_eq!(evaluate(&m, &data).unwrap(), 0.25);
        let perm = data.select(&[7, 6, 5, 4, 3, 2, 1, 0]).unwrap();
        assert_eq!(evaluate(&m, &perm).unwrap(), 0.25);
    }

    #[test]
    fn pure_ce_distillation_matches_ce_training() {
        let data = blobs(3, 30);
        let tspec = ModelSpec::new(vec![2, 6, 2], 1);
        let (teacher, _) = train_teacher(&tspec, &data, &short_cfg(3), None).unwrap();
        let sspec = ModelSpec::new(vec![2, 3, 2], 9);
        let cfg = DistillConfig {
            pct: 0.0,
            loss: LossSpec { lambda1: 0.0, lambda2: 0.0, ..LossSpec::default() },
            ..short_cfg(6)
        };
        let plan = rank_and_split(&vec![0.0; data.len()], 0.0, SelectionOrder::HighestFirst, 0).unwrap();
        let (student, _) = distill(&teacher, &sspec, &data, &plan, &cfg, None).unwrap();
        let (plain, _) = train_teacher(&sspec, &data, &cfg, None).unwrap();
        assert_eq!(student.params().0, plain.params().0);
    }

    #[test]
    fn perfect_teacher_reduces_to_vanilla_kd() {
        let data = blobs(4, 30);
        let (teacher, _) = train_teacher(&ModelSpec::new(vec![2, 8, 2], 0), &data, &short_cfg(100), None).unwrap();
        assert_eq!(evaluate(&teacher, &data).unwrap(), 1.0);
        let cfg = DistillConfig {
            pct: 1.0,
            loss: LossSpec { right_part_loss: RightPartLoss::KlDistill, lambda1: 0.7, ..LossSpec::default() },
            ..short_cfg(1)
        };
        let ctx = DistillContext::new(Some(&teacher), &data, &cfg).unwrap();
        assert_eq!(ctx.wrong_count(), 0);
        let student = MlpModel::init(&ModelSpec::new(vec![2, 3, 2], 2)).unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        let batches = make_combined_batches(&all, &[], 16, &mut SeededRng::new(0)).unwrap();
        for b in &batches {
            let (terms, _) = ctx.batch_loss_and_grad(&student, b).unwrap();
            let mut expected = 0.0;
            for &i in &b.teacher {
                let z = student.forward(data.row(i)).unwrap();
                expected += vanilla_kd_loss(&z, ctx.teacher_logits(i), data.label(i), &cfg.loss).unwrap();
            }
            expected /= b.len() as f64;
            assert!((terms.total - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_rejects_mismatched_student() {
        let data = blobs(5, 10);
        let (teacher, _) = train_teacher(&ModelSpec::new(vec![2, 2], 0), &data, &short_cfg(1), None).unwrap();
        let plan = SplitPlan::all_teacher(data.len());
        let err = distill(&teacher, &ModelSpec::new(vec![2, 3], 0), &data, &plan, &short_cfg(1), None);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn divergence_names_the_epoch() {
        let data = blobs(6, 20);
        let cfg = DistillConfig { lr0: 1e200, momentum: 0.0, ..short_cfg(5) };
        match train_teacher(&ModelSpec::new(vec![2, 4, 2], 0), &data, &cfg, None) {
            Err(Error::Numerical(m)) => assert!(m.contains("epoch"), "{m}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn log_csv_layout() {
        let data = blobs(7, 5);
        let (_, log) = train_teacher(&ModelSpec::new(vec![2, 2], 0), &data, &short_cfg(2), Some(&data)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path, Some("config_hash=x")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "epoch,lr,loss_total,loss_ce_ds,loss_ce_right,loss_distill_right,loss_mse_wrong,test_acc");
        assert!(lines[2].starts_with("0,0.05,"));
    }
}
