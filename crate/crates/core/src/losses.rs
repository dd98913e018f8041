//! Classification and distillation losses.
//!
//! Reductions are means: over classes inside the MSE terms and over samples
//! inside each group. The temperature only enters the KL term.

use serde::{Deserialize, Serialize};

use crate::numcore::{check_finite, log_softmax_into, softmax_into, tempered_softmax, ProbVector};
use crate::{Error, Result};

/// Lower clamp applied to the target probability before taking its log.
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    KlDistill,
    MseLogits,
    MseProbs,
    VanillaKd,
    Lrds,
}

/// Loss applied between student and teacher logits on correctly predicted samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RightPartLoss {
    #[default]
    MseLogits,
    KlDistill,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub right_part_loss: RightPartLoss,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Lrds,
            tau: 4.0,
            lambda1: 1.0,
            lambda2: 1.0,
            right_part_loss: RightPartLoss::MseLogits,
        }
    }
}

impl LossSpec {
    pub fn of_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `-ln p[y]` with `p[y]` clamped below at [`CE_CLAMP`].
pub fn cross_entropy(p: &ProbVector, y: usize) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::invalid(format!("label {y} out of range for {} classes", p.len())));
    }
    Ok(-p[y].max(CE_CLAMP).ln())
}

/// `tau^2 * KL(softmax(z_t / tau) || softmax(z_s / tau))`, teacher as reference.
pub fn kl_distill(z_s: &[f64], z_t: &[f64], tau: f64) -> Result<f64> {
    same_len(z_s.len(), z_t.len())?;
    check_finite(z_s)?;
    check_finite(z_t)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(kl_term(z_s, z_t, tau, None))
}

/// Mean squared difference of raw logits.
pub fn mse_logits(z_s: &[f64], z_t: &[f64]) -> Result<f64> {
    same_len(z_s.len(), z_t.len())?;
    check_finite(z_s)?;
    check_finite(z_t)?;
    Ok(mse_logits_term(z_s, z_t, None))
}

/// Mean squared difference between `softmax(z_s)` and a target distribution.
pub fn mse_probs(z_s: &[f64], p: &ProbVector) -> Result<f64> {
    same_len(z_s.len(), p.len())?;
    let q = tempered_softmax(z_s, 1.0)?;
    let c = p.len() as f64;
    Ok(q.as_slice()
        .iter()
        .zip(p.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / c)
}

/// `CE(softmax(z_s), y) + lambda1 * kl_distill(z_s, z_t, tau)`.
pub fn vanilla_kd_loss(z_s: &[f64], z_t: &[f64], y: usize, spec: &LossSpec) -> Result<f64> {
    spec.validate()?;
    let ce = cross_entropy(&tempered_softmax(z_s, 1.0)?, y)?;
    let kl = kl_distill(z_s, z_t, spec.tau)?;
    Ok(ce + spec.lambda1 * kl)
}

/// A sample the teacher classifies correctly.
#[derive(Debug, Clone, Copy)]
pub struct RightSample<'a> {
    pub z_s: &'a [f64],
    pub z_t: &'a [f64],
    pub y: usize,
}

/// A sample the teacher got wrong, paired with its revised soft label.
#[derive(Debug, Clone, Copy)]
pub struct WrongSample<'a> {
    pub z_s: &'a [f64],
    pub p_w: &'a ProbVector,
}

fn right_part(z_s: &[f64], z_t: &[f64], spec: &LossSpec) -> Result<f64> {
    match spec.right_part_loss {
        RightPartLoss::MseLogits => mse_logits(z_s, z_t),
        RightPartLoss::KlDistill => kl_distill(z_s, z_t, spec.tau),
    }
}

/// Combined objective over right and wrong teacher predictions:
///
/// `mean_r[CE(softmax(z_s), y) + lambda1 * right_part(z_s, z_t)] + lambda2 * mean_w[mse_probs(z_s, p_w)]`
///
/// An empty group contributes zero. Wrong samples carry no CE term.
pub fn lrds_loss(right: &[RightSample<'_>], wrong: &[WrongSample<'_>], spec: &LossSpec) -> Result<f64> {
    spec.validate()?;
    if right.is_empty() && wrong.is_empty() {
        return Err(Error::invalid("both right and wrong groups are empty"));
    }
    let mut right_total = 0.0;
    for s in right {
        let ce = cross_entropy(&tempered_softmax(s.z_s, 1.0)?, s.y)?;
        right_total += ce + spec.lambda1 * right_part(s.z_s, s.z_t, spec)?;
    }
    let mut wrong_total = 0.0;
    for s in wrong {
        wrong_total += mse_probs(s.z_s, s.p_w)?;
    }
    let right_mean = if right.is_empty() { 0.0 } else { right_total / right.len() as f64 };
    let wrong_mean = if wrong.is_empty() { 0.0 } else { wrong_total / wrong.len() as f64 };
    Ok(right_mean + spec.lambda2 * wrong_mean)
}

// Per-sample terms with optional gradient accumulation: when `dz` is given as
// `(buffer, w)`, `w * dloss/dz` is added into `buffer`.

fn ce_term(z: &[f64], y: usize, dz: Option<(&mut [f64], f64)>) -> f64 {
    let mut p = vec![0.0; z.len()];
    softmax_into(z, 1.0, &mut p);
    let loss = -p[y].max(CE_CLAMP).ln();
    if let Some((g, w)) = dz {
        // Inside the clamp the loss is constant.
        if p[y] > CE_CLAMP {
            for (i, (gi, pi)) in g.iter_mut().zip(&p).enumerate() {
                *gi += w * (pi - if i == y { 1.0 } else { 0.0 });
            }
        }
    }
    loss
}

fn kl_term(z_s: &[f64], z_t: &[f64], tau: f64, dz: Option<(&mut [f64], f64)>) -> f64 {
    let c = z_s.len();
    let mut ls = vec![0.0; c];
    let mut lt = vec![0.0; c];
    log_softmax_into(z_s, tau, &mut ls);
    log_softmax_into(z_t, tau, &mut lt);
    let mut kl = 0.0;
    for i in 0..c {
        let pt = lt[i].exp();
        if pt > 0.0 {
            kl += pt * (lt[i] - ls[i]);
        }
    }
    if let Some((g, w)) = dz {
        for i in 0..c {
            g[i] += w * tau * (ls[i].exp() - lt[i].exp());
        }
    }
    (tau * tau * kl).max(0.0)
}

fn mse_logits_term(z_s: &[f64], z_t: &[f64], dz: Option<(&mut [f64], f64)>) -> f64 {
    let c = z_s.len() as f64;
    let loss = z_s.iter().zip(z_t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c;
    if let Some((g, w)) = dz {
        for ((gi, a), b) in g.iter_mut().zip(z_s).zip(z_t) {
            *gi += w * 2.0 * (a - b) / c;
        }
    }
    loss
}

fn mse_probs_term(z: &[f64], p: &[f64], dz: Option<(&mut [f64], f64)>) -> f64 {
    let c = z.len();
    let mut q = vec![0.0; c];
    softmax_into(z, 1.0, &mut q);
    let loss = q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c as f64;
    if let Some((g, w)) = dz {
        // d/dq then through the softmax Jacobian diag(q) - q q^T.
        let dq: Vec<f64> = q.iter().zip(p).map(|(a, b)| 2.0 * (a - b) / c as f64).collect();
        let inner: f64 = q.iter().zip(&dq).map(|(a, b)| a * b).sum();
        for i in 0..c {
            g[i] += w * q[i] * (dq[i] - inner);
        }
    }
    loss
}

/// What a single sample is supervised with.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub label: usize,
    pub teacher_logits: Option<&'a [f64]>,
    /// Revised soft label; present exactly for wrong-part samples.
    pub revised: Option<&'a ProbVector>,
}

impl<'a> Supervision<'a> {
    pub fn label(label: usize) -> Self {
        Self {
            label,
            teacher_logits: None,
            revised: None,
        }
    }

    pub fn teacher(label: usize, teacher_logits: &'a [f64]) -> Self {
        Self {
            label,
            teacher_logits: Some(teacher_logits),
            revised: None,
        }
    }

    pub fn revised(label: usize, revised: &'a ProbVector) -> Self {
        Self {
            label,
            teacher_logits: None,
            revised: Some(revised),
        }
    }
}

/// Group means of the individual loss terms (before lambda weighting).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// Cross-entropy over the samples that carry a CE term.
    pub ce: f64,
    /// KL or logit-MSE against teacher logits.
    pub distill: f64,
    /// Softmax-MSE against revised labels.
    pub mse_wrong: f64,
}

/// Batch loss and `dloss/dlogits` per sample.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub breakdown: LossBreakdown,
    pub dlogits: Vec<Vec<f64>>,
}

fn teacher_of<'a>(s: &Supervision<'a>, kind: LossKind) -> Result<&'a [f64]> {
    s.teacher_logits
        .ok_or_else(|| Error::invalid(format!("{kind:?} loss needs teacher logits")))
}

fn revised_of<'a>(s: &Supervision<'a>, kind: LossKind) -> Result<&'a ProbVector> {
    s.revised
        .ok_or_else(|| Error::invalid(format!("{kind:?} loss needs a revised soft label")))
}

/// Loss of a whole batch given student logits, with gradients w.r.t. those logits.
///
/// Non-composite kinds are averaged over all samples. `Lrds` treats samples
/// with a revised label as the wrong group and the rest as the right group.
pub fn batch_loss_grad(spec: &LossSpec, logits: &[Vec<f64>], sup: &[Supervision<'_>]) -> Result<BatchLoss> {
    spec.validate()?;
    same_len(logits.len(), sup.len())?;
    if logits.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for (z, s) in logits.iter().zip(sup) {
        if s.label >= z.len() {
            return Err(Error::invalid(format!("label {} out of range for {} classes", s.label, z.len())));
        }
        if let Some(t) = s.teacher_logits {
            same_len(z.len(), t.len())?;
        }
        if let Some(p) = s.revised {
            same_len(z.len(), p.len())?;
        }
    }

    let n = logits.len() as f64;
    let mut dlogits: Vec<Vec<f64>> = logits.iter().map(|z| vec![0.0; z.len()]).collect();
    let mut b = LossBreakdown::default();
    let kind = spec.kind;
    let loss = match kind {
        LossKind::Ce => {
            for ((z, s), g) in logits.iter().zip(sup).zip(&mut dlogits) {
                b.ce += ce_term(z, s.label, Some((g, 1.0 / n)));
            }
            b.ce /= n;
            b.ce
        }
        LossKind::KlDistill => {
            for ((z, s), g) in logits.iter().zip(sup).zip(&mut dlogits) {
                b.distill += kl_term(z, teacher_of(s, kind)?, spec.tau, Some((g, 1.0 / n)));
            }
            b.distill /= n;
            b.distill
        }
        LossKind::MseLogits => {
            for ((z, s), g) in logits.iter().zip(sup).zip(&mut dlogits) {
                b.distill += mse_logits_term(z, teacher_of(s, kind)?, Some((g, 1.0 / n)));
            }
            b.distill /= n;
            b.distill
        }
        LossKind::MseProbs => {
            for ((z, s), g) in logits.iter().zip(sup).zip(&mut dlogits) {
                b.mse_wrong += mse_probs_term(z, revised_of(s, kind)?.as_slice(), Some((g, 1.0 / n)));
            }
            b.mse_wrong /= n;
            b.mse_wrong
        }
        LossKind::VanillaKd => {
            for ((z, s), g) in logits.iter().zip(sup).zip(&mut dlogits) {
                let t = teacher_of(s, kind)?;
                b.ce += ce_term(z, s.label, Some((&mut *g, 1.0 / n)));
                b.distill += kl_term(z, t, spec.tau, Some((g, spec.lambda1 / n)));
            }
            b.ce /= n;
            b.distill /= n;
            b.ce + spec.lambda1 * b.distill
        }
        LossKind::Lrds => {
            let n_wrong = sup.iter().filter(|s| s.revised.is_some()).count();
            let n_right = sup.len() - n_wrong;
            let (wr, ww) = (1.0 / n_right.max(1) as f64, 1.0 / n_wrong.max(1) as f64);
            for ((z, s), g) in logits.iter().zip(sup).zip(&mut dlogits) {
                if let Some(p) = s.revised {
                    b.mse_wrong += mse_probs_term(z, p.as_slice(), Some((g, spec.lambda2 * ww)));
                } else {
                    let t = teacher_of(s, kind)?;
                    b.ce += ce_term(z, s.label, Some((&mut *g, wr)));
                    b.distill += match spec.right_part_loss {
                        RightPartLoss::MseLogits => mse_logits_term(z, t, Some((g, spec.lambda1 * wr))),
                        RightPartLoss::KlDistill => kl_term(z, t, spec.tau, Some((g, spec.lambda1 * wr))),
                    };
                }
            }
            if n_right > 0 {
                b.ce *= wr;
                b.distill *= wr;
            }
            if n_wrong > 0 {
                b.mse_wrong *= ww;
            }
            b.ce + spec.lambda1 * b.distill + spec.lambda2 * b.mse_wrong
        }
    };
    Ok(BatchLoss {
        loss,
        breakdown: b,
        dlogits,
    })
}
