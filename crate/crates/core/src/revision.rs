//! Label revision: blending a wrong teacher distribution with the one-hot
//! ground truth so the target class ends up with the largest probability.
//!
//! With `p_max` the teacher's top probability and `p_tar` its probability on
//! the true class, the blend weight `beta = eta / (p_max - p_tar + 1)` for any
//! `eta` in `(0, 1)` keeps `beta * p_tar + (1 - beta) > beta * p_max`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numcore::{argmax_unchecked, ProbVector};
use crate::{Error, Result};

/// How the `eta` coefficient is chosen per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    Fixed(f64),
    /// The teacher's largest probability for the sample.
    TeacherMaxProb,
    /// The teacher's probability on the true class.
    TeacherTargetProb,
}

impl Default for EtaMode {
    fn default() -> Self {
        EtaMode::Fixed(0.8)
    }
}

impl EtaMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EtaMode::Fixed(v) => check_eta(v),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for EtaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EtaMode::Fixed(v) => write!(f, "{v}"),
            EtaMode::TeacherMaxProb => f.write_str("teacher_max_prob"),
            EtaMode::TeacherTargetProb => f.write_str("teacher_target_prob"),
        }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid(format!("eta must lie strictly inside (0, 1), got {eta}")));
    }
    Ok(())
}

fn check_target(p_t: &ProbVector, target: usize) -> Result<()> {
    if target >= p_t.len() {
        return Err(Error::invalid(format!("target {target} out of range for {} classes", p_t.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevisedLabel {
    pub p: ProbVector,
    pub beta: f64,
    pub target: usize,
    pub teacher_pred: usize,
}

pub fn compute_beta(p_t: &ProbVector, target: usize, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    check_target(p_t, target)?;
    let p = p_t.as_slice();
    let p_max = p[argmax_unchecked(p)];
    Ok(eta / (p_max - p[target] + 1.0))
}

pub fn resolve_eta(mode: EtaMode, p_t: &ProbVector, target: usize) -> Result<f64> {
    check_target(p_t, target)?;
    let eta = match mode {
        EtaMode::Fixed(v) => v,
        EtaMode::TeacherMaxProb => p_t[argmax_unchecked(p_t.as_slice())],
        EtaMode::TeacherTargetProb => p_t[target],
    };
    check_eta(eta)?;
    Ok(eta)
}

/// `p = beta * p_t + (1 - beta) * onehot(target)`.
pub fn revise_label(p_t: &ProbVector, target: usize, mode: EtaMode) -> Result<RevisedLabel> {
    let eta = resolve_eta(mode, p_t, target)?;
    let beta = compute_beta(p_t, target, eta)?;
    let mut p: Vec<f64> = p_t.as_slice().iter().map(|v| beta * v).collect();
    p[target] += 1.0 - beta;
    Ok(RevisedLabel {
        p: ProbVector::from_raw(p),
        beta,
        target,
        teacher_pred: argmax_unchecked(p_t.as_slice()),
    })
}

/// Splits sample indices by whether the teacher's argmax equals the label.
/// Both halves keep input order.
pub fn partition_by_correctness(teacher_probs: &[ProbVector], labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if teacher_probs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} teacher predictions for {} labels",
            teacher_probs.len(),
            labels.len()
        )));
    }
    Ok((0..labels.len()).partition(|&i| argmax_unchecked(teacher_probs[i].as_slice()) == labels[i]))
}

/// Writes `sample_index,beta,p_0..p_{C-1}` rows.
pub fn write_revision_csv(path: &Path, rows: &[(usize, RevisedLabel)], header_comment: Option<&str>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    if let Some(c) = header_comment {
        writeln!(w, "# {c}").map_err(io)?;
    }
    let classes = rows.first().map_or(0, |(_, r)| r.p.len());
    let mut header = vec!["sample_index".to_string(), "beta".into()];
    header.extend((0..classes).map(|c| format!("p_{c}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (i, r) in rows {
        write!(w, "{i},{}", r.beta).map_err(io)?;
        for v in r.p.as_slice() {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}
