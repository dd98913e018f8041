//! Influence-function scoring and influence-ranked dataset splits.
//!
//! Upweighting training sample `i` by an infinitesimal `eps` moves the
//! optimum by `-H^{-1} grad L(x_i)`, where `H` is the Hessian of the
//! data-mean training loss at the trained parameters. A small damping term
//! is added to `H` before inversion so that non-convex teachers stay solvable.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::data::{round_half_up, Dataset};
use crate::model::{exact_hessian, hvp, params_checksum, Differentiable, ParamVector, DEFAULT_MAX_HESSIAN_PARAMS};
use crate::numcore::SeededRng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Exact,
    ConjugateGradient,
}

/// How the parameter-influence vector is reduced to one score per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalarization {
    /// `|H^{-1} g|_2`.
    #[default]
    ParamNorm,
    /// `g^T H^{-1} g`.
    SelfInfluence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceConfig {
    pub solver: Solver,
    pub damping: f64,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    pub scalarization: Scalarization,
    /// Largest parameter count the exact solver will form a dense Hessian for.
    pub exact_max_params: usize,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Exact,
            damping: 1e-3,
            cg_max_iters: 100,
            cg_tol: 1e-6,
            scalarization: Scalarization::ParamNorm,
            exact_max_params: DEFAULT_MAX_HESSIAN_PARAMS,
        }
    }
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::invalid(format!("damping must be non-negative, got {}", self.damping)));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol.is_finite()) {
            return Err(Error::invalid(format!("cg_tol must be positive, got {}", self.cg_tol)));
        }
        if self.cg_max_iters == 0 {
            return Err(Error::invalid("cg_max_iters must be positive"));
        }
        Ok(())
    }
}

/// A training or test point.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub label: usize,
}

impl<'a> Sample<'a> {
    pub fn of(data: &'a Dataset, i: usize) -> Self {
        Self {
            x: data.row(i),
            label: data.label(i),
        }
    }
}

/// Gradient of the training loss at one sample.
pub fn per_sample_grad<M: Differentiable + ?Sized>(teacher: &M, sample: Sample<'_>) -> Result<ParamVector> {
    let mut g = vec![0.0; teacher.param_count()];
    teacher.sample_loss_grad(teacher.params(), sample.x, sample.label, &mut g);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("per-sample gradient is not finite".into()));
    }
    Ok(ParamVector(g))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

enum Backend {
    Exact { matrix: DMatrix<f64>, lu: LU<f64, Dyn, Dyn> },
    ConjugateGradient,
}

/// Solves `(H + damping I) u = v` repeatedly against one model and dataset.
///
/// The exact backend forms and factorises the damped Hessian once at
/// construction; afterwards the context is read-only.
pub struct InverseHvp<'a, M: Differentiable + ?Sized> {
    model: &'a M,
    data: &'a Dataset,
    cfg: InfluenceConfig,
    backend: Backend,
}

impl<'a, M: Differentiable + ?Sized> InverseHvp<'a, M> {
    pub fn new(model: &'a M, data: &'a Dataset, cfg: &InfluenceConfig) -> Result<Self> {
        cfg.validate()?;
        model.check_data(data)?;
        let backend = match cfg.solver {
            Solver::Exact => {
                let mut matrix = exact_hessian(model, data, cfg.exact_max_params)?.matrix;
                for i in 0..matrix.nrows() {
                    matrix[(i, i)] += cfg.damping;
                }
                let lu = matrix.clone().lu();
                Backend::Exact { matrix, lu }
            }
            Solver::ConjugateGradient => Backend::ConjugateGradient,
        };
        Ok(Self {
            model,
            data,
            cfg: *cfg,
            backend,
        })
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = match &self.backend {
            Backend::Exact { matrix, .. } => {
                return Ok((matrix * DVector::from_column_slice(v)).as_slice().to_vec());
            }
            Backend::ConjugateGradient => hvp(self.model, self.data, v)?.into_vec(),
        };
        for (o, x) in out.iter_mut().zip(v) {
            *o += self.cfg.damping * x;
        }
        Ok(out)
    }

    fn relative_residual(&self, u: &[f64], v: &[f64], v_norm: f64) -> Result<f64> {
        let au = self.apply(u)?;
        Ok(norm(&au.iter().zip(v).map(|(a, b)| a - b).collect::<Vec<_>>()) / v_norm)
    }

    /// `u` with `|(H + damping I) u - v| <= cg_tol |v|`, or an error.
    pub fn solve(&self, v: &[f64]) -> Result<ParamVector> {
        let n = self.model.param_count();
        if v.len() != n {
            return Err(Error::invalid(format!("vector has length {}, model has {n} parameters", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("right-hand side has non-finite entries"));
        }
        let v_norm = norm(v);
        if v_norm == 0.0 {
            return Ok(ParamVector::zeros(n));
        }
        match &self.backend {
            Backend::Exact { lu, .. } => {
                let u = lu
                    .solve(&DVector::from_column_slice(v))
                    .ok_or_else(|| Error::Numerical("damped Hessian is singular".into()))?;
                let u = u.as_slice().to_vec();
                if u.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numerical("damped Hessian is singular".into()));
                }
                let res = self.relative_residual(&u, v, v_norm)?;
                if res > self.cfg.cg_tol {
                    return Err(Error::Numerical(format!(
                        "exact solve residual {res:e} exceeds tolerance {:e}",
                        self.cfg.cg_tol
                    )));
                }
                Ok(ParamVector(u))
            }
            Backend::ConjugateGradient => self.conjugate_gradient(v, v_norm),
        }
    }

    fn conjugate_gradient(&self, v: &[f64], v_norm: f64) -> Result<ParamVector> {
        let tol = self.cfg.cg_tol * v_norm;
        let mut x = vec![0.0; v.len()];
        let mut r = v.to_vec();
        let mut p = r.clone();
        let mut rs = dot(&r, &r);
        let mut iterations = 0;
        loop {
            if rs.sqrt() <= tol {
                // The recursive residual drifts from the true one because the
                // finite-difference operator is only linear to O(h^2); confirm
                // and restart from the true residual if needed.
                let ax = self.apply(&x)?;
                r = v.iter().zip(&ax).map(|(a, b)| a - b).collect();
                rs = dot(&r, &r);
                if rs.sqrt() <= tol {
                    return Ok(ParamVector(x));
                }
                p = r.clone();
            }
            if iterations >= self.cfg.cg_max_iters {
                return Err(Error::Convergence {
                    iterations,
                    residual: self.relative_residual(&x, v, v_norm)?,
                });
            }
            let ap = self.apply(&p)?;
            let curvature = dot(&p, &ap);
            if !(curvature > 0.0) {
                return Err(Error::Numerical(format!(
                    "damped Hessian is not positive definite (p^T A p = {curvature:e}); increase damping"
                )));
            }
            let alpha = rs / curvature;
            for i in 0..x.len() {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rs_next = dot(&r, &r);
            let beta = rs_next / rs;
            for i in 0..p.len() {
                p[i] = r[i] + beta * p[i];
            }
            rs = rs_next;
            iterations += 1;
        }
    }
}

/// One-shot `(H + damping I)^{-1} v`.
pub fn inverse_hvp<M: Differentiable + ?Sized>(
    teacher: &M,
    data: &Dataset,
    v: &[f64],
    cfg: &InfluenceConfig,
) -> Result<ParamVector> {
    InverseHvp::new(teacher, data, cfg)?.solve(v)
}

/// Estimated parameter change from upweighting `sample`: `-H^{-1} grad L(sample)`.
pub fn param_influence<M: Differentiable + ?Sized>(
    teacher: &M,
    data: &Dataset,
    sample: Sample<'_>,
    cfg: &InfluenceConfig,
) -> Result<ParamVector> {
    let ctx = InverseHvp::new(teacher, data, cfg)?;
    param_influence_with(&ctx, teacher, sample)
}

fn param_influence_with<M: Differentiable + ?Sized>(
    ctx: &InverseHvp<'_, M>,
    teacher: &M,
    sample: Sample<'_>,
) -> Result<ParamVector> {
    let g = per_sample_grad(teacher, sample)?;
    let mut u = ctx.solve(&g)?;
    u.iter_mut().for_each(|x| *x = -*x);
    Ok(u)
}

/// Estimated change of the loss at `test` from upweighting `train`:
/// `-grad L(test)^T H^{-1} grad L(train)`.
pub fn prediction_influence<M: Differentiable + ?Sized>(
    teacher: &M,
    data: &Dataset,
    train: Sample<'_>,
    test: Sample<'_>,
    cfg: &InfluenceConfig,
) -> Result<f64> {
    let ctx = InverseHvp::new(teacher, data, cfg)?;
    let g_train = per_sample_grad(teacher, train)?;
    let g_test = per_sample_grad(teacher, test)?;
    Ok(-dot(&g_test, &ctx.solve(&g_train)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceReport {
    pub scores: Vec<f64>,
    pub config: InfluenceConfig,
    pub teacher_checksum: String,
    pub dataset_checksum: String,
}

/// One score per training sample against the trained `teacher`.
pub fn score_dataset<M: Differentiable + ?Sized>(
    teacher: &M,
    data: &Dataset,
    cfg: &InfluenceConfig,
) -> Result<InfluenceReport> {
    let ctx = InverseHvp::new(teacher, data, cfg)?;
    let mut scores = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let g = per_sample_grad(teacher, Sample::of(data, i))?;
        let u = ctx.solve(&g)?;
        let score = match cfg.scalarization {
            Scalarization::ParamNorm => norm(&u),
            Scalarization::SelfInfluence => dot(&g, &u),
        };
        if !score.is_finite() {
            return Err(Error::Numerical(format!("influence score of sample {i} is not finite")));
        }
        scores.push(score);
    }
    Ok(InfluenceReport {
        scores,
        config: *cfg,
        teacher_checksum: params_checksum(teacher.params()),
        dataset_checksum: data.checksum().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionOrder {
    /// Highest scores go to the teacher-supervised set.
    #[default]
    HighestFirst,
    LowestFirst,
    /// Seeded shuffle, ignoring the scores.
    Random,
}

impl std::fmt::Display for SelectionOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionOrder::HighestFirst => "highest_first",
            SelectionOrder::LowestFirst => "lowest_first",
            SelectionOrder::Random => "random",
        })
    }
}

/// Sample indices in selection order. Equal scores keep the lower index first.
pub fn selection_order(scores: &[f64], order: SelectionOrder, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match order {
        SelectionOrder::HighestFirst => idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        SelectionOrder::LowestFirst => idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
        SelectionOrder::Random => SeededRng::new(seed).shuffle(&mut idx),
    }
    idx
}

/// Teacher-supervised (`dt`) and label-supervised (`ds`) index sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub pct: f64,
    pub order: SelectionOrder,
    pub seed: u64,
    /// In selection order.
    pub dt_indices: Vec<usize>,
    /// In selection order.
    pub ds_indices: Vec<usize>,
}

impl SplitPlan {
    /// Everything label-supervised.
    pub fn all_labels(n: usize) -> Self {
        Self {
            pct: 0.0,
            order: SelectionOrder::HighestFirst,
            seed: 0,
            dt_indices: vec![],
            ds_indices: (0..n).collect(),
        }
    }

    /// Everything teacher-supervised.
    pub fn all_teacher(n: usize) -> Self {
        Self {
            pct: 1.0,
            order: SelectionOrder::HighestFirst,
            seed: 0,
            dt_indices: (0..n).collect(),
            ds_indices: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.dt_indices.len() + self.ds_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the two sets are disjoint and together cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.dt_indices.iter().chain(&self.ds_indices) {
            if i >= n {
                return Err(Error::Validation(format!("split index {i} out of range for {n} samples")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!("sample {i} appears twice in the split")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("sample {i} is missing from the split")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// First `round_half_up(pct * N)` samples in selection order go to `dt`.
pub fn rank_and_split(scores: &[f64], pct: f64, order: SelectionOrder, seed: u64) -> Result<SplitPlan> {
    if !(0.0..=1.0).contains(&pct) {
        return Err(Error::invalid(format!("pct must lie in [0, 1], got {pct}")));
    }
    let ranked = selection_order(scores, order, seed);
    let k = round_half_up(pct, scores.len());
    Ok(SplitPlan {
        pct,
        order,
        seed,
        dt_indices: ranked[..k].to_vec(),
        ds_indices: ranked[k..].to_vec(),
    })
}

/// Rank of each sample under `order` (0 = selected first).
pub fn ranks(scores: &[f64], order: SelectionOrder, seed: u64) -> Vec<usize> {
    let mut rank = vec![0; scores.len()];
    for (r, i) in selection_order(scores, order, seed).into_iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Parsed scores file: `key=value` pairs from the comment header plus rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoresFile {
    pub meta: BTreeMap<String, String>,
    pub scores: Vec<f64>,
    pub ranks: Vec<usize>,
}

/// Writes `sample_index,score,rank`, preceded by one `# key=value ...` line.
pub fn write_scores_csv(path: &Path, scores: &[f64], ranks: &[usize], meta: &BTreeMap<String, String>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let header: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(w, "# {}", header.join(" ")).map_err(io)?;
    writeln!(w, "sample_index,score,rank").map_err(io)?;
    for (i, (s, r)) in scores.iter().zip(ranks).enumerate() {
        writeln!(w, "{i},{s},{r}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_scores_csv(path: &Path) -> Result<ScoresFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        message,
    };
    let mut meta = BTreeMap::new();
    let mut scores = Vec::new();
    let mut ranks = Vec::new();
    let mut saw_header = false;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if let Some(comment) = line.strip_prefix('#') {
            for kv in comment.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
            continue;
        }
        if !saw_header {
            if line.trim() != "sample_index,score,rank" {
                return Err(parse_err(lineno, format!("unexpected header '{line}'")));
            }
            saw_header = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 {
            return Err(parse_err(lineno, format!("expected 3 columns, found {}", cols.len())));
        }
        let idx: usize = cols[0].parse().map_err(|_| parse_err(lineno, format!("bad index '{}'", cols[0])))?;
        if idx != scores.len() {
            return Err(parse_err(lineno, format!("expected sample_index {}, found {idx}", scores.len())));
        }
        let s: f64 = cols[1].parse().map_err(|_| parse_err(lineno, format!("bad score '{}'", cols[1])))?;
        let r: usize = cols[2].parse().map_err(|_| parse_err(lineno, format!("bad rank '{}'", cols[2])))?;
        scores.push(s);
        ranks.push(r);
    }
    if !saw_header {
        return Err(parse_err(1, "missing header".into()));
    }
    Ok(ScoresFile { meta, scores, ranks })
}
