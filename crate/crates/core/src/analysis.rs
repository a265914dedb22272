//! Diagnostics: covariance similarity, transfer gaps, the single-direction
//! transfer bound, the sine contraction fact, angle tracking and the greedy
//! orthogonalization bound.

use serde::{Deserialize, Serialize};

use crate::closed_form::{reduced_from_stats, solve_linear_mtl, stl_from_stats, stl_solve, TaskStats};
use crate::error::{arg, Error, Result};
use crate::matrix_core::{condition_number, cos_sin, dot, norm, sub, sym_eigen, DenseMatrix};
use crate::mtl_model::{forward, Activation, MtlModel, WeightVector};
use crate::rng;
use crate::task_gen::{TaskDataset, TaskKind};
use crate::trainer::{train, TrainConfig};

/// Fraction of the covariance spectrum kept by the similarity score.
pub const SCORE_ENERGY: f64 = 0.99;

/// `U_r Λ_r^{1/2}` for the smallest r whose eigenvalues of `XᵀX` sum to at
/// least 99% of the total.
pub fn covariance_factor(x: &DenseMatrix) -> Result<DenseMatrix> {
    factor_from_gram(&x.gram())
}

/// [`covariance_factor`] from `XᵀX` directly.
pub fn factor_from_gram(gram: &DenseMatrix) -> Result<DenseMatrix> {
    let e = sym_eigen(gram)?;
    let vals: Vec<f64> = e.values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if !(total > 0.0) {
        return arg("similarity score of a zero matrix");
    }
    let mut acc = 0.0;
    let mut r = vals.len();
    for (i, v) in vals.iter().enumerate() {
        acc += v;
        if acc >= SCORE_ENERGY * total * (1.0 - 1e-12) {
            r = i + 1;
            break;
        }
    }
    let mut f = e.vectors.leading_columns(r);
    for j in 0..r {
        let s = vals[j].sqrt();
        let col: Vec<f64> = f.column(j).iter().map(|v| v * s).collect();
        f.set_column(j, &col);
    }
    Ok(f)
}

/// `‖F₁ᵀF₂‖_F / (‖F₁‖_F ‖F₂‖_F)` with `F_j` from [`covariance_factor`].
pub fn covariance_similarity_score(x1: &DenseMatrix, x2: &DenseMatrix) -> Result<f64> {
    if x1.cols() != x2.cols() {
        return arg(format!("column dimensions differ ({} vs {})", x1.cols(), x2.cols()));
    }
    score_from_grams(&x1.gram(), &x2.gram())
}

/// The similarity score from the two Gram matrices.
pub fn score_from_grams(g1: &DenseMatrix, g2: &DenseMatrix) -> Result<f64> {
    if g1.shape() != g2.shape() {
        return arg("Gram matrices have different shapes");
    }
    let f1 = factor_from_gram(g1)?;
    let f2 = factor_from_gram(g2)?;
    let s = f1.tr_mul(&f2).frobenius_norm() / (f1.frobenius_norm() * f2.frobenius_norm());
    Ok(s.clamp(0.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Validation metric, higher is better: negative MSE for regression,
/// accuracy of `prediction ≥ 0.5` for classification.
pub fn metric(kind: TaskKind, pred: &[f64], y: &[f64]) -> f64 {
    let n = y.len().max(1) as f64;
    match kind {
        TaskKind::Regression => -pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n,
        TaskKind::Classification => {
            pred.iter().zip(y).filter(|(p, t)| (**p >= 0.5) == (**t >= 0.5)).count() as f64 / n
        }
    }
}

/// How MTL and STL models are fitted for a transfer measurement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fitter {
    /// Exact global optimum of the linear objective.
    #[default]
    Global,
    /// SGD from `restarts` random starts, keeping the lowest training loss.
    Gradient { restarts: usize, activation: Activation },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    /// Target validation metric under co-training.
    pub mtl: f64,
    /// Target validation metric trained alone.
    pub stl: f64,
    /// `mtl − stl`; positive means positive transfer.
    pub gap: f64,
    pub mtl_spearman: Option<f64>,
    pub stl_spearman: Option<f64>,
    /// Sine between the shared direction and the target's θ, for r = 1.
    pub target_sin: Option<f64>,
}

/// Best of `restarts` SGD runs; divergent runs are skipped unless all diverge.
pub fn fit_by_gradient(
    tasks: &[TaskDataset],
    r: usize,
    activation: Activation,
    restarts: usize,
    cfg: &TrainConfig,
) -> Result<MtlModel> {
    if restarts == 0 {
        return arg("need at least one restart");
    }
    let d = tasks.first().map(TaskDataset::dim).ok_or_else(|| Error::Argument("no tasks".into()))?;
    let mut best: Option<(f64, MtlModel)> = None;
    let mut last_err = None;
    for j in 0..restarts {
        let init = MtlModel::random(d, r, tasks.len(), activation, rng::derive(cfg.seed, 1000 + j as u64));
        let run_cfg = TrainConfig { seed: rng::derive(cfg.seed, j as u64), ..cfg.clone() };
        match train(init, tasks, &run_cfg) {
            Ok(rep) => {
                let loss = rep.trace.last().unwrap_or(f64::INFINITY);
                if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                    best = Some((loss, rep.model));
                }
            }
            Err(e) if e.is_numerical() => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((_, m)) => Ok(m),
        None => Err(last_err.unwrap_or_else(|| Error::Numerical("no restart finished".into()))),
    }
}

/// Fits MTL on `[source, target]` and STL on the target, then compares the
/// target's validation metric. The source trains on all of its rows unless
/// it is split.
pub fn transfer_gap(source: &TaskDataset, target: &TaskDataset, r: usize, cfg: &TrainConfig, fitter: Fitter) -> Result<GapReport> {
    if target.split.is_none() {
        return arg("transfer_gap needs a target with a train/validation split");
    }
    let val = target.validation_data()?;
    let tasks = [source.clone(), target.clone()];
    let (mtl_pred, stl_pred, shared) = match fitter {
        Fitter::Global => {
            let stats: Vec<TaskStats> = tasks.iter().map(TaskStats::from_task).collect();
            let w = cfg.weights_for(2)?;
            let fit = solve_linear_mtl(&stats, &w, r, cfg.seed)?;
            let theta = stl_solve(target)?;
            (forward(&fit.model, &val.x, 1)?, val.x.matvec(&theta), fit.model.shared)
        }
        Fitter::Gradient { restarts, activation } => {
            let mtl = fit_by_gradient(&tasks, r, activation, restarts, cfg)?;
            let stl_cfg = TrainConfig { weights: None, ..cfg.clone() };
            let stl = fit_by_gradient(std::slice::from_ref(target), r, activation, restarts, &stl_cfg)?;
            (forward(&mtl, &val.x, 1)?, forward(&stl, &val.x, 0)?, mtl.shared)
        }
    };
    let mtl = metric(target.kind, &mtl_pred, &val.y);
    let stl = metric(target.kind, &stl_pred, &val.y);
    let target_sin = match (shared.cols(), target.theta_vector()) {
        (1, Some(t)) => angle_to_target(&shared, t).ok(),
        _ => None,
    };
    Ok(GapReport {
        mtl,
        stl,
        gap: mtl - stl,
        mtl_spearman: spearman(&mtl_pred, &val.y),
        stl_spearman: spearman(&stl_pred, &val.y),
        target_sin,
    })
}

/// Sine between a single shared direction and θ.
pub fn angle_to_target(b: &DenseMatrix, theta: &[f64]) -> Result<f64> {
    if b.cols() != 1 {
        return arg("angle_to_target needs a d×1 shared module");
    }
    if b.as_slice().iter().all(|v| *v == 0.0) {
        return arg("shared module is zero");
    }
    Ok(cos_sin(&b.column(0), theta)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub kappa: f64,
    pub sin_theta: f64,
    /// `κ(X₂)·sin(θ₁, θ₂)`.
    pub c: f64,
    /// Whether `c ≤ 1/3`; the bound is only evaluated when it holds.
    pub assumption_holds: bool,
    /// `‖B A₂ − θ₂‖/‖θ₂‖`.
    pub lhs: f64,
    /// `6c + ‖ε₂‖/((1 − 3c)‖X₂θ₂‖)`, infinite when the assumption fails.
    pub rhs: f64,
    /// `None` when the assumption is violated.
    pub satisfied: Option<bool>,
}

/// `6c + noise/(1 − 3c)` for `c < 1/3`.
pub fn theorem1_rhs(c: f64, noise_ratio: f64) -> f64 {
    if c < 1.0 / 3.0 {
        6.0 * c + noise_ratio / (1.0 - 3.0 * c)
    } else {
        f64::INFINITY
    }
}

/// Checks the transfer bound for a solution on `[source, target]` (target
/// is task 1), using the target's training rows.
pub fn theorem1_check(source: &TaskDataset, target: &TaskDataset, solution: &MtlModel) -> Result<Theorem1Report> {
    let (Some(t1), Some(t2)) = (source.theta_vector(), target.theta_vector()) else {
        return arg("theorem1_check needs ground-truth parameters");
    };
    if solution.task_count() != 2 || solution.dim() != t2.len() {
        return arg("solution must be a two-task model on the tasks' dimension");
    }
    let rows = target.train_indices();
    let x2 = target.x.select_rows(&rows);
    let noise = target.noise_vector()?;
    let eps: Vec<f64> = rows.iter().map(|&i| noise[i]).collect();
    let kappa = condition_number(&x2)?;
    let sin_theta = cos_sin(t1, t2)?.1;
    let c = if sin_theta == 0.0 { 0.0 } else { kappa * sin_theta };
    let lhs = norm(&sub(&solution.task_vector(1), t2)) / norm(t2);
    let signal = norm(&x2.matvec(t2));
    if signal == 0.0 {
        return arg("target signal X₂θ₂ is zero");
    }
    let assumption_holds = c <= 1.0 / 3.0;
    let rhs = theorem1_rhs(c, norm(&eps) / signal);
    let satisfied = assumption_holds.then_some(lhs <= rhs + 1e-9);
    Ok(Theorem1Report { kappa, sin_theta, c, assumption_holds, lhs, rhs, satisfied })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    /// `|sin(Xa, Xb)|`.
    pub lhs: f64,
    /// `sin(a, b)/κ²(X)`.
    pub rhs: f64,
    pub holds: bool,
    /// Xa or Xb vanished; nothing is claimed.
    pub degenerate: bool,
}

/// Slack allowed for rounding in the contraction check.
pub const CONTRACTION_SLACK: f64 = 1e-12;

pub fn sin_contraction_check(x: &DenseMatrix, a: &[f64], b: &[f64]) -> Result<ContractionReport> {
    if a.len() != x.cols() || b.len() != x.cols() {
        return arg("vector length differs from column count");
    }
    if (norm(a) - 1.0).abs() > 1e-8 || (norm(b) - 1.0).abs() > 1e-8 {
        return arg("a and b must be unit vectors");
    }
    let kappa = condition_number(x)?;
    if !kappa.is_finite() {
        return Err(Error::Precondition("X is not full column rank".into()));
    }
    let (xa, xb) = (x.matvec(a), x.matvec(b));
    let rhs = cos_sin(a, b)?.1 / (kappa * kappa);
    if norm(&xa) == 0.0 || norm(&xb) == 0.0 {
        return Ok(ContractionReport { lhs: 0.0, rhs, holds: true, degenerate: true });
    }
    let lhs = cos_sin(&xa, &xb)?.1;
    Ok(ContractionReport { lhs, rhs, holds: lhs >= rhs - CONTRACTION_SLACK, degenerate: false })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrthogonalizationReport {
    pub capacity: usize,
    /// Energy captured by each greedy direction.
    pub lambdas: Vec<f64>,
    /// `Σ_i (‖y_i‖² − ‖P_{X_i} y_i‖²)`, the single-task residual.
    pub opt: f64,
    /// `Σ_i ‖P_{X_i} y_i‖²`, the energy the greedy directions exhaust.
    pub stl_captured: f64,
    /// `opt − Σ_{j>r} λ_j`.
    pub bound: f64,
    /// Reduced objective at the capacity-r optimum (uniform weights).
    pub optimum_captured: f64,
    /// Training error at the capacity-r optimum.
    pub optimum_error: f64,
}

/// Greedy single-direction orthogonalization of the tasks' least-squares
/// solutions. Step (a) finds the best shared direction for the current
/// designs, step (b) records its captured energy, step (c) projects each
/// `X_i W⋆` off the columns of `X_i`, tasks in index order. Runs for at most
/// `steps` rounds and stops once nothing is left to capture.
pub fn orthogonalization_diagnostic(tasks: &[TaskDataset], r: usize, steps: usize, seed: u64) -> Result<OrthogonalizationReport> {
    if tasks.is_empty() {
        return arg("no tasks");
    }
    let mut stats: Vec<TaskStats> = tasks.iter().map(TaskStats::from_task).collect();
    let k = stats.len();
    let w = WeightVector::uniform(k);
    let mut stl_captured = 0.0;
    let mut opt = 0.0;
    for s in &stats {
        let captured = dot(&stl_from_stats(s)?, &s.xty);
        stl_captured += captured;
        opt += s.yty - captured;
    }
    let optimum = solve_linear_mtl(&stats, &w, r, seed)?;
    let optimum_captured = reduced_from_stats(&optimum.model.shared, &stats, &w)?;
    let scale = stl_captured.max(f64::MIN_POSITIVE);
    let mut lambdas = Vec::new();
    for step in 0..steps {
        if stats.iter().all(|s| dot(&stl_from_stats(s).unwrap_or_default(), &s.xty) <= 1e-12 * scale) {
            break;
        }
        let fit = solve_linear_mtl(&stats, &w, 1, rng::derive(seed, step as u64))?;
        let dir = fit.model.shared.column(0);
        lambdas.push(reduced_from_stats(&fit.model.shared, &stats, &w)?);
        for s in &mut stats {
            let gw = s.gram.matvec(&dir);
            let q = dot(&dir, &gw);
            if q > 1e-14 * s.gram.frobenius_norm() {
                let coef = dot(&dir, &s.xty) / q;
                s.gram.add_outer(-1.0 / q, &gw, &gw);
                s.gram = s.gram.symmetrize();
                for (b, g) in s.xty.iter_mut().zip(&gw) {
                    *b -= coef * g;
                }
            }
        }
    }
    let tail: f64 = lambdas.iter().skip(r).sum();
    Ok(OrthogonalizationReport {
        capacity: r,
        lambdas,
        opt,
        stl_captured,
        bound: opt - tail,
        optimum_captured,
        optimum_error: optimum.objective,
    })
}
