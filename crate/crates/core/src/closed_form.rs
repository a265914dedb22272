//! Closed-form solutions for the linear model: single-task least squares,
//! optimal heads, the reduced objective, the capacity construction, the
//! equal-covariance and same-covariates solvers, and a global solver for
//! heterogeneous tasks.
//!
//! Everything here works on per-task sufficient statistics
//! `(XᵀX, Xᵀy, yᵀy)`, so cost is independent of the row count once those
//! are formed.

use nalgebra::{Cholesky, DMatrix};
use serde::Serialize;

use crate::error::{arg, Error, Result};
use crate::matrix_core::{dot, norm, orthonormal_basis, pinv, scaled, sym_eigen, DenseMatrix};
use crate::mtl_model::{Activation, MtlModel, WeightVector};
use crate::rng;
use crate::task_gen::{TaskData, TaskDataset};

/// Relative Frobenius tolerance for "equal covariances".
pub const EQUAL_COV_TOL: f64 = 1e-8;

/// Sufficient statistics of one linear least-squares task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStats {
    pub gram: DenseMatrix,
    pub xty: Vec<f64>,
    pub yty: f64,
}

impl TaskStats {
    pub fn from_data(data: &TaskData) -> Self {
        TaskStats { gram: data.x.gram(), xty: data.x.tr_matvec(&data.y), yty: dot(&data.y, &data.y) }
    }

    /// Statistics of the task's training rows.
    pub fn from_task(task: &TaskDataset) -> Self {
        Self::from_data(&task.train_data())
    }

    pub fn dim(&self) -> usize {
        self.xty.len()
    }

    /// `‖X B a − y‖²`.
    pub fn loss(&self, v: &[f64]) -> f64 {
        dot(v, &self.gram.matvec(v)) - 2.0 * dot(v, &self.xty) + self.yty
    }
}

pub fn task_stats(tasks: &[TaskDataset]) -> Vec<TaskStats> {
    tasks.iter().map(TaskStats::from_task).collect()
}

/// `(XᵀX)†Xᵀy` on the task's training rows.
pub fn stl_solve(task: &TaskDataset) -> Result<Vec<f64>> {
    if task.train_indices().is_empty() {
        return arg("task has no training rows");
    }
    stl_from_stats(&TaskStats::from_task(task))
}

pub fn stl_from_stats(s: &TaskStats) -> Result<Vec<f64>> {
    Ok(pinv(&s.gram)?.matvec(&s.xty))
}

/// `(BᵀXᵀXB)†BᵀXᵀy`, the optimal head for a fixed shared module.
pub fn head_given_b(task: &TaskDataset, b: &DenseMatrix) -> Result<Vec<f64>> {
    head_from_stats(&TaskStats::from_task(task), b)
}

pub fn head_from_stats(s: &TaskStats, b: &DenseMatrix) -> Result<Vec<f64>> {
    if b.rows() != s.dim() {
        return arg(format!("B has {} rows, tasks have dimension {}", b.rows(), s.dim()));
    }
    let gb = s.gram.mul(b);
    let inner = b.tr_mul(&gb);
    Ok(pinv(&inner)?.matvec(&b.tr_matvec(&s.xty)))
}

fn check_stats(stats: &[TaskStats], weights: &WeightVector) -> Result<usize> {
    let Some(first) = stats.first() else {
        return arg("no tasks");
    };
    if weights.len() != stats.len() {
        return arg(format!("{} tasks but {} weights", stats.len(), weights.len()));
    }
    let d = first.dim();
    if stats.iter().any(|s| s.dim() != d) {
        return arg("tasks have different dimensions");
    }
    Ok(d)
}

/// `Σ_i α_i ⟨B(BᵀX_iᵀX_iB)†Bᵀ, X_iᵀy_iy_iᵀX_i⟩`.
pub fn reduced_objective(b: &DenseMatrix, tasks: &[TaskDataset], weights: &WeightVector) -> Result<f64> {
    reduced_from_stats(b, &task_stats(tasks), weights)
}

pub fn reduced_from_stats(b: &DenseMatrix, stats: &[TaskStats], weights: &WeightVector) -> Result<f64> {
    let d = check_stats(stats, weights)?;
    if b.rows() != d {
        return arg("B has the wrong number of rows");
    }
    if b.as_slice().iter().all(|v| *v == 0.0) {
        return arg("B must be nonzero");
    }
    let mut total = 0.0;
    for (s, &a) in stats.iter().zip(weights.as_slice()) {
        if a != 0.0 {
            let h = head_from_stats(s, b)?;
            total += a * dot(&b.tr_matvec(&s.xty), &h);
        }
    }
    Ok(total)
}

/// Weighted training objective of a linear model with the given heads.
pub fn objective_from_stats(model: &MtlModel, stats: &[TaskStats], weights: &WeightVector) -> Result<f64> {
    check_stats(stats, weights)?;
    if model.task_count() != stats.len() {
        return arg("model and task counts differ");
    }
    Ok(stats.iter().zip(weights.as_slice()).enumerate().map(|(i, (s, a))| a * s.loss(&model.task_vector(i))).sum())
}

/// Linear model with B's columns carrying the normalized θ's; head i
/// selects column i and rescales it, so `B A_i = θ_i` exactly.
pub fn capacity_construction(thetas: &[Vec<f64>], r: usize) -> Result<MtlModel> {
    let k = thetas.len();
    if k == 0 {
        return arg("no tasks");
    }
    if r < k {
        return arg(format!("capacity {r} below task count {k}"));
    }
    let d = thetas[0].len();
    if d == 0 || thetas.iter().any(|t| t.len() != d) {
        return arg("thetas must share a positive dimension");
    }
    let mut b = DenseMatrix::zeros(d, r);
    let mut heads = vec![vec![0.0; r]; k];
    for (i, t) in thetas.iter().enumerate() {
        let n = norm(t);
        if n > 0.0 {
            b.set_column(i, &scaled(t, 1.0 / n));
            heads[i][i] = n;
        }
    }
    MtlModel::new(b, heads, Activation::Linear)
}

/// A closed-form or globally optimized linear MTL solution.
#[derive(Clone, Debug, Serialize)]
pub struct LinearFit {
    pub model: MtlModel,
    /// Weighted training objective at the solution.
    pub objective: f64,
    /// Eigenvalues of the aggregated matrix where applicable, nonincreasing.
    pub spectrum: Vec<f64>,
    /// Whether eigenvalues r and r+1 tie, making the optimum non-unique.
    pub tie_at_cut: bool,
    pub method: &'static str,
}

fn check_equal_covariances(stats: &[TaskStats]) -> Result<()> {
    let base = &stats[0].gram;
    let scale = base.frobenius_norm().max(f64::MIN_POSITIVE);
    for (i, s) in stats.iter().enumerate().skip(1) {
        let rel = s.gram.sub(base).frobenius_norm() / scale;
        if rel > EQUAL_COV_TOL {
            return Err(Error::Precondition(format!(
                "covariances of tasks 0 and {i} differ (relative Frobenius distance {rel:e})"
            )));
        }
    }
    Ok(())
}

fn heads_for(b: &DenseMatrix, stats: &[TaskStats]) -> Result<Vec<Vec<f64>>> {
    stats.iter().map(|s| head_from_stats(s, b)).collect()
}

/// Shared-covariance solver: with `XᵀX = V Λ Vᵀ` and `D = Λ^{1/2}`, take C as
/// the top-r eigenvectors of `Σ α_i (D⁻¹Vᵀb_i)(D⁻¹Vᵀb_i)ᵀ` and `B = V D⁻¹ C`.
fn shared_covariance_fit(gram: &DenseMatrix, stats: &[TaskStats], weights: &WeightVector, r: usize) -> Result<LinearFit> {
    let d = gram.rows();
    if r == 0 || r > d {
        return arg(format!("capacity {r} outside 1..={d}"));
    }
    let e = sym_eigen(gram)?;
    let top = e.values[0].max(0.0);
    let p = e.values.iter().filter(|&&l| l > 1e-12 * top && l > 0.0).count();
    if p == 0 {
        return arg("covariates are identically zero");
    }
    let vp = e.vectors.leading_columns(p);
    let inv_sqrt: Vec<f64> = e.values[..p].iter().map(|l| 1.0 / l.sqrt()).collect();
    let mut agg = DenseMatrix::zeros(p, p);
    for (s, &a) in stats.iter().zip(weights.as_slice()) {
        let c: Vec<f64> = vp.tr_matvec(&s.xty).iter().zip(&inv_sqrt).map(|(v, w)| v * w).collect();
        agg.add_outer(a, &c, &c);
    }
    let m = sym_eigen(&agg)?;
    let keep = r.min(p);
    let mut b = DenseMatrix::zeros(d, r);
    for j in 0..keep {
        let c: Vec<f64> = m.vectors.column(j).iter().zip(&inv_sqrt).map(|(v, w)| v * w).collect();
        b.set_column(j, &vp.matvec(&c));
    }
    let heads = heads_for(&b, stats)?;
    let model = MtlModel::new(b, heads, Activation::Linear)?;
    let total: f64 = stats.iter().zip(weights.as_slice()).map(|(s, a)| a * s.yty).sum();
    let captured: f64 = m.values[..keep].iter().map(|v| v.max(0.0)).sum();
    let tie_at_cut = keep < p && (m.values[keep - 1] - m.values[keep]).abs() <= 1e-10 * m.values[0].abs().max(1e-300);
    Ok(LinearFit { model, objective: total - captured, spectrum: m.values, tie_at_cut, method: "shared_covariance" })
}

/// Optimal capacity-r model when every task has the same `XᵀX`.
pub fn solve_equal_covariance(tasks: &[TaskDataset], weights: &WeightVector, r: usize) -> Result<LinearFit> {
    solve_equal_covariance_stats(&task_stats(tasks), weights, r)
}

pub fn solve_equal_covariance_stats(stats: &[TaskStats], weights: &WeightVector, r: usize) -> Result<LinearFit> {
    check_stats(stats, weights)?;
    check_equal_covariances(stats)?;
    shared_covariance_fit(&stats[0].gram, stats, weights, r)
}

/// Optimal model for k label vectors on one full-rank design. The shared
/// module is returned with orthonormal columns.
pub fn solve_same_covariates(x: &DenseMatrix, labels: &[Vec<f64>], weights: &WeightVector, r: usize) -> Result<LinearFit> {
    if labels.iter().any(|y| y.len() != x.rows()) {
        return arg("label length differs from row count");
    }
    if r == 0 || r > labels.len() {
        return arg(format!("capacity {r} outside 1..={}", labels.len()));
    }
    let gram = x.gram();
    let e = sym_eigen(&gram)?;
    if x.rows() < x.cols() || e.values[x.cols() - 1] <= 1e-12 * e.values[0] {
        return Err(Error::Precondition("design matrix is not full column rank".into()));
    }
    let stats: Vec<TaskStats> =
        labels.iter().map(|y| TaskStats { gram: gram.clone(), xty: x.tr_matvec(y), yty: dot(y, y) }).collect();
    check_stats(&stats, weights)?;
    let mut fit = shared_covariance_fit(&gram, &stats, weights, r)?;
    let b = orthonormal_basis(&fit.model.shared)?;
    let heads = heads_for(&b, &stats)?;
    fit.model = MtlModel::new(b, heads, Activation::Linear)?;
    fit.method = "same_covariates";
    Ok(fit)
}

/// Global optimum of the linear MTL objective for arbitrary covariances.
///
/// * equal covariances: the closed form;
/// * `r ≥ k`: every task keeps its own least-squares solution;
/// * two tasks with `r = 1`: an exact curve search (see [`pair_curve_search`]);
/// * otherwise: alternating exact block solves from several starts.
pub fn solve_linear_mtl(stats: &[TaskStats], weights: &WeightVector, r: usize, seed: u64) -> Result<LinearFit> {
    let d = check_stats(stats, weights)?;
    if r == 0 || r > d {
        return arg(format!("capacity {r} outside 1..={d}"));
    }
    if check_equal_covariances(stats).is_ok() {
        return shared_covariance_fit(&stats[0].gram, stats, weights, r);
    }
    let k = stats.len();
    if r >= k {
        let thetas = stats.iter().map(stl_from_stats).collect::<Result<Vec<_>>>()?;
        let model = capacity_construction(&thetas, r)?;
        let objective = objective_from_stats(&model, stats, weights)?;
        return Ok(LinearFit { model, objective, spectrum: vec![], tie_at_cut: false, method: "per_task" });
    }
    if k == 2 && r == 1 {
        if let Some(b) = pair_curve_search(stats, weights)? {
            return finish(b, stats, weights, "pair_curve");
        }
    }
    let b = alternating_multistart(stats, weights, r, seed)?;
    finish(b, stats, weights, "alternating")
}

fn finish(b: DenseMatrix, stats: &[TaskStats], weights: &WeightVector, method: &'static str) -> Result<LinearFit> {
    let heads = heads_for(&b, stats)?;
    let model = MtlModel::new(b, heads, Activation::Linear)?;
    let objective = objective_from_stats(&model, stats, weights)?;
    Ok(LinearFit { model, objective, spectrum: vec![], tie_at_cut: false, method })
}

const CURVE_GRID: usize = 4096;

/// Exact global maximizer of the rank-one reduced objective for two tasks.
///
/// Every stationary point satisfies `B ∝ (α₁a₁²G₁ + α₂a₂²G₂)⁻¹(α₁a₁b₁ + α₂a₂b₂)`
/// for its optimal heads `a_i`, so the maximum lies on the curve
/// `φ ↦ (α₁cos²φ G₁ + α₂sin²φ G₂)⁻¹(α₁cosφ b₁ + α₂sinφ b₂)`, φ ∈ [0, π).
/// In a basis T with `TᵀG₁T = I`, `TᵀG₂T = Λ` each point costs O(d).
/// Returns `None` when neither Gram matrix is positive definite.
pub fn pair_curve_search(stats: &[TaskStats], weights: &WeightVector) -> Result<Option<DenseMatrix>> {
    assert_eq!(stats.len(), 2);
    let w = weights.as_slice();
    let ratio = |s: &TaskStats| -> Result<f64> {
        let e = sym_eigen(&s.gram)?;
        Ok(e.values[e.values.len() - 1] / e.values[0].max(f64::MIN_POSITIVE))
    };
    let base = if ratio(&stats[0])? >= ratio(&stats[1])? { 0 } else { 1 };
    let other = 1 - base;
    let Some(chol) = Cholesky::new(stats[base].gram.to_nalgebra()) else {
        return Ok(None);
    };
    let l = chol.l();
    let g_other = stats[other].gram.to_nalgebra();
    let half = l.solve_lower_triangular(&g_other).ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let c = l.solve_lower_triangular(&half.transpose()).ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let e = sym_eigen(&DenseMatrix::from_nalgebra(&c))?;
    let t = l
        .transpose()
        .solve_upper_triangular(&e.vectors.to_nalgebra())
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let t = DenseMatrix::from_nalgebra(&t);
    let lam: Vec<f64> = e.values.iter().map(|v| v.max(0.0)).collect();
    let pb = t.tr_matvec(&stats[base].xty);
    let po = t.tr_matvec(&stats[other].xty);
    let (wb, wo) = (w[base], w[other]);

    let point = |phi: f64| -> Vec<f64> {
        let (s, c) = phi.sin_cos();
        (0..lam.len())
            .map(|j| {
                let den = wb * c * c + wo * s * s * lam[j];
                if den > 0.0 {
                    (wb * c * pb[j] + wo * s * po[j]) / den
                } else {
                    0.0
                }
            })
            .collect()
    };
    let value = |z: &[f64]| -> f64 {
        let zz = dot(z, z);
        if zz == 0.0 {
            return 0.0;
        }
        let zl: f64 = z.iter().zip(&lam).map(|(v, l)| v * v * l).sum();
        let mut h = wb * dot(z, &pb).powi(2) / zz;
        if zl > 0.0 {
            h += wo * dot(z, &po).powi(2) / zl;
        }
        h
    };
    let h = |phi: f64| value(&point(phi));

    let step = std::f64::consts::PI / CURVE_GRID as f64;
    let grid: Vec<f64> = (0..CURVE_GRID).map(|j| h(j as f64 * step)).collect();
    let mut candidates: Vec<usize> = (0..CURVE_GRID)
        .filter(|&j| grid[j] >= grid[(j + CURVE_GRID - 1) % CURVE_GRID] && grid[j] >= grid[(j + 1) % CURVE_GRID])
        .collect();
    candidates.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    candidates.truncate(8);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for j in candidates {
        let phi = golden_max(&h, (j as f64 - 1.0) * step, (j as f64 + 1.0) * step);
        let v = h(phi);
        if v > best.0 {
            best = (v, phi);
        }
    }
    let z = point(best.1);
    let b = t.matvec(&z);
    let n = norm(&b);
    if !(n > 0.0) || !n.is_finite() {
        return Ok(None);
    }
    Ok(Some(DenseMatrix::column_vector(&scaled(&b, 1.0 / n))))
}

fn golden_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-13 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

const ALS_MAX_ITER: usize = 5000;

/// Alternates exact head solves with the exact shared-module solve
/// `Σ α_i (A_iA_iᵀ ⊗ G_i) vec B = Σ α_i vec(b_i A_iᵀ)` until the reduced
/// objective stalls.
pub fn alternating_solve(stats: &[TaskStats], weights: &WeightVector, init: DenseMatrix) -> Result<(DenseMatrix, f64)> {
    let (d, r) = init.shape();
    let mut b = orthonormal_basis(&init)?;
    if b.cols() < r {
        let mut padded = DenseMatrix::zeros(d, r);
        for j in 0..b.cols() {
            padded.set_column(j, &b.column(j));
        }
        b = padded;
    }
    let mut h = reduced_from_stats(&b, stats, weights)?;
    for _ in 0..ALS_MAX_ITER {
        let heads = heads_for(&b, stats)?;
        let mut lhs = DMatrix::<f64>::zeros(d * r, d * r);
        let mut rhs = vec![0.0; d * r];
        for ((s, a), &w) in stats.iter().zip(&heads).zip(weights.as_slice()) {
            if w == 0.0 {
                continue;
            }
            for p in 0..r {
                for q in 0..r {
                    let c = w * a[p] * a[q];
                    if c != 0.0 {
                        for i in 0..d {
                            for j in 0..d {
                                lhs[(p * d + i, q * d + j)] += c * s.gram[(i, j)];
                            }
                        }
                    }
                }
                for i in 0..d {
                    rhs[p * d + i] += w * a[p] * s.xty[i];
                }
            }
        }
        let sol = pinv(&DenseMatrix::from_nalgebra(&lhs))?.matvec(&rhs);
        let next = DenseMatrix::from_fn(d, r, |i, j| sol[j * d + i]);
        if next.as_slice().iter().all(|v| *v == 0.0) {
            break;
        }
        let next = orthonormal_basis(&next)?;
        if next.cols() < r {
            break;
        }
        let hn = reduced_from_stats(&next, stats, weights)?;
        let improved = hn > h;
        if improved {
            b = next;
        }
        if !improved || hn - h <= 1e-15 * hn.abs() {
            h = h.max(hn);
            break;
        }
        h = hn;
    }
    Ok((b, h))
}

/// Best of several alternating runs: started from the leading directions of
/// the per-task least-squares solutions, from each solution alone, and from
/// two random subspaces.
pub fn alternating_multistart(stats: &[TaskStats], weights: &WeightVector, r: usize, seed: u64) -> Result<DenseMatrix> {
    let d = stats[0].dim();
    let thetas = stats.iter().map(stl_from_stats).collect::<Result<Vec<_>>>()?;
    let mut g = rng::from_seed(seed);
    let random = |g: &mut rng::Rng| DenseMatrix::from_fn(d, r, |_, _| rng::gaussian(g));
    let mut starts = Vec::new();
    let weighted: Vec<Vec<f64>> =
        thetas.iter().zip(weights.as_slice()).map(|(t, w)| scaled(t, w.sqrt())).collect();
    if let Ok(m) = DenseMatrix::from_columns(&weighted) {
        if let Ok(basis) = orthonormal_basis(&m) {
            let mut s = random(&mut g).scale(1e-3);
            for j in 0..basis.cols().min(r) {
                s.set_column(j, &basis.column(j));
            }
            starts.push(s);
        }
    }
    for t in &thetas {
        let mut s = random(&mut g).scale(1e-3);
        if norm(t) > 0.0 {
            s.set_column(0, t);
        }
        starts.push(s);
    }
    starts.push(random(&mut g));
    starts.push(random(&mut g));
    let mut best: Option<(DenseMatrix, f64)> = None;
    for s in starts {
        let (b, h) = alternating_solve(stats, weights, s)?;
        if best.as_ref().is_none_or(|(_, bh)| h > *bh) {
            best = Some((b, h));
        }
    }
    Ok(best.expect("at least one start").0)
}
