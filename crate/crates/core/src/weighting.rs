//! Per-task loss weights: SVD reweighting, the learned-uncertainty
//! baseline, and uniform weights.
//!
//! Weights are returned unnormalized. Scaling every weight by the same
//! constant scales the objective and leaves its minimizers unchanged.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::matrix_core::{norm, pinv, svd, DenseMatrix};
use crate::mtl_model::{accumulate_task_gradient, task_loss, Gradients, MtlModel, WeightVector, Wrt};
use crate::rng;
use crate::task_gen::{TaskData, TaskDataset};
use crate::trainer::{apply, batches, TrainConfig};

/// Energy fraction used to pick the default rank.
pub const DEFAULT_ENERGY: f64 = 0.95;

/// Lower bound on learned noise scales.
pub const MIN_SIGMA: f64 = 1e-8;

/// How the per-task directions are formed from the shared design.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaForm {
    /// `θ_i = Xᵀy_i`.
    #[default]
    Correlation,
    /// `θ_i = (XᵀX)†Xᵀy_i`.
    LeastSquares,
}

/// Stacked per-task directions, one column per task.
pub fn task_directions(x: &DenseMatrix, labels: &[Vec<f64>], form: ThetaForm) -> Result<DenseMatrix> {
    if labels.is_empty() {
        return arg("no tasks");
    }
    if let Some(i) = labels.iter().position(|y| y.len() != x.rows()) {
        return arg(format!("labels of task {i} have length {}, X has {} rows", labels[i].len(), x.rows()));
    }
    let cols: Vec<Vec<f64>> = match form {
        ThetaForm::Correlation => labels.iter().map(|y| x.tr_matvec(y)).collect(),
        ThetaForm::LeastSquares => {
            let p = pinv(x)?;
            labels.iter().map(|y| p.matvec(y)).collect()
        }
    };
    DenseMatrix::from_columns(&cols)
}

/// Smallest rank whose squared singular values reach `energy` of the total.
pub fn default_rank(thetas: &DenseMatrix, energy: f64) -> Result<usize> {
    if !(energy > 0.0 && energy <= 1.0) {
        return arg("energy fraction must be in (0, 1]");
    }
    let s = svd(thetas)?.singular_values;
    let total: f64 = s.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return arg("all task directions are zero");
    }
    let mut acc = 0.0;
    for (i, v) in s.iter().enumerate() {
        acc += v * v;
        if acc >= energy * total * (1.0 - 1e-12) {
            return Ok(i + 1);
        }
    }
    Ok(s.len())
}

/// `α_i = ‖θ_iᵀU_r‖`, with `U_r` the top-r left singular vectors of the
/// stacked directions.
pub fn svd_reweight(x: &DenseMatrix, labels: &[Vec<f64>], r: usize, form: ThetaForm) -> Result<WeightVector> {
    weights_from_directions(&task_directions(x, labels, form)?, r)
}

pub fn weights_from_directions(thetas: &DenseMatrix, r: usize) -> Result<WeightVector> {
    let k = thetas.cols();
    if r == 0 || r > k {
        return arg(format!("rank {r} outside 1..={k}"));
    }
    let u = svd(thetas)?.left_vectors;
    let keep = r.min(u.cols());
    let ur = u.leading_columns(keep);
    let w: Vec<f64> = (0..k).map(|i| norm(&ur.tr_matvec(&thetas.column(i)))).collect();
    WeightVector::new(w)
}

/// `(1, …, 1)`.
pub fn uniform_weights(k: usize) -> Result<WeightVector> {
    if k == 0 {
        return arg("need at least one task");
    }
    Ok(WeightVector::uniform(k))
}

#[derive(Clone, Debug, Serialize)]
pub struct UncertaintyFit {
    /// `1/σ_i²`.
    pub weights: WeightVector,
    pub sigmas: Vec<f64>,
    /// Tasks whose σ hit [`MIN_SIGMA`].
    pub clamped: Vec<bool>,
    pub model: MtlModel,
}

/// Learned task uncertainty: SGD on `Σ_i L_i/(2σ_i²) + log σ_i` over the
/// model and `s_i = log σ_i`, where `L_i` is the batch mean squared error.
/// Batches follow the task-alternating schedule of the trainer. With
/// `train_model` off only the σ's move, which drives `σ_i²` toward the
/// task's mean squared error.
pub fn uncertainty_weights(tasks: &[TaskDataset], model: &MtlModel, cfg: &TrainConfig, train_model: bool) -> Result<UncertaintyFit> {
    cfg.validate()?;
    model.validate()?;
    let k = tasks.len();
    if k == 0 || k != model.task_count() {
        return arg(format!("{k} tasks but the model has {} heads", model.task_count()));
    }
    let data: Vec<TaskData> = tasks.iter().map(TaskDataset::train_data).collect();
    if data.iter().any(|d| d.rows() == 0 || d.dim() != model.dim()) {
        return arg("every task needs training rows of the model's dimension");
    }
    let wrt = Wrt { shared: train_model && cfg.freeze_shared != Some(true), heads: train_model, alignments: false };
    let floor = MIN_SIGMA.ln();
    let mut model = model.clone();
    let mut log_sigma = vec![0.0f64; k];
    let mut clamped = vec![false; k];
    let lr = cfg.learning_rate;
    for epoch in 1..=cfg.epochs {
        let mut g = rng::stream(cfg.seed, epoch as u64);
        let mut all: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, d) in data.iter().enumerate() {
            all.extend(batches(d.rows(), cfg.batch_size, &mut g).into_iter().map(|b| (i, b)));
        }
        all.shuffle(&mut g);
        for (i, batch) in all {
            let n = batch.len() as f64;
            let x = data[i].x.select_rows(&batch);
            let y: Vec<f64> = batch.iter().map(|&r| data[i].y[r]).collect();
            let precision = (-2.0 * log_sigma[i]).exp();
            let mut acc = Gradients::zeros(&model, wrt)?;
            let sum_sq = accumulate_task_gradient(&model, i, &x, &y, precision / (2.0 * n), &mut acc)?;
            if !sum_sq.is_finite() {
                return Err(Error::Divergence { epoch, loss: sum_sq });
            }
            if train_model {
                apply(&mut model, &acc, lr, Some(i));
            }
            log_sigma[i] -= lr * (1.0 - sum_sq / n * precision);
            if !log_sigma[i].is_finite() || (-2.0 * log_sigma[i]).exp() == 0.0 {
                return Err(Error::Numerical(format!("uncertainty weights diverged at epoch {epoch} (log sigma {})", log_sigma[i])));
            }
            if log_sigma[i] < floor {
                log_sigma[i] = floor;
                clamped[i] = true;
            }
        }
    }
    let sigmas: Vec<f64> = log_sigma.iter().map(|s| s.exp()).collect();
    let weights = WeightVector::new(sigmas.iter().map(|s| 1.0 / (s * s)).collect())?;
    Ok(UncertaintyFit { weights, sigmas, clamped, model })
}

/// Mean squared training error per task, the fixed point of the σ² update.
pub fn mean_squared_errors(tasks: &[TaskDataset], model: &MtlModel) -> Result<Vec<f64>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let d = t.train_data();
            Ok(task_loss(model, &d, i)? / d.rows() as f64)
        })
        .collect()
}
