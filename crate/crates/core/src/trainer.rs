//! Plain mini-batch SGD for the shared-module model, with joint and
//! task-alternating batching and optional trainable alignments.
//!
//! Each batch step minimizes the batch-mean squared error scaled by the
//! task weight. Full-batch steps on linear models use the tasks' sufficient
//! statistics instead of touching the rows.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::closed_form::TaskStats;
use crate::error::{arg, Error, Result};
use crate::matrix_core::{axpy, condition_number, DenseMatrix};
use crate::mtl_model::{accumulate_task_gradient, task_loss, Activation, Gradients, MtlModel, WeightVector, Wrt};
use crate::rng;
use crate::task_gen::{TaskData, TaskDataset};

/// Loss ratio above which training is declared divergent.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// All tasks see the same rows and every parameter moves per batch.
    Joint,
    /// Batches of all tasks are mixed and shuffled; a batch of task i only
    /// moves the parameters task i touches.
    #[default]
    TaskAlternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` picks the mode default: trained for [`train`], frozen for
    /// [`train_aligned`].
    pub freeze_shared: Option<bool>,
    pub train_alignments: bool,
    pub batching: Batching,
    /// `None` means uniform.
    pub weights: Option<WeightVector>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 50,
            seed: 0,
            freeze_shared: None,
            train_alignments: false,
            batching: Batching::TaskAlternating,
            weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg("learning_rate must be positive and finite");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return arg("epochs and batch_size must be at least 1");
        }
        Ok(())
    }

    pub fn weights_for(&self, k: usize) -> Result<WeightVector> {
        match &self.weights {
            Some(w) if w.len() != k => arg(format!("{k} tasks but {} weights", w.len())),
            Some(w) => Ok(w.clone()),
            None => Ok(WeightVector::uniform(k)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Unweighted squared error per task on its training rows.
    pub per_task: Vec<f64>,
    /// Weighted objective.
    pub total: f64,
}

/// Training loss after every epoch; entry 0 is the initial model.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochLoss>,
}

impl LossTrace {
    pub fn initial(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.total)
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }

    /// `epoch,loss_0,…,loss_{k−1},total` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let k = self.epochs.first().map_or(0, |e| e.per_task.len());
        let mut out = String::from("epoch");
        for i in 0..k {
            let _ = write!(out, ",loss_{i}");
        }
        out.push_str(",total\n");
        for e in &self.epochs {
            let _ = write!(out, "{}", e.epoch);
            for v in &e.per_task {
                let _ = write!(out, ",{v:.16e}");
            }
            let _ = writeln!(out, ",{:.16e}", e.total);
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub model: MtlModel,
    pub trace: LossTrace,
    /// Condition numbers of the final alignments, when present. Large
    /// values flag nearly singular alignments; nothing prevents them.
    pub alignment_conditions: Option<Vec<f64>>,
}

struct Prepared {
    data: Vec<TaskData>,
    stats: Option<Vec<TaskStats>>,
    weights: WeightVector,
}

fn prepare(model: &MtlModel, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    model.validate()?;
    if tasks.len() != model.task_count() {
        return arg(format!("{} tasks but the model has {} heads", tasks.len(), model.task_count()));
    }
    let data: Vec<TaskData> = tasks.iter().map(TaskDataset::train_data).collect();
    if let Some(i) = data.iter().position(|d| d.dim() != model.dim()) {
        return arg(format!("task {i} has dimension {}, model expects {}", data[i].dim(), model.dim()));
    }
    if data.iter().any(|d| d.rows() == 0) {
        return arg("every task needs training rows");
    }
    if cfg.batching == Batching::Joint {
        let x0 = &data[0].x;
        if data.iter().skip(1).any(|d| d.x.shape() != x0.shape() || d.x.max_abs_diff(x0) != 0.0) {
            return arg("joint batching requires identical covariates across tasks");
        }
    }
    let full = data.iter().all(|d| cfg.batch_size >= d.rows());
    let stats = (full && model.activation == Activation::Linear).then(|| data.iter().map(TaskStats::from_data).collect());
    let weights = cfg.weights_for(tasks.len())?;
    Ok(Prepared { data, stats, weights })
}

fn epoch_loss(model: &MtlModel, p: &Prepared, epoch: usize) -> Result<EpochLoss> {
    let per_task = match &p.stats {
        Some(stats) => stats.iter().enumerate().map(|(i, s)| s.loss(&model.task_vector(i))).collect(),
        None => p.data.iter().enumerate().map(|(i, d)| task_loss(model, d, i)).collect::<Result<Vec<_>>>()?,
    };
    let total = per_task.iter().zip(p.weights.as_slice()).map(|(l, w)| l * w).sum();
    Ok(EpochLoss { epoch, per_task, total })
}

/// Gradient of `scale · ‖X v − y‖²` from statistics, with `v = R_i B a_i`.
fn accumulate_from_stats(model: &MtlModel, task: usize, s: &TaskStats, scale: f64, acc: &mut Gradients) {
    let w = model.effective_shared(task);
    let a = &model.heads[task];
    let v = w.matvec(a);
    let mut q = s.gram.matvec(&v);
    axpy(&mut q, -1.0, &s.xty);
    q.iter_mut().for_each(|x| *x *= 2.0 * scale);
    if let Some(ga) = acc.heads.as_mut() {
        axpy(&mut ga[task], 1.0, &w.tr_matvec(&q));
    }
    let mut gw = DenseMatrix::zeros(w.rows(), w.cols());
    gw.add_outer(1.0, &q, a);
    if let Some(gb) = acc.shared.as_mut() {
        match &model.alignments {
            Some(al) => gb.add_scaled(1.0, &al[task].tr_mul(&gw)),
            None => gb.add_scaled(1.0, &gw),
        }
    }
    if let Some(gr) = acc.alignments.as_mut() {
        gr[task].add_scaled(1.0, &gw.mul(&model.shared.transpose()));
    }
}

pub(crate) fn apply(model: &mut MtlModel, g: &Gradients, lr: f64, only_task: Option<usize>) {
    if let Some(gb) = &g.shared {
        model.shared.add_scaled(-lr, gb);
    }
    if let Some(ga) = &g.heads {
        for (i, (h, d)) in model.heads.iter_mut().zip(ga).enumerate() {
            if only_task.is_none_or(|t| t == i) {
                axpy(h, -lr, d);
            }
        }
    }
    if let (Some(gr), Some(al)) = (&g.alignments, model.alignments.as_mut()) {
        for (i, (r, d)) in al.iter_mut().zip(gr).enumerate() {
            if only_task.is_none_or(|t| t == i) {
                r.add_scaled(-lr, d);
            }
        }
    }
}

pub(crate) fn batches(rows: usize, size: usize, g: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.shuffle(g);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

fn check_divergence(loss: f64, initial: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() || (initial > 0.0 && loss > DIVERGENCE_FACTOR * initial) {
        return Err(Error::Divergence { epoch, loss });
    }
    Ok(())
}

fn run(mut model: MtlModel, tasks: &[TaskDataset], cfg: &TrainConfig, freeze_shared: bool) -> Result<TrainReport> {
    let p = prepare(&model, tasks, cfg)?;
    let wrt = Wrt { shared: !freeze_shared, heads: true, alignments: cfg.train_alignments };
    if wrt.alignments && model.alignments.is_none() {
        return arg("training alignments requires a model with alignments");
    }
    let mut trace = LossTrace { epochs: vec![epoch_loss(&model, &p, 0)?] };
    let initial = trace.epochs[0].total;
    check_divergence(initial, initial, 0)?;
    let lr = cfg.learning_rate;
    let alpha = p.weights.as_slice();
    for epoch in 1..=cfg.epochs {
        let mut g = rng::stream(cfg.seed, epoch as u64);
        match cfg.batching {
            Batching::Joint => {
                for batch in batches(p.data[0].rows(), cfg.batch_size, &mut g) {
                    let mut acc = Gradients::zeros(&model, wrt)?;
                    let scale = 1.0 / batch.len() as f64;
                    match &p.stats {
                        Some(stats) => {
                            for (i, s) in stats.iter().enumerate() {
                                accumulate_from_stats(&model, i, s, alpha[i] * scale, &mut acc);
                            }
                        }
                        None => {
                            let x = p.data[0].x.select_rows(&batch);
                            for (i, d) in p.data.iter().enumerate() {
                                let y: Vec<f64> = batch.iter().map(|&r| d.y[r]).collect();
                                let l = accumulate_task_gradient(&model, i, &x, &y, alpha[i] * scale, &mut acc)?;
                                check_divergence(l, f64::INFINITY, epoch)?;
                            }
                        }
                    }
                    apply(&mut model, &acc, lr, None);
                }
            }
            Batching::TaskAlternating => {
                let mut all: Vec<(usize, Vec<usize>)> = Vec::new();
                for (i, d) in p.data.iter().enumerate() {
                    all.extend(batches(d.rows(), cfg.batch_size, &mut g).into_iter().map(|b| (i, b)));
                }
                all.shuffle(&mut g);
                for (i, batch) in all {
                    if alpha[i] == 0.0 {
                        continue;
                    }
                    let mut acc = Gradients::zeros(&model, wrt)?;
                    let scale = alpha[i] / batch.len() as f64;
                    match &p.stats {
                        Some(stats) => accumulate_from_stats(&model, i, &stats[i], scale, &mut acc),
                        None => {
                            let x = p.data[i].x.select_rows(&batch);
                            let y: Vec<f64> = batch.iter().map(|&r| p.data[i].y[r]).collect();
                            let l = accumulate_task_gradient(&model, i, &x, &y, scale, &mut acc)?;
                            check_divergence(l, f64::INFINITY, epoch)?;
                        }
                    }
                    apply(&mut model, &acc, lr, Some(i));
                }
            }
        }
        let e = epoch_loss(&model, &p, epoch)?;
        check_divergence(e.total, initial, epoch)?;
        trace.epochs.push(e);
    }
    let alignment_conditions =
        model.alignments.as_ref().map(|al| al.iter().map(|r| condition_number(r).unwrap_or(f64::INFINITY)).collect());
    Ok(TrainReport { model, trace, alignment_conditions })
}

/// SGD on the weighted objective. The shared module trains unless
/// `cfg.freeze_shared` is `Some(true)`.
pub fn train(model: MtlModel, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<TrainReport> {
    run(model, tasks, cfg, cfg.freeze_shared.unwrap_or(false))
}

/// Covariance alignment: alternating updates of each task's head and
/// alignment from that task's batches, with B frozen unless
/// `cfg.freeze_shared` is `Some(false)`.
pub fn train_aligned(model: MtlModel, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<TrainReport> {
    if model.alignments.is_none() {
        return arg("train_aligned needs a model with alignments");
    }
    let cfg = TrainConfig { train_alignments: true, ..cfg.clone() };
    run(model, tasks, &cfg, cfg.freeze_shared.unwrap_or(true))
}

/// Weighted training objective after the last epoch.
pub fn final_objective(report: &TrainReport) -> f64 {
    report.trace.last().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::{capacity_construction, stl_solve};
    use crate::matrix_core::{norm, scaled};
    use crate::mtl_model::objective;
    use crate::task_gen::{gen_linear_task, gen_relu_task, label_linear, TaskKind};

    fn unit(d: usize, seed: u64) -> Vec<f64> {
        let v = rng::gaussian_vec(&mut rng::from_seed(seed), d);
        scaled(&v, 1.0 / norm(&v))
    }

    fn pair(seed: u64) -> Vec<TaskDataset> {
        vec![
            gen_linear_task(&unit(5, seed), 120, 0.3, None, seed).unwrap(),
            gen_linear_task(&unit(5, seed + 1), 80, 0.3, None, seed + 7).unwrap(),
        ]
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.epochs, c.batch_size), (1e-3, 30, 50));
        assert!(TrainConfig { learning_rate: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
    }

    #[test]
    fn tiny_learning_rate_is_a_no_op() {
        let model = MtlModel::random(5, 2, 2, Activation::Relu, 3);
        let cfg = TrainConfig { learning_rate: 1e-12, epochs: 1, ..Default::default() };
        let out = train(model.clone(), &pair(1), &cfg).unwrap();
        assert!(out.model.shared.max_abs_diff(&model.shared) < 1e-9);
        assert_eq!(out.trace.epochs.len(), 2);
    }

    #[test]
    fn convex_single_task_reaches_least_squares() {
        let t = gen_linear_task(&unit(4, 2), 200, 0.5, None, 3).unwrap();
        let model = MtlModel::new(DenseMatrix::identity(4), vec![vec![0.0; 4]], Activation::Linear).unwrap();
        let cfg = TrainConfig { freeze_shared: Some(true), epochs: 3000, batch_size: 200, learning_rate: 0.1, ..Default::default() };
        let out = train(model, std::slice::from_ref(&t), &cfg).unwrap();
        let s = TaskStats::from_task(&t);
        let best = s.loss(&stl_solve(&t).unwrap());
        assert!((final_objective(&out) - best).abs() <= 1e-4 * best);
        for w in out.trace.epochs.windows(2) {
            assert!(w[1].total <= w[0].total + 1e-12);
        }
    }

    #[test]
    fn minibatch_convex_trace_decreases_on_average() {
        let t = gen_linear_task(&unit(6, 4), 500, 0.2, None, 5).unwrap();
        let model = MtlModel::new(DenseMatrix::identity(6), vec![vec![0.0; 6]], Activation::Linear).unwrap();
        let cfg = TrainConfig { freeze_shared: Some(true), epochs: 30, ..Default::default() };
        let out = train(model, &[t], &cfg).unwrap();
        let tr = &out.trace.epochs;
        assert!(tr[30].total < tr[0].total);
        assert!(tr[30].total <= tr[15].total * 1.01);
    }

    #[test]
    fn deterministic_per_seed() {
        let model = MtlModel::random(5, 2, 2, Activation::Relu, 9);
        let cfg = TrainConfig { epochs: 5, seed: 4, ..Default::default() };
        let a = train(model.clone(), &pair(2), &cfg).unwrap();
        let b = train(model.clone(), &pair(2), &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
        let c = train(model, &pair(2), &TrainConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn joint_requires_identical_covariates() {
        let model = MtlModel::random(5, 2, 2, Activation::Linear, 1);
        let cfg = TrainConfig { batching: Batching::Joint, epochs: 1, ..Default::default() };
        assert!(matches!(train(model.clone(), &pair(3), &cfg), Err(Error::Argument(_))));
        let base = gen_linear_task(&unit(5, 1), 100, 0.1, None, 1).unwrap();
        let other = label_linear(base.x.clone(), &unit(5, 2), 0.1, 9).unwrap();
        let out = train(model, &[base, other], &cfg).unwrap();
        assert!(out.trace.last().unwrap() < out.trace.initial().unwrap());
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let model = MtlModel::random(5, 2, 2, Activation::Linear, 1);
        let cfg = TrainConfig { learning_rate: 10.0, epochs: 50, ..Default::default() };
        match train(model, &pair(4), &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn stationary_at_the_capacity_construction() {
        let thetas: Vec<Vec<f64>> = (0..3).map(|i| unit(6, 10 + i)).collect();
        let tasks: Vec<TaskDataset> =
            thetas.iter().enumerate().map(|(i, t)| gen_linear_task(t, 40, 0.0, None, i as u64).unwrap()).collect();
        let model = capacity_construction(&thetas, 3).unwrap();
        let out = train(model, &tasks, &TrainConfig::default()).unwrap();
        assert!(final_objective(&out) < 1e-20);
    }

    #[test]
    fn identity_alignments_frozen_match_vanilla() {
        let tasks = pair(5);
        let model = MtlModel::random(5, 2, 2, Activation::Relu, 2);
        let cfg = TrainConfig { epochs: 4, ..Default::default() };
        let plain = train(model.clone(), &tasks, &cfg).unwrap();
        let aligned = train(model.with_identity_alignments(), &tasks, &cfg).unwrap();
        assert_eq!(plain.trace, aligned.trace);
    }

    #[test]
    fn aligned_training_moves_only_heads_and_alignments() {
        let tasks = pair(6);
        let model = MtlModel::random(5, 1, 2, Activation::Linear, 2).with_identity_alignments();
        let out = train_aligned(model.clone(), &tasks, &TrainConfig { epochs: 3, ..Default::default() }).unwrap();
        assert_eq!(out.model.shared, model.shared);
        assert_ne!(out.model.alignments, model.alignments);
        assert!(out.alignment_conditions.unwrap().iter().all(|c| c.is_finite()));
        assert!(train_aligned(MtlModel::random(5, 1, 2, Activation::Linear, 2), &tasks, &TrainConfig::default()).is_err());
    }

    #[test]
    fn alternating_batch_touches_one_head() {
        let tasks = vec![
            gen_linear_task(&unit(4, 1), 50, 0.0, None, 1).unwrap(),
            gen_linear_task(&unit(4, 2), 50, 0.0, None, 2).unwrap(),
        ];
        let model = MtlModel::random(4, 2, 2, Activation::Linear, 1);
        let w = WeightVector::new(vec![1.0, 0.0]).unwrap();
        let cfg = TrainConfig { epochs: 2, weights: Some(w), ..Default::default() };
        let out = train(model.clone(), &tasks, &cfg).unwrap();
        assert_eq!(out.model.heads[1], model.heads[1]);
        assert_ne!(out.model.heads[0], model.heads[0]);
    }

    #[test]
    fn stats_path_matches_row_path() {
        let tasks = pair(8);
        let model = MtlModel::random(5, 2, 2, Activation::Linear, 3).with_identity_alignments();
        let cfg = TrainConfig { epochs: 3, batch_size: 200, train_alignments: true, ..Default::default() };
        let fast = train(model.clone(), &tasks, &cfg).unwrap();
        let mut slow_model = model.clone();
        let w = WeightVector::uniform(2);
        let data: Vec<TaskData> = tasks.iter().map(TaskDataset::train_data).collect();
        for epoch in 1..=3u64 {
            let mut g = rng::stream(0, epoch);
            let mut all = Vec::new();
            for (i, d) in data.iter().enumerate() {
                all.extend(batches(d.rows(), 200, &mut g).into_iter().map(|b| (i, b)));
            }
            all.shuffle(&mut g);
            for (i, _) in all {
                let mut acc = Gradients::zeros(&slow_model, Wrt::ALL).unwrap();
                let n = data[i].rows() as f64;
                accumulate_task_gradient(&slow_model, i, &data[i].x, &data[i].y, 1.0 / n, &mut acc).unwrap();
                apply(&mut slow_model, &acc, 1e-3, Some(i));
            }
        }
        assert!(fast.model.shared.max_abs_diff(&slow_model.shared) < 1e-12);
        let fo = objective(&fast.model, &tasks, &w).unwrap();
        let so = objective(&slow_model, &tasks, &w).unwrap();
        assert!((fo - so).abs() < 1e-10 * so);
    }

    #[test]
    fn trace_csv_shape() {
        let t = gen_relu_task(&unit(4, 1), 1.0, 30, 0.1, None, 1).unwrap();
        assert_eq!(t.kind, TaskKind::Regression);
        let model = MtlModel::random(4, 1, 1, Activation::Relu, 1);
        let out = train(model, &[t], &TrainConfig { epochs: 2, ..Default::default() }).unwrap();
        let csv = out.trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,loss_0,total");
        assert_eq!(lines.len(), 4);
    }
}
