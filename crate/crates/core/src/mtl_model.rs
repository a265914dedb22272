//! The shared-module model `g((X R_i) B) A_i`, its weighted squared-loss
//! objective and exact gradients.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::matrix_core::{axpy, dot, DenseMatrix};
use crate::rng;
use crate::task_gen::{TaskData, TaskDataset};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative, with the ReLU subgradient at 0 taken as 0.
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Nonnegative per-task loss weights, not all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return arg("weight vector is empty");
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return arg("weights must be finite and nonnegative");
        }
        if weights.iter().all(|w| *w == 0.0) {
            return arg("weights are all zero");
        }
        Ok(WeightVector(weights))
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 1, "need at least one task");
        WeightVector(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct MtlModel {
    /// B, d×r.
    pub shared: DenseMatrix,
    /// A_i, each of length r.
    pub heads: Vec<Vec<f64>>,
    /// R_i, each d×d; `None` means identity.
    pub alignments: Option<Vec<DenseMatrix>>,
    pub activation: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    dim: usize,
    capacity: usize,
    tasks: usize,
    activation: Activation,
    shared: DenseMatrix,
    heads: Vec<Vec<f64>>,
    alignments: Option<Vec<DenseMatrix>>,
}

impl TryFrom<ModelDoc> for MtlModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        let m = MtlModel { shared: doc.shared, heads: doc.heads, alignments: doc.alignments, activation: doc.activation };
        m.validate()?;
        if (m.dim(), m.capacity(), m.task_count()) != (doc.dim, doc.capacity, doc.tasks) {
            return arg("model header disagrees with its matrices");
        }
        Ok(m)
    }
}

impl From<MtlModel> for ModelDoc {
    fn from(m: MtlModel) -> Self {
        ModelDoc {
            dim: m.dim(),
            capacity: m.capacity(),
            tasks: m.task_count(),
            activation: m.activation,
            shared: m.shared,
            heads: m.heads,
            alignments: m.alignments,
        }
    }
}

impl MtlModel {
    pub fn new(shared: DenseMatrix, heads: Vec<Vec<f64>>, activation: Activation) -> Result<Self> {
        let m = MtlModel { shared, heads, alignments: None, activation };
        m.validate()?;
        Ok(m)
    }

    /// Small random initialization: B entries N(0, 1/d), heads N(0, 1).
    pub fn random(d: usize, r: usize, k: usize, activation: Activation, seed: u64) -> Self {
        let mut g = rng::from_seed(seed);
        let s = 1.0 / (d as f64).sqrt();
        let shared = DenseMatrix::from_fn(d, r, |_, _| s * rng::gaussian(&mut g));
        let heads = (0..k).map(|_| rng::gaussian_vec(&mut g, r)).collect();
        MtlModel { shared, heads, alignments: None, activation }
    }

    /// Adds identity alignments, so the aligned model starts out equal to
    /// the plain one.
    pub fn with_identity_alignments(mut self) -> Self {
        let d = self.dim();
        self.alignments = Some(vec![DenseMatrix::identity(d); self.task_count()]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (d, r) = self.shared.shape();
        if d == 0 || r == 0 {
            return arg("shared module must be nonempty");
        }
        if self.heads.is_empty() {
            return arg("model needs at least one head");
        }
        if self.heads.iter().any(|h| h.len() != r) {
            return arg(format!("every head must have length r = {r}"));
        }
        if !self.shared.is_finite() || self.heads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("model has non-finite parameters".into()));
        }
        if let Some(al) = &self.alignments {
            if al.len() != self.heads.len() {
                return arg("alignment count differs from head count");
            }
            if al.iter().any(|a| a.shape() != (d, d)) {
                return arg(format!("alignments must be {d}x{d}"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.shared.rows()
    }

    pub fn capacity(&self) -> usize {
        self.shared.cols()
    }

    pub fn task_count(&self) -> usize {
        self.heads.len()
    }

    fn check_task(&self, task: usize, x: &DenseMatrix) -> Result<()> {
        if task >= self.task_count() {
            return arg(format!("task index {task} out of range ({} tasks)", self.task_count()));
        }
        if x.cols() != self.dim() {
            return arg(format!("X has {} columns, model expects {}", x.cols(), self.dim()));
        }
        Ok(())
    }

    /// `R_i B`, the shared module as seen by task `i`.
    pub fn effective_shared(&self, task: usize) -> DenseMatrix {
        match &self.alignments {
            Some(al) => al[task].mul(&self.shared),
            None => self.shared.clone(),
        }
    }

    /// `R_i B A_i` for linear models: the task's end-to-end parameter.
    pub fn task_vector(&self, task: usize) -> Vec<f64> {
        self.effective_shared(task).matvec(&self.heads[task])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Predictions `g((X R_i) B) A_i`.
pub fn forward(model: &MtlModel, x: &DenseMatrix, task: usize) -> Result<Vec<f64>> {
    model.check_task(task, x)?;
    let w = model.effective_shared(task);
    let a = &model.heads[task];
    Ok(match model.activation {
        Activation::Linear => x.matvec(&w.matvec(a)),
        Activation::Relu => {
            let h = x.mul(&w);
            (0..x.rows()).map(|i| h.row(i).iter().zip(a).map(|(v, ai)| v.max(0.0) * ai).sum()).collect()
        }
    })
}

/// `‖forward − y‖²` on one task's data.
pub fn task_loss(model: &MtlModel, data: &TaskData, task: usize) -> Result<f64> {
    let p = forward(model, &data.x, task)?;
    Ok(p.iter().zip(&data.y).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn check_weights(model: &MtlModel, k: usize, weights: &WeightVector) -> Result<()> {
    if k != model.task_count() || weights.len() != k {
        return arg(format!("{} tasks, {} heads, {} weights", k, model.task_count(), weights.len()));
    }
    Ok(())
}

/// `Σ_i α_i ‖forward(X_i) − y_i‖²` over the tasks' training rows.
pub fn objective(model: &MtlModel, tasks: &[TaskDataset], weights: &WeightVector) -> Result<f64> {
    let data: Vec<TaskData> = tasks.iter().map(TaskDataset::train_data).collect();
    objective_on(model, &data, weights)
}

pub fn objective_on(model: &MtlModel, data: &[TaskData], weights: &WeightVector) -> Result<f64> {
    check_weights(model, data.len(), weights)?;
    let mut total = 0.0;
    for (i, (d, &a)) in data.iter().zip(weights.as_slice()).enumerate() {
        if a != 0.0 {
            total += a * task_loss(model, d, i)?;
        }
    }
    Ok(total)
}

/// Which parameter blocks to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wrt {
    pub shared: bool,
    pub heads: bool,
    pub alignments: bool,
}

impl Wrt {
    pub const ALL: Wrt = Wrt { shared: true, heads: true, alignments: true };
    pub const MODEL: Wrt = Wrt { shared: true, heads: true, alignments: false };
}

/// Gradient blocks; a block is `None` when it was not requested.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub shared: Option<DenseMatrix>,
    pub heads: Option<Vec<Vec<f64>>>,
    pub alignments: Option<Vec<DenseMatrix>>,
}

impl Gradients {
    pub fn zeros(model: &MtlModel, wrt: Wrt) -> Result<Self> {
        if wrt.alignments && model.alignments.is_none() {
            return arg("alignment gradients requested but the model has no alignments");
        }
        let (d, r) = model.shared.shape();
        let k = model.task_count();
        Ok(Gradients {
            shared: wrt.shared.then(|| DenseMatrix::zeros(d, r)),
            heads: wrt.heads.then(|| vec![vec![0.0; r]; k]),
            alignments: wrt.alignments.then(|| vec![DenseMatrix::zeros(d, d); k]),
        })
    }
}

/// Adds the gradient of `scale · ‖forward(x) − y‖²` for `task` into `acc`
/// and returns the unscaled squared error.
pub fn accumulate_task_gradient(
    model: &MtlModel,
    task: usize,
    x: &DenseMatrix,
    y: &[f64],
    scale: f64,
    acc: &mut Gradients,
) -> Result<f64> {
    model.check_task(task, x)?;
    if y.len() != x.rows() {
        return arg("label count differs from row count");
    }
    let w = model.effective_shared(task);
    let a = &model.heads[task];
    // q = xᵀ dH collapses to a vector for the linear map.
    let (loss, grad_w, head_grad) = match model.activation {
        Activation::Linear => {
            let v = w.matvec(a);
            let e: Vec<f64> = x.matvec(&v).iter().zip(y).map(|(p, t)| p - t).collect();
            let g: Vec<f64> = e.iter().map(|v| 2.0 * scale * v).collect();
            let q = x.tr_matvec(&g);
            let mut gw = DenseMatrix::zeros(w.rows(), w.cols());
            gw.add_outer(1.0, &q, a);
            (dot(&e, &e), gw, w.tr_matvec(&q))
        }
        Activation::Relu => {
            let h = x.mul(&w);
            let r = a.len();
            let mut loss = 0.0;
            let mut dh = DenseMatrix::zeros(x.rows(), r);
            let mut ga = vec![0.0; r];
            for i in 0..x.rows() {
                let hi = h.row(i);
                let pred: f64 = hi.iter().zip(a).map(|(v, ai)| v.max(0.0) * ai).sum();
                let e = pred - y[i];
                loss += e * e;
                let g = 2.0 * scale * e;
                for j in 0..r {
                    ga[j] += hi[j].max(0.0) * g;
                    dh[(i, j)] = g * a[j] * model.activation.derivative(hi[j]);
                }
            }
            (loss, x.tr_mul(&dh), ga)
        }
    };
    if let Some(ga) = acc.heads.as_mut() {
        axpy(&mut ga[task], 1.0, &head_grad);
    }
    if let Some(gb) = acc.shared.as_mut() {
        match &model.alignments {
            Some(al) => gb.add_scaled(1.0, &al[task].tr_mul(&grad_w)),
            None => gb.add_scaled(1.0, &grad_w),
        }
    }
    if let Some(gr) = acc.alignments.as_mut() {
        gr[task].add_scaled(1.0, &grad_w.mul(&model.shared.transpose()));
    }
    Ok(loss)
}

/// Exact gradients of [`objective`].
pub fn gradients(model: &MtlModel, tasks: &[TaskDataset], weights: &WeightVector, wrt: Wrt) -> Result<Gradients> {
    let data: Vec<TaskData> = tasks.iter().map(TaskDataset::train_data).collect();
    gradients_on(model, &data, weights, wrt)
}

pub fn gradients_on(model: &MtlModel, data: &[TaskData], weights: &WeightVector, wrt: Wrt) -> Result<Gradients> {
    check_weights(model, data.len(), weights)?;
    let mut acc = Gradients::zeros(model, wrt)?;
    for (i, (d, &a)) in data.iter().zip(weights.as_slice()).enumerate() {
        accumulate_task_gradient(model, i, &d.x, &d.y, a, &mut acc)?;
    }
    Ok(acc)
}
