//! Synthetic task families: linear, ReLU, logistic and multi-head ReLU
//! tasks, covariance shaping, model pairs with a controlled angle, label
//! flips, train/validation splits and CSV + JSON persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{arg, Error, Result};
use crate::matrix_core::{self, dot, norm, orthonormal_basis, random_orthonormal, scaled, DenseMatrix};
use crate::rng;

/// Stream labels so that X and noise come from independent draws and two
/// generators given the same seed share the same design matrix.
const DESIGN_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Generating parameter: a vector θ, or a d×r matrix Θ for multi-head tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundTruth {
    Vector(Vec<f64>),
    Matrix(DenseMatrix),
}

impl GroundTruth {
    pub fn dim(&self) -> usize {
        match self {
            GroundTruth::Vector(v) => v.len(),
            GroundTruth::Matrix(m) => m.rows(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    #[serde(default)]
    pub params: Value,
}

impl Provenance {
    fn new(generator: &str, seed: u64, params: Value) -> Self {
        Provenance { generator: generator.into(), seed, params }
    }

    fn note(&mut self, key: &str, value: Value) {
        if !self.params.is_object() {
            self.params = json!({});
        }
        self.params[key] = value;
    }
}

/// A design matrix with its labels. Used for training views of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
}

impl TaskData {
    pub fn new(x: DenseMatrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return arg(format!("{} rows but {} labels", x.rows(), y.len()));
        }
        Ok(TaskData { x, y })
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub theta_true: Option<GroundTruth>,
    /// ReLU output scale `a`.
    pub a_true: Option<f64>,
    pub noise_sigma: f64,
    pub kind: TaskKind,
    pub split: Option<Split>,
    pub provenance: Provenance,
}

impl TaskDataset {
    /// A dataset without ground truth, e.g. loaded from user data.
    pub fn new(x: DenseMatrix, y: Vec<f64>, kind: TaskKind) -> Result<Self> {
        let task = TaskDataset {
            x,
            y,
            theta_true: None,
            a_true: None,
            noise_sigma: 0.0,
            kind,
            split: None,
            provenance: Provenance::new("external", 0, Value::Null),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.x.rows();
        if self.y.len() != m {
            return arg(format!("{m} rows but {} labels", self.y.len()));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return arg("non-finite label");
        }
        if let Some(t) = &self.theta_true {
            if t.dim() != self.x.cols() {
                return arg(format!("theta has dimension {} but X has {} columns", t.dim(), self.x.cols()));
            }
        }
        if self.kind == TaskKind::Classification && self.y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return arg("classification labels must be 0 or 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return arg("noise sigma must be nonnegative");
        }
        if let Some(s) = &self.split {
            let mut seen = vec![false; m];
            for &i in s.train.iter().chain(&s.validation) {
                if i >= m || seen[i] {
                    return arg("split index out of range or repeated");
                }
                seen[i] = true;
            }
            if seen.iter().any(|v| !v) {
                return arg("split does not cover all rows");
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn theta_vector(&self) -> Option<&[f64]> {
        match &self.theta_true {
            Some(GroundTruth::Vector(v)) => Some(v),
            _ => None,
        }
    }

    pub fn train_indices(&self) -> Vec<usize> {
        match &self.split {
            Some(s) => s.train.clone(),
            None => (0..self.rows()).collect(),
        }
    }

    /// Training rows (all rows when unsplit).
    pub fn train_data(&self) -> TaskData {
        match &self.split {
            Some(s) => self.subset(&s.train),
            None => TaskData { x: self.x.clone(), y: self.y.clone() },
        }
    }

    pub fn validation_data(&self) -> Result<TaskData> {
        match &self.split {
            Some(s) => Ok(self.subset(&s.validation)),
            None => arg("task has no train/validation split"),
        }
    }

    fn subset(&self, idx: &[usize]) -> TaskData {
        TaskData { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect() }
    }

    /// Label noise `y − Xθ` of a linear task.
    pub fn noise_vector(&self) -> Result<Vec<f64>> {
        let theta = self.linear_theta()?;
        Ok(matrix_core::sub(&self.y, &self.x.matvec(theta)))
    }

    fn linear_theta(&self) -> Result<&[f64]> {
        match (self.theta_vector(), self.a_true, self.kind) {
            (Some(t), None, TaskKind::Regression) => Ok(t),
            _ => arg("operation needs a linear regression task with known theta"),
        }
    }
}

/// Rotation Q with a diagonal scale D that is `boost` on `boosted_coords`
/// and 1 elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSpec {
    pub rotation: DenseMatrix,
    pub boosted_coords: Vec<usize>,
    pub boost: f64,
}

impl CovarianceSpec {
    pub fn new(rotation: DenseMatrix, boosted_coords: Vec<usize>, boost: f64) -> Result<Self> {
        let d = rotation.rows();
        if rotation.cols() != d {
            return arg("rotation must be square");
        }
        let err = rotation.gram().sub(&DenseMatrix::identity(d)).frobenius_norm();
        if err > 1e-8 {
            return arg(format!("rotation is not orthonormal (error {err:e})"));
        }
        if boosted_coords.iter().any(|&i| i >= d) {
            return arg("boosted coordinate out of range");
        }
        if !(boost >= 1.0) {
            return arg("boost must be at least 1");
        }
        Ok(CovarianceSpec { rotation, boosted_coords, boost })
    }

    pub fn dim(&self) -> usize {
        self.rotation.rows()
    }

    /// Diagonal of D.
    pub fn scales(&self) -> Vec<f64> {
        let mut s = vec![1.0; self.dim()];
        for &i in &self.boosted_coords {
            s[i] = self.boost;
        }
        s
    }

    /// Maps i.i.d. Gaussian rows `R` to `R·D·Qᵀ`, whose rows have covariance `Q D² Qᵀ`.
    pub fn shape(&self, raw: &DenseMatrix) -> DenseMatrix {
        let s = self.scales();
        let scaled = DenseMatrix::from_fn(raw.rows(), raw.cols(), |i, j| raw[(i, j)] * s[j]);
        scaled.mul(&self.rotation.transpose())
    }

    /// `Q D² Qᵀ`.
    pub fn population_covariance(&self) -> DenseMatrix {
        let s2: Vec<f64> = self.scales().iter().map(|v| v * v).collect();
        self.rotation.mul(&DenseMatrix::from_diag(&s2)).mul(&self.rotation.transpose())
    }

    /// Orthonormal basis of the boosted directions, `Q[:, S]`.
    pub fn boosted_basis(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.dim(), self.boosted_coords.len(), |i, j| self.rotation[(i, self.boosted_coords[j])])
    }
}

/// `m` i.i.d. standard Gaussian rows, covariance-shaped when `cov` is given.
pub fn gaussian_design(m: usize, d: usize, cov: Option<&CovarianceSpec>, rng: &mut rng::Rng) -> Result<DenseMatrix> {
    if let Some(c) = cov {
        if c.dim() != d {
            return arg(format!("covariance is {}-dimensional, theta is {d}-dimensional", c.dim()));
        }
    }
    let raw = DenseMatrix::from_vec_unchecked(m, d, rng::gaussian_vec(rng, m * d));
    Ok(match cov {
        Some(c) => c.shape(&raw),
        None => raw,
    })
}

/// `m × d` design with singular values spaced geometrically from `kappa`
/// down to 1, so its condition number is exactly `kappa`.
pub fn gen_conditioned_design(m: usize, d: usize, kappa: f64, seed: u64) -> Result<DenseMatrix> {
    if m < d || d == 0 {
        return arg("conditioned design needs m >= d >= 1");
    }
    if !(kappa >= 1.0) {
        return arg("condition number must be at least 1");
    }
    let mut r = rng::stream(seed, DESIGN_STREAM);
    let g = DenseMatrix::from_vec_unchecked(m, d, rng::gaussian_vec(&mut r, m * d));
    let u = orthonormal_basis(&g)?;
    let v = random_orthonormal(d, rng::derive(seed, 7));
    let s: Vec<f64> =
        (0..d).map(|j| if d == 1 { 1.0 } else { kappa.powf(1.0 - j as f64 / (d - 1) as f64) }).collect();
    Ok(u.mul(&DenseMatrix::from_diag(&s)).mul(&v.transpose()))
}

fn check_rows(m: usize) -> Result<()> {
    if m == 0 {
        return arg("need at least one row");
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return arg("noise sigma must be finite and nonnegative");
    }
    Ok(())
}

fn noise(m: usize, sigma: f64, seed: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; m];
    }
    let mut r = rng::stream(seed, NOISE_STREAM);
    (0..m).map(|_| sigma * rng::gaussian(&mut r)).collect()
}

/// `y = Xθ + ε`, ε ~ N(0, σ²).
pub fn gen_linear_task(theta: &[f64], m: usize, sigma: f64, cov: Option<&CovarianceSpec>, seed: u64) -> Result<TaskDataset> {
    check_rows(m)?;
    check_sigma(sigma)?;
    let x = gaussian_design(m, theta.len(), cov, &mut rng::stream(seed, DESIGN_STREAM))?;
    let mut task = label_linear(x, theta, sigma, seed)?;
    task.provenance = Provenance::new("linear", seed, json!({ "m": m, "sigma": sigma, "shaped": cov.is_some() }));
    Ok(task)
}

/// Linear labels on a given design.
pub fn label_linear(x: DenseMatrix, theta: &[f64], sigma: f64, seed: u64) -> Result<TaskDataset> {
    check_sigma(sigma)?;
    if x.cols() != theta.len() {
        return arg(format!("X has {} columns, theta has {}", x.cols(), theta.len()));
    }
    let eps = noise(x.rows(), sigma, seed);
    let y = x.matvec(theta).iter().zip(&eps).map(|(s, e)| s + e).collect();
    Ok(TaskDataset {
        x,
        y,
        theta_true: Some(GroundTruth::Vector(theta.to_vec())),
        a_true: None,
        noise_sigma: sigma,
        kind: TaskKind::Regression,
        split: None,
        provenance: Provenance::new("linear", seed, json!({ "sigma": sigma })),
    })
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// `y = a·relu(Xθ) + ε`.
pub fn gen_relu_task(
    theta: &[f64],
    a: f64,
    m: usize,
    sigma: f64,
    cov: Option<&CovarianceSpec>,
    seed: u64,
) -> Result<TaskDataset> {
    check_rows(m)?;
    check_sigma(sigma)?;
    let x = gaussian_design(m, theta.len(), cov, &mut rng::stream(seed, DESIGN_STREAM))?;
    let eps = noise(m, sigma, seed);
    let y = x.matvec(theta).iter().zip(&eps).map(|(z, e)| a * relu(*z) + e).collect();
    Ok(TaskDataset {
        x,
        y,
        theta_true: Some(GroundTruth::Vector(theta.to_vec())),
        a_true: Some(a),
        noise_sigma: sigma,
        kind: TaskKind::Regression,
        split: None,
        provenance: Provenance::new("relu", seed, json!({ "m": m, "a": a, "sigma": sigma, "shaped": cov.is_some() })),
    })
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary labels `1{sigmoid(Xθ) ≥ 0.5}`; an exact tie maps to 1.
pub fn gen_logistic_task(theta: &[f64], m: usize, seed: u64) -> Result<TaskDataset> {
    check_rows(m)?;
    let x = gaussian_design(m, theta.len(), None, &mut rng::stream(seed, DESIGN_STREAM))?;
    let y = x.matvec(theta).iter().map(|&z| if sigmoid(z) >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(TaskDataset {
        x,
        y,
        theta_true: Some(GroundTruth::Vector(theta.to_vec())),
        a_true: None,
        noise_sigma: 0.0,
        kind: TaskKind::Classification,
        split: None,
        provenance: Provenance::new("logistic", seed, json!({ "m": m })),
    })
}

/// `y = relu(XΘ)·1 + ε` for a d×r parameter Θ.
pub fn gen_multihead_relu_task(theta: &DenseMatrix, m: usize, sigma: f64, seed: u64) -> Result<TaskDataset> {
    check_rows(m)?;
    check_sigma(sigma)?;
    if theta.cols() == 0 {
        return arg("Theta needs at least one column");
    }
    let x = gaussian_design(m, theta.rows(), None, &mut rng::stream(seed, DESIGN_STREAM))?;
    let h = x.mul(theta);
    let eps = noise(m, sigma, seed);
    let y = (0..m).map(|i| h.row(i).iter().map(|&v| relu(v)).sum::<f64>() + eps[i]).collect();
    Ok(TaskDataset {
        x,
        y,
        theta_true: Some(GroundTruth::Matrix(theta.clone())),
        a_true: None,
        noise_sigma: sigma,
        kind: TaskKind::Regression,
        split: None,
        provenance: Provenance::new("multihead_relu", seed, json!({ "m": m, "r": theta.cols(), "sigma": sigma })),
    })
}

/// Interpolation weight α with `cos(θ₁, αθ₁ + (1−α)θ′) = c` when
/// `‖θ′‖ = ‖θ₁‖` and `θ′ ⟂ θ₁`.
pub fn alpha_for_cosine(c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&c) {
        return arg("target cosine must lie in [0, 1]");
    }
    Ok(c / (c + (1.0 - c * c).sqrt()))
}

/// `cos(θ₁, θ₂)` produced by interpolation weight α.
pub fn cosine_for_alpha(alpha: f64) -> f64 {
    alpha / (alpha * alpha + (1.0 - alpha).powi(2)).sqrt()
}

/// `αθ₁ + (1−α)θ′` where θ′ is `direction` with its θ₁ component removed,
/// rescaled to `‖θ₁‖`.
pub fn interpolate_orthogonal(theta1: &[f64], alpha: f64, direction: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return arg("alpha must lie in [0, 1]");
    }
    if theta1.len() != direction.len() {
        return arg("direction has the wrong dimension");
    }
    let n1 = norm(theta1);
    if n1 == 0.0 {
        return arg("theta1 must be nonzero");
    }
    let u = scaled(theta1, 1.0 / n1);
    let mut p = direction.to_vec();
    matrix_core::axpy(&mut p, -dot(&u, direction), &u);
    let np = norm(&p);
    if np <= 1e-12 * norm(direction) || np == 0.0 {
        return arg("direction is parallel to theta1");
    }
    Ok(theta1.iter().zip(&p).map(|(a, b)| alpha * a + (1.0 - alpha) * b * n1 / np).collect())
}

/// Returns `(θ₁, θ₂)` with `θ₂ = αθ₁ + (1−α)θ′` for a random θ′ ⟂ θ₁ of
/// equal norm.
pub fn make_model_pair(theta1: &[f64], alpha: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if theta1.len() < 2 {
        return arg("need d >= 2 to build an orthogonal direction");
    }
    let dir = rng::gaussian_vec(&mut rng::from_seed(seed), theta1.len());
    Ok((theta1.to_vec(), interpolate_orthogonal(theta1, alpha, &dir)?))
}

/// Matrix version: Θ′ is orthogonal to the column span of Θ₁ and has the
/// same Frobenius norm.
pub fn make_model_pair_matrix(theta1: &DenseMatrix, alpha: f64, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
    if !(0.0..=1.0).contains(&alpha) {
        return arg("alpha must lie in [0, 1]");
    }
    let (d, r) = theta1.shape();
    let basis = orthonormal_basis(theta1)?;
    if basis.cols() >= d {
        return arg("Theta1 spans the whole space; no orthogonal complement");
    }
    let mut g = rng::from_seed(seed);
    let raw = DenseMatrix::from_vec_unchecked(d, r, rng::gaussian_vec(&mut g, d * r));
    let p = raw.sub(&basis.mul(&basis.tr_mul(&raw)));
    let s = theta1.frobenius_norm() / p.frobenius_norm();
    let theta2 = theta1.scale(alpha).add(&p.scale((1.0 - alpha) * s));
    Ok((theta1.clone(), theta2))
}

/// Picks `round(fraction·m)` rows uniformly and flips each selected label
/// with probability `flip_prob`.
pub fn flip_labels(task: &TaskDataset, fraction: f64, flip_prob: f64, seed: u64) -> Result<TaskDataset> {
    if task.kind != TaskKind::Classification {
        return arg("label flips need a classification task");
    }
    if !(0.0..=1.0).contains(&fraction) || !(0.0..=1.0).contains(&flip_prob) {
        return arg("fraction and flip probability must lie in [0, 1]");
    }
    let m = task.rows();
    let count = ((fraction * m as f64).round() as usize).min(m);
    let mut r = rng::from_seed(seed);
    let mut chosen = index::sample(&mut r, m, count).into_vec();
    chosen.sort_unstable();
    let mut out = task.clone();
    let mut flipped = 0usize;
    for i in chosen {
        if r.random::<f64>() < flip_prob {
            out.y[i] = 1.0 - out.y[i];
            flipped += 1;
        }
    }
    out.provenance.note("flip", json!({ "fraction": fraction, "prob": flip_prob, "seed": seed, "flipped": flipped }));
    Ok(out)
}

/// Random split into `train_count` training rows and the rest for
/// validation. Both index lists are sorted.
pub fn split(task: &TaskDataset, train_count: usize, seed: u64) -> Result<TaskDataset> {
    let m = task.rows();
    if train_count == 0 || train_count >= m {
        return arg(format!("train count {train_count} must lie in 1..{m}"));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng::from_seed(seed));
    let mut train = perm[..train_count].to_vec();
    let mut validation = perm[train_count..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    let mut out = task.clone();
    out.split = Some(Split { train, validation });
    out.provenance.note("split", json!({ "train": train_count, "seed": seed }));
    Ok(out)
}

/// Replaces validation labels of a linear task by the noiseless signal `Xθ`,
/// so validation error measures distance to the true model only.
pub fn with_clean_validation(task: &TaskDataset) -> Result<TaskDataset> {
    let theta = task.linear_theta()?;
    let Some(s) = &task.split else {
        return arg("task has no validation split");
    };
    let mut out = task.clone();
    for &i in &s.validation {
        out.y[i] = dot(task.x.row(i), theta);
    }
    out.provenance.note("clean_validation", json!(true));
    Ok(out)
}

/// The three-task covariance family: a target whose rows have covariance
/// `Q₁D₁²Q₁ᵀ`, a source sharing that covariance, and a source with
/// covariance `Q₂D₂²Q₂ᵀ` whose boosted set is disjoint from the target's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarianceFamilySpec {
    pub dim: usize,
    pub boost: f64,
    pub boosted_count: usize,
    /// Requested `cos(θ₁, θ₂)`.
    pub cosine: f64,
    /// Share of θ′'s energy placed in the second source's boosted subspace.
    pub focus: f64,
    pub theta_norm: f64,
    pub target_rows: usize,
    pub target_train: usize,
    pub target_noise: f64,
    pub source_noise: f64,
}

impl Default for CovarianceFamilySpec {
    fn default() -> Self {
        CovarianceFamilySpec {
            dim: 100,
            boost: 100.0,
            boosted_count: 10,
            cosine: 0.96,
            focus: 0.5,
            theta_norm: 1.0,
            target_rows: 10_000,
            target_train: 9_000,
            target_noise: 3.0,
            source_noise: 0.0,
        }
    }
}

/// Shared structure of one seeded family.
#[derive(Clone, Debug)]
pub struct CovarianceFamily {
    pub spec: CovarianceFamilySpec,
    pub seed: u64,
    pub target_cov: CovarianceSpec,
    pub other_cov: CovarianceSpec,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
}

/// Which covariance a generated source uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceCovariance {
    Same,
    Different,
}

impl CovarianceFamilySpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || 2 * self.boosted_count > self.dim || self.boosted_count == 0 {
            return arg("need dim >= 2 and two disjoint nonempty boosted sets");
        }
        if !(0.0..=1.0).contains(&self.focus) {
            return arg("focus must lie in [0, 1]");
        }
        if !(self.theta_norm > 0.0) {
            return arg("theta_norm must be positive");
        }
        if self.target_train == 0 || self.target_train >= self.target_rows {
            return arg("target_train must lie in 1..target_rows");
        }
        check_sigma(self.target_noise)?;
        check_sigma(self.source_noise)?;
        alpha_for_cosine(self.cosine)?;
        if !(self.boost >= 1.0) {
            return arg("boost must be at least 1");
        }
        Ok(())
    }

    /// Draws the rotations, boosted sets and the model pair for `seed`.
    pub fn family(&self, seed: u64) -> Result<CovarianceFamily> {
        self.validate()?;
        let d = self.dim;
        let q1 = random_orthonormal(d, rng::derive(seed, 100));
        let q2 = random_orthonormal(d, rng::derive(seed, 101));
        let mut g = rng::stream(seed, 102);
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut g);
        let s1 = perm[..self.boosted_count].to_vec();
        let s2 = perm[self.boosted_count..2 * self.boosted_count].to_vec();
        let target_cov = CovarianceSpec::new(q1, s1, self.boost)?;
        let other_cov = CovarianceSpec::new(q2, s2, self.boost)?;

        let unit = |v: Vec<f64>| {
            let n = norm(&v);
            scaled(&v, 1.0 / n)
        };
        let theta1 = unit(rng::gaussian_vec(&mut g, d));
        let focused = unit(other_cov.boosted_basis().matvec(&rng::gaussian_vec(&mut g, self.boosted_count)));
        let generic = unit(rng::gaussian_vec(&mut g, d));
        let mut dir: Vec<f64> =
            focused.iter().zip(&generic).map(|(a, b)| self.focus.sqrt() * a + (1.0 - self.focus).sqrt() * b).collect();
        let p = target_cov.boosted_basis();
        dir = matrix_core::sub(&dir, &p.matvec(&p.tr_matvec(&dir)));
        let theta2 = interpolate_orthogonal(&theta1, alpha_for_cosine(self.cosine)?, &dir)?;
        Ok(CovarianceFamily {
            spec: self.clone(),
            seed,
            target_cov,
            other_cov,
            theta1: scaled(&theta1, self.theta_norm),
            theta2: scaled(&theta2, self.theta_norm),
        })
    }
}

impl CovarianceFamily {
    /// Noisy target with a random split and noiseless validation labels.
    pub fn target(&self) -> Result<TaskDataset> {
        let s = &self.spec;
        let t = gen_linear_task(&self.theta1, s.target_rows, s.target_noise, Some(&self.target_cov), rng::derive(self.seed, 110))?;
        with_clean_validation(&split(&t, s.target_train, rng::derive(self.seed, 111))?)
    }

    /// Source task with `m` rows. Designs are nested: the first rows of a
    /// larger source equal a smaller one with the same seed.
    pub fn source(&self, which: SourceCovariance, m: usize) -> Result<TaskDataset> {
        let (cov, stream) = match which {
            SourceCovariance::Same => (&self.target_cov, 120),
            SourceCovariance::Different => (&self.other_cov, 121),
        };
        let mut t = gen_linear_task(&self.theta2, m, self.spec.source_noise, Some(cov), rng::derive(self.seed, stream))?;
        t.provenance.note("source", json!(which));
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    rows: usize,
    dim: usize,
    theta_true: Option<GroundTruth>,
    a_true: Option<f64>,
    noise_sigma: f64,
    kind: TaskKind,
    split: Option<Split>,
    provenance: Provenance,
}

/// JSON sidecar path for a dataset CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes `path` (CSV, header `x0..x{d-1},y`, 17 significant digits) and
/// its JSON sidecar.
pub fn save(task: &TaskDataset, path: &Path) -> Result<()> {
    task.validate()?;
    let d = task.dim();
    let mut out = String::with_capacity(task.rows() * (d + 1) * 24);
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["y".to_string()]).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..task.rows() {
        for v in task.x.row(i) {
            write!(out, "{v:.16e},").expect("write to string");
        }
        writeln!(out, "{:.16e}", task.y[i]).expect("write to string");
    }
    fs::write(path, out)?;
    let side = Sidecar {
        rows: task.rows(),
        dim: d,
        theta_true: task.theta_true.clone(),
        a_true: task.a_true,
        noise_sigma: task.noise_sigma,
        kind: task.kind,
        split: task.split.clone(),
        provenance: task.provenance.clone(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Reads a dataset written by [`save`]. A missing sidecar yields an
/// unsplit regression task without ground truth.
pub fn load(path: &Path) -> Result<TaskDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.last() != Some(&"y") || cols.len() < 2 {
        return Err(Error::Parse(format!("{}: header must end with y", path.display())));
    }
    let d = cols.len() - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 2)))?;
        if vals.len() != d + 1 {
            return Err(Error::Parse(format!("{}:{}: expected {} fields", path.display(), n + 2, d + 1)));
        }
        xs.extend_from_slice(&vals[..d]);
        ys.push(vals[d]);
    }
    let x = DenseMatrix::new(ys.len(), d, xs)?;
    let side_path = sidecar_path(path);
    let task = if side_path.exists() {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(&side_path)?)?;
        if side.rows != ys.len() || side.dim != d {
            return Err(Error::Parse("sidecar dimensions disagree with CSV".into()));
        }
        TaskDataset {
            x,
            y: ys,
            theta_true: side.theta_true,
            a_true: side.a_true,
            noise_sigma: side.noise_sigma,
            kind: side.kind,
            split: side.split,
            provenance: side.provenance,
        }
    } else {
        TaskDataset::new(x, ys, TaskKind::Regression)?
    };
    task.validate()?;
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_core::{cos_sin, pinv};

    fn unit(d: usize, seed: u64) -> Vec<f64> {
        let v = rng::gaussian_vec(&mut rng::from_seed(seed), d);
        scaled(&v, 1.0 / norm(&v))
    }

    #[test]
    fn noiseless_linear_is_exact() {
        let theta = unit(5, 1);
        let t = gen_linear_task(&theta, 40, 0.0, None, 3).unwrap();
        assert_eq!(t.y, t.x.matvec(&theta));
        assert!(t.noise_vector().unwrap().iter().all(|e| *e == 0.0));
        let hat = pinv(&t.x).unwrap().matvec(&t.y);
        let err = norm(&matrix_core::sub(&hat, &theta)) / norm(&theta);
        assert!(err < 1e-8);
    }

    #[test]
    fn generators_are_deterministic() {
        let theta = unit(4, 2);
        assert_eq!(gen_linear_task(&theta, 30, 0.5, None, 9).unwrap(), gen_linear_task(&theta, 30, 0.5, None, 9).unwrap());
        assert_ne!(gen_linear_task(&theta, 30, 0.5, None, 9).unwrap().y, gen_linear_task(&theta, 30, 0.5, None, 10).unwrap().y);
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let cov = CovarianceSpec::new(DenseMatrix::identity(3), vec![0], 2.0).unwrap();
        assert!(matches!(gen_linear_task(&[1.0, 2.0], 5, 0.0, Some(&cov), 0), Err(Error::Argument(_))));
        assert!(gen_linear_task(&[1.0], 0, 0.0, None, 0).is_err());
        assert!(gen_linear_task(&[1.0], 3, -1.0, None, 0).is_err());
    }

    #[test]
    fn shaped_covariance_matches_population() {
        let d = 6;
        let cov = CovarianceSpec::new(random_orthonormal(d, 4), vec![1, 4], 3.0).unwrap();
        let t = gen_linear_task(&vec![0.0; d], 100_000, 0.0, Some(&cov), 5).unwrap();
        let emp = t.x.gram().scale(1.0 / 1e5);
        let pop = cov.population_covariance();
        assert!(emp.sub(&pop).frobenius_norm() / pop.frobenius_norm() < 0.05);
    }

    #[test]
    fn default_family_scale() {
        let s = CovarianceFamilySpec::default();
        assert_eq!((s.dim, s.boost, s.boosted_count), (100, 100.0, 10));
        let f = s.family(0).unwrap();
        let mut both = f.target_cov.boosted_coords.clone();
        both.extend(&f.other_cov.boosted_coords);
        both.sort_unstable();
        both.dedup();
        assert_eq!(both.len(), 20);
    }

    #[test]
    fn relu_task_cases() {
        let theta = vec![1.0, -1.0];
        let t = gen_relu_task(&theta, 2.0, 50, 0.0, None, 1).unwrap();
        let lin = gen_linear_task(&theta, 50, 0.0, None, 1).unwrap();
        for (y, z) in t.y.iter().zip(&lin.y) {
            assert_eq!(*y, 2.0 * z.max(0.0));
        }
        let dead = gen_relu_task(&[0.0, 0.0], 1.0, 20, 0.3, None, 2).unwrap();
        let lin_noise = gen_linear_task(&[0.0, 0.0], 20, 0.3, None, 2).unwrap();
        assert_eq!(dead.y, lin_noise.y);
    }

    #[test]
    fn relu_active_region_equals_linear() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.5]]).unwrap();
        let theta = [0.5, 0.25];
        let z = x.matvec(&theta);
        assert!(z.iter().all(|v| *v > 0.0));
        assert_eq!(z.iter().map(|v| relu(*v)).collect::<Vec<_>>(), z);
    }

    #[test]
    fn relu_mean_matches_half_gaussian_moment() {
        let theta = vec![0.6, -0.8, 1.2];
        let m = 200_000;
        let t = gen_relu_task(&theta, 1.0, m, 0.0, None, 7).unwrap();
        let mean = t.y.iter().sum::<f64>() / m as f64;
        let var = t.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let want = norm(&theta) / (2.0 * std::f64::consts::PI).sqrt();
        assert!((mean - want).abs() < 3.0 * (var / m as f64).sqrt());
    }

    #[test]
    fn logistic_labels() {
        let t = gen_logistic_task(&[0.0, 0.0], 10, 1).unwrap();
        assert!(t.y.iter().all(|v| *v == 1.0));
        let theta = vec![1.0, -2.0, 0.5];
        let t = gen_logistic_task(&theta, 500, 2).unwrap();
        for (z, y) in t.x.matvec(&theta).iter().zip(&t.y) {
            assert_eq!(*y, if *z >= 0.0 { 1.0 } else { 0.0 });
        }
        let big = gen_logistic_task(&[1e6, 0.0], 10, 3).unwrap();
        let signs = big.x.column(0);
        for (s, y) in signs.iter().zip(&big.y) {
            if *s > 1e-3 {
                assert_eq!(*y, 1.0);
            }
        }
        assert_eq!(t.kind, TaskKind::Classification);
    }

    #[test]
    fn multihead_reduces_and_scales() {
        let theta = unit(4, 3);
        let one = gen_multihead_relu_task(&DenseMatrix::column_vector(&theta), 30, 0.0, 4).unwrap();
        let relu_task = gen_relu_task(&theta, 1.0, 30, 0.0, None, 4).unwrap();
        assert_eq!(one.y, relu_task.y);
        let big = DenseMatrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * (j as f64 + 1.0));
        let a = gen_multihead_relu_task(&big, 25, 0.0, 5).unwrap();
        let b = gen_multihead_relu_task(&big.scale(2.5), 25, 0.0, 5).unwrap();
        for (u, v) in a.y.iter().zip(&b.y) {
            assert!((2.5 * u - v).abs() < 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn model_pair_cosines() {
        let theta = unit(8, 5);
        let (_, same) = make_model_pair(&theta, 1.0, 1).unwrap();
        assert!((cos_sin(&theta, &same).unwrap().0 - 1.0).abs() < 1e-15);
        let (_, orth) = make_model_pair(&theta, 0.0, 1).unwrap();
        assert!(cos_sin(&theta, &orth).unwrap().0.abs() < 1e-12);
        let alpha = alpha_for_cosine(0.96).unwrap();
        assert!((alpha - 1.0 / 1.2917).abs() < 1e-4);
        let (_, t2) = make_model_pair(&theta, alpha, 2).unwrap();
        assert!((cos_sin(&theta, &t2).unwrap().0 - 0.96).abs() < 1e-12);
        let grid: Vec<f64> = (0..=10).map(|i| cosine_for_alpha(i as f64 / 10.0)).collect();
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
        assert!(make_model_pair(&[1.0], 0.5, 0).is_err());
    }

    #[test]
    fn matrix_model_pair_is_orthogonal_mix() {
        let t1 = DenseMatrix::from_fn(10, 2, |i, j| ((i * 3 + j) % 5) as f64 - 2.0);
        let (a, b) = make_model_pair_matrix(&t1, 0.0, 3).unwrap();
        assert!(a.tr_mul(&b).frobenius_norm() < 1e-10);
        assert!((b.frobenius_norm() - t1.frobenius_norm()).abs() < 1e-10);
    }

    #[test]
    fn flips() {
        let t = gen_logistic_task(&unit(5, 1), 20_000, 2).unwrap();
        assert_eq!(flip_labels(&t, 0.0, 0.5, 1).unwrap().y, t.y);
        let all = flip_labels(&t, 1.0, 1.0, 1).unwrap();
        assert!(all.y.iter().zip(&t.y).all(|(a, b)| *a == 1.0 - b));
        let some = flip_labels(&t, 0.2, 0.5, 3).unwrap();
        let n = some.y.iter().zip(&t.y).filter(|(a, b)| a != b).count() as f64;
        let (mean, sd) = (2000.0, (4000.0f64 * 0.25).sqrt());
        assert!((n - mean).abs() < 4.0 * sd, "{n}");
        let reg = gen_linear_task(&[1.0], 5, 0.0, None, 0).unwrap();
        assert!(flip_labels(&reg, 0.2, 0.5, 0).is_err());
    }

    #[test]
    fn splits() {
        let t = gen_linear_task(&[1.0, 2.0], 10_000, 0.0, None, 0).unwrap();
        let s = split(&t, 9000, 4).unwrap();
        let sp = s.split.as_ref().unwrap();
        assert_eq!((sp.train.len(), sp.validation.len()), (9000, 1000));
        s.validate().unwrap();
        assert_eq!(split(&t, 9999, 1).unwrap().split.unwrap().validation.len(), 1);
        assert_eq!(s.split, split(&t, 9000, 4).unwrap().split);
        assert!(split(&t, 10_000, 0).is_err());
    }

    #[test]
    fn clean_validation_only_touches_validation_rows() {
        let t = split(&gen_linear_task(&[1.0, -1.0], 100, 1.0, None, 2).unwrap(), 80, 1).unwrap();
        let c = with_clean_validation(&t).unwrap();
        let v = c.validation_data().unwrap();
        assert_eq!(v.y, v.x.matvec(&[1.0, -1.0]));
        assert_eq!(c.train_data(), t.train_data());
    }

    #[test]
    fn conditioned_design_has_exact_kappa() {
        let x = gen_conditioned_design(50, 8, 4.0, 3).unwrap();
        assert!((matrix_core::condition_number(&x).unwrap() - 4.0).abs() < 1e-10);
    }

    #[test]
    fn family_is_paired_and_nested() {
        let spec = CovarianceFamilySpec { dim: 20, boosted_count: 2, target_rows: 200, target_train: 150, ..Default::default() };
        let f = spec.family(3).unwrap();
        assert!((cos_sin(&f.theta1, &f.theta2).unwrap().0 - 0.96).abs() < 1e-12);
        let dir = matrix_core::sub(&f.theta2, &scaled(&f.theta1, alpha_for_cosine(0.96).unwrap()));
        assert!(dot(&dir, &f.theta1).abs() < 1e-12);
        let small = f.source(SourceCovariance::Different, 10).unwrap();
        let large = f.source(SourceCovariance::Different, 40).unwrap();
        assert_eq!(small.x.row(3), large.x.row(3));
        assert_eq!(f.target().unwrap(), spec.family(3).unwrap().target().unwrap());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.csv");
        let t = split(&gen_linear_task(&[0.1, 1.0 / 3.0, -7.25e-9], 25, 0.7, None, 11).unwrap(), 20, 2).unwrap();
        save(&t, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, t);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x0,x1,x2,y\n"));
    }

    #[test]
    fn load_rejects_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "x0,y\n1.0,2.0\n3.0\n").unwrap();
        assert!(matches!(load(&path), Err(Error::Parse(_))));
    }
}
