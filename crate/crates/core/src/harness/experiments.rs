use std::collections::BTreeMap;

use serde::Serialize;

use super::{ExperimentConfig, ExperimentKind, GeneratorSpec, WeightingScheme};
use crate::analysis::{
    angle_to_target, metric, orthogonalization_diagnostic, score_from_grams, sin_contraction_check, theorem1_check,
    transfer_gap,
};
use crate::closed_form::{
    solve_equal_covariance, solve_linear_mtl, solve_same_covariates, stl_solve, task_stats, TaskStats,
};
use crate::error::{arg, Result};
use crate::matrix_core::{cos_sin, dot, norm, scaled, sub, DenseMatrix};
use crate::mtl_model::{forward, Activation, MtlModel, WeightVector};
use crate::rng;
use crate::task_gen::{
    alpha_for_cosine, flip_labels, gaussian_design, gen_conditioned_design, gen_linear_task, label_linear,
    make_model_pair, split, with_clean_validation, CovarianceFamilySpec, SourceCovariance, TaskDataset, TaskKind,
};
use crate::trainer::{train_aligned, TrainConfig};
use crate::weighting::{svd_reweight, uncertainty_weights, ThetaForm};

type Metrics = BTreeMap<String, f64>;

/// Runs one cell of `config` and returns its metrics.
pub fn run_cell(config: &ExperimentConfig, grid: f64, seed: u64) -> Result<Metrics> {
    match config.kind {
        ExperimentKind::SampleSweep => sample_sweep(config, grid as usize, seed),
        ExperimentKind::CosineSweep => cosine_sweep(config, grid, seed),
        ExperimentKind::CapacitySweep => capacity_sweep(config, grid as usize, seed),
        ExperimentKind::AlignmentCorrection => alignment_correction(config, grid as usize, seed),
        ExperimentKind::NoiseReweighting => noise_reweighting(config, grid, seed),
        ExperimentKind::TheoryVerify => theory_verify(config, grid, seed),
    }
}

fn unit_vector(d: usize, seed: u64) -> Vec<f64> {
    let v = rng::gaussian_vec(&mut rng::from_seed(seed), d);
    scaled(&v, 1.0 / norm(&v))
}

/// Weights for `[source, target]` under the configured scheme.
fn scheme_weights(config: &ExperimentConfig, tasks: &[TaskDataset], seed: u64) -> Result<Option<WeightVector>> {
    Ok(match config.weighting {
        WeightingScheme::Uniform => config.train.weights.clone(),
        WeightingScheme::Svd => {
            let cols: Vec<Vec<f64>> = tasks
                .iter()
                .map(|t| {
                    let d = t.train_data();
                    d.x.tr_matvec(&d.y)
                })
                .collect();
            Some(crate::weighting::weights_from_directions(&DenseMatrix::from_columns(&cols)?, config.capacity.min(cols.len()))?)
        }
        WeightingScheme::Uncertainty => {
            let d = tasks[0].dim();
            let model = MtlModel::random(d, config.capacity, tasks.len(), Activation::Linear, rng::derive(seed, 900));
            Some(uncertainty_weights(tasks, &model, &config.train, true)?.weights)
        }
    })
}

fn gap_metrics(out: &mut Metrics, prefix: &str, config: &ExperimentConfig, source: &TaskDataset, target: &TaskDataset, seed: u64) -> Result<()> {
    let weights = scheme_weights(config, &[source.clone(), target.clone()], seed)?;
    let cfg = TrainConfig { weights, seed, ..config.train.clone() };
    let rep = transfer_gap(source, target, config.capacity, &cfg, config.fitter)?;
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}_{k}") };
    out.insert(key("gap"), rep.gap);
    out.insert(key("mtl"), rep.mtl);
    out.insert(key("stl"), rep.stl);
    if let (Some(a), Some(b)) = (rep.mtl_spearman, rep.stl_spearman) {
        out.insert(key("spearman_gap"), a - b);
    }
    if let Some(s) = rep.target_sin {
        out.insert(key("target_sin"), s);
    }
    Ok(())
}

fn sample_sweep(config: &ExperimentConfig, m: usize, seed: u64) -> Result<Metrics> {
    let family = config.generator.family.family(seed)?;
    let target = family.target()?;
    let mut out = Metrics::new();
    for (name, which) in [("same", SourceCovariance::Same), ("different", SourceCovariance::Different)] {
        let source = family.source(which, m)?;
        gap_metrics(&mut out, name, config, &source, &target, seed)?;
    }
    Ok(out)
}

fn cosine_sweep(config: &ExperimentConfig, cosine: f64, seed: u64) -> Result<Metrics> {
    let g = &config.generator;
    let theta1 = unit_vector(g.dim, rng::derive(seed, 200));
    let (_, theta2) = make_model_pair(&theta1, alpha_for_cosine(cosine)?, rng::derive(seed, 201))?;
    let theta2 = scaled(&theta2, 1.0 / norm(&theta2));
    let target = gen_linear_task(&theta1, g.rows, g.noise, None, rng::derive(seed, 202))?;
    let target = with_clean_validation(&split(&target, g.train_rows, rng::derive(seed, 203))?)?;
    let source = gen_linear_task(&theta2, g.source_rows, g.noise, None, rng::derive(seed, 204))?;
    let mut out = Metrics::new();
    gap_metrics(&mut out, "", config, &source, &target, seed)?;
    out.insert("cosine".into(), cos_sin(&theta1, &theta2)?.0);
    Ok(out)
}

fn capacity_sweep(config: &ExperimentConfig, r: usize, seed: u64) -> Result<Metrics> {
    let g = &config.generator;
    let k = g.tasks;
    let tasks: Vec<TaskDataset> = (0..k)
        .map(|i| gen_linear_task(&unit_vector(g.dim, rng::derive(seed, 300 + i as u64)), g.rows, 0.0, None, rng::derive(seed, 400 + i as u64)))
        .collect::<Result<_>>()?;
    let w = WeightVector::uniform(k);
    let stats = task_stats(&tasks);
    let fit = solve_linear_mtl(&stats, &w, r, seed)?;
    let mut out = Metrics::new();
    out.insert("train_error".into(), fit.objective.max(0.0));

    let identity: Vec<TaskDataset> = (0..k)
        .map(|i| TaskDataset::new(DenseMatrix::identity(k), (0..k).map(|j| f64::from(u8::from(i == j))).collect(), TaskKind::Regression))
        .collect::<Result<_>>()?;
    let id_fit = solve_equal_covariance(&identity, &w, r.min(k))?;
    out.insert("identity_error".into(), id_fit.objective);
    out.insert("identity_expected".into(), k.saturating_sub(r) as f64);

    let diag = orthogonalization_diagnostic(&tasks, r, k, seed)?;
    out.insert("ortho_opt".into(), diag.opt);
    out.insert("ortho_bound".into(), diag.bound);
    out.insert("ortho_captured".into(), diag.lambdas.iter().sum());
    out.insert("optimum_captured".into(), diag.optimum_captured);
    Ok(out)
}

fn validation_metric(model: &MtlModel, target: &TaskDataset, task: usize) -> Result<f64> {
    let val = target.validation_data()?;
    Ok(metric(target.kind, &forward(model, &val.x, task)?, &val.y))
}

fn alignment_correction(config: &ExperimentConfig, m: usize, seed: u64) -> Result<Metrics> {
    let family = config.generator.family.family(seed)?;
    let target = family.target()?;
    let source = family.source(SourceCovariance::Different, m)?;
    let tasks = [source, target];
    let stats = task_stats(&tasks);
    let weights = config.train.weights_for(2)?;
    let fit = solve_linear_mtl(&stats, &weights, config.capacity, seed)?;
    let theta = stl_solve(&tasks[1])?;
    let val = tasks[1].validation_data()?;
    let stl = metric(TaskKind::Regression, &val.x.matvec(&theta), &val.y);
    let unaligned = validation_metric(&fit.model, &tasks[1], 1)?;

    let cfg = TrainConfig { seed, ..config.train.clone() };
    let report = train_aligned(fit.model.clone().with_identity_alignments(), &tasks, &cfg)?;
    let aligned = validation_metric(&report.model, &tasks[1], 1)?;
    let al = report.model.alignments.as_ref().expect("aligned model keeps alignments");

    let mut out = Metrics::new();
    out.insert("stl".into(), stl);
    out.insert("unaligned_gap".into(), unaligned - stl);
    out.insert("aligned_gap".into(), aligned - stl);
    out.insert("aligned_minus_unaligned".into(), aligned - unaligned);
    out.insert("score_before".into(), score_from_grams(&stats[0].gram, &stats[1].gram)?);
    let rotated: Vec<DenseMatrix> = stats.iter().zip(al).map(|(s, r)| r.tr_mul(&s.gram.mul(r)).symmetrize()).collect();
    out.insert("score_after".into(), score_from_grams(&rotated[0], &rotated[1])?);
    if let Some(c) = report.alignment_conditions {
        out.insert("alignment_condition_max".into(), c.iter().copied().fold(0.0, f64::max));
    }
    Ok(out)
}

/// Same-design binary pair: task 0 has clean labels `1[xᵀθ ≥ 0]`, task 1
/// uses a direction at cosine `g.cosine` and flips its labels on `fraction`
/// of the rows with probability `g.flip_probability`. Both share one split.
/// Returns the tasks and θ.
pub fn flipped_pair(g: &GeneratorSpec, fraction: f64, seed: u64) -> Result<([TaskDataset; 2], Vec<f64>)> {
    let d = g.dim;
    let theta = unit_vector(d, rng::derive(seed, 500));
    let (_, theta2) = make_model_pair(&theta, alpha_for_cosine(g.cosine)?, rng::derive(seed, 501))?;
    let x = gaussian_design(g.rows, d, None, &mut rng::stream(seed, 502))?;
    let labels = |t: &[f64]| x.matvec(t).iter().map(|v| f64::from(u8::from(*v >= 0.0))).collect::<Vec<f64>>();
    let (y1, y2) = (labels(&theta), labels(&theta2));
    let mut clean = TaskDataset::new(x.clone(), y1, TaskKind::Classification)?;
    clean.theta_true = Some(crate::task_gen::GroundTruth::Vector(theta.clone()));
    let clean = split(&clean, g.train_rows, rng::derive(seed, 503))?;
    let mut other = TaskDataset::new(x, y2, TaskKind::Classification)?;
    other.split = clean.split.clone();
    let noisy = flip_labels(&other, fraction, g.flip_probability, rng::derive(seed, 504))?;
    Ok(([clean, noisy], theta))
}

fn noise_reweighting(config: &ExperimentConfig, fraction: f64, seed: u64) -> Result<Metrics> {
    let d = config.generator.dim;
    let (tasks, theta) = flipped_pair(&config.generator, fraction, seed)?;
    let train: Vec<_> = tasks.iter().map(TaskDataset::train_data).collect();
    let ys: Vec<Vec<f64>> = train.iter().map(|t| t.y.clone()).collect();
    let r = config.capacity;
    let svd = svd_reweight(&train[0].x, &ys, r, ThetaForm::Correlation)?;
    let uniform = WeightVector::uniform(2);
    let init = MtlModel::random(d, r, 2, Activation::Linear, rng::derive(seed, 505));
    let unc = uncertainty_weights(&tasks, &init, &TrainConfig { seed, ..config.train.clone() }, true)?.weights;

    let mut out = Metrics::new();
    for (name, w) in [("svd", &svd), ("uniform", &uniform), ("uncertainty", &unc)] {
        let fit = solve_same_covariates(&train[0].x, &ys, w, r)?;
        out.insert(format!("{name}_acc"), validation_metric(&fit.model, &tasks[0], 0)?);
        if r == 1 {
            out.insert(format!("{name}_cos"), cos_sin(&fit.model.shared.column(0), &theta)?.0.abs());
        }
        out.insert(format!("{name}_w1"), w.as_slice()[0]);
        out.insert(format!("{name}_w2"), w.as_slice()[1]);
    }
    out.insert("svd_minus_uniform".into(), out["svd_acc"] - out["uniform_acc"]);
    Ok(out)
}

/// Slack added to the angle bound.
pub const LEMMA_SLACK: f64 = 0.05;

fn theory_verify(config: &ExperimentConfig, sine: f64, seed: u64) -> Result<Metrics> {
    let g = &config.generator;
    let d = g.dim;
    let theta1 = unit_vector(d, rng::derive(seed, 600));
    let perp = {
        let u = unit_vector(d, rng::derive(seed, 601));
        let p = sub(&u, &scaled(&theta1, dot(&u, &theta1)));
        scaled(&p, 1.0 / norm(&p))
    };
    let cosine = (1.0 - sine * sine).sqrt();
    let theta2: Vec<f64> = theta1.iter().zip(&perp).map(|(a, b)| cosine * a + sine * b).collect();
    let source = gen_linear_task(&theta1, g.source_rows, 0.0, None, rng::derive(seed, 602))?;
    let x2 = gen_conditioned_design(g.rows, d, g.kappa, rng::derive(seed, 603))?;
    let target = label_linear(x2, &theta2, g.noise, rng::derive(seed, 604))?;
    let tasks = [source, target];
    let fit = solve_linear_mtl(&task_stats(&tasks), &WeightVector::uniform(2), 1, seed)?;
    let rep = theorem1_check(&tasks[0], &tasks[1], &fit.model)?;

    let mut out = Metrics::new();
    out.insert("c".into(), rep.c);
    out.insert("kappa".into(), rep.kappa);
    out.insert("sin_theta".into(), rep.sin_theta);
    out.insert("lhs".into(), rep.lhs);
    out.insert("flagged".into(), f64::from(u8::from(!rep.assumption_holds)));
    if let Some(ok) = rep.satisfied {
        out.insert("rhs".into(), rep.rhs);
        out.insert("satisfied".into(), f64::from(u8::from(ok)));
        let lemma_sin = angle_to_target(&fit.model.shared, &theta2)?;
        let bound = rep.sin_theta + rep.c / rep.kappa + LEMMA_SLACK;
        out.insert("lemma_sin".into(), lemma_sin);
        out.insert("lemma_bound".into(), bound);
        out.insert("lemma_ok".into(), f64::from(u8::from(lemma_sin <= bound)));
    }

    let mut violations = 0usize;
    let mut margin = f64::INFINITY;
    let mut grng = rng::stream(seed, 605);
    for t in 0..g.contraction_triples {
        let cols = 2 + t % (d - 1).max(1);
        let x = gaussian_design(2 * cols + 1, cols, None, &mut grng)?;
        let a = unit_vector(cols, rng::derive(seed, 10_000 + 2 * t as u64));
        let b = unit_vector(cols, rng::derive(seed, 10_001 + 2 * t as u64));
        let c = sin_contraction_check(&x, &a, &b)?;
        if !c.degenerate {
            violations += usize::from(!c.holds);
            margin = margin.min(c.lhs - c.rhs);
        }
    }
    out.insert("contraction_violations".into(), violations as f64);
    if margin.is_finite() {
        out.insert("contraction_min_margin".into(), margin);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreStudy {
    pub before: f64,
    pub after: f64,
}

/// Covariance similarity before and after alignment training on the
/// different-covariance pair: B is a frozen random unit vector, heads start
/// at 1, and both tasks' heads and alignments train under `cfg`.
pub fn alignment_score_study(spec: &CovarianceFamilySpec, source_rows: usize, seed: u64, cfg: &TrainConfig) -> Result<ScoreStudy> {
    if source_rows == 0 {
        return arg("source_rows must be positive");
    }
    let family = spec.family(seed)?;
    let tasks = [family.target()?, family.source(SourceCovariance::Different, source_rows)?];
    let b = DenseMatrix::column_vector(&unit_vector(spec.dim, rng::derive(seed, 700)));
    let model = MtlModel::new(b, vec![vec![1.0], vec![1.0]], Activation::Linear)?.with_identity_alignments();
    let report = train_aligned(model, &tasks, &TrainConfig { freeze_shared: Some(true), ..cfg.clone() })?;
    let stats: Vec<TaskStats> = task_stats(&tasks);
    let al = report.model.alignments.as_ref().expect("aligned model keeps alignments");
    let rotated: Vec<DenseMatrix> = stats.iter().zip(al).map(|(s, r)| r.tr_mul(&s.gram.mul(r)).symmetrize()).collect();
    Ok(ScoreStudy {
        before: score_from_grams(&stats[0].gram, &stats[1].gram)?,
        after: score_from_grams(&rotated[0], &rotated[1])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            kind,
            generator: GeneratorSpec {
                dim: 6,
                tasks: 3,
                rows: 60,
                train_rows: 40,
                source_rows: 300,
                contraction_triples: 5,
                family: CovarianceFamilySpec { dim: 10, boosted_count: 2, target_rows: 200, target_train: 150, ..Default::default() },
                ..Default::default()
            },
            grid: None,
            seeds: vec![0],
            train: TrainConfig { learning_rate: 1e-5, epochs: 3, batch_size: 10_000, ..Default::default() },
            capacity: 1,
            weighting: WeightingScheme::Uniform,
            fitter: crate::analysis::Fitter::Global,
            workers: Some(1),
        }
    }

    #[test]
    fn every_kind_produces_finite_metrics() {
        let cases = [
            (ExperimentKind::SampleSweep, 50.0, "different_gap"),
            (ExperimentKind::CosineSweep, 0.5, "gap"),
            (ExperimentKind::CapacitySweep, 2.0, "train_error"),
            (ExperimentKind::AlignmentCorrection, 50.0, "aligned_gap"),
            (ExperimentKind::NoiseReweighting, 0.2, "svd_minus_uniform"),
            (ExperimentKind::TheoryVerify, 0.02, "lhs"),
        ];
        for (kind, grid, key) in cases {
            let m = run_cell(&tiny(kind), grid, 4).unwrap_or_else(|e| panic!("{kind:?}: {e}"));
            assert!(m[key].is_finite(), "{kind:?}");
            assert!(m.values().all(|v| v.is_finite()), "{kind:?}: {m:?}");
        }
    }

    #[test]
    fn cosine_sweep_hits_the_requested_cosine() {
        let m = run_cell(&tiny(ExperimentKind::CosineSweep), 0.3, 2).unwrap();
        assert!((m["cosine"] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn flipped_pair_shares_design_and_split() {
        let g = GeneratorSpec { dim: 5, rows: 400, train_rows: 300, ..Default::default() };
        let ([a, b], theta) = flipped_pair(&g, 0.5, 9).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.split, b.split);
        assert_eq!(a.theta_vector(), Some(theta.as_slice()));
        let flips = a.y.iter().zip(&b.y).filter(|(p, q)| p != q).count();
        assert!(flips > 0 && flips < 400);
        let clean = flipped_pair(&g, 0.0, 9).unwrap().0;
        assert_eq!(clean[0].y, a.y);
    }

    #[test]
    fn score_study_is_deterministic_and_bounded() {
        let spec = CovarianceFamilySpec { dim: 10, boosted_count: 2, target_rows: 200, target_train: 150, ..Default::default() };
        let cfg = TrainConfig { learning_rate: 1e-5, epochs: 20, batch_size: 1_000_000, ..Default::default() };
        let a = alignment_score_study(&spec, 100, 1, &cfg).unwrap();
        assert_eq!(a, alignment_score_study(&spec, 100, 1, &cfg).unwrap());
        assert!((0.0..=1.0).contains(&a.before) && (0.0..=1.0).contains(&a.after));
        assert!(alignment_score_study(&spec, 0, 1, &cfg).is_err());
    }
}
