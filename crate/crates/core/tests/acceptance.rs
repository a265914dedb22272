//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mtl_core::analysis::{covariance_similarity_score, sin_contraction_check};
use mtl_core::closed_form::{capacity_construction, solve_equal_covariance, solve_same_covariates};
use mtl_core::harness::{alignment_score_study, flipped_pair, run, ExperimentConfig, ExperimentResult};
use mtl_core::matrix_core::{cos_sin, norm, pinv, random_orthonormal, scaled, sub, svd};
use mtl_core::mtl_model::{gradients_on, objective, objective_on, Activation, MtlModel, WeightVector, Wrt};
use mtl_core::rng;
use mtl_core::task_gen::{gen_linear_task, CovarianceFamilySpec, TaskData, TaskDataset, TaskKind};
use mtl_core::trainer::{train, Batching, TrainConfig};
use mtl_core::DenseMatrix;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn unit(d: usize, seed: u64) -> Vec<f64> {
    let v = rng::gaussian_vec(&mut rng::from_seed(seed), d);
    scaled(&v, 1.0 / norm(&v))
}

fn gaussian(m: usize, n: usize, seed: u64) -> DenseMatrix {
    DenseMatrix::new(m, n, rng::gaussian_vec(&mut rng::from_seed(seed), m * n)).unwrap()
}

fn sweep(json: &str) -> ExperimentResult {
    run(&ExperimentConfig::from_json(json).unwrap()).unwrap()
}

fn mean(res: &ExperimentResult, grid: f64, name: &str) -> f64 {
    res.aggregate(grid, name).unwrap_or_else(|| panic!("no {name} at {grid}")).mean
}

fn no_failed_cells(res: &ExperimentResult) -> std::result::Result<(), String> {
    match res.cells.iter().find(|c| c.error.is_some()) {
        Some(c) => Err(format!("cell ({}, {}) failed: {}", c.grid, c.seed, c.error.as_deref().unwrap_or(""))),
        None => Ok(()),
    }
}

fn no_transfer() -> Outcome {
    let thetas: Vec<Vec<f64>> = (0..4).map(|i| unit(20, 10 + i)).collect();
    let tasks: Vec<TaskDataset> =
        thetas.iter().enumerate().map(|(i, t)| gen_linear_task(t, 100, 0.0, None, 20 + i as u64).unwrap()).collect();
    let model = capacity_construction(&thetas, 4).unwrap();
    let rel = (0..4).map(|i| norm(&sub(&model.task_vector(i), &thetas[i])) / norm(&thetas[i])).fold(0.0, f64::max);
    let err = objective(&model, &tasks, &WeightVector::uniform(4)).unwrap();
    check(rel <= 1e-8 && err <= 1e-10, format!("max relative error {rel:.2e}, training error {err:.2e}"))
}

fn identity_exact_value() -> Outcome {
    let k = 6;
    let tasks: Vec<TaskDataset> = (0..k)
        .map(|i| {
            let y = (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
            TaskDataset::new(DenseMatrix::identity(k), y, TaskKind::Regression).unwrap()
        })
        .collect();
    let mut worst: f64 = 0.0;
    for r in 1..=k {
        let fit = solve_equal_covariance(&tasks, &WeightVector::uniform(k), r).unwrap();
        worst = worst.max((fit.objective - (k - r) as f64).abs());
    }
    check(worst <= 1e-6, format!("max |objective - (k - r)| = {worst:.2e}"))
}

fn sample_sweep_signs() -> Outcome {
    let res = sweep(r#"{"kind": "sample_sweep", "seeds": [0, 1, 2, 3, 4]}"#);
    no_failed_cells(&res)?;
    let grid = res.config.effective_grid();
    let same_min = grid.iter().map(|g| mean(&res, *g, "same_gap")).fold(f64::INFINITY, f64::min);
    let first = mean(&res, 50.0, "different_gap");
    let last = mean(&res, 9000.0, "different_gap");
    check(
        grid.len() == 8 && same_min >= 0.0 && first < 0.0 && last >= first,
        format!("min same-cov gap {same_min:.4}; different-cov gap {first:.4} at 50, {last:.4} at 9000"),
    )
}

fn theorem1_bound() -> Outcome {
    let seeds: Vec<u64> = (0..20).collect();
    let res = sweep(&format!(r#"{{"kind": "theory_verify", "grid": [0, 0.02, 0.05], "seeds": {seeds:?}}}"#));
    no_failed_cells(&res)?;
    let mut checked = 0;
    let mut violations = 0;
    let mut c_max: f64 = 0.0;
    for cell in &res.cells {
        if cell.metrics["flagged"] == 0.0 {
            checked += 1;
            c_max = c_max.max(cell.metrics["c"]);
            violations += usize::from(cell.metrics["satisfied"] != 1.0);
        }
    }
    check(
        checked > 0 && violations == 0 && c_max <= 1.0 / 3.0,
        format!("{violations} violations over {checked} non-flagged instances, max c {c_max:.3}"),
    )
}

fn sine_contraction() -> Outcome {
    let mut violations = 0;
    let mut degenerate = 0;
    for t in 0..1000u64 {
        let d = 2 + (t % 7) as usize;
        let m = d + (t % 5) as usize;
        let x = gaussian(m, d, rng::derive(5, t));
        let a = unit(d, rng::derive(6, t));
        let b = unit(d, rng::derive(7, t));
        let rep = sin_contraction_check(&x, &a, &b).map_err(|e| format!("triple {t}: {e}"))?;
        violations += usize::from(!rep.holds);
        degenerate += usize::from(rep.degenerate);
    }
    check(violations == 0, format!("{violations} violations over 1000 triples ({degenerate} degenerate)"))
}

fn restarts_reach_global() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for inst in 0..5u64 {
        let (m, d, k, r) = (40, 6, 3, 2);
        let x = gaussian(m, d, rng::derive(inst, 1));
        let tasks: Vec<TaskDataset> = (0..k)
            .map(|i| {
                let y = rng::gaussian_vec(&mut rng::stream(inst, 10 + i as u64), m);
                TaskDataset::new(x.clone(), y, TaskKind::Regression).unwrap()
            })
            .collect();
        let w = WeightVector::uniform(k);
        let global = solve_equal_covariance(&tasks, &w, r).unwrap().objective;
        let cfg = TrainConfig { learning_rate: 0.02, epochs: 50_000, batch_size: m, batching: Batching::Joint, ..Default::default() };
        for j in 0..20 {
            let init = MtlModel::random(d, r, k, Activation::Linear, rng::derive(inst, 100 + j));
            let rep = train(init, &tasks, &cfg).map_err(|e| format!("instance {inst} restart {j}: {e}"))?;
            let obj = objective(&rep.model, &tasks, &w).unwrap();
            worst = worst.max((obj - global).abs() / global);
            runs += 1;
        }
    }
    check(worst <= 1e-5, format!("max relative excess {worst:.2e} over {runs} runs"))
}

fn alignment_correction() -> Outcome {
    let res = sweep(
        r#"{"kind": "alignment_correction", "grid": [50, 100, 200, 9000], "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
            "train": {"learning_rate": 3e-5, "epochs": 300, "batch_size": 1000000}}"#,
    );
    no_failed_cells(&res)?;
    let mut detail = Vec::new();
    let mut ok = true;
    for m in [50.0, 100.0, 200.0] {
        let (a, u) = (mean(&res, m, "aligned_gap"), mean(&res, m, "unaligned_gap"));
        ok &= a >= u;
        detail.push(format!("m={m}: {:+.4}", a - u));
    }
    let a = res.aggregate(9000.0, "aligned_gap").unwrap();
    let u = res.aggregate(9000.0, "unaligned_gap").unwrap();
    let band = 2.0 * (a.se * a.se + u.se * u.se).sqrt();
    ok &= (a.mean - u.mean).abs() <= band;
    detail.push(format!("m=9000: {:+.4} (2 SE = {band:.4})", a.mean - u.mean));
    check(ok, format!("aligned - unaligned gap: {}", detail.join(", ")))
}

fn svd_reweighting() -> Outcome {
    let res = sweep(
        r#"{"kind": "noise_reweighting", "grid": [0.2], "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
            "generator": {"dim": 100, "rows": 10000, "train_rows": 9000, "cosine": 0.96, "flip_probability": 0.5},
            "train": {"learning_rate": 1e-3, "epochs": 5, "batch_size": 50}}"#,
    );
    no_failed_cells(&res)?;
    let svd = mean(&res, 0.2, "svd_acc");
    let uniform = mean(&res, 0.2, "uniform_acc");
    let unc = mean(&res, 0.2, "uncertainty_acc");

    let alphas = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
    let mut drops = 0;
    for seed in 0..10 {
        let (tasks, theta) = flipped_pair(&res.config.generator, 0.2, seed).unwrap();
        let train: Vec<TaskData> = tasks.iter().map(TaskDataset::train_data).collect();
        let ys: Vec<Vec<f64>> = train.iter().map(|t| t.y.clone()).collect();
        let mut prev = f64::NEG_INFINITY;
        for a in alphas {
            let w = WeightVector::new(vec![a, 1.0]).unwrap();
            let fit = solve_same_covariates(&train[0].x, &ys, &w, 1).unwrap();
            let c = cos_sin(&fit.model.shared.column(0), &theta).unwrap().0.abs();
            drops += usize::from(c < prev - 1e-12);
            prev = c;
        }
    }
    check(
        svd >= uniform && drops == 0,
        format!(
            "accuracy svd {svd:.4}, uniform {uniform:.4}, uncertainty {unc:.4}; {drops} decreases of cos(B, theta) along the weight grid"
        ),
    )
}

fn similarity_score() -> Outcome {
    let spec = CovarianceFamilySpec { theta_norm: 10.0, target_noise: 0.0, ..Default::default() };
    let cfg = TrainConfig { learning_rate: 5e-6, epochs: 2000, batch_size: 1_000_000, ..Default::default() };
    let mut improved = 0;
    let mut in_range = true;
    for seed in 0..10 {
        let s = alignment_score_study(&spec, 500, seed, &cfg).unwrap();
        improved += usize::from(s.after >= s.before);
        in_range &= (0.0..=1.0).contains(&s.before) && (0.0..=1.0).contains(&s.after);
    }
    let mut rot: f64 = 0.0;
    for seed in 0..10 {
        let x1 = gaussian(60, 12, rng::derive(seed, 1)).mul(&DenseMatrix::from_diag(&(1..=12).map(f64::from).collect::<Vec<_>>()));
        let x2 = gaussian(80, 12, rng::derive(seed, 2));
        let p = random_orthonormal(60, rng::derive(seed, 3));
        let s = covariance_similarity_score(&x1, &x2).unwrap();
        let s_rot = covariance_similarity_score(&p.mul(&x1), &x2).unwrap();
        in_range &= (0.0..=1.0).contains(&s);
        rot = rot.max((s - s_rot).abs());
    }
    check(
        improved >= 9 && in_range && rot <= 1e-10,
        format!("score rose in {improved}/10 pairs, all in [0, 1]: {in_range}, max rotation change {rot:.2e}"),
    )
}

fn params(m: &MtlModel) -> Vec<f64> {
    let mut v = m.shared.as_slice().to_vec();
    m.heads.iter().for_each(|h| v.extend(h));
    if let Some(al) = &m.alignments {
        al.iter().for_each(|r| v.extend(r.as_slice()));
    }
    v
}

fn with_params(m: &MtlModel, v: &[f64]) -> MtlModel {
    let mut out = m.clone();
    let (d, r) = m.shared.shape();
    out.shared = DenseMatrix::new(d, r, v[..d * r].to_vec()).unwrap();
    let mut at = d * r;
    for h in out.heads.iter_mut() {
        h.copy_from_slice(&v[at..at + r]);
        at += r;
    }
    if let Some(al) = out.alignments.as_mut() {
        for a in al.iter_mut() {
            *a = DenseMatrix::new(d, d, v[at..at + d * d].to_vec()).unwrap();
            at += d * d;
        }
    }
    out
}

fn numerics() -> Outcome {
    let mut grad_err: f64 = 0.0;
    for act in [Activation::Linear, Activation::Relu] {
        for p in 0..100u64 {
            let (m, d, r, k) = (9, 4, 2, 2usize);
            let data: Vec<TaskData> = (0..k)
                .map(|i| TaskData::new(gaussian(m, d, rng::derive(p, 10 + i as u64)), rng::gaussian_vec(&mut rng::stream(p, 20 + i as u64), m)).unwrap())
                .collect();
            let mut model = MtlModel::random(d, r, k, act, rng::derive(p, 30)).with_identity_alignments();
            for (i, a) in model.alignments.as_mut().unwrap().iter_mut().enumerate() {
                a.add_scaled(0.3, &gaussian(d, d, rng::derive(p, 40 + i as u64)));
            }
            let w = WeightVector::new(vec![1.0, 0.6]).unwrap();
            let g = gradients_on(&model, &data, &w, Wrt::ALL).unwrap();
            let analytic = params(&MtlModel {
                shared: g.shared.unwrap(),
                heads: g.heads.unwrap(),
                alignments: g.alignments,
                activation: act,
            });
            let base = params(&model);
            let h = 1e-6;
            let fd: Vec<f64> = (0..base.len())
                .map(|j| {
                    let mut plus = base.clone();
                    plus[j] += h;
                    let mut minus = base.clone();
                    minus[j] -= h;
                    let f = |v: &[f64]| objective_on(&with_params(&model, v), &data, &w).unwrap();
                    (f(&plus) - f(&minus)) / (2.0 * h)
                })
                .collect();
            grad_err = grad_err.max(norm(&sub(&fd, &analytic)) / norm(&analytic).max(1e-300));
        }
    }

    let mut penrose: f64 = 0.0;
    for seed in 0..20u64 {
        let (m, n) = (3 + (seed % 5) as usize, 2 + (seed % 7) as usize);
        let mut a = gaussian(m, n, seed);
        if seed % 3 == 0 {
            a = gaussian(m, 1, seed + 100).mul(&gaussian(1, n, seed + 200));
        }
        let p = pinv(&a).unwrap();
        let ap = a.mul(&p);
        let pa = p.mul(&a);
        penrose = penrose
            .max(ap.mul(&a).max_abs_diff(&a))
            .max(pa.mul(&p).max_abs_diff(&p))
            .max(ap.max_abs_diff(&ap.transpose()))
            .max(pa.max_abs_diff(&pa.transpose()))
            .max(svd(&a).unwrap().reconstruct().max_abs_diff(&a));
    }

    let cfg = r#"{"kind": "capacity_sweep", "generator": {"dim": 6, "tasks": 3, "rows": 30}, "seeds": [1, 2], "workers": 2}"#;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        sweep(cfg).save(dir.path()).unwrap();
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let identical = names.len() >= 4
        && names.iter().all(|n| std::fs::read(dirs[0].path().join(n)).ok() == std::fs::read(dirs[1].path().join(n)).ok());
    check(
        grad_err <= 1e-5 && penrose <= 1e-9 && identical,
        format!(
            "max gradient relative error {grad_err:.2e}; max Penrose residual {penrose:.2e}; {} result files identical: {identical}",
            names.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 no-transfer construction", Duration::from_secs(1), no_transfer),
        ("2 identity-design exact value", Duration::from_secs(1), identity_exact_value),
        ("3 sample-sweep sign pattern", Duration::from_secs(600), sample_sweep_signs),
        ("4 transfer bound", Duration::from_secs(300), theorem1_bound),
        ("5 sine contraction", Duration::from_secs(10), sine_contraction),
        ("6 gradient restarts reach the global optimum", Duration::from_secs(120), restarts_reach_global),
        ("7 alignment correction", Duration::from_secs(600), alignment_correction),
        ("8 SVD reweighting under label noise", Duration::from_secs(300), svd_reweighting),
        ("9 similarity score", Duration::from_secs(300), similarity_score),
        ("10 numerics and determinism", Duration::from_secs(60), numerics),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!("criterion {name}: {} ({:.2?}) {detail}", if ok { "PASS" } else { "FAIL" }, took);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
