use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mtl_core::analysis::{covariance_similarity_score, metric, score_from_grams};
use mtl_core::closed_form::{solve_linear_mtl, stl_solve, task_stats};
use mtl_core::harness::{self, ExperimentConfig, ExperimentKind, ExperimentResult, GeneratorSpec};
use mtl_core::matrix_core::{norm, scaled};
use mtl_core::mtl_model::{forward, Activation, MtlModel, WeightVector};
use mtl_core::task_gen::{
    self, alpha_for_cosine, gen_linear_task, make_model_pair, split, CovarianceFamilySpec, SourceCovariance, TaskDataset,
};
use mtl_core::trainer::{train, train_aligned, TrainConfig};
use mtl_core::weighting::{svd_reweight, uncertainty_weights, ThetaForm};
use mtl_core::{rng, Error, Result};

const EXIT_ARGUMENT: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(name = "mtl-lab", version, about = "Multi-task learning numerical laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic task datasets (CSV plus JSON sidecar).
    Gen(GenArgs),
    /// Fit one task alone by least squares.
    Stl {
        task: PathBuf,
    },
    /// Fit the shared model on several tasks.
    Mtl(MtlArgs),
    /// Covariance alignment starting from the unaligned optimum.
    Align(AlignArgs),
    /// Task weights from svd, uncertainty or uniform weighting.
    Reweight(ReweightArgs),
    /// Covariance similarity score between two datasets.
    Score {
        first: PathBuf,
        second: PathBuf,
    },
    /// Run an experiment config and write the result directory.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run the theory checks; exits 3 on any violation.
    Verify {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render charts and tables from a saved result directory.
    Render {
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// `tasks` isotropic linear tasks; each direction after the first has cosine `cosine` to the first.
    Linear,
    /// Target plus same-covariance and different-covariance sources.
    Family,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "linear")]
    preset: Preset,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    rows: usize,
    /// Training rows per task; the rest form the validation split.
    #[arg(long)]
    train_rows: Option<usize>,
    #[arg(long, default_value_t = 2)]
    tasks: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0.96)]
    cosine: f64,
    /// Source rows for the family preset.
    #[arg(long, default_value_t = 1000)]
    source_rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TrainConfig JSON file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Argument(format!("{}: {e}", p.display())))?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct MtlArgs {
    #[arg(required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    capacity: usize,
    /// Comma-separated task weights.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Train by SGD instead of solving the linear objective exactly.
    #[arg(long)]
    gradient: bool,
    #[arg(long, value_enum, default_value = "linear")]
    activation: ActivationArg,
    #[command(flatten)]
    train: TrainArgs,
    /// Write the fitted model as JSON.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Linear,
    Relu,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(required = true, num_args = 2..)]
    tasks: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    capacity: usize,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Svd,
    Uniform,
    Uncertainty,
}

#[derive(Args)]
struct ReweightArgs {
    #[arg(required = true, num_args = 2..)]
    tasks: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "svd")]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 1)]
    capacity: usize,
    #[command(flatten)]
    train: TrainArgs,
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<TaskDataset>> {
    paths.iter().map(|p| task_gen::load(p)).collect()
}

fn print(v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Training MSE and, when split, the validation metric of task `i`.
fn task_report(model: &MtlModel, task: &TaskDataset, i: usize) -> Result<Value> {
    let tr = task.train_data();
    let train = -metric(mtl_core::task_gen::TaskKind::Regression, &forward(model, &tr.x, i)?, &tr.y);
    let validation = match task.split {
        Some(_) => {
            let v = task.validation_data()?;
            Some(metric(task.kind, &forward(model, &v.x, i)?, &v.y))
        }
        None => None,
    };
    Ok(json!({ "train_mse": train, "validation_metric": validation }))
}

fn gen(a: &GenArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    match a.preset {
        Preset::Linear => {
            let v = rng::gaussian_vec(&mut rng::stream(a.seed, 1), a.dim);
            let theta = scaled(&v, 1.0 / norm(&v));
            let alpha = alpha_for_cosine(a.cosine)?;
            for i in 0..a.tasks {
                let t = if i == 0 { theta.clone() } else { make_model_pair(&theta, alpha, rng::derive(a.seed, 10 + i as u64))?.1 };
                let mut task = gen_linear_task(&t, a.rows, a.noise, None, rng::derive(a.seed, 100 + i as u64))?;
                if let Some(n) = a.train_rows {
                    task = split(&task, n, rng::derive(a.seed, 200 + i as u64))?;
                }
                let path = a.out.join(format!("task{i}.csv"));
                task_gen::save(&task, &path)?;
                written.push(path);
            }
        }
        Preset::Family => {
            let spec = CovarianceFamilySpec {
                dim: a.dim,
                cosine: a.cosine,
                target_rows: a.rows,
                target_train: a.train_rows.unwrap_or(a.rows * 9 / 10),
                target_noise: a.noise,
                boosted_count: (a.dim / 10).max(1),
                ..Default::default()
            };
            let family = spec.family(a.seed)?;
            for (name, task) in [
                ("target", family.target()?),
                ("source_same", family.source(SourceCovariance::Same, a.source_rows)?),
                ("source_different", family.source(SourceCovariance::Different, a.source_rows)?),
            ] {
                let path = a.out.join(format!("{name}.csv"));
                task_gen::save(&task, &path)?;
                written.push(path);
            }
        }
    }
    print(&json!({ "written": written }))
}

fn stl(path: &Path) -> Result<()> {
    let task = task_gen::load(path)?;
    let theta = stl_solve(&task)?;
    let model = MtlModel::new(mtl_core::DenseMatrix::column_vector(&theta), vec![vec![1.0]], Activation::Linear)?;
    print(&json!({ "theta": theta, "report": task_report(&model, &task, 0)? }))
}

fn mtl(a: &MtlArgs) -> Result<()> {
    let tasks = load_all(&a.tasks)?;
    let weights = match &a.weights {
        Some(w) => WeightVector::new(w.clone())?,
        None => WeightVector::uniform(tasks.len()),
    };
    let (model, method, objective) = if a.gradient {
        let cfg = TrainConfig { weights: Some(weights), ..a.train.resolve()? };
        let act = match a.activation {
            ActivationArg::Linear => Activation::Linear,
            ActivationArg::Relu => Activation::Relu,
        };
        let init = MtlModel::random(tasks[0].dim(), a.capacity, tasks.len(), act, cfg.seed);
        let rep = train(init, &tasks, &cfg)?;
        let obj = rep.trace.last();
        (rep.model, "sgd", obj)
    } else {
        let fit = solve_linear_mtl(&task_stats(&tasks), &weights, a.capacity, a.train.seed.unwrap_or(0))?;
        (fit.model, fit.method, Some(fit.objective))
    };
    let reports = (0..tasks.len()).map(|i| task_report(&model, &tasks[i], i)).collect::<Result<Vec<_>>>()?;
    if let Some(p) = &a.save {
        std::fs::write(p, model.to_json()?)?;
    }
    print(&json!({ "method": method, "objective": objective, "tasks": reports }))
}

fn align(a: &AlignArgs) -> Result<()> {
    let tasks = load_all(&a.tasks)?;
    let cfg = a.train.resolve()?;
    let stats = task_stats(&tasks);
    let weights = cfg.weights_for(tasks.len())?;
    let fit = solve_linear_mtl(&stats, &weights, a.capacity, cfg.seed)?;
    let before = (0..tasks.len()).map(|i| task_report(&fit.model, &tasks[i], i)).collect::<Result<Vec<_>>>()?;
    let rep = train_aligned(fit.model.with_identity_alignments(), &tasks, &cfg)?;
    let after = (0..tasks.len()).map(|i| task_report(&rep.model, &tasks[i], i)).collect::<Result<Vec<_>>>()?;
    let al = rep.model.alignments.as_ref().expect("aligned model keeps alignments");
    let rotated: Vec<_> = stats.iter().zip(al).map(|(s, r)| r.tr_mul(&s.gram.mul(r)).symmetrize()).collect();
    let mut scores = Vec::new();
    for i in 0..tasks.len() {
        for j in i + 1..tasks.len() {
            scores.push(json!({
                "pair": [i, j],
                "before": score_from_grams(&stats[i].gram, &stats[j].gram)?,
                "after": score_from_grams(&rotated[i], &rotated[j])?,
            }));
        }
    }
    print(&json!({
        "unaligned": before,
        "aligned": after,
        "scores": scores,
        "alignment_conditions": rep.alignment_conditions,
    }))
}

fn reweight(a: &ReweightArgs) -> Result<()> {
    let tasks = load_all(&a.tasks)?;
    let weights = match a.scheme {
        SchemeArg::Uniform => WeightVector::uniform(tasks.len()),
        SchemeArg::Svd => {
            let train: Vec<_> = tasks.iter().map(TaskDataset::train_data).collect();
            let x = &train[0].x;
            if train.iter().any(|t| t.x.shape() != x.shape() || t.x.max_abs_diff(x) != 0.0) {
                return Err(Error::Argument("svd weighting needs tasks with identical training covariates".into()));
            }
            let ys: Vec<Vec<f64>> = train.iter().map(|t| t.y.clone()).collect();
            svd_reweight(x, &ys, a.capacity, ThetaForm::Correlation)?
        }
        SchemeArg::Uncertainty => {
            let cfg = a.train.resolve()?;
            let init = MtlModel::random(tasks[0].dim(), a.capacity, tasks.len(), Activation::Linear, cfg.seed);
            uncertainty_weights(&tasks, &init, &cfg, true)?.weights
        }
    };
    let fit = solve_linear_mtl(&task_stats(&tasks), &weights, a.capacity, a.train.seed.unwrap_or(0))?;
    let reports = (0..tasks.len()).map(|i| task_report(&fit.model, &tasks[i], i)).collect::<Result<Vec<_>>>()?;
    print(&json!({ "weights": weights.as_slice(), "method": fit.method, "tasks": reports }))
}

fn score(a: &Path, b: &Path) -> Result<()> {
    let (x, y) = (task_gen::load(a)?, task_gen::load(b)?);
    print(&json!({ "score": covariance_similarity_score(&x.x, &y.x)? }))
}

fn sweep(config: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::Argument(format!("{}: {e}", config.display())))?;
    let cfg = ExperimentConfig::from_json(&text)?;
    let result = harness::run(&cfg)?;
    result.save(out)?;
    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    print(&json!({ "out": out, "cells": result.cells.len(), "failed_cells": failed }))
}

/// Number of property violations in a theory_verify result.
fn violations(result: &ExperimentResult) -> usize {
    result
        .cells
        .iter()
        .map(|c| {
            let m = &c.metrics;
            usize::from(c.error.is_some())
                + usize::from(m.get("satisfied") == Some(&0.0))
                + usize::from(m.get("lemma_ok") == Some(&0.0))
                + m.get("contraction_violations").copied().unwrap_or(0.0) as usize
        })
        .sum()
}

fn verify(seeds: u64, out: Option<&Path>) -> Result<usize> {
    let cfg = ExperimentConfig {
        kind: ExperimentKind::TheoryVerify,
        generator: GeneratorSpec::default(),
        grid: None,
        seeds: (0..seeds).collect(),
        train: TrainConfig::default(),
        capacity: 1,
        weighting: Default::default(),
        fitter: Default::default(),
        workers: None,
    };
    let result = harness::run(&cfg)?;
    if let Some(dir) = out {
        result.save(dir)?;
    }
    let n = violations(&result);
    let flagged = result.cells.iter().filter(|c| c.metrics.get("flagged") == Some(&1.0)).count();
    print(&json!({ "cells": result.cells.len(), "flagged": flagged, "violations": n }))?;
    Ok(n)
}

fn render(dir: &Path) -> Result<()> {
    let result = ExperimentResult::load(dir)?;
    harness::render(&result, dir)?;
    print(&json!({ "rendered": dir }))
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Gen(a) => gen(&a)?,
        Command::Stl { task } => stl(&task)?,
        Command::Mtl(a) => mtl(&a)?,
        Command::Align(a) => align(&a)?,
        Command::Reweight(a) => reweight(&a)?,
        Command::Score { first, second } => score(&first, &second)?,
        Command::Sweep { config, out } => sweep(&config, &out)?,
        Command::Verify { seeds, out } => {
            if verify(seeds, out.as_deref())? > 0 {
                return Ok(EXIT_VIOLATION);
            }
        }
        Command::Render { dir } => render(&dir)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ARGUMENT } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_ARGUMENT })
        }
    }
}
