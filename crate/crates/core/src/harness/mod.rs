//! Config-driven experiment runner: grid × seed cells executed on a bounded
//! worker pool, merged in cell order, persisted and rendered.

mod experiments;
mod render;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::Fitter;
use crate::error::{arg, Error, Result};
use crate::task_gen::CovarianceFamilySpec;
use crate::trainer::TrainConfig;

pub use experiments::{alignment_score_study, flipped_pair, run_cell, ScoreStudy};
pub use render::{render, results_csv, svg_chart};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Grid: source rows. Target from the covariance family against a
    /// same-covariance and a different-covariance source.
    SampleSweep,
    /// Grid: `cos(θ₁, θ₂)`. Two isotropic linear tasks.
    CosineSweep,
    /// Grid: capacity r. k noiseless linear tasks with their own designs,
    /// plus the identity-design example.
    CapacitySweep,
    /// Grid: source rows. Unaligned optimum versus covariance alignment on
    /// the different-covariance pair.
    AlignmentCorrection,
    /// Grid: flipped-row fraction of the second task. Same-design binary
    /// pair under svd, uniform and uncertainty weights.
    NoiseReweighting,
    /// Grid: `sin(θ₁, θ₂)`. Transfer bound, angle bound and sine
    /// contraction reports.
    TheoryVerify,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SampleSweep => "sample_sweep",
            ExperimentKind::CosineSweep => "cosine_sweep",
            ExperimentKind::CapacitySweep => "capacity_sweep",
            ExperimentKind::AlignmentCorrection => "alignment_correction",
            ExperimentKind::NoiseReweighting => "noise_reweighting",
            ExperimentKind::TheoryVerify => "theory_verify",
        }
    }

    /// Metrics drawn in the rendered chart.
    pub fn plotted(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::SampleSweep => &["same_gap", "different_gap"],
            ExperimentKind::CosineSweep => &["gap"],
            ExperimentKind::CapacitySweep => &["train_error", "identity_error"],
            ExperimentKind::AlignmentCorrection => &["unaligned_gap", "aligned_gap"],
            ExperimentKind::NoiseReweighting => &["svd_acc", "uniform_acc", "uncertainty_acc"],
            ExperimentKind::TheoryVerify => &["lhs", "lemma_sin"],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingScheme {
    #[default]
    Uniform,
    Svd,
    Uncertainty,
}

/// Task generation parameters; each kind reads the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    /// sample_sweep, alignment_correction.
    pub family: CovarianceFamilySpec,
    pub dim: usize,
    /// capacity_sweep: number of tasks.
    pub tasks: usize,
    /// Target rows (cosine, theory), rows per task (capacity, noise).
    pub rows: usize,
    /// Target training rows (cosine, noise).
    pub train_rows: usize,
    /// Source rows (cosine, theory).
    pub source_rows: usize,
    /// Target label noise (cosine, theory) and source noise (cosine).
    pub noise: f64,
    /// theory_verify: condition number of the target design.
    pub kappa: f64,
    /// noise_reweighting: flip probability of a selected row.
    pub flip_probability: f64,
    /// noise_reweighting: `cos(θ₁, θ₂)`.
    pub cosine: f64,
    /// theory_verify: random triples per cell for the contraction check.
    pub contraction_triples: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            family: CovarianceFamilySpec::default(),
            dim: 20,
            tasks: 4,
            rows: 200,
            train_rows: 150,
            source_rows: 9000,
            noise: 0.5,
            kappa: 4.0,
            flip_probability: 0.5,
            cosine: 0.96,
            contraction_triples: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub generator: GeneratorSpec,
    /// `None` uses the kind's default grid.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "one")]
    pub capacity: usize,
    #[serde(default)]
    pub weighting: WeightingScheme,
    #[serde(default)]
    pub fitter: Fitter,
    /// Worker threads; `None` lets the pool decide.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn one() -> usize {
    1
}

pub const DEFAULT_SOURCE_ROWS: [f64; 8] = [50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0, 5000.0, 9000.0];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Argument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn effective_grid(&self) -> Vec<f64> {
        if let Some(g) = &self.grid {
            return g.clone();
        }
        match self.kind {
            ExperimentKind::SampleSweep | ExperimentKind::AlignmentCorrection => DEFAULT_SOURCE_ROWS.to_vec(),
            ExperimentKind::CosineSweep => (0..=10).map(|i| i as f64 / 10.0).collect(),
            ExperimentKind::CapacitySweep => (1..=2 * self.generator.tasks).map(|r| r as f64).collect(),
            ExperimentKind::NoiseReweighting => vec![0.2],
            ExperimentKind::TheoryVerify => vec![0.0, 0.02, 0.05],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.effective_grid();
        if grid.is_empty() {
            return arg("grid is empty");
        }
        if self.seeds.is_empty() {
            return arg("seeds are empty");
        }
        if grid.iter().any(|g| !g.is_finite()) {
            return arg("grid values must be finite");
        }
        if self.capacity == 0 {
            return arg("capacity must be at least 1");
        }
        if self.workers == Some(0) {
            return arg("workers must be at least 1");
        }
        self.train.validate()?;
        let g = &self.generator;
        let counts = |name: &str| -> Result<()> {
            if grid.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
                return arg(format!("{name} grid must hold positive integers"));
            }
            Ok(())
        };
        let unit_interval = |name: &str| -> Result<()> {
            if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return arg(format!("{name} grid must lie in [0, 1]"));
            }
            Ok(())
        };
        match self.kind {
            ExperimentKind::SampleSweep | ExperimentKind::AlignmentCorrection => {
                g.family.validate()?;
                counts("source row")?;
            }
            ExperimentKind::CosineSweep => {
                unit_interval("cosine")?;
                if g.dim < 2 || g.train_rows == 0 || g.train_rows >= g.rows || g.source_rows == 0 {
                    return arg("cosine_sweep needs dim >= 2, 0 < train_rows < rows and source_rows >= 1");
                }
            }
            ExperimentKind::CapacitySweep => {
                counts("capacity")?;
                if g.tasks == 0 || g.rows == 0 || g.dim == 0 {
                    return arg("capacity_sweep needs tasks, rows and dim >= 1");
                }
            }
            ExperimentKind::NoiseReweighting => {
                unit_interval("flip fraction")?;
                if g.train_rows == 0 || g.train_rows >= g.rows || self.capacity > 2 {
                    return arg("noise_reweighting needs 0 < train_rows < rows and capacity <= 2");
                }
            }
            ExperimentKind::TheoryVerify => {
                if grid.iter().any(|v| !(0.0..1.0).contains(v)) {
                    return arg("sine grid must lie in [0, 1)");
                }
                if !(g.kappa >= 1.0) || g.dim < 2 || g.rows < g.dim {
                    return arg("theory_verify needs kappa >= 1, dim >= 2 and rows >= dim");
                }
            }
        }
        if !(g.noise >= 0.0) || !(0.0..=1.0).contains(&g.flip_probability) || !(0.0..=1.0).contains(&g.cosine) {
            return arg("noise must be nonnegative; flip_probability and cosine must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One grid point × seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRecord {
    pub grid: f64,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Set when the cell failed; metrics are then empty.
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation over √n; 0 for a single value.
    pub se: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Aggregate> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Aggregate { mean, se, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub grid: f64,
    pub failed: usize,
    pub metrics: BTreeMap<String, Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
}

impl ExperimentResult {
    /// Per grid point aggregates over the successful cells.
    pub fn summary(&self) -> Vec<PointSummary> {
        let mut out: Vec<PointSummary> = Vec::new();
        for g in self.config.effective_grid() {
            let cells: Vec<&CellRecord> = self.cells.iter().filter(|c| c.grid == g).collect();
            let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for c in &cells {
                for (k, v) in &c.metrics {
                    values.entry(k).or_default().push(*v);
                }
            }
            let metrics =
                values.into_iter().filter_map(|(k, v)| Aggregate::of(&v).map(|a| (k.to_string(), a))).collect();
            out.push(PointSummary { grid: g, failed: cells.iter().filter(|c| c.error.is_some()).count(), metrics });
        }
        out
    }

    /// Aggregate of `metric` at grid value `grid`.
    pub fn aggregate(&self, grid: f64, metric: &str) -> Option<Aggregate> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.grid == grid).filter_map(|c| c.metrics.get(metric).copied()).collect();
        Aggregate::of(&v)
    }

    /// Values of `metric` per seed at `grid`, in seed order.
    pub fn values(&self, grid: f64, metric: &str) -> Vec<f64> {
        self.cells.iter().filter(|c| c.grid == grid).filter_map(|c| c.metrics.get(metric).copied()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `result.json` plus the rendered artifacts into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESULT_FILE), self.to_json()?)?;
        render(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(RESULT_FILE))?;
        let r: ExperimentResult = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{RESULT_FILE}: {e}")))?;
        r.config.validate()?;
        Ok(r)
    }
}

pub const RESULT_FILE: &str = "result.json";

/// Runs every grid × seed cell. Cells are independent and single-threaded;
/// results come back in grid-major, seed-minor order regardless of
/// scheduling. A failing cell is recorded, not fatal.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let jobs: Vec<(f64, u64)> =
        config.effective_grid().into_iter().flat_map(|g| config.seeds.iter().map(move |&s| (g, s))).collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = config.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| Error::Argument(format!("worker pool: {e}")))?;
    let cells = pool.install(|| {
        jobs.par_iter()
            .map(|&(grid, seed)| match run_cell(config, grid, seed) {
                Ok(metrics) => CellRecord { grid, seed, metrics, error: None },
                Err(e) => CellRecord { grid, seed, metrics: BTreeMap::new(), error: Some(e.to_string()) },
            })
            .collect()
    });
    Ok(ExperimentResult { config: config.clone(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            kind,
            generator: GeneratorSpec::default(),
            grid: None,
            seeds: vec![0, 1],
            train: TrainConfig::default(),
            capacity: 1,
            weighting: WeightingScheme::Uniform,
            fitter: Fitter::Global,
            workers: Some(1),
        }
    }

    #[test]
    fn config_rejects_unknown_fields_and_empty_lists() {
        let ok = r#"{"kind": "capacity_sweep", "seeds": [1]}"#;
        assert!(ExperimentConfig::from_json(ok).is_ok());
        assert!(ExperimentConfig::from_json(r#"{"kind": "capacity_sweep", "seeds": [1], "colour": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind": "capacity_sweep", "seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind": "capacity_sweep", "seeds": [1], "grid": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind": "cosine_sweep", "seeds": [1], "grid": [1.5]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind": "bogus", "seeds": [1]}"#).is_err());
    }

    #[test]
    fn default_grids() {
        assert_eq!(small(ExperimentKind::SampleSweep).effective_grid().len(), 8);
        assert_eq!(small(ExperimentKind::CosineSweep).effective_grid().len(), 11);
        assert_eq!(small(ExperimentKind::CapacitySweep).effective_grid(), (1..=8).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn aggregate_examples() {
        let a = Aggregate::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.mean, 2.0);
        assert!((a.se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Aggregate::of(&[5.0]).unwrap().se, 0.0);
        assert!(Aggregate::of(&[]).is_none());
    }

    #[test]
    fn capacity_run_is_complete_and_ordered() {
        let cfg = ExperimentConfig { workers: Some(2), ..small(ExperimentKind::CapacitySweep) };
        let res = run(&cfg).unwrap();
        assert_eq!(res.cells.len(), 16);
        let order: Vec<(f64, u64)> = res.cells.iter().map(|c| (c.grid, c.seed)).collect();
        let want: Vec<(f64, u64)> = (1..=8).flat_map(|r| [(r as f64, 0), (r as f64, 1)]).collect();
        assert_eq!(order, want);
        assert!(res.cells.iter().all(|c| c.error.is_none()));
        let again = run(&ExperimentConfig { workers: Some(1), ..cfg }).unwrap();
        assert_eq!(serde_json::to_string(&res.cells).unwrap(), serde_json::to_string(&again.cells).unwrap());
    }

    #[test]
    fn failing_cells_are_recorded() {
        let mut cfg = small(ExperimentKind::CapacitySweep);
        cfg.generator.dim = 3;
        cfg.grid = Some(vec![2.0, 5.0]);
        let res = run(&cfg).unwrap();
        assert!(res.cells.iter().filter(|c| c.grid == 5.0).all(|c| c.error.is_some()));
        assert!(res.cells.iter().filter(|c| c.grid == 2.0).all(|c| c.error.is_none()));
        assert_eq!(res.summary()[1].failed, 2);
    }
}
