//! A small cosine sweep through the experiment runner, saved and rendered
//! to a temporary directory.

use mtl_core::harness::{run, ExperimentConfig};

fn main() -> mtl_core::Result<()> {
    let cfg = ExperimentConfig::from_json(
        r#"{"kind": "cosine_sweep", "grid": [0.0, 0.5, 0.9, 1.0], "seeds": [0, 1, 2],
            "generator": {"dim": 10, "rows": 120, "train_rows": 60, "source_rows": 400, "noise": 1.0}}"#,
    )?;
    let result = run(&cfg)?;
    for p in result.summary() {
        let gap = &p.metrics["gap"];
        println!("cos {:.1}: gap {:+.4} +/- {:.4}", p.grid, gap.mean, gap.se);
    }
    let dir = std::env::temp_dir().join("mtl-lab-sweep-example");
    result.save(&dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}
