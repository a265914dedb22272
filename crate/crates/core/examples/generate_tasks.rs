//! Generates the covariance family (target, same-covariance source,
//! different-covariance source) and round-trips the target through CSV.

use mtl_core::matrix_core::cos_sin;
use mtl_core::task_gen::{self, CovarianceFamilySpec, SourceCovariance};

fn main() -> mtl_core::Result<()> {
    let spec = CovarianceFamilySpec { dim: 30, boosted_count: 3, target_rows: 600, target_train: 500, ..Default::default() };
    let family = spec.family(7)?;
    println!("cos(theta1, theta2) = {:.4}", cos_sin(&family.theta1, &family.theta2)?.0);

    let target = family.target()?;
    let same = family.source(SourceCovariance::Same, 200)?;
    let different = family.source(SourceCovariance::Different, 200)?;
    for (name, t) in [("target", &target), ("same", &same), ("different", &different)] {
        println!("{name:>9}: {} rows x {} features, split: {}", t.rows(), t.dim(), t.split.is_some());
    }

    let dir = std::env::temp_dir().join("mtl-lab-generate-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("target.csv");
    task_gen::save(&target, &path)?;
    let back = task_gen::load(&path)?;
    println!("reloaded {} rows from {}, identical: {}", back.rows(), path.display(), back == target);
    Ok(())
}
