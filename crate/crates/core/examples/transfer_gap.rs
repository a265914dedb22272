//! Positive and negative transfer: the target gap against a source with
//! the same covariance and against one with a different covariance.

use mtl_core::analysis::{transfer_gap, Fitter};
use mtl_core::task_gen::{CovarianceFamilySpec, SourceCovariance};
use mtl_core::trainer::TrainConfig;

fn main() -> mtl_core::Result<()> {
    let spec = CovarianceFamilySpec::default();
    let family = spec.family(1)?;
    let target = family.target()?;
    for m in [50, 500, 9000] {
        for which in [SourceCovariance::Same, SourceCovariance::Different] {
            let source = family.source(which, m)?;
            let rep = transfer_gap(&source, &target, 1, &TrainConfig::default(), Fitter::Global)?;
            println!("m_source {m:>5} {which:?}: gap {:+.5} (mtl {:.4}, stl {:.4})", rep.gap, rep.mtl, rep.stl);
        }
    }
    Ok(())
}
