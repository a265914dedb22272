//! SVD task weights versus uniform and uncertainty weights on a pair that
//! shares covariates, where the second task has flipped labels.

use mtl_core::closed_form::solve_same_covariates;
use mtl_core::harness::{flipped_pair, GeneratorSpec};
use mtl_core::matrix_core::cos_sin;
use mtl_core::mtl_model::{Activation, MtlModel, WeightVector};
use mtl_core::task_gen::TaskDataset;
use mtl_core::trainer::TrainConfig;
use mtl_core::weighting::{svd_reweight, uncertainty_weights, ThetaForm};

fn main() -> mtl_core::Result<()> {
    let g = GeneratorSpec { dim: 30, rows: 3000, train_rows: 2700, ..Default::default() };
    let (tasks, theta) = flipped_pair(&g, 0.4, 5)?;
    let train: Vec<_> = tasks.iter().map(TaskDataset::train_data).collect();
    let ys: Vec<Vec<f64>> = train.iter().map(|t| t.y.clone()).collect();

    let svd = svd_reweight(&train[0].x, &ys, 1, ThetaForm::Correlation)?;
    let cfg = TrainConfig { epochs: 5, ..Default::default() };
    let unc = uncertainty_weights(&tasks, &MtlModel::random(30, 1, 2, Activation::Linear, 1), &cfg, true)?;
    for (name, w) in [("uniform", WeightVector::uniform(2)), ("svd", svd), ("uncertainty", unc.weights)] {
        let fit = solve_same_covariates(&train[0].x, &ys, &w, 1)?;
        let c = cos_sin(&fit.model.shared.column(0), &theta)?.0.abs();
        println!("{name:>11}: weights {:?}, cos(B, theta) {c:.5}", w.as_slice());
    }
    Ok(())
}
