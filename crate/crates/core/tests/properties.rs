use proptest::prelude::*;

use mtl_core::closed_form::{solve_linear_mtl, task_stats};
use mtl_core::matrix_core::{pinv, random_orthonormal};
use mtl_core::mtl_model::{objective, Activation, MtlModel, WeightVector};
use mtl_core::rng;
use mtl_core::task_gen::{gen_linear_task, TaskDataset};
use mtl_core::trainer::{train, TrainConfig};
use mtl_core::DenseMatrix;

fn tasks(k: usize, d: usize, m: usize, seed: u64) -> Vec<TaskDataset> {
    (0..k)
        .map(|i| {
            let theta = rng::gaussian_vec(&mut rng::stream(seed, i as u64), d);
            gen_linear_task(&theta, m, 0.3, None, rng::derive(seed, 100 + i as u64)).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_optimum_beats_random_models(seed in 0u64..5000, r in 1usize..3) {
        let ts = tasks(3, 5, 30, seed);
        let w = WeightVector::uniform(3);
        let fit = solve_linear_mtl(&task_stats(&ts), &w, r, seed).unwrap();
        let at_fit = objective(&fit.model, &ts, &w).unwrap();
        prop_assert!((at_fit - fit.objective).abs() <= 1e-8 * at_fit.max(1.0));
        for j in 0..5 {
            let other = MtlModel::random(5, r, 3, Activation::Linear, rng::derive(seed, 50 + j));
            prop_assert!(at_fit <= objective(&other, &ts, &w).unwrap() + 1e-9);
        }
    }

    #[test]
    fn change_of_basis_leaves_predictions_unchanged(seed in 0u64..5000) {
        let ts = tasks(2, 4, 12, seed);
        let w = WeightVector::new(vec![1.0, 2.5]).unwrap();
        let model = MtlModel::random(4, 2, 2, Activation::Linear, seed);
        let g = random_orthonormal(2, seed + 1).mul(&DenseMatrix::from_diag(&[2.0, 0.5]));
        let gi = pinv(&g).unwrap();
        let heads = model.heads.iter().map(|a| gi.matvec(a)).collect();
        let moved = MtlModel::new(model.shared.mul(&g), heads, Activation::Linear).unwrap();
        let (a, b) = (objective(&model, &ts, &w).unwrap(), objective(&moved, &ts, &w).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn training_is_deterministic(seed in 0u64..5000) {
        let ts = tasks(2, 3, 20, seed);
        let cfg = TrainConfig { learning_rate: 0.01, epochs: 5, batch_size: 7, seed, ..Default::default() };
        let init = MtlModel::random(3, 1, 2, Activation::Relu, seed);
        let a = train(init.clone(), &ts, &cfg).unwrap();
        let b = train(init, &ts, &cfg).unwrap();
        prop_assert_eq!(a.model, b.model);
        prop_assert_eq!(a.trace, b.trace);
    }
}
