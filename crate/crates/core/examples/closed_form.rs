//! Exact solvers: single-task least squares, the capacity construction that
//! fits every task exactly, and the shared-covariance optimum at each capacity.

use mtl_core::closed_form::{capacity_construction, solve_equal_covariance, solve_linear_mtl, stl_solve, task_stats};
use mtl_core::matrix_core::{norm, sub};
use mtl_core::mtl_model::{objective, WeightVector};
use mtl_core::rng;
use mtl_core::task_gen::{gen_linear_task, label_linear, TaskDataset};

fn main() -> mtl_core::Result<()> {
    let (d, k) = (10usize, 4usize);
    let thetas: Vec<Vec<f64>> = (0..k).map(|i| rng::gaussian_vec(&mut rng::from_seed(i as u64), d)).collect();
    let tasks: Vec<TaskDataset> =
        thetas.iter().enumerate().map(|(i, t)| gen_linear_task(t, 50, 0.0, None, 100 + i as u64)).collect::<mtl_core::Result<_>>()?;
    let w = WeightVector::uniform(k);

    let theta0 = stl_solve(&tasks[0])?;
    println!("STL error on task 0: {:.2e}", norm(&sub(&theta0, &thetas[0])));

    let model = capacity_construction(&thetas, k)?;
    println!("capacity {k} construction, training error {:.2e}", objective(&model, &tasks, &w)?);

    for r in 1..=k {
        let fit = solve_linear_mtl(&task_stats(&tasks), &w, r, 0)?;
        println!("r = {r}: objective {:>10.4} via {}", fit.objective, fit.method);
    }

    let x = tasks[0].x.clone();
    let shared: Vec<TaskDataset> =
        thetas.iter().enumerate().map(|(i, t)| label_linear(x.clone(), t, 0.1, 200 + i as u64)).collect::<mtl_core::Result<_>>()?;
    let fit = solve_equal_covariance(&shared, &w, 2)?;
    println!("shared design, r = 2: objective {:.4}, top spectrum {:?}", fit.objective, &fit.spectrum[..2]);
    Ok(())
}
