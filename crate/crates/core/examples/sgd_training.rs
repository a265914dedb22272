//! Mini-batch SGD on two related ReLU tasks, printing the loss trace.

use mtl_core::mtl_model::{Activation, MtlModel};
use mtl_core::task_gen::{alpha_for_cosine, gen_relu_task, make_model_pair};
use mtl_core::trainer::{train, TrainConfig};

fn main() -> mtl_core::Result<()> {
    let theta: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
    let (t1, t2) = make_model_pair(&theta, alpha_for_cosine(0.9)?, 3)?;
    let tasks = [gen_relu_task(&t1, 1.0, 400, 0.1, None, 1)?, gen_relu_task(&t2, 1.0, 400, 0.1, None, 2)?];
    let cfg = TrainConfig { learning_rate: 5e-3, epochs: 40, batch_size: 32, ..Default::default() };
    let report = train(MtlModel::random(8, 1, 2, Activation::Relu, 11), &tasks, &cfg)?;
    for e in report.trace.epochs.iter().step_by(10) {
        println!("epoch {:>3}: total {:>10.4}  per task {:?}", e.epoch, e.total, e.per_task.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>());
    }
    println!("final objective {:.4}", report.trace.last().unwrap_or(f64::NAN));
    Ok(())
}
