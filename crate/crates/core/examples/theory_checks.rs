//! The transfer bound, the angle bound and the sine contraction on a few
//! instances with controlled target conditioning.

use mtl_core::analysis::{sin_contraction_check, theorem1_check};
use mtl_core::closed_form::{solve_linear_mtl, task_stats};
use mtl_core::matrix_core::{norm, scaled};
use mtl_core::mtl_model::WeightVector;
use mtl_core::rng;
use mtl_core::task_gen::{gen_conditioned_design, gen_linear_task, interpolate_orthogonal, label_linear};

fn main() -> mtl_core::Result<()> {
    let d = 10;
    let v = rng::gaussian_vec(&mut rng::from_seed(1), d);
    let theta1 = scaled(&v, 1.0 / norm(&v));
    let dir = rng::gaussian_vec(&mut rng::from_seed(2), d);
    for alpha in [1.0, 0.98, 0.9] {
        let theta2 = interpolate_orthogonal(&theta1, alpha, &dir)?;
        let source = gen_linear_task(&theta1, 5000, 0.0, None, 3)?;
        let target = label_linear(gen_conditioned_design(100, d, 4.0, 4)?, &theta2, 0.5, 5)?;
        let fit = solve_linear_mtl(&task_stats(&[source.clone(), target.clone()]), &WeightVector::uniform(2), 1, 0)?;
        let rep = theorem1_check(&source, &target, &fit.model)?;
        println!(
            "sin {:.3}: c {:.3}, kappa {:.2}, lhs {:.4}, rhs {:.4}, satisfied {:?}",
            rep.sin_theta, rep.c, rep.kappa, rep.lhs, rep.rhs, rep.satisfied
        );
    }

    let x = gen_conditioned_design(30, 6, 3.0, 9)?;
    let rep = sin_contraction_check(&x, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.6, 0.8, 0.0, 0.0, 0.0, 0.0])?;
    println!("sin contraction: {:.4} >= {:.4}: {}", rep.lhs, rep.rhs, rep.holds);
    Ok(())
}
