//! Covariance similarity score and its invariances.

use mtl_core::analysis::covariance_similarity_score;
use mtl_core::matrix_core::random_orthonormal;
use mtl_core::rng;
use mtl_core::DenseMatrix;

fn gaussian(m: usize, n: usize, seed: u64) -> mtl_core::Result<DenseMatrix> {
    DenseMatrix::new(m, n, rng::gaussian_vec(&mut rng::from_seed(seed), m * n))
}

fn main() -> mtl_core::Result<()> {
    let x1 = gaussian(200, 10, 1)?;
    let x2 = gaussian(300, 10, 2)?;
    let skew = DenseMatrix::from_diag(&[30.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    println!("isotropic pair:  {:.4}", covariance_similarity_score(&x1, &x2)?);
    println!("skewed vs iso:   {:.4}", covariance_similarity_score(&x1.mul(&skew), &x2)?);
    println!("self:            {:.4}", covariance_similarity_score(&x1, &x1)?);
    let p = random_orthonormal(200, 9);
    println!("rows rotated:    {:.4}", covariance_similarity_score(&p.mul(&x1), &x2)?);
    Ok(())
}
