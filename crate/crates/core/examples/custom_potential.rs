//! Sampling a user-supplied potential: a smoothed absolute value in every
//! coordinate plus a quadratic, U(x) = Σ (|x_i|²/2 + sqrt(1 + x_i²)).
//!
//! cargo run --release --example custom_potential

use std::sync::Arc;

use kla::integrator::{makla_step_in_place, Workspace};
use kla::model::Potential;
use kla::rng::{fill_standard_normal, stream, uniform, Purpose};
use kla::stats::Welford;
use kla::{KernelParams, TargetModel};
use nalgebra::{DMatrix, DVector};

#[derive(Debug)]
struct SmoothedAbs;

impl Potential for SmoothedAbs {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|c| 0.5 * c * c + (1.0 + c * c).sqrt()).sum()
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        for (g, c) in grad.iter_mut().zip(x) {
            *g = c + c / (1.0 + c * c).sqrt();
        }
    }
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            x.len(),
            x.iter().map(|c| 1.0 + (1.0 + c * c).powf(-1.5)),
        ))
    }
}

fn main() -> kla::Result<()> {
    // Per coordinate 1 < U'' ≤ 2 and |U'''| = 3|c|(1 + c²)^{-5/2} ≤ 0.86.
    let model = TargetModel::custom(Arc::new(SmoothedAbs), 3, 1.0, 2.0, 1.0)?;
    let params = KernelParams::for_model(&model, 0.05, 10.0 * 2f64.sqrt())?;
    let mut rng = stream(2, Purpose::Chain, 0);
    let (mut x, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    let (mut xi1, mut xi2) = (vec![0.0; 3], vec![0.0; 3]);
    let mut ws = Workspace::new(3);
    let (mut second, mut accepted) = (Welford::default(), 0u64);
    let n = 200_000;
    for _ in 0..n {
        fill_standard_normal(&mut rng, &mut xi1);
        fill_standard_normal(&mut rng, &mut xi2);
        let u = uniform(&mut rng);
        accepted += u64::from(
            makla_step_in_place(&model, &params, &mut x, &mut v, &xi1, &xi2, u, &mut ws)?.accepted,
        );
        second.push(x[0] * x[0]);
    }
    println!(
        "acceptance rate {:.5}, E[x_0^2] ~ {:.4}",
        accepted as f64 / n as f64,
        second.mean()
    );
    Ok(())
}
