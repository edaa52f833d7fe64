//! Built-in targets and the two kernels: one UKLA and one MAKLA step from the
//! same state and noise, and the energy error of the leapfrog core.
//!
//! cargo run --example integrator

use kla::integrator::{energy_error, makla_step, ukla_step};
use kla::rng::{standard_normal_vec, stream, uniform, Purpose};
use kla::{KernelParams, PhaseState, TargetModel};

fn main() -> kla::Result<()> {
    let model = TargetModel::perturbed_example(3)?;
    println!(
        "{}: d = {}, K = {}, L = {}, L_H = {}",
        model.name(),
        model.dim(),
        model.k(),
        model.l(),
        model.l_h()
    );
    println!("minimiser {:?}", model.minimizer());

    let params = KernelParams::for_model(&model, 0.1, 20.0)?;
    let z = PhaseState::new(vec![0.5, -1.0, 0.25], vec![1.0, 0.0, -0.5])?;
    println!("H(z) = {:.6}", model.hamiltonian(&z)?);

    let mut rng = stream(1, Purpose::Chain, 0);
    let (xi1, xi2) = (
        standard_normal_vec(&mut rng, 3),
        standard_normal_vec(&mut rng, 3),
    );
    let u = uniform(&mut rng);

    let unadjusted = ukla_step(&model, &z, &params, &xi1, &xi2)?;
    let adjusted = makla_step(&model, &z, &params, &xi1, &xi2, u)?;
    println!("UKLA  -> x = {:?}", unadjusted.x);
    println!(
        "MAKLA -> x = {:?} (accepted: {}, delta H = {:.3e}, u = {u:.3})",
        adjusted.next.x, adjusted.accepted, adjusted.delta_h
    );
    if adjusted.accepted {
        assert!(adjusted.next.bitwise_eq(&unadjusted));
    }

    for h in [0.2, 0.1, 0.05, 0.025] {
        println!(
            "h = {h:<6} leapfrog energy error {:+.3e}",
            energy_error(&model, &z, h)?
        );
    }
    Ok(())
}
