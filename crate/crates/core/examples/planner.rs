//! Epoch plans: every derived constant and certificate at a fixed step, and
//! the bisected admissible step.
//!
//! cargo run --release --example planner

use kla::planner::{admissible_step, build_plan, certificates, contraction_rate};
use kla::{KernelParams, StartSpec, TargetModel};

fn main() -> kla::Result<()> {
    let model = TargetModel::isotropic_gaussian(2, 1.0)?;
    let start = StartSpec::Dirac {
        x: vec![0.0; 2],
        v: vec![0.0; 2],
    };
    let log_nu = start.log_lyapunov(&model)?;

    let params = KernelParams::for_model(&model, 0.05, 10.0)?;
    let plan = build_plan(&model, &params, 0.1, log_nu)?;
    println!(
        "contraction rate c = {:.6e}",
        contraction_rate(model.k(), 10.0)
    );
    println!(
        "{}",
        serde_json::to_string_pretty(&plan).expect("plan serialises")
    );
    let cert = certificates(&model, &params, &plan);
    println!(
        "certificates at h = 0.05: {}",
        serde_json::to_string_pretty(&cert).expect("serialises")
    );

    for d in [1, 4, 16] {
        let model = TargetModel::isotropic_gaussian(d, 1.0)?;
        let search = admissible_step(
            &model,
            10.0,
            0.1,
            StartSpec::ProductGaussian.log_lyapunov(&model)?,
        );
        println!(
            "d = {d:>2}: admissible step {:?} after {} evaluations",
            search.h_bar, search.evaluations
        );
    }
    Ok(())
}
