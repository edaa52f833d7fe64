//! Lyapunov drift, exit frequency, the per-epoch rejection budget and the
//! OU moment bounds on a small plan where none of them is vacuous.
//!
//! cargo run --release --example localisation_checks

use kla::diagnostics::{
    exit_frequency, lyapunov_drift_check, ou_moment_bounds, rejection_rate_epoch, StateSampler,
};
use kla::planner::{build_plan, lyapunov_rate};
use kla::{KernelParams, StartSpec, TargetModel};

fn main() -> kla::Result<()> {
    let model = TargetModel::isotropic_gaussian(2, 1.0)?;
    let params = KernelParams::for_model(&model, 0.05, 10.0)?;
    let mut plan = build_plan(&model, &params, 0.1, 0.0)?;
    plan.r_u = 50.0;
    plan.lambda = lyapunov_rate(1.0, 0.05, 10.0, 2, 50.0);
    let in_domain = StateSampler::UniformInDomain { r_u: plan.r_u };

    let drift = lyapunov_drift_check(&model, &plan, 128, 512, &in_domain, 1)?;
    println!(
        "drift: passed = {}, worst log ratio {:.3} vs lambda {:.3}",
        drift.passed, drift.metrics["worst_log_ratio"], plan.lambda
    );

    let moments = ou_moment_bounds(&model, &params, 64, 256, &in_domain, 1)?;
    println!("OU moments: passed = {}", moments.passed);

    let fine = KernelParams::for_model(&model, 0.005, 10.0)?;
    let mut short = build_plan(&model, &fine, 0.1, 0.0)?;
    short.horizon = 100;
    short.r_u = 120.0;
    let start = StartSpec::Dirac {
        x: vec![0.0; 2],
        v: vec![0.0; 2],
    };
    let exit = exit_frequency(&model, &short, &start, 500, 1)?;
    println!(
        "exit: frequency {} vs bound {:.4}",
        exit.metrics["frequency"],
        exit.metrics["log_bound"].exp()
    );

    let rejection = rejection_rate_epoch(&model, &plan, 64, 256, &StateSampler::Stationary, 1)?;
    println!(
        "rejection: sup {:.3e} per step, epoch x sup = {:.3e} vs 1/(3e)",
        rejection.metrics["sup_rejection"],
        rejection.metrics["sup_rejection"] * plan.epoch as f64
    );
    Ok(())
}
