//! Coupled mixing estimate with exact stationary comparison starts, and the
//! 1/h scaling of the median meeting time.
//!
//! cargo run --release --example mixing

use kla::diagnostics::{estimate_mixing, meeting_time_scaling, ComparisonStart, MixingOptions};
use kla::planner::build_plan;
use kla::{KernelParams, StartSpec, TargetModel};

fn main() -> kla::Result<()> {
    let model = TargetModel::isotropic_gaussian(2, 1.0)?;
    let start = StartSpec::Dirac {
        x: vec![3.0, -3.0],
        v: vec![0.0; 2],
    };
    let params = KernelParams::for_model(&model, 0.05, 10.0)?;
    let plan = build_plan(&model, &params, 0.1, start.log_lyapunov(&model)?)?;

    let mut opts = MixingOptions::new(200, start, 4);
    opts.comparison = ComparisonStart::Exact;
    let r = estimate_mixing(&model, &plan, &opts)?;
    println!(
        "{} of {} met; meeting quantiles (10/50/90%) {:?}",
        r.met, r.n_replicas, r.meeting_quantiles
    );
    // The curve is printed up to its first zero.
    let shown = r
        .curve
        .iter()
        .position(|p| p.value == 0.0)
        .map_or(r.curve.len(), |i| i + 1);
    for p in &r.curve[..shown] {
        println!(
            "  n = {:>6}: TV bound {:.3} ± {:.3}",
            p.n, p.value, p.stderr
        );
    }
    println!(
        "curve at the horizon {:.3}; first-epoch failure rate {:.3}",
        r.at_horizon.value, r.epoch_failure.frequency
    );

    let mut opts = MixingOptions::new(
        100,
        StartSpec::Dirac {
            x: vec![0.0; 2],
            v: vec![0.0; 2],
        },
        4,
    );
    opts.comparison = ComparisonStart::Exact;
    let s = meeting_time_scaling(&model, 10.0, 0.1, &[0.1, 0.07, 0.05, 0.035], &opts)?;
    println!(
        "median meeting step = {:.1} + {:.2}/h (R^2 = {:.4})",
        s.intercept, s.slope, s.r_squared
    );
    Ok(())
}
