//! Deterministic and one-step checks: pathwise contraction, both energy-error
//! bounds, the leading-order energy error and the one-shot meeting rate.
//!
//! cargo run --release --example lemma_checks

use kla::diagnostics::{
    verify_contraction, verify_energy_error, verify_leading_order, verify_one_shot, StateSampler,
};
use kla::rng::{stream, Purpose};
use kla::{KernelParams, TargetModel};

fn main() -> kla::Result<()> {
    let model = TargetModel::isotropic_gaussian(2, 1.0)?;
    let params = KernelParams::for_model(&model, 0.05, 10.0)?;
    let mut rng = stream(9, Purpose::Trials, 0);

    for scale in [1.0, 100.0] {
        let r = verify_contraction(
            &model,
            &params,
            5_000,
            scale,
            &StateSampler::Stationary,
            &mut rng,
        )?;
        println!(
            "contraction with c x {scale}: passed = {}, violations = {}",
            r.passed, r.violations
        );
    }

    let perturbed = TargetModel::perturbed_example(4)?;
    let sampler = StateSampler::LogUniformScale {
        min_scale: 1e-3,
        max_scale: 10.0,
    };
    let r = verify_energy_error(&perturbed, 0.05, 20_000, &sampler, &mut rng)?;
    println!("energy error on {}: {:?}", perturbed.name(), r.metrics);

    let lo = verify_leading_order(16, &[0.02, 0.01, 0.005])?;
    for row in &lo.rows {
        println!(
            "d = 16, h = {:<6} delta H / prediction = {:.5}",
            row.h, row.ratio
        );
    }

    let r = verify_one_shot(
        &model,
        &params,
        0.01,
        2_000,
        32,
        0.01,
        &StateSampler::Stationary,
        &mut rng,
    )?;
    println!(
        "one-shot: met {}/{} (lower bound {:.4}), overlap {:.4}, KS min p {:.3}",
        r.met, r.trials, r.meeting_lower_bound, r.overlap, r.ks_min_p
    );
    Ok(())
}
