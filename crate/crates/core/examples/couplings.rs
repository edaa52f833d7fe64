//! The three coupled transitions: synchronous steps that contract the
//! twisted distance, the one-shot step that makes the chains meet, and a
//! full epoch run.
//!
//! cargo run --release --example couplings

use kla::couplings::{
    epoch_coupled_run, one_shot_coupled_step, synchronous_coupled_step, tv_overlap_estimate,
    CoupledPair, CoupledWorkspace,
};
use kla::planner::build_plan;
use kla::rng::{standard_normal_vec, stream, uniform, Purpose};
use kla::{KernelParams, PhaseState, TargetModel, TwistedNorm};

fn main() -> kla::Result<()> {
    let model = TargetModel::isotropic_gaussian(2, 1.0)?;
    let params = KernelParams::for_model(&model, 0.05, 10.0)?;
    let tn = TwistedNorm::new(10.0, 0.05)?;
    let mut rng = stream(5, Purpose::Coupling, 0);

    let z = PhaseState::new(vec![2.0, -1.0], vec![0.0, 0.5])?;
    let zt = PhaseState::new(vec![-1.0, 1.0], vec![0.3, 0.0])?;
    let mut pair = CoupledPair::new(z, zt)?;
    let mut ws = CoupledWorkspace::new(2);
    println!(
        "start: twisted distance {:.4}",
        tn.distance(&pair.z, &pair.z_tilde)
    );
    for block in 1..=5 {
        for _ in 0..1000 {
            let (xi1, xi2) = (
                standard_normal_vec(&mut rng, 2),
                standard_normal_vec(&mut rng, 2),
            );
            let u = uniform(&mut rng);
            synchronous_coupled_step(&model, &mut pair, &params, &xi1, &xi2, u, &mut ws)?;
        }
        println!(
            "after {:>4} synchronous steps: {:.3e}",
            block * 1000,
            tn.distance(&pair.z, &pair.z_tilde)
        );
    }

    let overlap = tv_overlap_estimate(&model, &pair.z, &pair.z_tilde, &params, 256, &mut rng)?;
    println!(
        "overlap bound on the miss probability: {:.4} ± {:.4}",
        overlap.value, overlap.stderr
    );
    let shot = one_shot_coupled_step(&model, &mut pair, &params, &mut rng)?;
    println!(
        "one-shot step: met = {}, transported = {}, Newton iterations = {}",
        shot.met, shot.transported, shot.iterations
    );

    let plan = build_plan(&model, &params, 0.1, 0.0)?;
    let mut pair = CoupledPair::new(
        PhaseState::new(vec![1.0, 1.0], vec![0.0; 2])?,
        PhaseState::zeros(2),
    )?;
    let report = epoch_coupled_run(&model, &mut pair, &plan, &mut rng, None)?;
    println!(
        "epoch run (epoch = {}, k = {}): met at step {:?} after {} epochs",
        plan.epoch,
        plan.k,
        report.meeting_step,
        report.epochs.len()
    );
    Ok(())
}
