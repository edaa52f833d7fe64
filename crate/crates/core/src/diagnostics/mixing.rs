//! Empirical mixing: independent coupled epoch runs, the TV upper-bound
//! curve n ↦ P(not met by n) + exit mass, per-epoch failure statistics and
//! the 1/h scaling of meeting times.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lyapunov::start_state;
use super::{stationary_draw, VerificationReport};
use crate::couplings::{epoch_coupled_run, CoupledPair, TraceRow};
use crate::error::{KlaError, Result};
use crate::integrator::{makla_step_in_place, KernelParams, Workspace};
use crate::model::{PhaseState, TargetModel};
use crate::planner::{build_plan, EpochPlan, StartSpec};
use crate::rng::{fill_standard_normal, stream, uniform, Purpose, StreamRng};
use crate::stats::{linear_fit, Welford};

/// How the second (approximately stationary) chain is started.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonStart {
    /// A MAKLA run of `warm_up_factor`·𝔈 steps from the minimiser of U with
    /// a standard normal velocity.
    WarmUp,
    /// An exact stationary draw (Gaussian kinds only).
    Exact,
}

/// Settings of a mixing experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingOptions {
    pub n_replicas: usize,
    pub start: StartSpec,
    pub comparison: ComparisonStart,
    pub warm_up_factor: u64,
    /// Number of equal steps of the curve grid over [0, 𝔥].
    pub grid_points: u64,
    /// Replicas 0..traced_replicas record per-step traces.
    pub traced_replicas: usize,
    pub seed: u64,
}

impl MixingOptions {
    pub fn new(n_replicas: usize, start: StartSpec, seed: u64) -> Self {
        Self {
            n_replicas,
            start,
            comparison: ComparisonStart::WarmUp,
            warm_up_factor: 10,
            grid_points: 100,
            traced_replicas: 0,
            seed,
        }
    }
}

/// Per-step trace of one replica.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicaTrace {
    pub replica: u64,
    pub rows: Vec<TraceRow>,
}

/// One point of the TV upper-bound curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: u64,
    /// P(not met by n) + P(left D by n before meeting), as observed.
    pub raw: f64,
    /// Running minimum of `raw`, the reported non-increasing curve.
    pub value: f64,
    /// Standard error of the raw point the running minimum came from.
    pub stderr: f64,
}

/// The first-epoch failure event: not met by the end of the first epoch
/// while both chains stayed in D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochFailureStats {
    pub replicas: u64,
    pub first_epoch_failures: u64,
    pub frequency: f64,
    pub stderr: f64,
    /// e⁻¹
    pub bound: f64,
    pub passed: bool,
    /// Epochs entered unmet, pooled over all epochs of all replicas.
    pub pooled_entered: u64,
    pub pooled_failures: u64,
    pub pooled_frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub model: String,
    pub plan: EpochPlan,
    pub n_replicas: u64,
    pub comparison: ComparisonStart,
    /// Steps of the warm-up run of the comparison chain (0 for exact draws).
    pub warm_up_steps: u64,
    pub met: u64,
    pub exited: u64,
    /// Nearest-rank 10%, 50% and 90% meeting steps; None when that rank
    /// did not meet within 𝔥.
    pub meeting_quantiles: [Option<u64>; 3],
    pub curve: Vec<CurvePoint>,
    pub at_horizon: CurvePoint,
    pub at_half_horizon: CurvePoint,
    /// curve(𝔥) against ε.
    pub horizon_check: VerificationReport,
    /// curve(𝔥/2) against ε/4.
    pub half_horizon_check: VerificationReport,
    pub epoch_failure: EpochFailureStats,
    #[serde(skip)]
    pub traces: Vec<ReplicaTrace>,
}

/// What one replica contributes.
#[derive(Clone, Debug)]
struct ReplicaOutcome {
    meeting_step: Option<u64>,
    exit_step: Option<u64>,
    first_epoch_failed: bool,
    entered: u64,
    failed: u64,
    trace: Option<ReplicaTrace>,
}

fn comparison_state(
    model: &TargetModel,
    params: &KernelParams,
    comparison: ComparisonStart,
    warm_up_steps: u64,
    rng: &mut StreamRng,
) -> Result<PhaseState> {
    let d = model.dim();
    match comparison {
        ComparisonStart::Exact => {
            let prec = model.gaussian_precisions().ok_or_else(|| {
                KlaError::Config(format!(
                    "exact comparison draws need a Gaussian model, got {}",
                    model.name()
                ))
            })?;
            Ok(stationary_draw(&prec, rng))
        }
        ComparisonStart::WarmUp => {
            let mut x = model.minimizer();
            let mut v = vec![0.0; d];
            fill_standard_normal(rng, &mut v);
            let mut ws = Workspace::new(d);
            let (mut xi1, mut xi2) = (vec![0.0; d], vec![0.0; d]);
            for _ in 0..warm_up_steps {
                fill_standard_normal(rng, &mut xi1);
                fill_standard_normal(rng, &mut xi2);
                let u = uniform(rng);
                makla_step_in_place(model, params, &mut x, &mut v, &xi1, &xi2, u, &mut ws)?;
            }
            PhaseState::new(x, v)
        }
    }
}

fn run_replica(
    model: &TargetModel,
    plan: &EpochPlan,
    params: &KernelParams,
    opts: &MixingOptions,
    warm_up_steps: u64,
    replica: u64,
) -> Result<ReplicaOutcome> {
    let mut start_rng = stream(opts.seed, Purpose::States, replica);
    let z = start_state(model, &opts.start, &mut start_rng)?;
    let mut warm_rng = stream(opts.seed, Purpose::WarmUp, replica);
    let zt = comparison_state(model, params, opts.comparison, warm_up_steps, &mut warm_rng)?;
    let mut pair = CoupledPair::new(z, zt)?;
    let mut rng = stream(opts.seed, Purpose::Coupling, replica);
    let mut rows = Vec::new();
    let traced = (replica as usize) < opts.traced_replicas;
    let report = if traced {
        let mut sink = |row: &TraceRow| rows.push(*row);
        epoch_coupled_run(model, &mut pair, plan, &mut rng, Some(&mut sink))?
    } else {
        epoch_coupled_run(model, &mut pair, plan, &mut rng, None)?
    };
    let first_epoch_failed = report.epochs.first().is_some_and(|e| !e.met && !e.exited);
    let mut entered = 0;
    let mut failed = 0;
    for e in &report.epochs {
        entered += 1;
        failed += u64::from(!e.met && !e.exited);
    }
    Ok(ReplicaOutcome {
        meeting_step: report.meeting_step,
        exit_step: report.first_exit_step,
        first_epoch_failed,
        entered,
        failed,
        trace: traced.then_some(ReplicaTrace { replica, rows }),
    })
}

fn run_replicas(
    model: &TargetModel,
    plan: &EpochPlan,
    opts: &MixingOptions,
) -> Result<(Vec<ReplicaOutcome>, u64)> {
    if opts.n_replicas < 2 {
        return Err(KlaError::InvalidParameter(
            "need at least two replicas".into(),
        ));
    }
    let params = KernelParams::for_model(model, plan.h, plan.gamma)?;
    let warm_up_steps = match opts.comparison {
        ComparisonStart::WarmUp => opts.warm_up_factor * plan.epoch,
        ComparisonStart::Exact => 0,
    };
    let outcomes = (0..opts.n_replicas as u64)
        .into_par_iter()
        .map(|i| run_replica(model, plan, &params, opts, warm_up_steps, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((outcomes, warm_up_steps))
}

/// 1{not met by n} + 1{left D by n before meeting}.
fn indicator(o: &ReplicaOutcome, n: u64) -> f64 {
    let unmet = o.meeting_step.is_none_or(|m| m > n);
    let exited = o.exit_step.is_some_and(|e| e <= n);
    f64::from(u8::from(unmet)) + f64::from(u8::from(exited))
}

fn nearest_rank(sorted: &[Option<u64>], q: f64) -> Option<u64> {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Runs `opts.n_replicas` independent coupled epoch runs and summarises them.
pub fn estimate_mixing(
    model: &TargetModel,
    plan: &EpochPlan,
    opts: &MixingOptions,
) -> Result<MixingReport> {
    let (outcomes, warm_up_steps) = run_replicas(model, plan, opts)?;
    let n = outcomes.len() as f64;
    let horizon = plan.horizon;

    let mut grid: Vec<u64> = (0..=opts.grid_points.max(1))
        .map(|j| j * horizon / opts.grid_points.max(1))
        .collect();
    grid.push(horizon / 2);
    grid.sort_unstable();
    grid.dedup();

    let mut curve = Vec::with_capacity(grid.len());
    let mut best = (f64::INFINITY, 0.0);
    for &step in &grid {
        let mut acc = Welford::default();
        outcomes.iter().for_each(|o| acc.push(indicator(o, step)));
        let raw = acc.mean();
        if raw <= best.0 {
            best = (raw, acc.stderr_of_mean());
        }
        curve.push(CurvePoint {
            n: step,
            raw,
            value: best.0,
            stderr: best.1,
        });
    }
    let at = |step: u64| {
        *curve
            .iter()
            .find(|p| p.n == step)
            .expect("grid contains the point")
    };
    let at_horizon = at(horizon);
    let at_half_horizon = at(horizon / 2);
    let trials = outcomes.len() as u64;
    let horizon_check = VerificationReport::statistical(
        "tv_curve_at_horizon",
        trials,
        at_horizon.value,
        plan.eps,
        at_horizon.stderr,
    )
    .with("n", horizon as f64);
    let half_horizon_check = VerificationReport::statistical(
        "tv_curve_at_half_horizon",
        trials,
        at_half_horizon.value,
        plan.eps / 4.0,
        at_half_horizon.stderr,
    )
    .with("n", (horizon / 2) as f64);

    let failures = outcomes.iter().filter(|o| o.first_epoch_failed).count() as u64;
    let p = failures as f64 / n;
    let se = (p * (1.0 - p) / n).sqrt();
    let bound = (-1.0f64).exp();
    let pooled_entered = outcomes.iter().map(|o| o.entered).sum::<u64>();
    let pooled_failures = outcomes.iter().map(|o| o.failed).sum::<u64>();
    let epoch_failure = EpochFailureStats {
        replicas: trials,
        first_epoch_failures: failures,
        frequency: p,
        stderr: se,
        bound,
        passed: p <= bound + 3.0 * se,
        pooled_entered,
        pooled_failures,
        pooled_frequency: if pooled_entered == 0 {
            0.0
        } else {
            pooled_failures as f64 / pooled_entered as f64
        },
    };

    let mut meets: Vec<Option<u64>> = outcomes.iter().map(|o| o.meeting_step).collect();
    meets.sort_unstable_by_key(|m| m.unwrap_or(u64::MAX));
    let meeting_quantiles = [0.1, 0.5, 0.9].map(|q| nearest_rank(&meets, q));

    let traces = outcomes.iter().filter_map(|o| o.trace.clone()).collect();
    Ok(MixingReport {
        model: model.name().to_string(),
        plan: plan.clone(),
        n_replicas: trials,
        comparison: opts.comparison,
        warm_up_steps,
        met: outcomes.iter().filter(|o| o.meeting_step.is_some()).count() as u64,
        exited: outcomes.iter().filter(|o| o.exit_step.is_some()).count() as u64,
        meeting_quantiles,
        curve,
        at_horizon,
        at_half_horizon,
        horizon_check,
        half_horizon_check,
        epoch_failure,
        traces,
    })
}

/// Median meeting step at one step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub h: f64,
    pub inv_h: f64,
    pub epoch: u64,
    pub horizon: u64,
    pub median_meeting_step: Option<u64>,
    pub met_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Least-squares fit median ≈ intercept + slope/h.
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    pub passed: bool,
}

/// Median meeting steps over an h-grid at fixed ε, regressed on 1/h.
/// Passes when every median is defined and R² ≥ 0.95.
pub fn meeting_time_scaling(
    model: &TargetModel,
    gamma: f64,
    eps: f64,
    h_grid: &[f64],
    opts: &MixingOptions,
) -> Result<ScalingReport> {
    if h_grid.len() < 3 {
        return Err(KlaError::InvalidParameter(
            "the scaling regression needs at least three step sizes".into(),
        ));
    }
    let log_nu = opts.start.log_lyapunov(model)?;
    let rows = h_grid
        .iter()
        .map(|&h| {
            let params = KernelParams::for_model(model, h, gamma)?;
            let plan = build_plan(model, &params, eps, log_nu)?;
            let (outcomes, _) = run_replicas(model, &plan, opts)?;
            let mut meets: Vec<Option<u64>> = outcomes.iter().map(|o| o.meeting_step).collect();
            meets.sort_unstable_by_key(|m| m.unwrap_or(u64::MAX));
            let met = meets.iter().filter(|m| m.is_some()).count();
            Ok(ScalingRow {
                h,
                inv_h: 1.0 / h,
                epoch: plan.epoch,
                horizon: plan.horizon,
                median_meeting_step: nearest_rank(&meets, 0.5),
                met_fraction: met as f64 / meets.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<&ScalingRow> = rows
        .iter()
        .filter(|r| r.median_meeting_step.is_some())
        .collect();
    let (intercept, slope, r_squared) = if defined.len() >= 2 {
        let x: Vec<f64> = defined.iter().map(|r| r.inv_h).collect();
        let y: Vec<f64> = defined
            .iter()
            .map(|r| r.median_meeting_step.unwrap_or(0) as f64)
            .collect();
        linear_fit(&x, &y)
    } else {
        (f64::NAN, f64::NAN, 0.0)
    };
    let passed = defined.len() == rows.len() && r_squared >= 0.95;
    Ok(ScalingReport {
        rows,
        intercept,
        slope,
        r_squared,
        passed,
    })
}
