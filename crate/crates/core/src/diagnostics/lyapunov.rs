//! Localisation checks: the drift of the Lyapunov function e^{H/8}, the
//! frequency of leaving D over the horizon, the rejection budget of an epoch
//! and the OU moment bounds.
//!
//! Each sampled state gets its own random stream, so the per-state work runs
//! in parallel and the reports do not depend on the thread count.

use rayon::prelude::*;

use super::{stationary_draw, StateSampler, VerificationReport};
use crate::error::{KlaError, Result};
use crate::integrator::{
    makla_step_in_place, ou_half_step_in_place, theta_h_in_place, KernelParams, Workspace,
};
use crate::model::{dot, PhaseState, TargetModel};
use crate::planner::{
    exit_log_bound, high_acceptance_threshold, rejection_budget, EpochPlan, StartSpec,
};
use crate::rng::{fill_standard_normal, stream, uniform, Purpose};
use crate::stats::Welford;

/// Per-state Monte Carlo result: estimate, its standard error and the bound
/// it is compared against.
struct StateCheck {
    estimate: f64,
    stderr: f64,
    bound: f64,
}

impl StateCheck {
    fn violated(&self) -> bool {
        self.estimate - self.bound > 3.0 * self.stderr
    }

    /// Bound minus estimate in units of the bound (or absolute when the
    /// bound is zero).
    fn margin(&self) -> f64 {
        let scale = if self.bound > 0.0 { self.bound } else { 1.0 };
        (self.bound - self.estimate) / scale
    }
}

fn sample_states(
    model: &TargetModel,
    sampler: &StateSampler,
    n: usize,
    seed: u64,
) -> Result<Vec<PhaseState>> {
    let mut rng = stream(seed, Purpose::States, 0);
    (0..n).map(|_| sampler.sample(model, &mut rng)).collect()
}

/// Folds per-state checks into one statistical report. The worst margin and
/// its standard error come from the state with the smallest margin.
fn fold(name: &str, trials: u64, checks: &[StateCheck]) -> VerificationReport {
    let violations = checks.iter().filter(|c| c.violated()).count() as u64;
    let worst = checks
        .iter()
        .min_by(|a, b| a.margin().total_cmp(&b.margin()));
    let (margin, stderr) = worst.map_or((0.0, 0.0), |w| {
        let scale = if w.bound > 0.0 { w.bound } else { 1.0 };
        (w.margin(), w.stderr / scale)
    });
    VerificationReport::statistical_many(name, trials, violations, margin, stderr)
}

/// ln of the mean of e^{a_j}, without overflow or underflow.
fn log_mean_exp(a: &[f64]) -> f64 {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (a.iter().map(|x| (x - m).exp()).sum::<f64>() / a.len() as f64).ln()
}

/// E[e^{H(next)/8}] / e^{H(z)/8} ≤ e^λ for one full MAKLA step, checked per
/// state with `n_trials` transitions each. Ratios are computed as
/// e^{(H(next) − H(z))/8 − λ} against 1 so that large λ cannot overflow.
pub fn lyapunov_drift_check(
    model: &TargetModel,
    plan: &EpochPlan,
    n_states: usize,
    n_trials: usize,
    sampler: &StateSampler,
    seed: u64,
) -> Result<VerificationReport> {
    let params = KernelParams::for_model(model, plan.h, plan.gamma)?;
    let states = sample_states(model, sampler, n_states, seed)?;
    let d = model.dim();
    let checks = states
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let mut rng = stream(seed, Purpose::Trials, i as u64);
            let mut ws = Workspace::new(d);
            let (mut x, mut v) = (z.x.clone(), z.v.clone());
            let (mut xi1, mut xi2) = (vec![0.0; d], vec![0.0; d]);
            let h0 = model.hamiltonian_unchecked(&z.x, &z.v);
            let mut exponents = Vec::with_capacity(n_trials);
            for _ in 0..n_trials {
                x.copy_from_slice(&z.x);
                v.copy_from_slice(&z.v);
                fill_standard_normal(&mut rng, &mut xi1);
                fill_standard_normal(&mut rng, &mut xi2);
                let u = uniform(&mut rng);
                makla_step_in_place(model, &params, &mut x, &mut v, &xi1, &xi2, u, &mut ws)?;
                exponents.push((model.hamiltonian_unchecked(&x, &v) - h0) / 8.0);
            }
            let mut acc = Welford::default();
            exponents
                .iter()
                .for_each(|a| acc.push((a - plan.lambda).exp()));
            let check = StateCheck {
                estimate: acc.mean(),
                stderr: acc.stderr_of_mean(),
                bound: 1.0,
            };
            Ok((check, log_mean_exp(&exponents)))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst_log_ratio = checks.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let checks: Vec<StateCheck> = checks.into_iter().map(|c| c.0).collect();
    Ok(
        fold("lyapunov_drift", (n_states * n_trials) as u64, &checks)
            .with("lambda", plan.lambda)
            .with("worst_log_ratio", worst_log_ratio)
            .with("states", n_states as f64),
    )
}

/// Runs `n_chains` MAKLA chains for 𝔥 steps from the start law and compares
/// the fraction that leave D = {𝓔 ≤ R_U} with the exit bound
/// exp(((1+25C h²)/4)γh𝔥d − ((1−50C𝔥h²)/16)R_U)·ν(e^{H/8}).
pub fn exit_frequency(
    model: &TargetModel,
    plan: &EpochPlan,
    start: &StartSpec,
    n_chains: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if n_chains == 0 {
        return Err(KlaError::InvalidParameter(
            "n_chains must be at least 1".into(),
        ));
    }
    let params = KernelParams::for_model(model, plan.h, plan.gamma)?;
    let log_nu = start.log_lyapunov(model)?;
    let (log_bound, degenerate) = exit_log_bound(plan, log_nu);
    let d = model.dim();
    let exits = (0..n_chains)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Purpose::Chain, i as u64);
            let z = start_state(model, start, &mut rng)?;
            let (mut x, mut v) = (z.x, z.v);
            let mut ws = Workspace::new(d);
            let mut scratch = vec![0.0; d];
            let (mut xi1, mut xi2) = (vec![0.0; d], vec![0.0; d]);
            if model.energy_like_unchecked(&x, &v, &mut scratch) > plan.r_u {
                return Ok(true);
            }
            for _ in 0..plan.horizon {
                fill_standard_normal(&mut rng, &mut xi1);
                fill_standard_normal(&mut rng, &mut xi2);
                let u = uniform(&mut rng);
                makla_step_in_place(model, &params, &mut x, &mut v, &xi1, &xi2, u, &mut ws)?;
                if model.energy_like_unchecked(&x, &v, &mut scratch) > plan.r_u {
                    return Ok(true);
                }
            }
            Ok(false)
        })
        .collect::<Result<Vec<bool>>>()?;
    let n = n_chains as f64;
    let p = exits.iter().filter(|&&e| e).count() as f64 / n;
    let se = (p * (1.0 - p) / n).sqrt();
    // A degenerate exponent makes the bound vacuous, which is reported as +∞.
    let bound = if degenerate {
        f64::INFINITY
    } else {
        log_bound.exp()
    };
    Ok(
        VerificationReport::statistical("exit_frequency", n_chains as u64, p, bound, se)
            .with("frequency", p)
            .with("log_bound", log_bound)
            .with("degenerate", f64::from(u8::from(degenerate)))
            .with("horizon", plan.horizon as f64)
            .with("r_u", plan.r_u),
    )
}

/// A draw from the start law.
pub(crate) fn start_state<R: rand::Rng + ?Sized>(
    model: &TargetModel,
    start: &StartSpec,
    rng: &mut R,
) -> Result<PhaseState> {
    match start {
        StartSpec::Dirac { x, v } => {
            let z = PhaseState::new(x.clone(), v.clone())?;
            z.check_for(model)?;
            Ok(z)
        }
        StartSpec::ProductGaussian => {
            let prec = model.gaussian_precisions().ok_or_else(|| {
                KlaError::Config(format!(
                    "product-gaussian start needs a Gaussian model, got {}",
                    model.name()
                ))
            })?;
            Ok(stationary_draw(&prec, rng))
        }
    }
}

/// Sup-style rejection probability of one adjusted step over sampled states,
/// multiplied by 𝔈 and compared with 1/(3e).
///
/// Per state the rejection probability P(reject | z) = E_ξ[1 − e^{−ΔH⁺}] is
/// estimated by averaging 1 − e^{−ΔH⁺} over `n_trials` draws of the first
/// OU noise. This has the same mean as the 0/1 rejection frequency and a
/// smaller variance.
pub fn rejection_rate_epoch(
    model: &TargetModel,
    plan: &EpochPlan,
    n_states: usize,
    n_trials: usize,
    sampler: &StateSampler,
    seed: u64,
) -> Result<VerificationReport> {
    let params = KernelParams::for_model(model, plan.h, plan.gamma)?;
    let states = sample_states(model, sampler, n_states, seed)?;
    let d = model.dim();
    let per_state = states
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let mut rng = stream(seed, Purpose::Trials, i as u64);
            let mut grad = vec![0.0; d];
            let mut xi = vec![0.0; d];
            let (mut x, mut v) = (z.x.clone(), z.v.clone());
            let mut acc = Welford::default();
            for _ in 0..n_trials {
                x.copy_from_slice(&z.x);
                v.copy_from_slice(&z.v);
                fill_standard_normal(&mut rng, &mut xi);
                ou_half_step_in_place(&mut v, &params, &xi);
                let h0 = model.hamiltonian_unchecked(&x, &v);
                theta_h_in_place(model, &mut x, &mut v, params.h, &mut grad);
                let dh = model.hamiltonian_unchecked(&x, &v) - h0;
                if !dh.is_finite() {
                    return Err(KlaError::Diverged { delta_h: dh });
                }
                acc.push(-(-dh.max(0.0)).exp_m1());
            }
            Ok((acc.mean(), acc.stderr_of_mean()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sup, sup_se) =
        per_state
            .iter()
            .copied()
            .fold((0.0, 0.0), |best, p| if p.0 > best.0 { p } else { best });
    let mean = per_state.iter().map(|p| p.0).sum::<f64>() / n_states.max(1) as f64;
    let e = plan.epoch as f64;
    Ok(VerificationReport::statistical(
        "rejection_rate_epoch",
        (n_states * n_trials) as u64,
        e * sup,
        high_acceptance_threshold(),
        e * sup_se,
    )
    .with("sup_rejection", sup)
    .with("mean_rejection", mean)
    .with("epoch", e)
    .with("theoretical_budget", rejection_budget(model, plan))
    .with("h", plan.h))
}

/// E𝓔(O_{h/2}(ξ)z) ≤ 𝓔(z) + γhd and E𝓔^{3/2}(O_{h/2}(ξ)z) ≤
/// 4(𝓔(z)^{3/2} + 3(γhd)^{3/2}), checked per state.
pub fn ou_moment_bounds(
    model: &TargetModel,
    params: &KernelParams,
    n_states: usize,
    n_trials: usize,
    sampler: &StateSampler,
    seed: u64,
) -> Result<VerificationReport> {
    let states = sample_states(model, sampler, n_states, seed)?;
    let d = model.dim();
    let ghd = params.gamma * params.h * d as f64;
    let pairs = states
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let mut rng = stream(seed, Purpose::Trials, i as u64);
            let mut grad = vec![0.0; d];
            model.gradient_unchecked(&z.x, &mut grad);
            let grad_part = dot(&grad, &grad) / model.l();
            let e0 = dot(&z.v, &z.v) + grad_part;
            let mut xi = vec![0.0; d];
            let mut v = z.v.clone();
            let (mut first, mut second) = (Welford::default(), Welford::default());
            for _ in 0..n_trials {
                v.copy_from_slice(&z.v);
                fill_standard_normal(&mut rng, &mut xi);
                ou_half_step_in_place(&mut v, params, &xi);
                let e = dot(&v, &v) + grad_part;
                first.push(e);
                second.push(e.powf(1.5));
            }
            (
                StateCheck {
                    estimate: first.mean(),
                    stderr: first.stderr_of_mean(),
                    bound: e0 + ghd,
                },
                StateCheck {
                    estimate: second.mean(),
                    stderr: second.stderr_of_mean(),
                    bound: 4.0 * (e0.powf(1.5) + 3.0 * ghd.powf(1.5)),
                },
            )
        })
        .collect::<Vec<_>>();
    let (first, second): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let a = fold("ou_first_moment", (n_states * n_trials) as u64, &first);
    let b = fold(
        "ou_three_halves_moment",
        (n_states * n_trials) as u64,
        &second,
    );
    let mut out = VerificationReport::statistical_many(
        "ou_moment_bounds",
        a.trials + b.trials,
        a.violations + b.violations,
        a.worst_margin.min(b.worst_margin),
        if a.worst_margin <= b.worst_margin {
            a.stderr.unwrap_or(0.0)
        } else {
            b.stderr.unwrap_or(0.0)
        },
    );
    out.metrics
        .insert("violations_first".into(), a.violations as f64);
    out.metrics
        .insert("violations_three_halves".into(), b.violations as f64);
    out.metrics
        .insert("worst_margin_first".into(), a.worst_margin);
    out.metrics
        .insert("worst_margin_three_halves".into(), b.worst_margin);
    Ok(out)
}
