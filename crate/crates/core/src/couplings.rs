//! Couplings of two adjusted chains.
//!
//! * The synchronous coupling feeds both chains the same Gaussian noise and
//!   the same Metropolis uniform. On strongly convex targets the unadjusted
//!   proposals contract in the twisted norm.
//! * The one-shot coupling transports the noise of the first chain through
//!   the implicit map Φ so that both chains land on the same point. It is
//!   realised as a gamma-coupling: accept Φ(ξ) with probability
//!   min(1, φ(Φξ)|det DΦ|/φ(ξ)), otherwise draw the second chain's noise
//!   from the residual law by rejection.
//! * An epoch run alternates 𝔈 − 1 synchronous steps with one one-shot step.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KlaError, Result};
use crate::geometry::TwistedNorm;
use crate::integrator::{
    makla_step_in_place, ukla_step_in_place, KernelParams, StepInfo, Workspace,
};
use crate::model::{dot, PhaseState, TargetModel};
use crate::planner::EpochPlan;
use crate::rng::{fill_standard_normal, uniform};

pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const FIXED_POINT_MAX_ITER: usize = 100;
/// Proposals the residual sampler may use before giving up.
pub const RESIDUAL_MAX_PROPOSALS: usize = 100_000;

/// Two chains advanced jointly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledPair {
    pub z: PhaseState,
    pub z_tilde: PhaseState,
    /// Once true the two states are bitwise equal and stay so.
    pub met: bool,
    pub steps_taken: u64,
    /// MH rejections of the first and the second chain.
    pub rejections: (u64, u64),
    /// Whether either chain was ever seen outside the localisation domain.
    pub exited_domain: bool,
}

impl CoupledPair {
    pub fn new(z: PhaseState, z_tilde: PhaseState) -> Result<Self> {
        if z.dim() != z_tilde.dim() {
            return Err(KlaError::DimensionMismatch {
                expected: z.dim(),
                got: z_tilde.dim(),
            });
        }
        let met = z.bitwise_eq(&z_tilde);
        Ok(Self {
            z,
            z_tilde,
            met,
            steps_taken: 0,
            rejections: (0, 0),
            exited_domain: false,
        })
    }

    fn record(&mut self, a: StepInfo, b: StepInfo) {
        self.steps_taken += 1;
        self.rejections.0 += u64::from(!a.accepted);
        self.rejections.1 += u64::from(!b.accepted);
    }
}

/// Scratch buffers for coupled transitions.
#[derive(Clone, Debug)]
pub struct CoupledWorkspace {
    ws: Workspace,
    ws_tilde: Workspace,
}

impl CoupledWorkspace {
    pub fn new(d: usize) -> Self {
        Self {
            ws: Workspace::new(d),
            ws_tilde: Workspace::new(d),
        }
    }
}

/// What happened in one synchronous transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyncStep {
    pub first: StepInfo,
    pub second: StepInfo,
    /// Whether the pathwise contraction bound is guaranteed for these
    /// parameters. False signals a warning, not an error.
    pub contraction_certified: bool,
}

/// Advances both chains with the same (ξ₁, ξ₂, u).
pub fn synchronous_coupled_step(
    model: &TargetModel,
    pair: &mut CoupledPair,
    params: &KernelParams,
    xi1: &[f64],
    xi2: &[f64],
    u: f64,
    ws: &mut CoupledWorkspace,
) -> Result<SyncStep> {
    let d = model.dim();
    for noise in [xi1, xi2] {
        if noise.len() != d {
            return Err(KlaError::DimensionMismatch {
                expected: d,
                got: noise.len(),
            });
        }
    }
    let first = makla_step_in_place(
        model,
        params,
        &mut pair.z.x,
        &mut pair.z.v,
        xi1,
        xi2,
        u,
        &mut ws.ws,
    )?;
    let second = if pair.met {
        pair.z_tilde.clone_from(&pair.z);
        first
    } else {
        let info = makla_step_in_place(
            model,
            params,
            &mut pair.z_tilde.x,
            &mut pair.z_tilde.v,
            xi1,
            xi2,
            u,
            &mut ws.ws_tilde,
        )?;
        pair.met = pair.z.bitwise_eq(&pair.z_tilde);
        info
    };
    pair.record(first, second);
    let contraction_certified = params.assumptions_hold.unwrap_or_else(|| {
        model.l().sqrt() / params.gamma <= 0.1 && params.gamma * params.h <= 1.0
    });
    Ok(SyncStep {
        first,
        second,
        contraction_certified,
    })
}

/// ‖Ψ(z) − Ψ(z̃)‖_tw / ‖z − z̃‖_tw for the unadjusted transition Ψ driven by
/// (ξ₁, ξ₂). NaN when z = z̃.
pub fn unadjusted_contraction_factor(
    model: &TargetModel,
    z: &PhaseState,
    z_tilde: &PhaseState,
    params: &KernelParams,
    xi1: &[f64],
    xi2: &[f64],
    tn: &TwistedNorm,
) -> f64 {
    let before = tn.distance(z, z_tilde);
    let mut grad = vec![0.0; model.dim()];
    let (mut a, mut b) = (z.clone(), z_tilde.clone());
    ukla_step_in_place(model, params, &mut a.x, &mut a.v, xi1, xi2, &mut grad);
    ukla_step_in_place(model, params, &mut b.x, &mut b.v, xi1, xi2, &mut grad);
    tn.distance(&a, &b) / before
}

/// Output of the one-shot map Φ.
#[derive(Clone, Debug, PartialEq)]
pub struct OneShotMap {
    /// (ã₁, ã₂), the noise that sends z̃ where (a₁, a₂) sends z.
    pub noise_tilde: (Vec<f64>, Vec<f64>),
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm mismatch of the two OABAO outputs.
    pub residual: f64,
    x_star: Vec<f64>,
    x_star_tilde: Vec<f64>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|p| p.abs()).fold(0.0, f64::max)
}

fn check_pair_inputs(
    model: &TargetModel,
    z: &PhaseState,
    z_tilde: &PhaseState,
    a1: &[f64],
    a2: &[f64],
) -> Result<()> {
    z.check_for(model)?;
    z_tilde.check_for(model)?;
    for a in [a1, a2] {
        if a.len() != model.dim() {
            return Err(KlaError::DimensionMismatch {
                expected: model.dim(),
                got: a.len(),
            });
        }
    }
    Ok(())
}

/// Solves for (ã₁, ã₂) such that O(ã₂)∘θ_h∘O(ã₁)(z̃) = O(a₂)∘θ_h∘O(a₁)(z).
///
/// The post-OU velocity w of the second chain solves the position equation
/// w = (x'' − x̃ + (h²/2)∇U(x̃ + (h/2)w))/h, a contraction with factor at
/// most Lh²/4; ã₂ then follows from the velocity equation.
pub fn one_shot_map(
    model: &TargetModel,
    z: &PhaseState,
    z_tilde: &PhaseState,
    params: &KernelParams,
    a1: &[f64],
    a2: &[f64],
) -> Result<OneShotMap> {
    check_pair_inputs(model, z, z_tilde, a1, a2)?;
    let d = model.dim();
    let (h, dec, s) = (params.h, params.ou_decay, params.ou_noise_scale);
    let half = 0.5 * h;

    // First chain.
    let v_o: Vec<f64> = z.v.iter().zip(a1).map(|(v, a)| dec * v + s * a).collect();
    let x_star: Vec<f64> = z.x.iter().zip(&v_o).map(|(x, v)| x + half * v).collect();

    if z.bitwise_eq(z_tilde) {
        return Ok(OneShotMap {
            noise_tilde: (a1.to_vec(), a2.to_vec()),
            converged: true,
            iterations: 1,
            residual: 0.0,
            x_star_tilde: x_star.clone(),
            x_star,
        });
    }

    let mut grad = vec![0.0; d];
    model.gradient_unchecked(&x_star, &mut grad);
    let v_prime: Vec<f64> = v_o.iter().zip(&grad).map(|(v, g)| v - h * g).collect();
    let x_end: Vec<f64> = x_star
        .iter()
        .zip(&v_prime)
        .map(|(x, v)| x + half * v)
        .collect();
    let v_end: Vec<f64> = v_prime
        .iter()
        .zip(a2)
        .map(|(v, a)| dec * v + s * a)
        .collect();

    // Second chain: fixed point on its post-OU velocity.
    let mut w: Vec<f64> = v_o
        .iter()
        .zip(z.x.iter().zip(&z_tilde.x))
        .map(|(v, (x, xt))| v + (x - xt) / h)
        .collect();
    let mut xt_star = vec![0.0; d];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < FIXED_POINT_MAX_ITER {
        iterations += 1;
        for i in 0..d {
            xt_star[i] = z_tilde.x[i] + half * w[i];
        }
        model.gradient_unchecked(&xt_star, &mut grad);
        let mut change: f64 = 0.0;
        for i in 0..d {
            let next = (x_end[i] - z_tilde.x[i] + 0.5 * h * h * grad[i]) / h;
            change = change.max((next - w[i]).abs());
            w[i] = next;
        }
        if change <= FIXED_POINT_TOL * max_abs(&w).max(1.0) {
            converged = true;
            break;
        }
    }
    for i in 0..d {
        xt_star[i] = z_tilde.x[i] + half * w[i];
    }
    model.gradient_unchecked(&xt_star, &mut grad);
    let vt_prime: Vec<f64> = w.iter().zip(&grad).map(|(v, g)| v - h * g).collect();
    let a1t: Vec<f64> = w
        .iter()
        .zip(&z_tilde.v)
        .map(|(w, v)| (w - dec * v) / s)
        .collect();
    let a2t: Vec<f64> = v_end
        .iter()
        .zip(&vt_prime)
        .map(|(ve, v)| (ve - dec * v) / s)
        .collect();

    // Forward check of the second chain with the transported noise.
    let mut check = z_tilde.clone();
    ukla_step_in_place(
        model,
        params,
        &mut check.x,
        &mut check.v,
        &a1t,
        &a2t,
        &mut grad,
    );
    let residual = max_abs_diff(&check.x, &x_end).max(max_abs_diff(&check.v, &v_end));

    Ok(OneShotMap {
        noise_tilde: (a1t, a2t),
        converged,
        iterations,
        residual,
        x_star,
        x_star_tilde: xt_star,
    })
}

/// The nontrivial Jacobian block M = ∂ã₁/∂a₁ and log|det DΦ| = log|det M|.
#[derive(Clone, Debug, PartialEq)]
pub struct OneShotJacobian {
    pub m: DMatrix<f64>,
    pub log_det: f64,
}

fn one_shot_jacobian_at(
    model: &TargetModel,
    params: &KernelParams,
    map: &OneShotMap,
) -> Result<OneShotJacobian> {
    let d = model.dim();
    let c = 0.25 * params.h * params.h;
    let identity = DMatrix::<f64>::identity(d, d);
    let a = &identity - model.hessian_unchecked(&map.x_star) * c;
    let b = &identity - model.hessian_unchecked(&map.x_star_tilde) * c;
    let det_a = a.clone().lu().determinant();
    let lu_b = b.lu();
    let det_b = lu_b.determinant();
    if det_a == 0.0 || det_b == 0.0 || !det_a.is_finite() || !det_b.is_finite() {
        return Err(KlaError::SingularJacobian);
    }
    let m = lu_b.solve(&a).ok_or(KlaError::SingularJacobian)?;
    Ok(OneShotJacobian {
        m,
        log_det: det_a.abs().ln() - det_b.abs().ln(),
    })
}

/// M and log|det M| at noise (a₁, a₂).
pub fn one_shot_jacobian(
    model: &TargetModel,
    z: &PhaseState,
    z_tilde: &PhaseState,
    params: &KernelParams,
    a1: &[f64],
    a2: &[f64],
) -> Result<OneShotJacobian> {
    let map = one_shot_map(model, z, z_tilde, params, a1, a2)?;
    one_shot_jacobian_at(model, params, &map)
}

fn log_ratio(a1: &[f64], a2: &[f64], map: &OneShotMap, log_det: f64) -> f64 {
    let (t1, t2) = &map.noise_tilde;
    0.5 * (dot(a1, a1) + dot(a2, a2)) - 0.5 * (dot(t1, t1) + dot(t2, t2)) + log_det
}

/// φ(Φ(a))·|det DΦ(a)| / φ(a) and log|det DΦ(a)|.
pub fn one_shot_accept_ratio(
    model: &TargetModel,
    z: &PhaseState,
    z_tilde: &PhaseState,
    params: &KernelParams,
    a1: &[f64],
    a2: &[f64],
) -> Result<(f64, f64)> {
    let map = one_shot_map(model, z, z_tilde, params, a1, a2)?;
    if !map.converged {
        return Err(KlaError::NonConvergence {
            what: "one-shot fixed point",
            iterations: map.iterations,
        });
    }
    let jac = one_shot_jacobian_at(model, params, &map)?;
    Ok((log_ratio(a1, a2, &map, jac.log_det).exp(), jac.log_det))
}

/// What happened in one one-shot transition.
#[derive(Clone, Debug, PartialEq)]
pub struct OneShotResult {
    /// The noise the second chain consumed.
    pub noise_pair_tilde: (Vec<f64>, Vec<f64>),
    pub converged: bool,
    pub iterations: usize,
    pub accept_ratio: f64,
    /// Whether the transported noise Φ(ξ) was used.
    pub transported: bool,
    /// Proposals drawn by the residual sampler (0 when transported).
    pub residual_proposals: usize,
    pub first: StepInfo,
    pub second: StepInfo,
    pub met: bool,
}

/// The gamma-coupling transition. On an already met pair this is a plain
/// synchronous step.
pub fn one_shot_coupled_step<R: Rng + ?Sized>(
    model: &TargetModel,
    pair: &mut CoupledPair,
    params: &KernelParams,
    rng: &mut R,
) -> Result<OneShotResult> {
    let d = model.dim();
    let mut a1 = vec![0.0; d];
    let mut a2 = vec![0.0; d];
    fill_standard_normal(rng, &mut a1);
    fill_standard_normal(rng, &mut a2);
    let u = uniform(rng);
    let w = uniform(rng);
    let mut ws = CoupledWorkspace::new(d);

    if pair.met {
        let step = synchronous_coupled_step(model, pair, params, &a1, &a2, u, &mut ws)?;
        return Ok(OneShotResult {
            noise_pair_tilde: (a1, a2),
            converged: true,
            iterations: 0,
            accept_ratio: 1.0,
            transported: true,
            residual_proposals: 0,
            first: step.first,
            second: step.second,
            met: true,
        });
    }

    let map = one_shot_map(model, &pair.z, &pair.z_tilde, params, &a1, &a2)?;
    if !map.converged {
        return Err(KlaError::NonConvergence {
            what: "one-shot fixed point",
            iterations: map.iterations,
        });
    }
    let jac = one_shot_jacobian_at(model, params, &map)?;
    let ratio = log_ratio(&a1, &a2, &map, jac.log_det).exp();
    let transported = w < ratio.min(1.0);

    let (b1, b2, residual_proposals) = if transported {
        let (t1, t2) = map.noise_tilde.clone();
        (t1, t2, 0)
    } else {
        // Residual law ∝ (φ − density of Φ(ξ))⁺, sampled by proposing from φ
        // and accepting with probability 1 − min(1, ratio of the inverse map).
        let mut y1 = vec![0.0; d];
        let mut y2 = vec![0.0; d];
        let mut proposals = 0;
        let mut last_ratio = f64::NAN;
        loop {
            if proposals == RESIDUAL_MAX_PROPOSALS {
                return Err(KlaError::ResidualExhausted {
                    proposals,
                    last_ratio,
                });
            }
            proposals += 1;
            fill_standard_normal(rng, &mut y1);
            fill_standard_normal(rng, &mut y2);
            let (r, _) = one_shot_accept_ratio(model, &pair.z_tilde, &pair.z, params, &y1, &y2)?;
            last_ratio = r;
            if uniform(rng) >= r.min(1.0) {
                break;
            }
        }
        (y1, y2, proposals)
    };

    let mut ws_pair = CoupledWorkspace::new(d);
    let first = makla_step_in_place(
        model,
        params,
        &mut pair.z.x,
        &mut pair.z.v,
        &a1,
        &a2,
        u,
        &mut ws_pair.ws,
    )?;
    let second = makla_step_in_place(
        model,
        params,
        &mut pair.z_tilde.x,
        &mut pair.z_tilde.v,
        &b1,
        &b2,
        u,
        &mut ws_pair.ws_tilde,
    )?;
    pair.record(first, second);

    if transported && first.accepted && second.accepted {
        let scale = 1.0 + max_abs(&pair.z.x).max(max_abs(&pair.z.v));
        let gap =
            max_abs_diff(&pair.z.x, &pair.z_tilde.x).max(max_abs_diff(&pair.z.v, &pair.z_tilde.v));
        if gap > 1e-8 * scale {
            return Err(KlaError::NonConvergence {
                what: "one-shot meeting (outputs disagree)",
                iterations: map.iterations,
            });
        }
        pair.z_tilde.clone_from(&pair.z);
        pair.met = true;
    } else {
        pair.met = pair.z.bitwise_eq(&pair.z_tilde);
    }

    Ok(OneShotResult {
        noise_pair_tilde: (b1, b2),
        converged: map.converged,
        iterations: map.iterations,
        accept_ratio: ratio,
        transported,
        residual_proposals,
        first,
        second,
        met: pair.met,
    })
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// (1/2)·sqrt(E[|Φξ − ξ|² + 2tr(DΦ − I) − 2 log|det DΦ|]) over ξ ~ N(0, I),
/// an upper bound on TV(Law(ξ), Law(Φξ)).
pub fn tv_overlap_estimate<R: Rng + ?Sized>(
    model: &TargetModel,
    z: &PhaseState,
    z_tilde: &PhaseState,
    params: &KernelParams,
    n_samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if n_samples == 0 {
        return Err(KlaError::InvalidParameter(
            "n_samples must be at least 1".into(),
        ));
    }
    if z.bitwise_eq(z_tilde) {
        return Ok(Estimate {
            value: 0.0,
            stderr: 0.0,
        });
    }
    let d = model.dim();
    let mut a1 = vec![0.0; d];
    let mut a2 = vec![0.0; d];
    let mut acc = crate::stats::Welford::default();
    for _ in 0..n_samples {
        fill_standard_normal(rng, &mut a1);
        fill_standard_normal(rng, &mut a2);
        let map = one_shot_map(model, z, z_tilde, params, &a1, &a2)?;
        let jac = one_shot_jacobian_at(model, params, &map)?;
        let (t1, t2) = &map.noise_tilde;
        let shift: f64 = t1
            .iter()
            .zip(&a1)
            .chain(t2.iter().zip(&a2))
            .map(|(p, q)| (p - q).powi(2))
            .sum();
        let trace = jac.m.trace() - d as f64;
        acc.push(shift + 2.0 * trace - 2.0 * jac.log_det);
    }
    let mean = acc.mean().max(0.0);
    let value = 0.5 * mean.sqrt();
    let se_mean = acc.stderr_of_mean();
    let stderr = if mean > 0.0 {
        se_mean / (4.0 * mean.sqrt())
    } else {
        0.0
    };
    Ok(Estimate { value, stderr })
}

/// One epoch of an epoch run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochOutcome {
    pub index: u64,
    /// A rejection occurred in either chain during the epoch.
    pub rejected: bool,
    /// Either chain was outside D at some point of the epoch.
    pub exited: bool,
    /// The pair had met by the end of the epoch.
    pub met: bool,
    /// Whether the one-shot step used the transported noise (None when the
    /// pair met before reaching it).
    pub transported: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epochs: Vec<EpochOutcome>,
    /// Step count at which the pair met.
    pub meeting_step: Option<u64>,
    /// First step at which either chain was seen outside D before meeting.
    pub first_exit_step: Option<u64>,
    pub steps: u64,
}

/// One row of a per-step trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub met: bool,
    pub in_domain: bool,
    pub rejected: bool,
    pub delta_h: f64,
    pub twisted_distance: f64,
}

/// Runs up to k epochs of 𝔈 − 1 synchronous steps plus one one-shot step,
/// stopping as soon as the chains meet.
pub fn epoch_coupled_run<R: Rng + ?Sized>(
    model: &TargetModel,
    pair: &mut CoupledPair,
    plan: &EpochPlan,
    rng: &mut R,
    mut trace: Option<&mut dyn FnMut(&TraceRow)>,
) -> Result<EpochReport> {
    let start = pair.steps_taken;
    if pair.met {
        return Ok(EpochReport {
            epochs: Vec::new(),
            meeting_step: Some(start),
            first_exit_step: None,
            steps: 0,
        });
    }
    let d = model.dim();
    let params = KernelParams::for_model(model, plan.h, plan.gamma)?;
    let tn = TwistedNorm::new(plan.gamma, plan.h)?;
    let mut ws = CoupledWorkspace::new(d);
    let mut scratch = vec![0.0; d];
    let mut xi1 = vec![0.0; d];
    let mut xi2 = vec![0.0; d];
    let mut epochs = Vec::new();
    let mut meeting_step = None;
    let mut first_exit_step = None;

    let in_domain = |pair: &CoupledPair, scratch: &mut [f64]| {
        model.energy_like_unchecked(&pair.z.x, &pair.z.v, scratch) <= plan.r_u
            && model.energy_like_unchecked(&pair.z_tilde.x, &pair.z_tilde.v, scratch) <= plan.r_u
    };
    if !in_domain(pair, &mut scratch) {
        pair.exited_domain = true;
        first_exit_step = Some(start);
    }

    for index in 0..plan.k {
        let mut outcome = EpochOutcome {
            index,
            rejected: false,
            exited: pair.exited_domain,
            met: false,
            transported: None,
        };
        for within in 0..plan.epoch {
            let (info, transported) = if within + 1 < plan.epoch {
                fill_standard_normal(rng, &mut xi1);
                fill_standard_normal(rng, &mut xi2);
                let u = uniform(rng);
                let s = synchronous_coupled_step(model, pair, &params, &xi1, &xi2, u, &mut ws)?;
                ((s.first, s.second), None)
            } else {
                let r = one_shot_coupled_step(model, pair, &params, rng)?;
                ((r.first, r.second), Some(r.transported))
            };
            outcome.rejected |= !(info.0.accepted && info.1.accepted);
            if transported.is_some() {
                outcome.transported = transported;
            }
            let inside = in_domain(pair, &mut scratch);
            if !inside {
                outcome.exited = true;
                if !pair.exited_domain {
                    pair.exited_domain = true;
                    if !pair.met {
                        first_exit_step = Some(pair.steps_taken);
                    }
                }
            }
            if let Some(sink) = trace.as_deref_mut() {
                sink(&TraceRow {
                    step: pair.steps_taken,
                    met: pair.met,
                    in_domain: inside,
                    rejected: !(info.0.accepted && info.1.accepted),
                    delta_h: info.0.delta_h,
                    twisted_distance: tn.distance(&pair.z, &pair.z_tilde),
                });
            }
            if pair.met {
                meeting_step = Some(pair.steps_taken);
                break;
            }
        }
        outcome.met = pair.met;
        epochs.push(outcome);
        if pair.met {
            break;
        }
    }
    Ok(EpochReport {
        epochs,
        meeting_step,
        first_exit_step,
        steps: pair.steps_taken - start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::ukla_step;
    use crate::planner::{build_plan, contraction_rate};
    use crate::rng::{standard_normal_vec, stream, Purpose};
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn state(x: &[f64], v: &[f64]) -> PhaseState {
        PhaseState::new(x.to_vec(), v.to_vec()).unwrap()
    }

    fn params() -> KernelParams {
        KernelParams::new(0.05, 10.0).unwrap()
    }

    /// Solves F_z̃(ã) = F_z(a) by assembling the affine UKLA map of the second
    /// chain column by column and calling a dense LU solve.
    fn linear_oracle(
        m: &TargetModel,
        z: &PhaseState,
        zt: &PhaseState,
        p: &KernelParams,
        a1: &[f64],
        a2: &[f64],
    ) -> Vec<f64> {
        let d = m.dim();
        let flat = |s: PhaseState| DVector::from_vec([s.x, s.v].concat());
        let target = flat(ukla_step(m, z, p, a1, a2).unwrap());
        let zero = vec![0.0; d];
        let base = flat(ukla_step(m, zt, p, &zero, &zero).unwrap());
        let mut jac = DMatrix::zeros(2 * d, 2 * d);
        for j in 0..2 * d {
            let mut e = vec![0.0; 2 * d];
            e[j] = 1.0;
            let col = flat(ukla_step(m, zt, p, &e[..d], &e[d..]).unwrap()) - &base;
            jac.set_column(j, &col);
        }
        jac.lu()
            .solve(&(target - base))
            .unwrap()
            .as_slice()
            .to_vec()
    }

    #[test]
    fn synchronous_step_keeps_met_pairs_identical() {
        let m = TargetModel::perturbed_example(3).unwrap();
        let z = state(&[0.5, -1.0, 2.0], &[0.1, 0.2, 0.3]);
        let mut pair = CoupledPair::new(z.clone(), z).unwrap();
        assert!(pair.met);
        let mut ws = CoupledWorkspace::new(3);
        let mut rng = stream(5, Purpose::Chain, 0);
        for _ in 0..1000 {
            let (xi1, xi2) = (
                standard_normal_vec(&mut rng, 3),
                standard_normal_vec(&mut rng, 3),
            );
            let u = uniform(&mut rng);
            synchronous_coupled_step(&m, &mut pair, &params(), &xi1, &xi2, u, &mut ws).unwrap();
            assert!(pair.met && pair.z.bitwise_eq(&pair.z_tilde));
        }
        assert_eq!(pair.rejections.0, pair.rejections.1);
    }

    #[test]
    fn synchronous_step_flags_uncertified_parameters() {
        let m = TargetModel::isotropic_gaussian(2, 1.0).unwrap();
        let mut pair = CoupledPair::new(
            state(&[1.0, 0.0], &[0.0, 0.0]),
            state(&[0.0, 1.0], &[0.0, 0.0]),
        )
        .unwrap();
        let mut ws = CoupledWorkspace::new(2);
        let good = KernelParams::for_model(&m, 0.05, 10.0).unwrap();
        let bad = KernelParams::for_model(&m, 0.05, 5.0).unwrap();
        assert!(
            synchronous_coupled_step(&m, &mut pair, &good, &[0.0; 2], &[0.0; 2], 0.5, &mut ws)
                .unwrap()
                .contraction_certified
        );
        assert!(
            !synchronous_coupled_step(&m, &mut pair, &bad, &[0.0; 2], &[0.0; 2], 0.5, &mut ws)
                .unwrap()
                .contraction_certified
        );
    }

    #[test]
    fn contraction_holds_for_random_pairs() {
        let m = TargetModel::isotropic_gaussian(3, 1.0).unwrap();
        let p = params();
        let tn = TwistedNorm::new(p.gamma, p.h).unwrap();
        let c = contraction_rate(1.0, 10.0);
        let mut rng = stream(9, Purpose::Trials, 0);
        for _ in 0..1000 {
            let z = state(
                &standard_normal_vec(&mut rng, 3),
                &standard_normal_vec(&mut rng, 3),
            );
            let zt = state(
                &standard_normal_vec(&mut rng, 3),
                &standard_normal_vec(&mut rng, 3),
            );
            let (xi1, xi2) = (
                standard_normal_vec(&mut rng, 3),
                standard_normal_vec(&mut rng, 3),
            );
            let f = unadjusted_contraction_factor(&m, &z, &zt, &p, &xi1, &xi2, &tn);
            assert!(f <= 1.0 - c * p.h, "{f}");
        }
    }

    #[test]
    fn one_shot_map_identity_on_equal_states() {
        let m = TargetModel::perturbed_example(2).unwrap();
        let z = state(&[0.3, 0.1], &[-1.0, 2.0]);
        let out = one_shot_map(&m, &z, &z, &params(), &[0.5, -0.5], &[1.0, 2.0]).unwrap();
        assert_eq!(out.noise_tilde, (vec![0.5, -0.5], vec![1.0, 2.0]));
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert_eq!(
            one_shot_accept_ratio(&m, &z, &z, &params(), &[0.5, -0.5], &[1.0, 2.0]).unwrap(),
            (1.0, 0.0)
        );
    }

    #[test]
    fn one_shot_map_matches_linear_solve_on_gaussians() {
        let mut rng = stream(21, Purpose::Trials, 0);
        for model in [
            TargetModel::isotropic_gaussian(3, 1.0).unwrap(),
            TargetModel::diagonal_gaussian(vec![0.3, 1.0, 0.8]).unwrap(),
        ] {
            for _ in 0..20 {
                let z = state(
                    &standard_normal_vec(&mut rng, 3),
                    &standard_normal_vec(&mut rng, 3),
                );
                let zt = state(
                    &standard_normal_vec(&mut rng, 3),
                    &standard_normal_vec(&mut rng, 3),
                );
                let (a1, a2) = (
                    standard_normal_vec(&mut rng, 3),
                    standard_normal_vec(&mut rng, 3),
                );
                let out = one_shot_map(&model, &z, &zt, &params(), &a1, &a2).unwrap();
                let oracle = linear_oracle(&model, &z, &zt, &params(), &a1, &a2);
                let got = [out.noise_tilde.0.clone(), out.noise_tilde.1.clone()].concat();
                for (g, o) in got.iter().zip(&oracle) {
                    assert!((g - o).abs() < 1e-10, "{g} vs {o}");
                }
            }
        }
    }

    #[test]
    fn isotropic_jacobian_is_identity() {
        let m = TargetModel::isotropic_gaussian(4, 1.0).unwrap();
        let z = state(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]);
        let zt = state(&[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]);
        let jac = one_shot_jacobian(&m, &z, &zt, &params(), &[0.1; 4], &[0.2; 4]).unwrap();
        assert_eq!(jac.log_det, 0.0);
        assert!((jac.m - DMatrix::identity(4, 4)).abs().max() < 1e-15);
    }

    #[test]
    fn perturbed_jacobian_matches_finite_differences() {
        let mut rng = stream(33, Purpose::Trials, 0);
        // A larger step makes det M visibly different from 1.
        let p = KernelParams::new(0.3, 3.0).unwrap();
        for d in 1..=5 {
            let m = TargetModel::perturbed_example(d).unwrap();
            let z = state(
                &standard_normal_vec(&mut rng, d),
                &standard_normal_vec(&mut rng, d),
            );
            let zt = state(
                &standard_normal_vec(&mut rng, d),
                &standard_normal_vec(&mut rng, d),
            );
            let (a1, a2) = (
                standard_normal_vec(&mut rng, d),
                standard_normal_vec(&mut rng, d),
            );
            let jac = one_shot_jacobian(&m, &z, &zt, &p, &a1, &a2).unwrap();
            let eps = 1e-6;
            let mut fd = DMatrix::zeros(d, d);
            for j in 0..d {
                let mut plus = a1.clone();
                let mut minus = a1.clone();
                plus[j] += eps;
                minus[j] -= eps;
                let fp = one_shot_map(&m, &z, &zt, &p, &plus, &a2)
                    .unwrap()
                    .noise_tilde
                    .0;
                let fm = one_shot_map(&m, &z, &zt, &p, &minus, &a2)
                    .unwrap()
                    .noise_tilde
                    .0;
                for i in 0..d {
                    fd[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
                }
            }
            let det_fd = fd.determinant();
            assert!(
                (det_fd - jac.log_det.exp()).abs() < 1e-5,
                "d = {d}: {det_fd} vs {}",
                jac.log_det.exp()
            );
            assert!(
                (det_fd - 1.0).abs() > 1e-4,
                "test should exercise a nontrivial determinant"
            );
        }
    }

    #[test]
    fn one_shot_meets_equal_states() {
        let m = TargetModel::perturbed_example(2).unwrap();
        let z = state(&[0.3, 0.1], &[-1.0, 2.0]);
        let mut pair = CoupledPair::new(z.clone(), z).unwrap();
        let mut rng = stream(1, Purpose::Coupling, 0);
        let r = one_shot_coupled_step(&m, &mut pair, &params(), &mut rng).unwrap();
        assert!(r.met && pair.met && r.accept_ratio == 1.0);
    }

    #[test]
    fn one_shot_meets_close_states_and_keeps_them_identical() {
        let m = TargetModel::perturbed_example(2).unwrap();
        let mut rng = stream(2, Purpose::Coupling, 0);
        let mut met = 0;
        for _ in 0..200 {
            let mut pair = CoupledPair::new(
                state(&[0.3, 0.1], &[-1.0, 2.0]),
                state(&[0.3001, 0.1], &[-1.0, 2.0]),
            )
            .unwrap();
            let r = one_shot_coupled_step(&m, &mut pair, &params(), &mut rng).unwrap();
            if r.met {
                met += 1;
                assert!(pair.z.bitwise_eq(&pair.z_tilde));
            }
        }
        assert!(met > 150, "met {met} of 200");
    }

    #[test]
    fn overlap_estimate_vanishes_on_equal_states() {
        let m = TargetModel::isotropic_gaussian(2, 1.0).unwrap();
        let z = state(&[1.0, 2.0], &[0.0, 1.0]);
        let mut rng = stream(4, Purpose::Trials, 0);
        let est = tv_overlap_estimate(&m, &z, &z, &params(), 10, &mut rng).unwrap();
        assert_eq!((est.value, est.stderr), (0.0, 0.0));
        assert!(tv_overlap_estimate(&m, &z, &z, &params(), 0, &mut rng).is_err());
    }

    #[test]
    fn epoch_run_on_met_pair_returns_immediately() {
        let m = TargetModel::isotropic_gaussian(2, 1.0).unwrap();
        let plan = build_plan(&m, &params(), 0.1, 0.0).unwrap();
        let z = state(&[1.0, 2.0], &[0.0, 1.0]);
        let mut pair = CoupledPair::new(z.clone(), z).unwrap();
        let mut rng = stream(4, Purpose::Coupling, 0);
        let report = epoch_coupled_run(&m, &mut pair, &plan, &mut rng, None).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(report.meeting_step, Some(0));
        assert_eq!(pair.rejections, (0, 0));
    }

    #[test]
    fn epoch_run_meets_from_nearby_start() {
        let m = TargetModel::isotropic_gaussian(2, 1.0).unwrap();
        let mut plan = build_plan(&m, &params(), 0.1, 0.0).unwrap();
        // A short epoch so that the one-shot step is reached quickly.
        plan.epoch = 50;
        plan.horizon = 50 * plan.k;
        let mut pair = CoupledPair::new(
            state(&[1.0, 2.0], &[0.0, 1.0]),
            state(&[1.0, 2.001], &[0.0, 1.0]),
        )
        .unwrap();
        let mut rng = stream(6, Purpose::Coupling, 0);
        let mut rows = 0u64;
        let mut sink = |r: &TraceRow| {
            rows += 1;
            assert_eq!(r.step, rows);
        };
        let report = epoch_coupled_run(&m, &mut pair, &plan, &mut rng, Some(&mut sink)).unwrap();
        let met_at = report.meeting_step.expect("nearby chains meet");
        assert_eq!(rows, met_at);
        assert!(pair.met && pair.z.bitwise_eq(&pair.z_tilde));
        assert!(report.epochs.last().unwrap().met);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn one_shot_map_round_trip_and_residual(
            d in 1usize..=4,
            raw in prop::collection::vec(-2.0f64..2.0, 16),
            gap in prop::collection::vec(-0.5f64..0.5, 8),
        ) {
            let m = TargetModel::perturbed_example(d).unwrap();
            let p = params();
            let z = state(&raw[..d], &raw[4..4 + d]);
            let zt = state(
                &z.x.iter().zip(&gap).map(|(a, b)| a + b).collect::<Vec<_>>(),
                &z.v.iter().zip(&gap[4..]).map(|(a, b)| a + b).collect::<Vec<_>>(),
            );
            let (a1, a2) = (&raw[8..8 + d], &raw[12..12 + d]);
            let fwd = one_shot_map(&m, &z, &zt, &p, a1, a2).unwrap();
            prop_assert!(fwd.converged);
            prop_assert!(fwd.iterations < 10);
            prop_assert!(fwd.residual <= 1e-10, "residual {}", fwd.residual);
            let back = one_shot_map(&m, &zt, &z, &p, &fwd.noise_tilde.0, &fwd.noise_tilde.1).unwrap();
            for (r, a) in back.noise_tilde.0.iter().chain(&back.noise_tilde.1).zip(a1.iter().chain(a2)) {
                prop_assert!((r - a).abs() < 1e-8, "{r} vs {a}");
            }
        }
    }
}
