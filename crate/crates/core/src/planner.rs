//! Experiment planning: the derived constants of the epoch-based mixing
//! argument and the certificates that make a configuration admissible.
//!
//! An epoch is 𝔈 − 1 contractive synchronous steps followed by one one-shot
//! step; k = ⌈ln(2/ε)⌉ epochs make up the horizon 𝔥 = 𝔈·k. The localisation
//! domain is D = {𝓔 ≤ R_U}, where R_U is chosen large enough that the chains
//! leave D before 𝔥 with probability at most ε/4.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{KlaError, Result};
use crate::integrator::KernelParams;
use crate::model::{PhaseState, TargetModel};

const FIXED_POINT_RTOL: f64 = 1e-9;
const FIXED_POINT_MAX_ITER: usize = 1000;
/// Relative slack on the `≤` comparisons, absorbing rounding in products
/// such as γ·h at the boundary γh = 1.
const CMP_RTOL: f64 = 1e-12;
pub const BISECTION_LOWER: f64 = 1e-8;

fn le(a: f64, b: f64) -> bool {
    a <= b + CMP_RTOL * b.abs()
}

/// 34·√e, the denominator of the contraction rate.
pub fn contraction_denominator() -> f64 {
    34.0 * E.sqrt()
}

/// c = min(K/γ, γ)/(34√e). The synchronous coupling contracts the twisted
/// distance by at least (1 − c·h) per unadjusted step.
pub fn contraction_rate(k: f64, gamma: f64) -> f64 {
    (k / gamma).min(gamma) / contraction_denominator()
}

/// The start distribution of the first chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StartSpec {
    Dirac {
        x: Vec<f64>,
        v: Vec<f64>,
    },
    /// The stationary law itself, available for the Gaussian kinds.
    ProductGaussian,
}

impl StartSpec {
    /// log ν(e^{H/8}).
    pub fn log_lyapunov(&self, model: &TargetModel) -> Result<f64> {
        match self {
            StartSpec::Dirac { x, v } => {
                let z = PhaseState::new(x.clone(), v.clone())?;
                Ok(model.hamiltonian(&z)? / 8.0)
            }
            StartSpec::ProductGaussian => {
                if model.gaussian_precisions().is_none() {
                    return Err(KlaError::Config(format!(
                        "product-gaussian start needs a Gaussian model, got {}",
                        model.name()
                    )));
                }
                Ok(model.dim() as f64 * (8.0f64 / 7.0).ln())
            }
        }
    }
}

/// Verdicts on the step-size and friction conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// √L/γ ≤ 1/10
    pub friction: bool,
    /// γh ≤ 1
    pub step: bool,
    /// (1 + 25·4L·h²)²·max(γh, 1) ≤ 4
    pub exit_step: bool,
    /// Lh² ≤ 1
    pub energy_step: bool,
    /// 400·L·𝔥·h² ≤ 1, when a horizon was supplied.
    pub horizon: Option<bool>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.friction
            && self.step
            && self.exit_step
            && self.energy_step
            && self.horizon.unwrap_or(true)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.friction {
            out.push("sqrt(L)/gamma <= 1/10");
        }
        if !self.step {
            out.push("gamma*h <= 1");
        }
        if !self.exit_step {
            out.push("(1 + 100 L h^2)^2 max(gamma h, 1) <= 4");
        }
        if !self.energy_step {
            out.push("L h^2 <= 1");
        }
        if self.horizon == Some(false) {
            out.push("400 L horizon h^2 <= 1");
        }
        out
    }
}

pub fn check_assumptions(
    model: &TargetModel,
    params: &KernelParams,
    horizon: Option<u64>,
) -> AssumptionReport {
    let (l, h, g) = (model.l(), params.h, params.gamma);
    let c_dh = 4.0 * l;
    AssumptionReport {
        friction: le(l.sqrt() / g, 0.1),
        step: le(g * h, 1.0),
        exit_step: le((1.0 + 25.0 * c_dh * h * h).powi(2) * (g * h).max(1.0), 4.0),
        energy_step: le(l * h * h, 1.0),
        horizon: horizon.map(|hz| le(400.0 * l * hz as f64 * h * h, 1.0)),
    }
}

/// Every derived constant of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub d: usize,
    pub h: f64,
    pub gamma: f64,
    pub eps: f64,
    pub rho: f64,
    pub c_reg: f64,
    #[serde(rename = "R_U")]
    pub r_u: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub epoch: u64,
    pub k: u64,
    pub horizon: u64,
    pub lambda: f64,
    /// C_ΔH = 4L.
    pub c_delta_h: f64,
    pub log_nu_lyap: f64,
    /// (d/2)·ln(2κ), the bound used for the stationary law.
    pub log_mu_lyap_bound: f64,
    pub fixed_point_iterations: usize,
}

/// 𝔈 = ⌈ρ⁻¹ ln(3e·C_Reg·R)⌉ + 1.
pub fn epoch_length(rho: f64, c_reg: f64, r: f64) -> u64 {
    let steps = ((3.0 * E * c_reg * r).ln() / rho).ceil() + 1.0;
    steps.max(2.0) as u64
}

/// k = ⌈ln(2/ε)⌉.
pub fn epochs_for(eps: f64) -> u64 {
    (2.0 / eps).ln().ceil().max(1.0) as u64
}

/// λ = (1/8)[2(1 + 25C_ΔH h²)γhd + 25C_ΔH h² R_U] with C_ΔH = 4L.
pub fn lyapunov_rate(l: f64, h: f64, gamma: f64, d: usize, r_u: f64) -> f64 {
    let c = 25.0 * 4.0 * l * h * h;
    (2.0 * (1.0 + c) * gamma * h * d as f64 + c * r_u) / 8.0
}

/// C_Reg = 14((γh)^{−3/2} + γ⁻¹ L_H d^{1/2} h²).
pub fn regularization_constant(model: &TargetModel, params: &KernelParams) -> f64 {
    let (g, h) = (params.gamma, params.h);
    14.0 * ((g * h).powf(-1.5) + model.l_h() * (model.dim() as f64).sqrt() * h * h / g)
}

/// R = 3·L^{1/2}·γ·K⁻¹·R_U^{1/2}, a bound on the twisted diameter of D.
pub fn twisted_diameter(model: &TargetModel, gamma: f64, r_u: f64) -> f64 {
    3.0 * model.l().sqrt() * gamma / model.k() * r_u.sqrt()
}

pub fn build_plan(
    model: &TargetModel,
    params: &KernelParams,
    eps: f64,
    log_nu_lyap: f64,
) -> Result<EpochPlan> {
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(KlaError::InvalidParameter(format!(
            "eps must lie in (0, 1/2], got {eps}"
        )));
    }
    if !log_nu_lyap.is_finite() {
        return Err(KlaError::InvalidParameter(
            "log nu(e^{H/8}) must be finite".into(),
        ));
    }
    let report = check_assumptions(model, params, None);
    if !report.all_pass() {
        return Err(KlaError::AssumptionViolated(report.failures().join(", ")));
    }
    let (g, h, d) = (params.gamma, params.h, model.dim());
    let rho = contraction_rate(model.k(), g) * h;
    let c_reg = regularization_constant(model, params);
    let k = epochs_for(eps);
    let log_mu = 0.5 * d as f64 * (2.0 * model.kappa()).ln();
    let log_max = log_nu_lyap.max(log_mu);
    let rhs = |horizon: f64| 32.0 * (g * h * horizon * d as f64 + (4.0 / eps).ln() + log_max);

    let mut r_u = rhs(0.0).max(2.0);
    for iteration in 1..=FIXED_POINT_MAX_ITER {
        let epoch = epoch_length(rho, c_reg, twisted_diameter(model, g, r_u));
        let next = rhs((epoch * k) as f64).max(2.0);
        let converged = (next - r_u).abs() <= FIXED_POINT_RTOL * r_u;
        r_u = next;
        if converged {
            let r = twisted_diameter(model, g, r_u);
            let epoch = epoch_length(rho, c_reg, r);
            return Ok(EpochPlan {
                d,
                h,
                gamma: g,
                eps,
                rho,
                c_reg,
                r_u,
                r,
                epoch,
                k,
                horizon: epoch * k,
                lambda: lyapunov_rate(model.l(), h, g, d, r_u),
                c_delta_h: 4.0 * model.l(),
                log_nu_lyap,
                log_mu_lyap_bound: log_mu,
                fixed_point_iterations: iteration,
            });
        }
    }
    Err(KlaError::NonConvergence {
        what: "R_U fixed point",
        iterations: FIXED_POINT_MAX_ITER,
    })
}

/// The theoretical certificates of one plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub assumptions: AssumptionReport,
    /// log of the exit bound for the start distribution.
    pub exit_log_bound: f64,
    /// log of the exit bound for the stationary law.
    pub exit_log_bound_stationary: f64,
    /// True when the R_U coefficient of the exit exponent is not positive.
    pub exit_degenerate: bool,
    /// Both exit bounds are at most ε/4.
    pub exit_ok: bool,
    pub rejection_budget: f64,
    /// The rejection budget is at most 1/(3e).
    pub rejection_ok: bool,
    pub all_ok: bool,
}

/// log of exp(((1+25C h²)/4)γh𝔥d − ((1−50C𝔥h²)/16)R_U)·ν(e^{H/8}).
pub fn exit_log_bound(plan: &EpochPlan, log_nu: f64) -> (f64, bool) {
    let c = plan.c_delta_h;
    let (h, g, d) = (plan.h, plan.gamma, plan.d as f64);
    let horizon = plan.horizon as f64;
    let coef = (1.0 - 50.0 * c * horizon * h * h) / 16.0;
    let growth = (1.0 + 25.0 * c * h * h) / 4.0 * g * h * horizon * d;
    (growth - coef * plan.r_u + log_nu, coef <= 0.0)
}

/// 𝔈·h³·(8L_H(R_U^{3/2} + 3(γhd)^{3/2}) + L^{3/2}(R_U + γhd)).
pub fn rejection_budget(model: &TargetModel, plan: &EpochPlan) -> f64 {
    let (h, ghd) = (plan.h, plan.gamma * plan.h * plan.d as f64);
    let bracket = 8.0 * model.l_h() * (plan.r_u.powf(1.5) + 3.0 * ghd.powf(1.5))
        + model.l().powf(1.5) * (plan.r_u + ghd);
    plan.epoch as f64 * h.powi(3) * bracket
}

pub fn high_acceptance_threshold() -> f64 {
    1.0 / (3.0 * E)
}

pub fn certificates(
    model: &TargetModel,
    params: &KernelParams,
    plan: &EpochPlan,
) -> CertificateReport {
    let assumptions = check_assumptions(model, params, Some(plan.horizon));
    let (log_start, degenerate) = exit_log_bound(plan, plan.log_nu_lyap);
    let (log_stat, _) = exit_log_bound(plan, plan.log_mu_lyap_bound);
    let target = (plan.eps / 4.0).ln();
    let exit_ok = !degenerate && log_start <= target && log_stat <= target;
    let budget = rejection_budget(model, plan);
    let rejection_ok = budget <= high_acceptance_threshold();
    CertificateReport {
        all_ok: assumptions.all_pass() && exit_ok && rejection_ok,
        assumptions,
        exit_log_bound: log_start,
        exit_log_bound_stationary: log_stat,
        exit_degenerate: degenerate,
        exit_ok,
        rejection_budget: budget,
        rejection_ok,
    }
}

/// Outcome of the step-size bisection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSearch {
    /// Largest step found that passes every certificate.
    pub h_bar: Option<f64>,
    pub bracket: (f64, f64),
    pub evaluations: usize,
}

/// Whether every certificate holds at step size `h`.
pub fn certified(model: &TargetModel, gamma: f64, h: f64, eps: f64, log_nu: f64) -> bool {
    let Ok(params) = KernelParams::for_model(model, h, gamma) else {
        return false;
    };
    match build_plan(model, &params, eps, log_nu) {
        Ok(plan) => certificates(model, &params, &plan).all_ok,
        Err(_) => false,
    }
}

/// Bisection for the largest certified step in [1e−8, min(1/γ, 1/√L)].
pub fn admissible_step(model: &TargetModel, gamma: f64, eps: f64, log_nu: f64) -> StepSearch {
    let upper = (1.0 / gamma).min(1.0 / model.l().sqrt());
    let bracket = (BISECTION_LOWER, upper);
    let mut evaluations = 0;
    let mut test = |h: f64| {
        evaluations += 1;
        certified(model, gamma, h, eps, log_nu)
    };
    if test(upper) {
        return StepSearch {
            h_bar: Some(upper),
            bracket,
            evaluations,
        };
    }
    if !test(BISECTION_LOWER) {
        return StepSearch {
            h_bar: None,
            bracket,
            evaluations,
        };
    }
    let (mut lo, mut hi) = bracket;
    // Geometric bisection: the bracket spans many decades.
    while hi / lo > 1.0 + 1e-9 {
        let mid = (lo * hi).sqrt();
        if test(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    StepSearch {
        h_bar: Some(lo),
        bracket,
        evaluations,
    }
}
