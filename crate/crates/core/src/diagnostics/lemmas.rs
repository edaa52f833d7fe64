//! Deterministic and Monte Carlo checks of the one-step lemmas: energy error,
//! its leading-order term, synchronous contraction and one-shot meeting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{StateSampler, VerificationReport};
use crate::couplings::{
    one_shot_coupled_step, tv_overlap_estimate, unadjusted_contraction_factor, CoupledPair,
};
use crate::error::{KlaError, Result};
use crate::geometry::TwistedNorm;
use crate::integrator::{energy_error, KernelParams};
use crate::model::{PhaseState, TargetModel};
use crate::planner::{check_assumptions, contraction_rate};
use crate::rng::{standard_normal_vec, uniform};
use crate::stats::{ks_standard_normal, Welford};

/// Relative tolerance of the pathwise contraction check.
pub const CONTRACTION_RTOL: f64 = 1e-10;
/// Rounding allowance of the energy-error checks, relative to |H(z)| + |H(θ_h z)|.
pub const ENERGY_ROUNDING: f64 = 1e-14;

/// Checks |ΔH| ≤ 4Lh²𝓔 and |ΔH| ≤ 2L_H h³𝓔^{3/2} + L^{3/2}h³𝓔 on `n`
/// sampled states.
pub fn verify_energy_error<R: Rng + ?Sized>(
    model: &TargetModel,
    h: f64,
    n: usize,
    sampler: &StateSampler,
    rng: &mut R,
) -> Result<VerificationReport> {
    let l = model.l();
    if !(h > 0.0 && l * h * h <= 1.0) {
        return Err(KlaError::AssumptionViolated(format!(
            "L h^2 <= 1 fails: L = {l}, h = {h}"
        )));
    }
    let (h2, h3) = (h * h, h * h * h);
    let (mut v1, mut v2) = (0u64, 0u64);
    let (mut worst1, mut worst2): (f64, f64) = (0.0, 0.0);
    for _ in 0..n {
        let z = sampler.sample(model, rng)?;
        let dh = energy_error(model, &z, h)?.abs();
        let e = model.energy_like(&z)?;
        let h0 = model.hamiltonian(&z)?;
        let slack = ENERGY_ROUNDING * (h0.abs() + (h0 + dh).abs());
        let first = 4.0 * l * h2 * e;
        let second = 2.0 * model.l_h() * h3 * e.powf(1.5) + l.powf(1.5) * h3 * e;
        v1 += u64::from(dh > first + slack);
        v2 += u64::from(dh > second + slack);
        if first > 0.0 {
            worst1 = worst1.max(dh / first);
        }
        if second > 0.0 {
            worst2 = worst2.max(dh / second);
        }
    }
    Ok(
        VerificationReport::deterministic(
            "energy_error",
            2 * n as u64,
            v1 + v2,
            worst1.max(worst2),
        )
        .with("worst_ratio_quadratic", worst1)
        .with("worst_ratio_cubic", worst2)
        .with("violations_quadratic", v1 as f64)
        .with("violations_cubic", v2 as f64)
        .with("h", h),
    )
}

/// One rung of the leading-order ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadingOrderRow {
    pub h: f64,
    pub delta_h: f64,
    /// (h³/24)(d^{3/2} + 12d^{1/2})
    pub predicted: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadingOrderReport {
    pub d: usize,
    pub rows: Vec<LeadingOrderRow>,
    /// log₂ of successive |ratio − 1| quotients divided by log₂ of the step
    /// quotients; ≈ 1 for an O(h) remainder.
    pub observed_orders: Vec<f64>,
    /// |ratio − 1| at the smallest step is at most 5%.
    pub within_tolerance: bool,
    /// |ratio − 1| strictly decreases along the ladder.
    pub shrinking: bool,
    pub passed: bool,
}

/// ΔH of the perturbed example at (0, √d·e₁) against its leading term.
pub fn verify_leading_order(d: usize, h_ladder: &[f64]) -> Result<LeadingOrderReport> {
    if h_ladder.is_empty()
        || h_ladder.windows(2).any(|w| w[1] >= w[0])
        || h_ladder.iter().any(|&h| h <= 0.0)
    {
        return Err(KlaError::InvalidParameter(
            "the step ladder must be positive and strictly decreasing".into(),
        ));
    }
    let model = TargetModel::perturbed_example(d)?;
    let mut v = vec![0.0; d];
    v[0] = (d as f64).sqrt();
    let z = PhaseState::new(vec![0.0; d], v)?;
    let df = d as f64;
    let rows: Vec<LeadingOrderRow> = h_ladder
        .iter()
        .map(|&h| {
            let delta_h = energy_error(&model, &z, h)?;
            let predicted = h.powi(3) / 24.0 * (df.powf(1.5) + 12.0 * df.sqrt());
            Ok(LeadingOrderRow {
                h,
                delta_h,
                predicted,
                ratio: delta_h / predicted,
            })
        })
        .collect::<Result<_>>()?;
    let dev: Vec<f64> = rows.iter().map(|r| (r.ratio - 1.0).abs()).collect();
    let observed_orders = rows
        .windows(2)
        .zip(dev.windows(2))
        .map(|(r, e)| (e[0] / e[1]).log2() / (r[0].h / r[1].h).log2())
        .collect();
    let within_tolerance = *dev.last().expect("non-empty") <= 0.05;
    let shrinking = dev.windows(2).all(|e| e[1] < e[0]);
    Ok(LeadingOrderReport {
        d,
        rows,
        observed_orders,
        within_tolerance,
        shrinking,
        passed: within_tolerance && shrinking,
    })
}

/// Pathwise check of ‖Ψz − Ψz̃‖_tw ≤ (1 − c·h)‖z − z̃‖_tw over random pairs
/// and noise, with c = min(K/γ, γ)/(34√e) multiplied by `c_scale` (1 for the
/// real check; larger values exercise the failure path).
///
/// Half of the pairs are independent draws from `sampler`; the other half
/// are Gaussian perturbations of scale 10^{−6}..10^0, which probe the
/// linearised map of non-Gaussian targets.
pub fn verify_contraction<R: Rng + ?Sized>(
    model: &TargetModel,
    params: &KernelParams,
    n_pairs: usize,
    c_scale: f64,
    sampler: &StateSampler,
    rng: &mut R,
) -> Result<VerificationReport> {
    let report = check_assumptions(model, params, None);
    if !report.all_pass() {
        return Err(KlaError::AssumptionViolated(report.failures().join(", ")));
    }
    let c = contraction_rate(model.k(), params.gamma) * c_scale;
    let bound = 1.0 - c * params.h;
    let tn = TwistedNorm::new(params.gamma, params.h)?;
    let d = model.dim();
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < n_pairs {
        let z = sampler.sample(model, rng)?;
        let zt = if done % 2 == 0 {
            sampler.sample(model, rng)?
        } else {
            let s = 10f64.powf(-6.0 * uniform(rng));
            let dx = standard_normal_vec(rng, d);
            let dv = standard_normal_vec(rng, d);
            let x = z.x.iter().zip(&dx).map(|(a, b)| a + s * b).collect();
            let v = z.v.iter().zip(&dv).map(|(a, b)| a + s * b).collect();
            PhaseState::new(x, v)?
        };
        if z.bitwise_eq(&zt) {
            continue;
        }
        let xi1 = standard_normal_vec(rng, d);
        let xi2 = standard_normal_vec(rng, d);
        let ratio = unadjusted_contraction_factor(model, &z, &zt, params, &xi1, &xi2, &tn);
        if !ratio.is_finite() {
            return Err(KlaError::NonFinite("contraction ratio"));
        }
        violations += u64::from(ratio > bound * (1.0 + CONTRACTION_RTOL));
        worst = worst.max(ratio);
        done += 1;
    }
    Ok(
        VerificationReport::deterministic("contraction", n_pairs as u64, violations, worst / bound)
            .with("c", c)
            .with("c_scale", c_scale)
            .with("bound", bound)
            .with("worst_ratio", worst)
            .with("slack", (1.0 - worst) / (c * params.h)),
    )
}

/// Result of the one-shot meeting experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotReport {
    pub d: usize,
    pub distance: f64,
    pub trials: u64,
    pub met: u64,
    pub transported: u64,
    /// 1 − (7/2)(γh)^{−3/2}·distance
    pub meeting_lower_bound: f64,
    /// Non-meeting frequency against (7/2)(γh)^{−3/2}·distance.
    pub meeting: VerificationReport,
    /// KS statistic and p-value of every coordinate of the second chain's
    /// noise against N(0, 1).
    pub ks: Vec<(f64, f64)>,
    pub ks_min_p: f64,
    pub ks_passed: bool,
    /// Mean overlap bound over the sampled pairs and its standard error.
    pub overlap: f64,
    pub overlap_stderr: f64,
    /// The overlap bound is at least 1 − meeting frequency within 3 stderr.
    pub overlap_passed: bool,
    pub passed: bool,
}

/// Runs `n_trials` one-shot transitions, each from a fresh pair at twisted
/// distance `distance`, and computes the overlap bound with
/// `overlap_samples` draws per pair.
#[allow(clippy::too_many_arguments)]
pub fn verify_one_shot<R: Rng + ?Sized>(
    model: &TargetModel,
    params: &KernelParams,
    distance: f64,
    n_trials: usize,
    overlap_samples: usize,
    ks_level: f64,
    sampler: &StateSampler,
    rng: &mut R,
) -> Result<OneShotReport> {
    if distance.is_nan() || distance <= 0.0 || n_trials < 2 || overlap_samples == 0 {
        return Err(KlaError::InvalidParameter(
            "need distance > 0, n_trials >= 2 and overlap_samples >= 1".into(),
        ));
    }
    let d = model.dim();
    let tn = TwistedNorm::new(params.gamma, params.h)?;
    let mut met = 0u64;
    let mut transported = 0u64;
    let mut noise: Vec<Vec<f64>> = vec![Vec::with_capacity(n_trials); 2 * d];
    let mut overlap = Welford::default();
    for _ in 0..n_trials {
        let z = sampler.sample(model, rng)?;
        let dir = PhaseState::new(standard_normal_vec(rng, d), standard_normal_vec(rng, d))?;
        let s = distance / tn.norm(&dir);
        let zt = PhaseState::new(
            z.x.iter().zip(&dir.x).map(|(a, b)| a + s * b).collect(),
            z.v.iter().zip(&dir.v).map(|(a, b)| a + s * b).collect(),
        )?;
        overlap.push(tv_overlap_estimate(model, &z, &zt, params, overlap_samples, rng)?.value);
        let mut pair = CoupledPair::new(z, zt)?;
        let out = one_shot_coupled_step(model, &mut pair, params, rng)?;
        met += u64::from(out.met);
        transported += u64::from(out.transported);
        let (b1, b2) = &out.noise_pair_tilde;
        for (i, c) in b1.iter().chain(b2).enumerate() {
            noise[i].push(*c);
        }
    }
    let n = n_trials as f64;
    let freq = met as f64 / n;
    let miss = 1.0 - freq;
    let miss_se = (freq * (1.0 - freq) / n).sqrt();
    let allowance = 3.5 * (params.gamma * params.h).powf(-1.5) * distance;
    let meeting = VerificationReport::statistical(
        "one_shot_meeting",
        n_trials as u64,
        miss,
        allowance,
        miss_se,
    )
    .with("meeting_frequency", freq)
    .with("transport_frequency", transported as f64 / n);
    let ks: Vec<(f64, f64)> = noise.iter().map(|c| ks_standard_normal(c)).collect();
    let ks_min_p = ks.iter().map(|k| k.1).fold(1.0, f64::min);
    let ks_passed = ks_min_p > ks_level;
    let combined_se = (miss_se.powi(2) + overlap.stderr_of_mean().powi(2)).sqrt();
    let overlap_passed = miss - overlap.mean() <= 3.0 * combined_se;
    Ok(OneShotReport {
        d,
        distance,
        trials: n_trials as u64,
        met,
        transported,
        meeting_lower_bound: 1.0 - allowance,
        passed: meeting.passed && ks_passed && overlap_passed,
        meeting,
        ks,
        ks_min_p,
        ks_passed,
        overlap: overlap.mean(),
        overlap_stderr: overlap.stderr_of_mean(),
        overlap_passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn energy_error_at_origin_is_zero() {
        let model = TargetModel::isotropic_gaussian(3, 1.0).unwrap();
        assert_eq!(
            energy_error(&model, &PhaseState::zeros(3), 0.1).unwrap(),
            0.0
        );
    }

    #[test]
    fn energy_bounds_hold_on_gaussian_and_perturbed() {
        let mut rng = stream(5, Purpose::States, 0);
        let iso = TargetModel::isotropic_gaussian(3, 1.0).unwrap();
        let r =
            verify_energy_error(&iso, 0.1, 20_000, &StateSampler::Stationary, &mut rng).unwrap();
        assert!(r.passed, "{r:?}");
        let pert = TargetModel::perturbed_example(3).unwrap();
        let r = verify_energy_error(
            &pert,
            0.1,
            20_000,
            &StateSampler::UniformInDomain { r_u: 50.0 },
            &mut rng,
        )
        .unwrap();
        assert!(r.passed && r.metrics["worst_ratio_cubic"] < 1.0, "{r:?}");
    }

    #[test]
    fn energy_error_precondition() {
        let mut rng = stream(5, Purpose::States, 1);
        let iso = TargetModel::isotropic_gaussian(1, 4.0).unwrap();
        assert!(verify_energy_error(&iso, 0.6, 10, &StateSampler::Stationary, &mut rng).is_err());
    }

    #[test]
    fn leading_order_constants() {
        // (h³/24)(d^{3/2} + 12 d^{1/2}) at d = 16 is (14/3)h³ and at d = 1 is (13/24)h³.
        let r = verify_leading_order(16, &[0.01]).unwrap();
        assert!((r.rows[0].predicted - 14.0 / 3.0 * 1e-6).abs() < 1e-18);
        let r = verify_leading_order(1, &[0.01]).unwrap();
        assert!((r.rows[0].predicted - 13.0 / 24.0 * 1e-6).abs() < 1e-18);
    }

    #[test]
    fn leading_order_ladder() {
        for d in [1, 4, 16] {
            let r = verify_leading_order(d, &[0.02, 0.01, 0.005]).unwrap();
            assert!(r.passed, "{r:?}");
            for o in &r.observed_orders {
                assert!((o - 1.0).abs() < 0.2, "{r:?}");
            }
        }
        assert!(verify_leading_order(2, &[0.01, 0.02]).is_err());
    }

    #[test]
    fn contraction_holds_and_tamper_fails() {
        let model = TargetModel::isotropic_gaussian(2, 1.0).unwrap();
        let params = KernelParams::for_model(&model, 0.05, 10.0).unwrap();
        let mut rng = stream(6, Purpose::States, 0);
        let ok = verify_contraction(
            &model,
            &params,
            2000,
            1.0,
            &StateSampler::Stationary,
            &mut rng,
        )
        .unwrap();
        assert!(ok.passed && ok.metrics["slack"] > 1.0, "{ok:?}");
        let bad = verify_contraction(
            &model,
            &params,
            2000,
            100.0,
            &StateSampler::Stationary,
            &mut rng,
        )
        .unwrap();
        assert!(!bad.passed);
    }
}
