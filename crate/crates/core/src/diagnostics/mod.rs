//! Numerical certification of the bounds behind the mixing argument, and
//! empirical mixing and bias estimates.
//!
//! Deterministic checks (contraction, energy error) allow zero violations.
//! Statistical checks pass when the estimate lies within three standard
//! errors of the bound.

mod lemmas;
mod lyapunov;
mod mixing;
mod stationarity;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KlaError, Result};
use crate::model::{ModelKind, PhaseState, TargetModel};
use crate::rng::{fill_standard_normal, standard_normal_vec, uniform};

pub use lemmas::{
    verify_contraction, verify_energy_error, verify_leading_order, verify_one_shot,
    LeadingOrderReport, LeadingOrderRow, OneShotReport,
};
pub(crate) use lyapunov::start_state;
pub use lyapunov::{exit_frequency, lyapunov_drift_check, ou_moment_bounds, rejection_rate_epoch};
pub use mixing::{
    estimate_mixing, meeting_time_scaling, ComparisonStart, CurvePoint, EpochFailureStats,
    MixingOptions, MixingReport, ReplicaTrace, ScalingReport, ScalingRow,
};
pub use stationarity::{stationarity_and_bias, BiasRow, MomentSummary, StationarityReport};

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub name: String,
    pub trials: u64,
    pub violations: u64,
    /// Deterministic checks: 1 − (worst observed / bound), positive when
    /// every trial holds. Statistical checks: bound − estimate.
    pub worst_margin: f64,
    pub statistical: bool,
    pub stderr: Option<f64>,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
}

impl VerificationReport {
    pub(crate) fn deterministic(
        name: &str,
        trials: u64,
        violations: u64,
        worst_ratio: f64,
    ) -> Self {
        Self {
            name: name.to_string(),
            trials,
            violations,
            worst_margin: 1.0 - worst_ratio,
            statistical: false,
            stderr: None,
            passed: violations == 0,
            metrics: BTreeMap::new(),
        }
    }

    /// Passes when `estimate ≤ bound + 3·stderr`.
    pub(crate) fn statistical(
        name: &str,
        trials: u64,
        estimate: f64,
        bound: f64,
        stderr: f64,
    ) -> Self {
        let margin = bound - estimate;
        let passed = margin >= -3.0 * stderr;
        Self {
            name: name.to_string(),
            trials,
            violations: u64::from(!passed),
            worst_margin: margin,
            statistical: true,
            stderr: Some(stderr),
            passed,
            metrics: BTreeMap::new(),
        }
    }

    /// A statistical check made of several per-item comparisons; passes when
    /// none of them is violated by more than three standard errors.
    pub(crate) fn statistical_many(
        name: &str,
        trials: u64,
        violations: u64,
        worst_margin: f64,
        stderr: f64,
    ) -> Self {
        Self {
            name: name.to_string(),
            trials,
            violations,
            worst_margin,
            statistical: true,
            stderr: Some(stderr),
            passed: violations == 0,
            metrics: BTreeMap::new(),
        }
    }

    pub(crate) fn with(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }
}

/// How test states are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateSampler {
    /// The exact stationary law (Gaussian kinds only).
    Stationary,
    /// x, v ~ N(0, s²I) with s log-uniform on [min_scale, max_scale].
    LogUniformScale { min_scale: f64, max_scale: f64 },
    /// Uniform on D = {𝓔 ≤ r_u} (built-in models only).
    UniformInDomain { r_u: f64 },
}

impl StateSampler {
    /// The default for a model: stationary for Gaussian kinds, uniform in D
    /// otherwise.
    pub fn default_for(model: &TargetModel, r_u: f64) -> Self {
        if model.gaussian_precisions().is_some() {
            StateSampler::Stationary
        } else {
            StateSampler::UniformInDomain { r_u }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, model: &TargetModel, rng: &mut R) -> Result<PhaseState> {
        let d = model.dim();
        match self {
            StateSampler::Stationary => {
                let prec = model.gaussian_precisions().ok_or_else(|| {
                    KlaError::InvalidParameter(format!(
                        "no exact stationary sampler for model {}",
                        model.name()
                    ))
                })?;
                Ok(stationary_draw(&prec, rng))
            }
            StateSampler::LogUniformScale {
                min_scale,
                max_scale,
            } => {
                let s = (min_scale.ln() + (max_scale.ln() - min_scale.ln()) * uniform(rng)).exp();
                let x = standard_normal_vec(rng, d)
                    .into_iter()
                    .map(|c| s * c)
                    .collect();
                let v = standard_normal_vec(rng, d)
                    .into_iter()
                    .map(|c| s * c)
                    .collect();
                PhaseState::new(x, v)
            }
            StateSampler::UniformInDomain { r_u } => uniform_in_domain(model, *r_u, rng),
        }
    }
}

/// A draw from N(0, diag(prec)⁻¹) ⊗ N(0, I).
pub fn stationary_draw<R: Rng + ?Sized>(precisions: &[f64], rng: &mut R) -> PhaseState {
    let d = precisions.len();
    let mut x = vec![0.0; d];
    fill_standard_normal(rng, &mut x);
    for (xi, a) in x.iter_mut().zip(precisions) {
        *xi /= a.sqrt();
    }
    PhaseState {
        x,
        v: standard_normal_vec(rng, d),
    }
}

/// Uniform point of the Euclidean ball of radius r in dimension n.
fn uniform_ball<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Vec<f64> {
    let mut y = standard_normal_vec(rng, n);
    let norm = y.iter().map(|c| c * c).sum::<f64>().sqrt();
    let radius = r * uniform(rng).powf(1.0 / n as f64);
    for c in &mut y {
        *c *= radius / norm;
    }
    y
}

/// Uniform sampling of D = {|v|² + L⁻¹|∇U(x)|² ≤ r_u}. In the coordinates
/// (v, ∇U(x)/√L) the domain is a ball; the change of variables back to x has
/// constant Jacobian for the Gaussian kinds and is corrected by rejection for
/// the perturbed example.
fn uniform_in_domain<R: Rng + ?Sized>(
    model: &TargetModel,
    r_u: f64,
    rng: &mut R,
) -> Result<PhaseState> {
    if !(r_u.is_finite() && r_u > 0.0) {
        return Err(KlaError::InvalidParameter(format!(
            "domain level must be positive, got {r_u}"
        )));
    }
    let d = model.dim();
    let sl = model.l().sqrt();
    let r = r_u.sqrt();
    match model.kind() {
        ModelKind::IsotropicGaussian { .. } | ModelKind::DiagonalGaussian { .. } => {
            let prec = model.gaussian_precisions().expect("Gaussian kind");
            let y = uniform_ball(2 * d, r, rng);
            let x = (0..d).map(|i| sl * y[i] / prec[i]).collect();
            PhaseState::new(x, y[d..].to_vec())
        }
        ModelKind::PerturbedExample => loop {
            let y = uniform_ball(2 * d, r, rng);
            // Invert g(t) = 2t − cos t, whose derivative 2 + sin t lies in [1, 3].
            let target = sl * y[0];
            let mut t = target / 2.0;
            for _ in 0..60 {
                let step = (2.0 * t - t.cos() - target) / (2.0 + t.sin());
                t -= step;
                if step.abs() < 1e-15 * (1.0 + t.abs()) {
                    break;
                }
            }
            // Uniform y₁ gives x₁ a density ∝ g'(x₁); thinning with
            // probability 1/g'(x₁) ∈ [1/3, 1] makes it uniform.
            if uniform(rng) * (2.0 + t.sin()) <= 1.0 {
                let mut x: Vec<f64> = (0..d).map(|i| sl * y[i]).collect();
                x[0] = t;
                return PhaseState::new(x, y[d..].to_vec());
            }
        },
        ModelKind::Custom(_) => Err(KlaError::InvalidParameter(
            "uniform-in-domain sampling needs a built-in model".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn uniform_in_domain_stays_inside() {
        let mut rng = stream(1, Purpose::States, 0);
        for model in [
            TargetModel::isotropic_gaussian(3, 2.0).unwrap(),
            TargetModel::diagonal_gaussian(vec![0.5, 4.0]).unwrap(),
            TargetModel::perturbed_example(3).unwrap(),
        ] {
            let sampler = StateSampler::UniformInDomain { r_u: 10.0 };
            let mut max_level: f64 = 0.0;
            for _ in 0..2000 {
                let z = sampler.sample(&model, &mut rng).unwrap();
                let e = model.energy_like(&z).unwrap();
                assert!(e <= 10.0 * (1.0 + 1e-12), "{e}");
                max_level = max_level.max(e);
            }
            assert!(
                max_level > 9.0,
                "samples should reach the boundary, max {max_level}"
            );
        }
    }

    #[test]
    fn uniform_in_domain_level_distribution() {
        // For a uniform point of a ball in n dims, P(𝓔 ≤ t·r_u) = t^{n/2}.
        let model = TargetModel::diagonal_gaussian(vec![0.5, 3.0]).unwrap();
        let sampler = StateSampler::UniformInDomain { r_u: 4.0 };
        let mut rng = stream(2, Purpose::States, 0);
        let n = 20_000;
        let below = (0..n)
            .filter(|_| {
                model
                    .energy_like(&sampler.sample(&model, &mut rng).unwrap())
                    .unwrap()
                    <= 2.0
            })
            .count() as f64
            / n as f64;
        assert!((below - 0.25).abs() < 0.02, "{below}");
    }

    #[test]
    fn stationary_needs_gaussian() {
        let mut rng = stream(3, Purpose::States, 0);
        assert!(StateSampler::Stationary
            .sample(&TargetModel::perturbed_example(2).unwrap(), &mut rng)
            .is_err());
    }
}
