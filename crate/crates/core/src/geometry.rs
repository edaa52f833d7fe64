//! Twisted and untwisted phase-space norms.
//!
//! The twisted norm is ‖z‖²_tw = α|x|² + β⟨x, v⟩ + |v|² with β = γ/4 and
//! α = (β/h)·sinh(γh/2). The synchronous coupling contracts in this norm. The
//! untwisted norm is ‖z‖² = γ²|x|² + |v|².

use serde::{Deserialize, Serialize};

use crate::error::{KlaError, Result};
use crate::model::{dot, PhaseState};

/// Coefficients of the twisted quadratic form for a given (γ, h).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwistedNorm {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub h: f64,
}

impl TwistedNorm {
    pub fn new(gamma: f64, h: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0 && h.is_finite() && h > 0.0) {
            return Err(KlaError::InvalidParameter(format!(
                "twisted norm needs γ, h > 0, got γ = {gamma}, h = {h}"
            )));
        }
        let beta = gamma / 4.0;
        let alpha = beta / h * (0.5 * gamma * h).sinh();
        Ok(Self {
            alpha,
            beta,
            gamma,
            h,
        })
    }

    /// Squared norm of the phase-space vector (dx, dv).
    #[inline]
    pub fn squared_parts(&self, dx: &[f64], dv: &[f64]) -> f64 {
        self.alpha * dot(dx, dx) + self.beta * dot(dx, dv) + dot(dv, dv)
    }

    pub fn norm(&self, z: &PhaseState) -> f64 {
        self.squared_parts(&z.x, &z.v).max(0.0).sqrt()
    }

    /// ‖z − w‖_tw without allocating the difference.
    #[inline]
    pub fn distance(&self, z: &PhaseState, w: &PhaseState) -> f64 {
        self.distance_parts(&z.x, &z.v, &w.x, &w.v)
    }

    #[inline]
    pub fn distance_parts(&self, x: &[f64], v: &[f64], xt: &[f64], vt: &[f64]) -> f64 {
        let (mut xx, mut xv, mut vv) = (0.0, 0.0, 0.0);
        for i in 0..x.len() {
            let (dx, dv) = (x[i] - xt[i], v[i] - vt[i]);
            xx += dx * dx;
            xv += dx * dv;
            vv += dv * dv;
        }
        (self.alpha * xx + self.beta * xv + vv).max(0.0).sqrt()
    }
}

/// sqrt(γ²|x|² + |v|²).
pub fn untwisted_norm(gamma: f64, z: &PhaseState) -> f64 {
    (gamma * gamma * dot(&z.x, &z.x) + dot(&z.v, &z.v)).sqrt()
}

/// Untwisted norm of z − w.
pub fn untwisted_distance(gamma: f64, z: &PhaseState, w: &PhaseState) -> f64 {
    let (mut xx, mut vv) = (0.0, 0.0);
    for i in 0..z.x.len() {
        xx += (z.x[i] - w.x[i]).powi(2);
        vv += (z.v[i] - w.v[i]).powi(2);
    }
    (gamma * gamma * xx + vv).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn coefficients_example() {
        let tn = TwistedNorm::new(2.0, 0.25).unwrap();
        assert!((tn.alpha - 0.505_224_6).abs() < 1e-7);
        assert_eq!(tn.beta, 0.5);
    }

    #[test]
    fn pure_velocity_has_euclidean_norm() {
        let tn = TwistedNorm::new(3.0, 0.1).unwrap();
        let z = PhaseState::new(vec![0.0, 0.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(tn.norm(&z), 5.0);
        assert_eq!(tn.norm(&PhaseState::zeros(2)), 0.0);
    }

    #[test]
    fn untwisted_examples() {
        let z = PhaseState::new(vec![3.0, 4.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(untwisted_norm(3.0, &z), 15.0);
        assert_eq!(untwisted_norm(2.0, &PhaseState::zeros(2)), 0.0);
        let z = PhaseState::new(vec![1.0, 2.0], vec![2.0, 4.0]).unwrap();
        assert_eq!(untwisted_norm(1.0, &z), 5.0);
        assert_eq!(untwisted_distance(1.0, &z, &PhaseState::zeros(2)), 5.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(TwistedNorm::new(0.0, 0.1).is_err());
        assert!(TwistedNorm::new(1.0, f64::NAN).is_err());
    }

    fn arb_z(d: usize) -> impl Strategy<Value = PhaseState> {
        (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
        )
            .prop_map(|(x, v)| PhaseState::new(x, v).unwrap())
    }

    fn gamma_h() -> impl Strategy<Value = (f64, f64)> {
        // γ log-uniform on [1e-2, 1e2] and γh uniform on (0, 1].
        (-2.0f64..2.0, 1e-6f64..=1.0).prop_map(|(lg, gh)| {
            let g = 10f64.powf(lg);
            (g, gh / g)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn sandwich_inequality((g, h) in gamma_h(), z in arb_z(3)) {
            let tn = TwistedNorm::new(g, h).unwrap();
            let tw2 = tn.squared_parts(&z.x, &z.v);
            let un2 = untwisted_norm(g, &z).powi(2);
            prop_assert!(un2 / 16.0 <= tw2 * (1.0 + 1e-12), "{un2} {tw2}");
            prop_assert!(tw2 <= 17.0 / 16.0 * un2 * (1.0 + 1e-12), "{un2} {tw2}");
        }

        #[test]
        fn alpha_bounds((g, h) in gamma_h()) {
            let tn = TwistedNorm::new(g, h).unwrap();
            prop_assert!(g * g / 8.0 <= tn.alpha * (1.0 + 1e-12));
            prop_assert!(tn.alpha <= 0.15 * g * g * (1.0 + 1e-12));
            prop_assert!(tn.beta * tn.beta < 4.0 * tn.alpha);
        }

        #[test]
        fn triangle_and_homogeneity((g, h) in gamma_h(), a in arb_z(3), b in arb_z(3), s in -5.0f64..5.0) {
            let tn = TwistedNorm::new(g, h).unwrap();
            let sum = PhaseState::new(
                a.x.iter().zip(&b.x).map(|(p, q)| p + q).collect(),
                a.v.iter().zip(&b.v).map(|(p, q)| p + q).collect(),
            ).unwrap();
            prop_assert!(tn.norm(&sum) <= (tn.norm(&a) + tn.norm(&b)) * (1.0 + 1e-12) + 1e-12);
            let scaled = PhaseState::new(a.x.iter().map(|c| s * c).collect(), a.v.iter().map(|c| s * c).collect()).unwrap();
            prop_assert!((tn.norm(&scaled) - s.abs() * tn.norm(&a)).abs() <= 1e-10 * (1.0 + tn.norm(&scaled)));
        }
    }
}
