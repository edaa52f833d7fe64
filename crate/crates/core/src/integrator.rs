//! The OABAO splitting: Ornstein–Uhlenbeck half steps around a reversible,
//! volume-preserving position-velocity-position core θ_h, with and without a
//! Metropolis–Hastings correction of the core.
//!
//! Every transition is a pure function of the state and the noise passed in.
//! The `*_in_place` variants mutate buffers and allocate nothing; they are what
//! the coupled runs use in their inner loops.

use serde::{Deserialize, Serialize};

use crate::error::{KlaError, Result};
use crate::model::{PhaseState, TargetModel};

/// Step size, friction and the derived OU half-step coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub h: f64,
    pub gamma: f64,
    /// e^{−γh/2}
    pub ou_decay: f64,
    /// (1 − e^{−γh})^{1/2}
    pub ou_noise_scale: f64,
    /// Whether √L/γ ≤ 1/10 and γh ≤ 1 for the model these parameters were
    /// built for; `None` when built without a model.
    pub assumptions_hold: Option<bool>,
}

impl KernelParams {
    pub fn new(h: f64, gamma: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(KlaError::InvalidParameter(format!(
                "step size must be positive, got {h}"
            )));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(KlaError::InvalidParameter(format!(
                "friction must be positive, got {gamma}"
            )));
        }
        let gh = gamma * h;
        Ok(Self {
            h,
            gamma,
            ou_decay: (-0.5 * gh).exp(),
            ou_noise_scale: (-(-gh).exp_m1()).sqrt(),
            assumptions_hold: None,
        })
    }

    /// Builds the parameters and records whether the step-size and friction
    /// conditions hold for `model`.
    pub fn for_model(model: &TargetModel, h: f64, gamma: f64) -> Result<Self> {
        let mut p = Self::new(h, gamma)?;
        p.assumptions_hold = Some(model.l().sqrt() / gamma <= 0.1 && gamma * h <= 1.0);
        Ok(p)
    }
}

/// Result of one adjusted transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: PhaseState,
    pub accepted: bool,
    pub delta_h: f64,
    /// θ_h applied to the state after the first OU half step.
    pub proposal: PhaseState,
}

/// Acceptance flag and energy error of one in-place adjusted transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub accepted: bool,
    pub delta_h: f64,
}

/// Metropolis test of the core: accept iff u ≤ exp(−max(ΔH, 0)).
#[inline]
pub fn accept(delta_h: f64, u: f64) -> bool {
    u <= (-delta_h.max(0.0)).exp()
}

/// Reusable buffers for the in-place transitions of a d-dimensional chain.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub(crate) grad: Vec<f64>,
    x1: Vec<f64>,
    v1: Vec<f64>,
}

impl Workspace {
    pub fn new(d: usize) -> Self {
        Self {
            grad: vec![0.0; d],
            x1: vec![0.0; d],
            v1: vec![0.0; d],
        }
    }
}

fn check_noise(d: usize, noise: &[f64]) -> Result<()> {
    if noise.len() != d {
        return Err(KlaError::DimensionMismatch {
            expected: d,
            got: noise.len(),
        });
    }
    if noise.iter().any(|c| !c.is_finite()) {
        return Err(KlaError::NonFinite("noise"));
    }
    Ok(())
}

#[inline]
pub fn ou_half_step_in_place(v: &mut [f64], params: &KernelParams, noise: &[f64]) {
    let (a, s) = (params.ou_decay, params.ou_noise_scale);
    for (vi, b) in v.iter_mut().zip(noise) {
        *vi = a * *vi + s * b;
    }
}

/// x ← x + (h/2)v; v ← v − h∇U(x); x ← x + (h/2)v.
#[inline]
pub fn theta_h_in_place(
    model: &TargetModel,
    x: &mut [f64],
    v: &mut [f64],
    h: f64,
    grad: &mut [f64],
) {
    let half = 0.5 * h;
    for (xi, vi) in x.iter_mut().zip(v.iter()) {
        *xi += half * vi;
    }
    model.gradient_unchecked(x, grad);
    for (vi, g) in v.iter_mut().zip(grad.iter()) {
        *vi -= h * g;
    }
    for (xi, vi) in x.iter_mut().zip(v.iter()) {
        *xi += half * vi;
    }
}

/// One unadjusted OABAO transition in place.
#[inline]
pub fn ukla_step_in_place(
    model: &TargetModel,
    params: &KernelParams,
    x: &mut [f64],
    v: &mut [f64],
    xi1: &[f64],
    xi2: &[f64],
    grad: &mut [f64],
) {
    ou_half_step_in_place(v, params, xi1);
    theta_h_in_place(model, x, v, params.h, grad);
    ou_half_step_in_place(v, params, xi2);
}

/// One adjusted transition in place. On error the buffers hold an
/// unspecified intermediate state.
#[inline]
#[allow(clippy::too_many_arguments)]
pub fn makla_step_in_place(
    model: &TargetModel,
    params: &KernelParams,
    x: &mut [f64],
    v: &mut [f64],
    xi1: &[f64],
    xi2: &[f64],
    u: f64,
    ws: &mut Workspace,
) -> Result<StepInfo> {
    ou_half_step_in_place(v, params, xi1);
    ws.x1.copy_from_slice(x);
    ws.v1.copy_from_slice(v);
    let h_before = model.hamiltonian_unchecked(x, v);
    theta_h_in_place(model, x, v, params.h, &mut ws.grad);
    let delta_h = model.hamiltonian_unchecked(x, v) - h_before;
    if !delta_h.is_finite() {
        return Err(KlaError::Diverged { delta_h });
    }
    let accepted = accept(delta_h, u);
    if !accepted {
        x.copy_from_slice(&ws.x1);
        for (vi, v1) in v.iter_mut().zip(&ws.v1) {
            *vi = -v1;
        }
    }
    ou_half_step_in_place(v, params, xi2);
    Ok(StepInfo { accepted, delta_h })
}

/// O_{h/2}(b): x unchanged, v ← e^{−γh/2}v + (1−e^{−γh})^{1/2} b.
pub fn ou_half_step(z: &PhaseState, params: &KernelParams, noise_b: &[f64]) -> Result<PhaseState> {
    check_noise(z.dim(), noise_b)?;
    let mut out = z.clone();
    ou_half_step_in_place(&mut out.v, params, noise_b);
    Ok(out)
}

/// The deterministic core θ_h.
pub fn theta_h(model: &TargetModel, z: &PhaseState, h: f64) -> Result<PhaseState> {
    z.check_for(model)?;
    let mut out = z.clone();
    let mut grad = vec![0.0; model.dim()];
    theta_h_in_place(model, &mut out.x, &mut out.v, h, &mut grad);
    Ok(out)
}

/// H(θ_h(z)) − H(z).
pub fn energy_error(model: &TargetModel, z: &PhaseState, h: f64) -> Result<f64> {
    let next = theta_h(model, z, h)?;
    Ok(model.hamiltonian_unchecked(&next.x, &next.v) - model.hamiltonian_unchecked(&z.x, &z.v))
}

/// O_{h/2}(ξ₂) ∘ θ_h ∘ O_{h/2}(ξ₁)(z).
pub fn ukla_step(
    model: &TargetModel,
    z: &PhaseState,
    params: &KernelParams,
    xi1: &[f64],
    xi2: &[f64],
) -> Result<PhaseState> {
    z.check_for(model)?;
    check_noise(model.dim(), xi1)?;
    check_noise(model.dim(), xi2)?;
    let mut out = z.clone();
    let mut grad = vec![0.0; model.dim()];
    ukla_step_in_place(model, params, &mut out.x, &mut out.v, xi1, xi2, &mut grad);
    Ok(out)
}

/// One adjusted transition: OU half step, Metropolis-corrected θ_h with a
/// velocity flip on rejection, OU half step.
pub fn makla_step(
    model: &TargetModel,
    z: &PhaseState,
    params: &KernelParams,
    xi1: &[f64],
    xi2: &[f64],
    u: f64,
) -> Result<StepOutcome> {
    z.check_for(model)?;
    check_noise(model.dim(), xi1)?;
    check_noise(model.dim(), xi2)?;
    if !(0.0..=1.0).contains(&u) {
        return Err(KlaError::InvalidParameter(format!(
            "uniform draw must lie in [0, 1], got {u}"
        )));
    }
    let z1 = ou_half_step(z, params, xi1)?;
    let proposal = theta_h(model, &z1, params.h)?;
    let delta_h = model.hamiltonian_unchecked(&proposal.x, &proposal.v)
        - model.hamiltonian_unchecked(&z1.x, &z1.v);
    if !delta_h.is_finite() {
        return Err(KlaError::Diverged { delta_h });
    }
    let accepted = accept(delta_h, u);
    let z2 = if accepted {
        proposal.clone()
    } else {
        z1.flipped()
    };
    let next = ou_half_step(&z2, params, xi2)?;
    Ok(StepOutcome {
        next,
        accepted,
        delta_h,
        proposal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iso(d: usize, l: f64) -> TargetModel {
        TargetModel::isotropic_gaussian(d, l).unwrap()
    }

    #[test]
    fn kernel_params_derived_fields() {
        let p = KernelParams::new(0.25, 2.0).unwrap();
        assert!((p.ou_decay - (-0.25f64).exp()).abs() < 1e-16);
        assert!((p.ou_noise_scale - 0.627_271_3).abs() < 1e-6);
        assert!(KernelParams::new(0.0, 1.0).is_err());
        assert!(KernelParams::new(0.1, -1.0).is_err());
        let m = iso(2, 1.0);
        assert_eq!(
            KernelParams::for_model(&m, 0.05, 10.0)
                .unwrap()
                .assumptions_hold,
            Some(true)
        );
        assert_eq!(
            KernelParams::for_model(&m, 0.05, 5.0)
                .unwrap()
                .assumptions_hold,
            Some(false)
        );
    }

    #[test]
    fn ou_half_step_examples() {
        let p = KernelParams::new(0.25, 2.0).unwrap();
        let z = PhaseState::new(vec![1.0, -2.0], vec![3.0, 4.0]).unwrap();
        let out = ou_half_step(&z, &p, &[0.0, 0.0]).unwrap();
        assert_eq!(out.x, z.x);
        assert_eq!(out.v, vec![3.0 * p.ou_decay, 4.0 * p.ou_decay]);

        let z = PhaseState::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let out = ou_half_step(&z, &p, &[1.0, -2.0]).unwrap();
        assert!((out.v[0] - 0.627_271_3).abs() < 1e-6);
        assert!((out.v[1] + 2.0 * 0.627_271_3).abs() < 1e-6);

        let tiny = KernelParams::new(1e-14, 1.0).unwrap();
        let z = PhaseState::new(vec![0.0], vec![0.7]).unwrap();
        let out = ou_half_step(&z, &tiny, &[1.0]).unwrap();
        assert!((out.v[0] - 0.7).abs() < 1e-6);
        assert!(ou_half_step(&z, &tiny, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn theta_h_example() {
        let m = iso(3, 1.0);
        let z = PhaseState::new(vec![1.0, 0.0, 0.0], vec![0.0; 3]).unwrap();
        let out = theta_h(&m, &z, 0.1).unwrap();
        assert!((out.x[0] - 0.995).abs() < 1e-15);
        assert!((out.v[0] + 0.1).abs() < 1e-15);
        assert_eq!(&out.x[1..], &[0.0, 0.0]);
        assert_eq!(
            theta_h(&m, &PhaseState::zeros(3), 0.1).unwrap(),
            PhaseState::zeros(3)
        );
    }

    #[test]
    fn energy_error_example() {
        let m = iso(2, 1.0);
        let z = PhaseState::new(vec![1.0, 0.0], vec![0.0; 2]).unwrap();
        let dh = energy_error(&m, &z, 0.1).unwrap();
        assert!((dh - 1.25e-5).abs() < 1e-15, "{dh}");
        assert_eq!(energy_error(&m, &PhaseState::zeros(2), 0.1).unwrap(), 0.0);
    }

    #[test]
    fn accept_rule() {
        assert!(accept(-3.0, 1.0));
        assert!(accept(0.0, 1.0));
        let ln2 = std::f64::consts::LN_2;
        assert!(accept(ln2, 0.5));
        assert!(accept(ln2, 0.499_999));
        assert!(!accept(ln2, 0.500_001));
    }

    #[test]
    fn makla_fixed_point_at_origin() {
        let m = iso(3, 2.0);
        let p = KernelParams::new(0.1, 10.0).unwrap();
        for u in [0.0, 0.3, 1.0] {
            let out = makla_step(&m, &PhaseState::zeros(3), &p, &[0.0; 3], &[0.0; 3], u).unwrap();
            assert!(out.accepted);
            assert_eq!(out.delta_h, 0.0);
            assert_eq!(out.next, PhaseState::zeros(3));
        }
    }

    #[test]
    fn makla_rejection_flips_velocity() {
        // A large step on a stiff target makes ΔH positive and large.
        let m = iso(1, 1.0);
        let p = KernelParams::new(1.9, 0.5).unwrap();
        let z = PhaseState::new(vec![0.3], vec![2.0]).unwrap();
        let out = makla_step(&m, &z, &p, &[0.0], &[0.0], 1.0).unwrap();
        assert!(out.delta_h > 0.0);
        assert!(!out.accepted);
        let z1 = ou_half_step(&z, &p, &[0.0]).unwrap();
        let expected = ou_half_step(&z1.flipped(), &p, &[0.0]).unwrap();
        assert_eq!(out.next, expected);
    }

    #[test]
    fn makla_matches_ukla_when_accepted() {
        let m = TargetModel::perturbed_example(3).unwrap();
        let p = KernelParams::new(0.05, 10.0).unwrap();
        let z = PhaseState::new(vec![0.4, -1.0, 0.2], vec![0.1, 0.5, -0.3]).unwrap();
        let (xi1, xi2) = ([0.3, -0.2, 1.1], [-0.5, 0.8, 0.0]);
        let out = makla_step(&m, &z, &p, &xi1, &xi2, 0.0).unwrap();
        assert!(out.accepted);
        assert_eq!(out.next, ukla_step(&m, &z, &p, &xi1, &xi2).unwrap());
    }

    #[test]
    fn makla_rejects_nonfinite_energy_error() {
        let m = iso(1, 1.0);
        let p = KernelParams::new(1.0, 1e-3).unwrap();
        let z = PhaseState::new(vec![1e200], vec![1e200]).unwrap();
        assert!(matches!(
            makla_step(&m, &z, &p, &[0.0], &[0.0], 0.5),
            Err(KlaError::Diverged { .. })
        ));
        assert!(makla_step(&m, &PhaseState::zeros(1), &p, &[0.0], &[0.0], 1.5).is_err());
    }

    #[test]
    fn in_place_and_pure_steps_agree() {
        let m = TargetModel::perturbed_example(2).unwrap();
        let p = KernelParams::new(0.2, 3.0).unwrap();
        let z = PhaseState::new(vec![0.5, -0.5], vec![1.0, 2.0]).unwrap();
        let (xi1, xi2, u) = ([0.1, 0.2], [-0.3, 0.4], 0.7);
        let pure = makla_step(&m, &z, &p, &xi1, &xi2, u).unwrap();
        let (mut x, mut v) = (z.x.clone(), z.v.clone());
        let mut ws = Workspace::new(2);
        let info = makla_step_in_place(&m, &p, &mut x, &mut v, &xi1, &xi2, u, &mut ws).unwrap();
        assert_eq!(info.accepted, pure.accepted);
        assert_eq!(info.delta_h.to_bits(), pure.delta_h.to_bits());
        assert!(PhaseState { x, v }.bitwise_eq(&pure.next));
    }

    fn finite_difference_jacobian(
        m: &TargetModel,
        z: &PhaseState,
        h: f64,
    ) -> nalgebra::DMatrix<f64> {
        let d = m.dim();
        let mut jac = nalgebra::DMatrix::zeros(2 * d, 2 * d);
        let eps = 1e-6;
        for j in 0..2 * d {
            let bump = |s: f64| {
                let mut zz = z.clone();
                if j < d {
                    zz.x[j] += s
                } else {
                    zz.v[j - d] += s
                }
                let out = theta_h(m, &zz, h).unwrap();
                [out.x, out.v].concat()
            };
            let (plus, minus) = (bump(eps), bump(-eps));
            for i in 0..2 * d {
                jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * eps);
            }
        }
        jac
    }

    fn arb_state(d: usize) -> impl Strategy<Value = PhaseState> {
        (
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(-3.0f64..3.0, d),
        )
            .prop_map(|(x, v)| PhaseState::new(x, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn theta_h_preserves_volume(d in 1usize..=5, seed_state in arb_state(5), h in 0.01f64..0.5) {
            let m = TargetModel::perturbed_example(d).unwrap();
            let z = PhaseState::new(seed_state.x[..d].to_vec(), seed_state.v[..d].to_vec()).unwrap();
            let det = finite_difference_jacobian(&m, &z, h).determinant();
            prop_assert!((det.abs() - 1.0).abs() < 1e-6, "det = {det}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn theta_h_is_reversible(z in arb_state(4), h in 0.001f64..0.5) {
            let m = TargetModel::perturbed_example(4).unwrap();
            let once = theta_h(&m, &z, h).unwrap().flipped();
            let back = theta_h(&m, &once, h).unwrap().flipped();
            for (a, b) in back.x.iter().chain(&back.v).zip(z.x.iter().chain(&z.v)) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }

        #[test]
        fn makla_is_a_pure_function(z in arb_state(3), xi in prop::collection::vec(-3.0f64..3.0, 6), u in 0.0f64..1.0) {
            let m = TargetModel::perturbed_example(3).unwrap();
            let p = KernelParams::new(0.1, 10.0).unwrap();
            let a = makla_step(&m, &z, &p, &xi[..3], &xi[3..], u).unwrap();
            let b = makla_step(&m, &z, &p, &xi[..3], &xi[3..], u).unwrap();
            prop_assert!(a.next.bitwise_eq(&b.next));
            prop_assert_eq!(a.accepted, b.accepted);
        }
    }
}
