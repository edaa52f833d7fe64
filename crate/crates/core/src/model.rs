//! Target distributions: potentials, Hamiltonian and the energy-like functional.
//!
//! A [`TargetModel`] bundles a potential `U` with the constants the rest of the
//! crate relies on: strong convexity `K`, gradient Lipschitz constant `L`,
//! Hessian Lipschitz constant `L_H` and the dimension `d`. The stationary law
//! of the kinetic dynamics is `exp(-U(x)) dx` times a standard normal velocity.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KlaError, Result};

/// A user-supplied potential. Its constants are declared by the caller when
/// wrapping it in [`TargetModel::custom`] and are trusted as given.
pub trait Potential: Send + Sync + fmt::Debug {
    /// U(x).
    fn value(&self, x: &[f64]) -> f64;
    /// Writes the gradient of U at `x` into `grad`.
    fn gradient(&self, x: &[f64], grad: &mut [f64]);
    /// The d×d Hessian of U at `x`.
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
}

/// Which potential a model evaluates.
#[derive(Clone, Debug)]
pub enum ModelKind {
    /// U(x) = (L/2)|x|².
    IsotropicGaussian {
        l: f64,
    },
    /// U(x) = ½ Σ a_i x_i².
    DiagonalGaussian {
        diag: Vec<f64>,
    },
    /// U(x) = ½ x·diag(2,1,…,1)x − sin(x₁). Only meant for illustrating the
    /// dimension dependence of the energy error: its minimum is not at 0.
    PerturbedExample,
    Custom(Arc<dyn Potential>),
}

/// An immutable target model, cheap to clone and safe to share across threads.
#[derive(Clone, Debug)]
pub struct TargetModel {
    kind: ModelKind,
    d: usize,
    k: f64,
    l: f64,
    l_h: f64,
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        return Err(KlaError::InvalidParameter(
            "dimension must be positive".into(),
        ));
    }
    Ok(())
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if !(value.is_finite() && value > 0.0) {
        return Err(KlaError::InvalidParameter(format!(
            "{name} must be positive and finite, got {value}"
        )));
    }
    Ok(())
}

impl TargetModel {
    pub fn isotropic_gaussian(d: usize, l: f64) -> Result<Self> {
        check_dim(d)?;
        check_positive("L", l)?;
        Ok(Self {
            kind: ModelKind::IsotropicGaussian { l },
            d,
            k: l,
            l,
            l_h: 0.0,
        })
    }

    pub fn diagonal_gaussian(diag: Vec<f64>) -> Result<Self> {
        check_dim(diag.len())?;
        for &a in &diag {
            check_positive("diagonal entry", a)?;
        }
        let k = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let l = diag.iter().copied().fold(0.0, f64::max);
        let d = diag.len();
        Ok(Self {
            kind: ModelKind::DiagonalGaussian { diag },
            d,
            k,
            l,
            l_h: 0.0,
        })
    }

    pub fn perturbed_example(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(Self {
            kind: ModelKind::PerturbedExample,
            d,
            k: 1.0,
            l: 3.0,
            l_h: 1.0,
        })
    }

    /// Wraps a custom potential with caller-declared constants.
    pub fn custom(
        potential: Arc<dyn Potential>,
        d: usize,
        k: f64,
        l: f64,
        l_h: f64,
    ) -> Result<Self> {
        check_dim(d)?;
        check_positive("K", k)?;
        check_positive("L", l)?;
        if k > l {
            return Err(KlaError::InvalidParameter(format!(
                "K = {k} exceeds L = {l}"
            )));
        }
        if !(l_h.is_finite() && l_h >= 0.0) {
            return Err(KlaError::InvalidParameter(format!(
                "L_H must be non-negative, got {l_h}"
            )));
        }
        Ok(Self {
            kind: ModelKind::Custom(potential),
            d,
            k,
            l,
            l_h,
        })
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }
    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn k(&self) -> f64 {
        self.k
    }
    pub fn l(&self) -> f64 {
        self.l
    }
    pub fn l_h(&self) -> f64 {
        self.l_h
    }
    pub fn kappa(&self) -> f64 {
        self.l / self.k
    }

    /// True for models whose minimum is not at the origin and which only serve
    /// as illustrations.
    pub fn illustration_only(&self) -> bool {
        matches!(self.kind, ModelKind::PerturbedExample)
    }

    /// Short identifier used in reports.
    pub fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::IsotropicGaussian { .. } => "iso_gauss",
            ModelKind::DiagonalGaussian { .. } => "diag_gauss",
            ModelKind::PerturbedExample => "perturbed",
            ModelKind::Custom(_) => "custom",
        }
    }

    /// Per-coordinate precisions when the target is a centred Gaussian with
    /// diagonal covariance.
    pub fn gaussian_precisions(&self) -> Option<Vec<f64>> {
        match &self.kind {
            ModelKind::IsotropicGaussian { l } => Some(vec![*l; self.d]),
            ModelKind::DiagonalGaussian { diag } => Some(diag.clone()),
            _ => None,
        }
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(KlaError::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KlaError::NonFinite("position"));
        }
        Ok(())
    }

    /// U(x) and ∇U(x).
    pub fn potential(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_x(x)?;
        let mut g = vec![0.0; self.d];
        self.gradient_unchecked(x, &mut g);
        Ok((self.value_unchecked(x), g))
    }

    /// ∇²U(x) as a dense symmetric matrix.
    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_x(x)?;
        Ok(self.hessian_unchecked(x))
    }

    /// H(z) = ½|v|² + U(x).
    pub fn hamiltonian(&self, z: &PhaseState) -> Result<f64> {
        z.check_for(self)?;
        Ok(self.hamiltonian_unchecked(&z.x, &z.v))
    }

    /// 𝓔(z) = |v|² + L⁻¹|∇U(x)|².
    pub fn energy_like(&self, z: &PhaseState) -> Result<f64> {
        z.check_for(self)?;
        let mut g = vec![0.0; self.d];
        Ok(self.energy_like_unchecked(&z.x, &z.v, &mut g))
    }

    /// U(x) without input validation. Hot-loop entry point.
    #[inline]
    pub fn value_unchecked(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::IsotropicGaussian { l } => 0.5 * l * dot(x, x),
            ModelKind::DiagonalGaussian { diag } => {
                0.5 * diag.iter().zip(x).map(|(a, xi)| a * xi * xi).sum::<f64>()
            }
            ModelKind::PerturbedExample => 0.5 * dot(x, x) + 0.5 * x[0] * x[0] - x[0].sin(),
            ModelKind::Custom(p) => p.value(x),
        }
    }

    /// ∇U(x) written into `grad`, without input validation.
    #[inline]
    pub fn gradient_unchecked(&self, x: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(x.len(), grad.len());
        match &self.kind {
            ModelKind::IsotropicGaussian { l } => {
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g = l * xi;
                }
            }
            ModelKind::DiagonalGaussian { diag } => {
                for ((g, xi), a) in grad.iter_mut().zip(x).zip(diag) {
                    *g = a * xi;
                }
            }
            ModelKind::PerturbedExample => {
                grad.copy_from_slice(x);
                grad[0] = 2.0 * x[0] - x[0].cos();
            }
            ModelKind::Custom(p) => p.gradient(x, grad),
        }
    }

    pub fn hessian_unchecked(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.d;
        match &self.kind {
            ModelKind::IsotropicGaussian { l } => DMatrix::from_diagonal_element(d, d, *l),
            ModelKind::DiagonalGaussian { diag } => {
                DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag))
            }
            ModelKind::PerturbedExample => {
                let mut m = DMatrix::identity(d, d);
                m[(0, 0)] = 2.0 + x[0].sin();
                m
            }
            ModelKind::Custom(p) => p.hessian(x),
        }
    }

    #[inline]
    pub fn hamiltonian_unchecked(&self, x: &[f64], v: &[f64]) -> f64 {
        0.5 * dot(v, v) + self.value_unchecked(x)
    }

    /// 𝓔(x, v) using `scratch` for the gradient.
    #[inline]
    pub fn energy_like_unchecked(&self, x: &[f64], v: &[f64], scratch: &mut [f64]) -> f64 {
        self.gradient_unchecked(x, scratch);
        dot(v, v) + dot(scratch, scratch) / self.l
    }

    /// The minimiser of U. The origin for the Gaussian kinds; found by Newton's
    /// method on the first coordinate for the perturbed example; the origin is
    /// assumed for custom potentials.
    pub fn minimizer(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        if let ModelKind::PerturbedExample = self.kind {
            // 2t − cos t = 0 has a unique root; the derivative 2 + sin t ≥ 1.
            let mut t = 0.0f64;
            for _ in 0..50 {
                let step = (2.0 * t - t.cos()) / (2.0 + t.sin());
                t -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            x[0] = t;
        }
        x
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// A point z = (x, v) of phase space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhaseState {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if x.len() != v.len() {
            return Err(KlaError::DimensionMismatch {
                expected: x.len(),
                got: v.len(),
            });
        }
        if x.is_empty() {
            return Err(KlaError::InvalidParameter(
                "phase state must have positive dimension".into(),
            ));
        }
        if x.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(KlaError::NonFinite("phase state"));
        }
        Ok(Self { x, v })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            x: vec![0.0; d],
            v: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// The velocity flip S(x, v) = (x, −v).
    pub fn flipped(&self) -> Self {
        Self {
            x: self.x.clone(),
            v: self.v.iter().map(|c| -c).collect(),
        }
    }

    /// Bitwise equality of every coordinate (distinguishes 0.0 from −0.0).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let same = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits())
        };
        same(&self.x, &other.x) && same(&self.v, &other.v)
    }

    pub(crate) fn check_for(&self, model: &TargetModel) -> Result<()> {
        if self.x.len() != model.dim() {
            return Err(KlaError::DimensionMismatch {
                expected: model.dim(),
                got: self.x.len(),
            });
        }
        if self.v.len() != model.dim() {
            return Err(KlaError::DimensionMismatch {
                expected: model.dim(),
                got: self.v.len(),
            });
        }
        if self.x.iter().chain(&self.v).any(|c| !c.is_finite()) {
            return Err(KlaError::NonFinite("phase state"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e1(d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[0] = 1.0;
        v
    }

    #[test]
    fn isotropic_potential_at_unit_vector() {
        let m = TargetModel::isotropic_gaussian(3, 4.0).unwrap();
        let (u, g) = m.potential(&e1(3)).unwrap();
        assert_eq!(u, 2.0);
        assert_eq!(g, vec![4.0, 0.0, 0.0]);
    }

    #[test]
    fn perturbed_potential_at_origin() {
        let m = TargetModel::perturbed_example(4).unwrap();
        let (u, g) = m.potential(&[0.0; 4]).unwrap();
        assert_eq!(u, 0.0);
        assert_eq!(g, vec![-1.0, 0.0, 0.0, 0.0]);
        assert!(m.illustration_only());
        assert_eq!((m.k(), m.l(), m.l_h()), (1.0, 3.0, 1.0));
    }

    #[test]
    fn gaussian_minimum_at_origin() {
        for m in [
            TargetModel::isotropic_gaussian(5, 2.5).unwrap(),
            TargetModel::diagonal_gaussian(vec![0.5, 1.0, 3.0]).unwrap(),
        ] {
            let (u, g) = m.potential(&vec![0.0; m.dim()]).unwrap();
            assert_eq!(u, 0.0);
            assert!(g.iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn hessians_of_builtins() {
        let iso = TargetModel::isotropic_gaussian(3, 2.0).unwrap();
        assert_eq!(
            iso.hessian(&[1.0, 2.0, 3.0]).unwrap(),
            DMatrix::from_diagonal_element(3, 3, 2.0)
        );
        let diag = TargetModel::diagonal_gaussian(vec![1.0, 2.0]).unwrap();
        assert_eq!(
            diag.hessian(&[5.0, -1.0]).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0])
        );
        let pert = TargetModel::perturbed_example(3).unwrap();
        let h = pert.hessian(&[0.0; 3]).unwrap();
        assert_eq!(
            h,
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0, 1.0]))
        );
    }

    #[test]
    fn hamiltonian_and_energy_like_examples() {
        let m = TargetModel::isotropic_gaussian(2, 4.0).unwrap();
        let z = PhaseState::new(e1(2), vec![0.0; 2]).unwrap();
        assert_eq!(m.hamiltonian(&z).unwrap(), 2.0);
        assert_eq!(m.energy_like(&z).unwrap(), 4.0);
        assert_eq!(m.hamiltonian(&PhaseState::zeros(2)).unwrap(), 0.0);
        assert_eq!(m.energy_like(&PhaseState::zeros(2)).unwrap(), 0.0);

        let m1 = TargetModel::isotropic_gaussian(2, 1.0).unwrap();
        let z = PhaseState::new(vec![0.0, 0.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(m1.hamiltonian(&z).unwrap(), 12.5);
        let z = PhaseState::new(vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(m1.energy_like(&z).unwrap(), 30.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = TargetModel::isotropic_gaussian(3, 1.0).unwrap();
        assert!(matches!(
            m.potential(&[1.0, 2.0]),
            Err(KlaError::DimensionMismatch {
                expected: 3,
                got: 2
            })
        ));
        assert!(matches!(
            m.potential(&[1.0, f64::NAN, 0.0]),
            Err(KlaError::NonFinite(_))
        ));
        assert!(matches!(
            m.hessian(&[1.0]),
            Err(KlaError::DimensionMismatch { .. })
        ));
        assert!(PhaseState::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(PhaseState::new(vec![f64::INFINITY], vec![0.0]).is_err());
        assert!(TargetModel::isotropic_gaussian(0, 1.0).is_err());
        assert!(TargetModel::isotropic_gaussian(2, -1.0).is_err());
        assert!(TargetModel::diagonal_gaussian(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn diagonal_constants_and_kappa() {
        let m = TargetModel::diagonal_gaussian(vec![0.5, 2.0, 1.0]).unwrap();
        assert_eq!((m.k(), m.l(), m.l_h()), (0.5, 2.0, 0.0));
        assert_eq!(m.kappa(), 4.0);
    }

    #[test]
    fn perturbed_minimizer_is_stationary() {
        let m = TargetModel::perturbed_example(3).unwrap();
        let x = m.minimizer();
        let (_, g) = m.potential(&x).unwrap();
        assert!(g.iter().all(|c| c.abs() < 1e-14), "{g:?}");
    }
}
