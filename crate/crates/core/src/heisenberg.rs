//! Temporal evolution of two spins coupled by a cylindrically symmetric
//! Heisenberg exchange in a static field along Oz.
//!
//! The evolution operator over an interval τ is `M = Q·D·Q` where `Q` is the
//! constant mixing basis (its own inverse) and
//! `D = diag(e^{−iω₁,₁τ}, e^{−iω₁,₀τ}, e^{−iω₀,₀τ}, e^{−iω₁,₋₁τ})`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cis, Ket4, Mat4, C64, ZERO};

/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.0545718e-34;
/// Boltzmann constant, J/K.
pub const K_B: f64 = 1.380649e-23;
/// Bohr magneton, J/T.
pub const BOHR_MAGNETON: f64 = 9.2740100783e-24;

/// Unitary two-qubit operator. Values produced by this crate satisfy
/// `U†U = I` to 1e-12 entrywise.
pub type Unitary4 = Mat4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalModel {
    /// G = g·μ_e, J/T.
    pub field_scale: f64,
    /// B, tesla.
    pub b_field: f64,
    /// Jxy, joules.
    pub jxy: f64,
    /// Jz, joules.
    pub jz: f64,
    pub hbar: f64,
    pub k_b: f64,
}

impl PhysicalModel {
    pub fn new(field_scale: f64, b_field: f64, jxy: f64, jz: f64) -> Result<Self> {
        let m = PhysicalModel {
            field_scale,
            b_field,
            jxy,
            jz,
            hbar: HBAR,
            k_b: K_B,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds a model from a g-factor, a field in tesla and couplings in kelvin.
    pub fn from_kelvin(g: f64, b_tesla: f64, jxy_kelvin: f64, jz_kelvin: f64) -> Result<Self> {
        Self::new(
            g * BOHR_MAGNETON,
            b_tesla,
            jxy_kelvin * K_B,
            jz_kelvin * K_B,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hbar", self.hbar),
            ("k_B", self.k_b),
            ("B", self.b_field),
            ("G", self.field_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if !self.jxy.is_finite() || !self.jz.is_finite() {
            return Err(Error::Domain("exchange couplings must be finite".into()));
        }
        Ok(())
    }

    /// G·B, joules.
    pub fn zeeman(&self) -> f64 {
        self.field_scale * self.b_field
    }

    pub fn known(&self) -> KnownPhysics {
        KnownPhysics {
            field_scale: self.field_scale,
            b_field: self.b_field,
            hbar: self.hbar,
        }
    }
}

/// The part of the model an estimator is allowed to know: everything but the
/// exchange couplings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnownPhysics {
    pub field_scale: f64,
    pub b_field: f64,
    pub hbar: f64,
}

impl KnownPhysics {
    pub fn zeeman(&self) -> f64 {
        self.field_scale * self.b_field
    }

    /// G·B·τ/ħ, unreduced.
    pub fn zeeman_phase(&self, tau: f64) -> f64 {
        self.zeeman() * tau / self.hbar
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Omega4 {
    pub omega_11: f64,
    pub omega_10: f64,
    pub omega_00: f64,
    pub omega_1m1: f64,
}

impl Omega4 {
    pub fn as_array(&self) -> [f64; 4] {
        [self.omega_11, self.omega_10, self.omega_00, self.omega_1m1]
    }
}

/// Reduces a phase into (−π, π].
#[inline]
pub fn wrap_phase(x: f64) -> f64 {
    let r = (x + PI).rem_euclid(TAU) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

pub fn mixing_basis_q() -> Unitary4 {
    let h = FRAC_1_SQRT_2;
    Mat4::from_real([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, h, h, 0.0],
        [0.0, h, -h, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
}

pub fn angular_frequencies(m: &PhysicalModel) -> Omega4 {
    let gb = m.zeeman();
    Omega4 {
        omega_11: (gb - 0.5 * m.jz) / m.hbar,
        omega_10: (-m.jxy + 0.5 * m.jz) / m.hbar,
        omega_00: (m.jxy + 0.5 * m.jz) / m.hbar,
        omega_1m1: (-gb - 0.5 * m.jz) / m.hbar,
    }
}

/// `Q·diag(d)·Q`, written out: the outer entries pass through and the middle
/// block becomes `½[[d₁+d₂, d₁−d₂], [d₁−d₂, d₁+d₂]]`.
pub fn conjugate_by_q(d: [C64; 4]) -> Unitary4 {
    let s = 0.5 * (d[1] + d[2]);
    let t = 0.5 * (d[1] - d[2]);
    Mat4([
        [d[0], ZERO, ZERO, ZERO],
        [ZERO, s, t, ZERO],
        [ZERO, t, s, ZERO],
        [ZERO, ZERO, ZERO, d[3]],
    ])
}

/// Evolution operator for the given phases `ωₖ·τ`, i.e. `Q·diag(e^{−iφₖ})·Q`.
pub fn evolution_from_phases(phases: [f64; 4]) -> Unitary4 {
    conjugate_by_q(phases.map(|p| cis(-p)))
}

/// The sparse shape every `Q·diag·Q` operator has: two invariant outer
/// rays and a symmetric middle block `[[s, t], [t, s]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockEvolution {
    pub d0: C64,
    pub s: C64,
    pub t: C64,
    pub d3: C64,
}

impl BlockEvolution {
    /// `None` unless `u` has exactly this shape.
    pub fn from_matrix(u: &Unitary4) -> Option<Self> {
        let m = &u.0;
        let outer_zero = (1..4).all(|j| {
            m[0][j] == ZERO && m[j][0] == ZERO && m[3][j - 1] == ZERO && m[j - 1][3] == ZERO
        });
        if !outer_zero || m[1][1] != m[2][2] || m[1][2] != m[2][1] {
            return None;
        }
        Some(BlockEvolution {
            d0: m[0][0],
            s: m[1][1],
            t: m[1][2],
            d3: m[3][3],
        })
    }

    #[inline]
    pub fn apply(&self, c: &Ket4) -> Ket4 {
        [
            self.d0 * c[0],
            self.s * c[1] + self.t * c[2],
            self.t * c[1] + self.s * c[2],
            self.d3 * c[3],
        ]
    }
}

pub fn evolution_matrix(m: &PhysicalModel, tau: f64) -> Result<Unitary4> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!(
            "time interval must be >= 0, got {tau}"
        )));
    }
    let w = angular_frequencies(m).as_array();
    Ok(evolution_from_phases(w.map(|wk| wk * tau)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::qstate::random_pure_state;

    fn appendix_model() -> PhysicalModel {
        PhysicalModel::from_kelvin(2.0, 0.99, 0.3, 1.0).unwrap()
    }

    fn random_model<R: Rng>(rng: &mut R) -> PhysicalModel {
        PhysicalModel::from_kelvin(
            rng.random_range(1.0..3.0),
            rng.random_range(0.1..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-3.0..3.0),
        )
        .unwrap()
    }

    #[test]
    fn q_is_an_involution_and_symmetric() {
        let q = mixing_basis_q();
        assert!((q * q).max_abs_diff(&Mat4::identity()) < 1e-15);
        assert_eq!(q, q.transpose());
        let v = q.apply(&[ZERO, C64::new(1.0, 0.0), ZERO, ZERO]);
        assert_abs_diff_eq!(v[1].re, FRAC_1_SQRT_2);
        assert_abs_diff_eq!(v[2].re, FRAC_1_SQRT_2);
        assert_abs_diff_eq!(v[0].norm() + v[3].norm(), 0.0);
    }

    #[test]
    fn frequencies_without_coupling() {
        let m = PhysicalModel::from_kelvin(2.0, 0.99, 0.0, 0.0).unwrap();
        let w = angular_frequencies(&m);
        let gb = m.zeeman() / m.hbar;
        assert_eq!(w.omega_11, gb);
        assert_eq!(w.omega_10, 0.0);
        assert_eq!(w.omega_00, 0.0);
        assert_eq!(w.omega_1m1, -gb);
    }

    #[test]
    fn frequencies_for_reference_model() {
        let m = appendix_model();
        let w = angular_frequencies(&m);
        // (G·B − Jz/2)/ħ with G·B/k_B ≈ 1.330 K and Jz/k_B = 1 K
        assert_abs_diff_eq!(m.zeeman() / K_B, 1.33, epsilon = 0.005);
        assert_abs_diff_eq!(w.omega_11, 1.086e11, epsilon = 0.001e11);
        assert_abs_diff_eq!(
            (w.omega_10 + w.omega_00) * m.hbar / m.jz,
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            (w.omega_11 + w.omega_1m1) * m.hbar / -m.jz,
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn evolution_at_zero_time_is_identity() {
        let m = appendix_model();
        let u = evolution_matrix(&m, 0.0).unwrap();
        assert!(u.max_abs_diff(&Mat4::identity()) < 1e-15);
        assert!(evolution_matrix(&m, -1e-9).is_err());
    }

    #[test]
    fn uncoupled_evolution_is_diagonal() {
        let m = PhysicalModel::from_kelvin(2.0, 0.99, 0.0, 0.0).unwrap();
        let tau = 0.7e-9;
        let u = evolution_matrix(&m, tau).unwrap();
        let ph = m.zeeman() * tau / m.hbar;
        let d = Mat4::diag([
            C64::from_polar(1.0, -ph),
            C64::new(1.0, 0.0),
            C64::new(1.0, 0.0),
            C64::from_polar(1.0, ph),
        ]);
        // explicit Q·D·Q product as a second route
        let q = mixing_basis_q();
        let explicit = q * d * q;
        assert!(u.max_abs_diff(&d) < 1e-12);
        assert!(explicit.max_abs_diff(&d) < 1e-12);
    }

    #[test]
    fn closed_form_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = mixing_basis_q();
        for _ in 0..200 {
            let m = random_model(&mut rng);
            let tau = rng.random_range(0.0..10e-9);
            let w = angular_frequencies(&m).as_array();
            let d = Mat4::diag(w.map(|wk| C64::from_polar(1.0, -wk * tau)));
            let u = evolution_matrix(&m, tau).unwrap();
            assert!(u.max_abs_diff(&(q * d * q)) < 1e-12);
        }
    }

    #[test]
    fn evolution_is_unitary_and_norm_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let m = random_model(&mut rng);
            let tau = rng.random_range(0.0..10e-9);
            let u = evolution_matrix(&m, tau).unwrap();
            assert!(u.unitarity_error() < 1e-12);
            let s = random_pure_state(&mut rng).evolve(&u);
            assert!((s.norm_sqr() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn outer_basis_rays_are_invariant() {
        let u = evolution_matrix(&appendix_model(), 1.3e-9).unwrap();
        for col in [0, 3] {
            for row in 0..4 {
                if row != col {
                    assert_eq!(u.0[row][col], ZERO);
                }
            }
            assert_abs_diff_eq!(u.0[col][col].norm(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn block_form_matches_full_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let u = evolution_matrix(&random_model(&mut rng), rng.random_range(0.0..5e-9)).unwrap();
            let b = BlockEvolution::from_matrix(&u).unwrap();
            let s = random_pure_state(&mut rng);
            let (x, y) = (b.apply(s.amplitudes()), u.apply(s.amplitudes()));
            for i in 0..4 {
                assert!((x[i] - y[i]).norm() < 1e-15);
            }
        }
        assert!(BlockEvolution::from_matrix(&Mat4::identity()).is_some());
        assert!(BlockEvolution::from_matrix(&mixing_basis_q()).is_none());
        let mut m = Mat4::identity();
        m.0[0][1] = C64::new(0.1, 0.0);
        assert!(BlockEvolution::from_matrix(&m).is_none());
    }

    #[test]
    fn wrap_phase_range() {
        assert_eq!(wrap_phase(PI), PI);
        assert_eq!(wrap_phase(-PI), PI);
        assert_abs_diff_eq!(wrap_phase(3.0 * PI + 0.25), -PI + 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_phase(-0.5), -0.5);
    }

    proptest! {
        #[test]
        fn semigroup(jxy in -2.0f64..2.0, jz in -3.0f64..3.0, t1 in 0.0f64..5e-9, t2 in 0.0f64..5e-9) {
            let m = PhysicalModel::from_kelvin(2.0, 0.99, jxy, jz).unwrap();
            let a = evolution_matrix(&m, t1).unwrap() * evolution_matrix(&m, t2).unwrap();
            let b = evolution_matrix(&m, t1 + t2).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }
}
