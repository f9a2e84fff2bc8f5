//! Qubit and two-qubit pure states, the polar parametrization and random
//! preparation ensembles.
//!
//! A qubit is `α|+⟩ + β|−⟩` with `α = r·e^{iθ}` and `β = sqrt(1 − r²)·e^{iφ}`.
//! Phases are stored as given; only the difference `φ − θ` is physical and
//! nothing here canonicalizes it.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm_sqr, Ket4, Mat4, C64, ZERO};

const NORM_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QubitParams {
    /// Modulus of the |+⟩ coefficient.
    pub r_plus: f64,
    /// Phase of the |+⟩ coefficient.
    pub theta_plus: f64,
    /// Phase of the |−⟩ coefficient.
    pub phi_minus: f64,
}

impl QubitParams {
    pub fn new(r_plus: f64, theta_plus: f64, phi_minus: f64) -> Result<Self> {
        let p = QubitParams {
            r_plus,
            theta_plus,
            phi_minus,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_plus) {
            return Err(Error::Domain(format!(
                "r_plus = {} outside [0, 1]",
                self.r_plus
            )));
        }
        if !self.theta_plus.is_finite() || !self.phi_minus.is_finite() {
            return Err(Error::Domain("non-finite qubit phase".into()));
        }
        Ok(())
    }

    /// Modulus of the |−⟩ coefficient.
    pub fn q_minus(&self) -> f64 {
        (1.0 - self.r_plus * self.r_plus).max(0.0).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDraw {
    pub qubit1: QubitParams,
    pub qubit2: QubitParams,
}

impl ParamDraw {
    /// Initial phase difference Δ_I = (φ₂ − θ₂) − (φ₁ − θ₁).
    pub fn delta_initial(&self) -> f64 {
        (self.qubit2.phi_minus - self.qubit2.theta_plus)
            - (self.qubit1.phi_minus - self.qubit1.theta_plus)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoQubitState {
    amplitudes: Ket4,
}

impl TwoQubitState {
    pub fn new(amplitudes: Ket4) -> Result<Self> {
        let n = norm_sqr(&amplitudes);
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Domain(format!("state norm² = {n}, expected 1")));
        }
        Ok(TwoQubitState { amplitudes })
    }

    /// Wraps amplitudes already known to be normalized, e.g. the image of a
    /// unit state under a unitary.
    pub(crate) fn new_unchecked(amplitudes: Ket4) -> Self {
        TwoQubitState { amplitudes }
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalized(v: Ket4) -> Result<Self> {
        let n = norm_sqr(&v).sqrt();
        if n < 1e-300 {
            return Err(Error::Domain("cannot normalize the zero vector".into()));
        }
        Ok(TwoQubitState {
            amplitudes: v.map(|c| c / n),
        })
    }

    pub fn amplitudes(&self) -> &Ket4 {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        norm_sqr(&self.amplitudes)
    }

    pub fn evolve(&self, u: &Mat4) -> TwoQubitState {
        TwoQubitState {
            amplitudes: u.apply(&self.amplitudes),
        }
    }
}

pub fn qubit_ket(p: &QubitParams) -> Result<[C64; 2]> {
    p.validate()?;
    Ok(qubit_ket_raw(p))
}

#[inline]
fn qubit_ket_raw(p: &QubitParams) -> [C64; 2] {
    [
        C64::from_polar(p.r_plus, p.theta_plus),
        C64::from_polar(p.q_minus(), p.phi_minus),
    ]
}

pub fn product_state(d: &ParamDraw) -> Result<TwoQubitState> {
    let a = qubit_ket(&d.qubit1)?;
    let b = qubit_ket(&d.qubit2)?;
    Ok(TwoQubitState::new_unchecked(tensor(&a, &b)))
}

#[inline]
pub fn tensor(a: &[C64; 2], b: &[C64; 2]) -> Ket4 {
    [a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]]
}

/// ⟨a|b⟩, conjugate-linear in `a`.
pub fn inner(a: &[C64], b: &[C64]) -> Result<C64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.conj() * y).sum())
}

/// Distribution of one preparation parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ParamDist {
    Fixed(f64),
    /// Uniform on `[lo, hi)`.
    UniformHalfOpen(f64, f64),
}

impl ParamDist {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        ParamDist::UniformHalfOpen(lo, hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ParamDist::Fixed(v) => v,
            ParamDist::UniformHalfOpen(lo, hi) => lo + (hi - lo) * rng.random::<f64>(),
        }
    }

    fn validate(&self, name: &str, modulus: bool) -> Result<()> {
        match *self {
            ParamDist::Fixed(v) => {
                if !v.is_finite() || (modulus && !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Domain(format!("{name}: invalid fixed value {v}")));
                }
            }
            ParamDist::UniformHalfOpen(lo, hi) => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::Domain(format!(
                        "{name}: need lo < hi, got [{lo}, {hi})"
                    )));
                }
                if modulus && (lo < 0.0 || hi > 1.0) {
                    return Err(Error::Domain(format!(
                        "{name}: [{lo}, {hi}) not inside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// E{r²} for a modulus parameter.
    pub fn mean_square(&self) -> f64 {
        match *self {
            ParamDist::Fixed(r) => r * r,
            ParamDist::UniformHalfOpen(lo, hi) => (hi.powi(3) - lo.powi(3)) / (3.0 * (hi - lo)),
        }
    }

    /// E{r·sqrt(1 − r²)} for a modulus parameter.
    pub fn mean_r_q(&self) -> f64 {
        match *self {
            ParamDist::Fixed(r) => r * (1.0 - r * r).max(0.0).sqrt(),
            ParamDist::UniformHalfOpen(lo, hi) => {
                // antiderivative: -(1 - r²)^{3/2} / 3
                let f = |r: f64| (1.0 - r * r).max(0.0).powf(1.5);
                (f(lo) - f(hi)) / (3.0 * (hi - lo))
            }
        }
    }

    /// Characteristic value E{e^{iX}} for a phase parameter.
    pub fn mean_cis(&self) -> C64 {
        match *self {
            ParamDist::Fixed(x) => C64::from_polar(1.0, x),
            ParamDist::UniformHalfOpen(lo, hi) => {
                let w = hi - lo;
                let mid = C64::from_polar(1.0, 0.5 * (lo + hi));
                // sinc form avoids the cancellation of (e^{ih} - e^{il}) / (i w)
                let half = 0.5 * w;
                let sinc = if half.abs() < 1e-8 {
                    1.0
                } else {
                    half.sin() / half
                };
                mid * sinc
            }
        }
    }
}

/// Distribution of a random separable preparation: one descriptor per polar
/// parameter, all drawn independently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub r1: ParamDist,
    pub theta1: ParamDist,
    pub phi1: ParamDist,
    pub r2: ParamDist,
    pub theta2: ParamDist,
    pub phi2: ParamDist,
}

pub const ENSEMBLE_FIELDS: [&str; 6] = ["r1", "theta1", "phi1", "r2", "theta2", "phi2"];

impl EnsembleSpec {
    pub fn fixed(d: &ParamDraw) -> Self {
        EnsembleSpec {
            r1: ParamDist::Fixed(d.qubit1.r_plus),
            theta1: ParamDist::Fixed(d.qubit1.theta_plus),
            phi1: ParamDist::Fixed(d.qubit1.phi_minus),
            r2: ParamDist::Fixed(d.qubit2.r_plus),
            theta2: ParamDist::Fixed(d.qubit2.theta_plus),
            phi2: ParamDist::Fixed(d.qubit2.phi_minus),
        }
    }

    /// Any separable pure state: both moduli on [0, 1), all phases on [0, 2π).
    pub fn full_range() -> Self {
        let m = ParamDist::uniform(0.0, 1.0);
        let p = ParamDist::uniform(0.0, 2.0 * PI);
        EnsembleSpec {
            r1: m,
            theta1: p,
            phi1: p,
            r2: m,
            theta2: p,
            phi2: p,
        }
    }

    pub fn fields(&self) -> [ParamDist; 6] {
        [
            self.r1,
            self.theta1,
            self.phi1,
            self.r2,
            self.theta2,
            self.phi2,
        ]
    }

    pub fn from_fields(f: [ParamDist; 6]) -> Self {
        EnsembleSpec {
            r1: f[0],
            theta1: f[1],
            phi1: f[2],
            r2: f[3],
            theta2: f[4],
            phi2: f[5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (d, name)) in self.fields().iter().zip(ENSEMBLE_FIELDS).enumerate() {
            d.validate(name, i % 3 == 0)?;
        }
        Ok(())
    }

    /// E{sin Δ_I}, from the independence of the four phases.
    pub fn mean_sin_delta_initial(&self) -> f64 {
        let z = self.phi2.mean_cis()
            * self.theta2.mean_cis().conj()
            * self.phi1.mean_cis().conj()
            * self.theta1.mean_cis();
        z.im
    }

    /// Single-qubit mean density matrix E{|ψⱼ⟩⟨ψⱼ|}.
    fn qubit_density(r: &ParamDist, theta: &ParamDist, phi: &ParamDist) -> [[C64; 2]; 2] {
        let a = r.mean_square();
        let coh = theta.mean_cis() * phi.mean_cis().conj() * r.mean_r_q();
        [
            [C64::new(a, 0.0), coh],
            [coh.conj(), C64::new(1.0 - a, 0.0)],
        ]
    }

    /// Mean density matrix of the two-qubit preparation. Expectations of any
    /// outcome probability are linear in this matrix, so it is enough to
    /// propagate it instead of averaging over individual draws.
    pub fn mean_density(&self) -> Mat4 {
        let q1 = Self::qubit_density(&self.r1, &self.theta1, &self.phi1);
        let q2 = Self::qubit_density(&self.r2, &self.theta2, &self.phi2);
        Mat4::kron2(&q1, &q2)
    }
}

pub fn sample_params<R: Rng + ?Sized>(spec: &EnsembleSpec, rng: &mut R) -> ParamDraw {
    ParamDraw {
        qubit1: QubitParams {
            r_plus: spec.r1.sample(rng),
            theta_plus: spec.theta1.sample(rng),
            phi_minus: spec.phi1.sample(rng),
        },
        qubit2: QubitParams {
            r_plus: spec.r2.sample(rng),
            theta_plus: spec.theta2.sample(rng),
            phi_minus: spec.phi2.sample(rng),
        },
    }
}

/// Fast preparation sampler for the simulation loop: fixed phases are turned
/// into phasors once, so only random ones cost a `sin_cos`.
#[derive(Clone, Debug)]
pub struct PreparationSampler {
    spec: EnsembleSpec,
    fixed_cis: [Option<C64>; 6],
}

impl PreparationSampler {
    pub fn new(spec: &EnsembleSpec) -> Result<Self> {
        spec.validate()?;
        let mut fixed_cis = [None; 6];
        for (slot, d) in fixed_cis.iter_mut().zip(spec.fields()) {
            if let ParamDist::Fixed(v) = d {
                *slot = Some(C64::from_polar(1.0, v));
            }
        }
        Ok(PreparationSampler {
            spec: *spec,
            fixed_cis,
        })
    }

    #[inline]
    fn phasor<R: Rng + ?Sized>(&self, idx: usize, d: &ParamDist, rng: &mut R) -> C64 {
        match self.fixed_cis[idx] {
            Some(c) => c,
            None => {
                let (s, c) = libm::sincos(d.sample(rng));
                C64::new(c, s)
            }
        }
    }

    #[inline]
    pub fn sample_ket<R: Rng + ?Sized>(&self, rng: &mut R) -> Ket4 {
        let s = &self.spec;
        let r1 = s.r1.sample(rng);
        let t1 = self.phasor(1, &s.theta1, rng);
        let p1 = self.phasor(2, &s.phi1, rng);
        let r2 = s.r2.sample(rng);
        let t2 = self.phasor(4, &s.theta2, rng);
        let p2 = self.phasor(5, &s.phi2, rng);
        let q1 = (1.0 - r1 * r1).max(0.0).sqrt();
        let q2 = (1.0 - r2 * r2).max(0.0).sqrt();
        tensor(&[t1 * r1, p1 * q1], &[t2 * r2, p2 * q2])
    }
}

/// Haar-distributed pure two-qubit state (normalized complex Gaussian).
pub fn random_pure_state<R: Rng + ?Sized>(rng: &mut R) -> TwoQubitState {
    loop {
        let mut v = [ZERO; 4];
        for c in v.iter_mut() {
            *c = C64::new(gaussian(rng), gaussian(rng));
        }
        if let Ok(s) = TwoQubitState::normalized(v) {
            return s;
        }
    }
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
