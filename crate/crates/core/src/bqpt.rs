//! Blind process tomography of the coupled evolution.
//!
//! Inputs are single-preparation expectation estimates for ensembles whose
//! statistics are known but whose individual draws are not. Part one works
//! on z-basis `|+−⟩` probabilities at `τ₁` and yields `v = sgn(cos Δ_E)·sin Δ_E`
//! with `Δ_E = −Jxy·τ₁/ħ`. Part two works on x-basis outcomes at `τ₂ = 2τ₁`
//! and yields `x = Jz·τ₂/ħ mod 2π`. Together they fix `M(τ₃)` at `τ₃ = 4τ₁`
//! regardless of the unresolved multiples of π and 2π.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flags::Flags;
use crate::heisenberg::{evolution_from_phases, wrap_phase, KnownPhysics, Unitary4};
use crate::linalg::Mat4;
use crate::measurement::{expected_probs_of_density, Basis, Prob4};
use crate::qstate::{EnsembleSpec, ParamDist};
use crate::source::{Campaign, Measured, MeasurementSource};

/// Coefficient of the v-dependent cross term below which its sign is not used.
pub const SIGN_FLOOR: f64 = 1e-12;
/// Smallest usable `|(1−a)b − a(1−b)|`.
pub const ILL_CONDITIONED: f64 = 1e-6;
/// Coarse scan resolution for the Jz phase fit (0.1°).
pub const FIT_GRID: usize = 3600;
/// Target width of the golden-section bracket, radians.
pub const FIT_TOL: f64 = 1e-10;
/// Floor used in place of the sampling noise when expectations are exact.
const EXACT_NOISE_FLOOR: f64 = 1e-28;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMoments {
    /// E{r₁²}
    pub a: f64,
    /// E{r₂²}
    pub b: f64,
    /// E{r₁·sqrt(1−r₁²)}
    pub g1: f64,
    /// E{r₂·sqrt(1−r₂²)}
    pub g2: f64,
    /// E{sin Δ_I}
    pub s: f64,
}

impl EnsembleMoments {
    pub fn from_spec(spec: &EnsembleSpec) -> Self {
        EnsembleMoments {
            a: spec.r1.mean_square(),
            b: spec.r2.mean_square(),
            g1: spec.r1.mean_r_q(),
            g2: spec.r2.mean_r_q(),
            s: spec.mean_sin_delta_initial(),
        }
    }

    /// Known phase and cross moments with measured amplitude moments.
    pub fn with_amplitudes(self, amp: &AmplitudeMoments) -> Self {
        EnsembleMoments {
            a: amp.a,
            b: amp.b,
            ..self
        }
    }

    /// Model value of E{p₂} in the z basis for a given v.
    pub fn expected_p2(&self, v: f64) -> f64 {
        let v2 = v * v;
        let c = (1.0 - v2).max(0.0).sqrt();
        self.a * (1.0 - self.b) * (1.0 - v2) + (1.0 - self.a) * self.b * v2
            - 2.0 * self.g1 * self.g2 * c * v * self.s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmplitudeMoments {
    pub a: f64,
    pub b: f64,
    pub clamped: bool,
}

/// Solves `E{p₁} = ab`, `E{p₄} = (1−a)(1−b)` for `a ≤ b`.
pub fn invert_amplitude_moments(m1: f64, m4: f64) -> Result<AmplitudeMoments> {
    if !(0.0..=1.0).contains(&m1) || !(0.0..=1.0).contains(&m4) {
        return Err(Error::Domain(format!(
            "moments ({m1}, {m4}) outside [0, 1]"
        )));
    }
    let sum = 1.0 + m1 - m4;
    let disc = sum * sum - 4.0 * m1;
    let clamped = disc < 0.0;
    let root = disc.max(0.0).sqrt();
    let hi = 0.5 * (sum + root);
    // product of roots is m1; avoids cancellation in the small root
    let lo = if hi > 0.0 { m1 / hi } else { 0.0 };
    let out_of_range = hi > 1.0;
    Ok(AmplitudeMoments {
        a: lo.clamp(0.0, 1.0),
        b: hi.clamp(0.0, 1.0),
        clamped: clamped || out_of_range,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VEstimate {
    pub v_hat: f64,
    pub flags: Flags,
}

/// Step one (zero mean sin Δ_I) gives |v|; step two compares the observation
/// with the cross-term-free prediction to get the sign.
pub fn estimate_v(
    ep2_step1: f64,
    ep2_step2: f64,
    mom1: &EnsembleMoments,
    mom2: &EnsembleMoments,
) -> Result<VEstimate> {
    let (a, b) = (mom1.a, mom1.b);
    let denom = (1.0 - a) * b - a * (1.0 - b);
    if denom.abs() < ILL_CONDITIONED {
        return Err(Error::IllConditioned(format!(
            "(1-a)b - a(1-b) = {denom:e} for a = {a}, b = {b}"
        )));
    }
    let raw = (ep2_step1 - a * (1.0 - b)) / denom;
    let mut flags = Flags::empty();
    if !(0.0..=1.0).contains(&raw) {
        flags |= Flags::CLAMPED_V;
    }
    let v2 = raw.clamp(0.0, 1.0);
    let abs_v = v2.sqrt();

    let coef = 2.0 * mom2.g1 * mom2.g2 * (1.0 - v2).sqrt() * abs_v * mom2.s;
    let sign = if coef.abs() <= SIGN_FLOOR {
        flags |= Flags::SIGN_INDETERMINATE;
        1.0
    } else {
        let (a2, b2) = (mom2.a, mom2.b);
        let no_cross = a2 * (1.0 - b2) * (1.0 - v2) + (1.0 - a2) * b2 * v2;
        let d = (no_cross - ep2_step2) * mom2.s.signum();
        if d >= 0.0 {
            1.0
        } else {
            -1.0
        }
    };
    Ok(VEstimate {
        v_hat: sign * abs_v,
        flags,
    })
}

/// Principal determination `arcsin(v̂)`.
pub fn delta_ed(v_hat: f64) -> f64 {
    v_hat.clamp(-1.0, 1.0).asin()
}

/// x-basis data for one known ensemble at `τ₂`.
#[derive(Clone, Copy, Debug)]
pub struct PhaseObservation {
    pub ensemble: EnsembleSpec,
    pub xx: Measured,
    /// z-basis outcomes do not depend on x; they only shift the objective.
    pub zz: Option<Measured>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JzPhaseFit {
    /// Estimate of `Jz·τ₂/ħ` reduced into (−π, π].
    pub x_hat: f64,
    /// `x̂ − Ĵxy·τ₂/ħ − GB·τ₂/ħ` reduced into (−π, π].
    pub delta_phi10d_hat: f64,
    pub objective: f64,
    /// Max minus min objective over the coarse scan.
    pub spread: f64,
    pub noise_floor: f64,
}

/// D phases `ω_k·τ₂` up to a common offset, given the known parts and x.
#[inline]
pub fn tau2_phases(x: f64, jxy_phase: f64, gb_phase: f64) -> [f64; 4] {
    let h = 0.5 * x;
    [gb_phase - h, -jxy_phase + h, jxy_phase + h, -gb_phase - h]
}

struct FitModel {
    terms: Vec<(Mat4, Basis, Prob4)>,
    jxy_phase: f64,
    gb_phase: f64,
}

impl FitModel {
    fn objective(&self, x: f64) -> f64 {
        let u = evolution_from_phases(tau2_phases(x, self.jxy_phase, self.gb_phase));
        self.terms
            .iter()
            .map(|(rho, basis, obs)| {
                let p = expected_probs_of_density(rho, &u, *basis);
                (0..4).map(|k| (p.0[k] - obs.0[k]).powi(2)).sum::<f64>()
            })
            .sum()
    }
}

/// Least-squares fit of `x = Jz·τ₂/ħ mod 2π` to x-basis expectations.
///
/// `jxy_phase` and `gb_phase` are `Ĵxy·τ₂/ħ` and `GB·τ₂/ħ`; any multiple of 2π
/// in them is irrelevant.
pub fn fit_jz_phase(obs: &[PhaseObservation], jxy_phase: f64, gb_phase: f64) -> Result<JzPhaseFit> {
    if obs.is_empty() {
        return Err(Error::Empty("x-basis observations"));
    }
    let mut terms = Vec::new();
    let mut noise = 0.0;
    for o in obs {
        o.ensemble.validate()?;
        let rho = o.ensemble.mean_density();
        terms.push((rho, Basis::XX, o.xx.probs));
        noise += o.xx.variance_sum();
        if let Some(zz) = o.zz {
            terms.push((rho, Basis::ZZ, zz.probs));
            noise += zz.variance_sum();
        }
    }
    let noise_floor = if noise > 0.0 {
        noise
    } else {
        EXACT_NOISE_FLOOR
    };
    let model = FitModel {
        terms,
        jxy_phase: wrap_phase(jxy_phase),
        gb_phase: wrap_phase(gb_phase),
    };

    let step = 2.0 * PI / FIT_GRID as f64;
    let mut best = (f64::INFINITY, 0.0);
    let mut worst = f64::NEG_INFINITY;
    for i in 1..=FIT_GRID {
        let x = -PI + i as f64 * step;
        let f = model.objective(x);
        if f < best.0 {
            best = (f, x);
        }
        worst = worst.max(f);
    }
    let spread = worst - best.0;
    let threshold = 10.0 * noise_floor;
    if spread < threshold {
        return Err(Error::IndeterminatePhase { spread, threshold });
    }

    let (f, x) = golden_section(
        |x| model.objective(x),
        best.1 - step,
        best.1 + step,
        FIT_TOL,
    );
    let (objective, x) = if f <= best.0 { (f, x) } else { best };
    let x_hat = wrap_phase(x);
    Ok(JzPhaseFit {
        x_hat,
        delta_phi10d_hat: wrap_phase(x_hat - jxy_phase - gb_phase),
        objective,
        spread,
        noise_floor,
    })
}

/// Minimizes a unimodal function on `[lo, hi]`; returns `(f_min, x_min)`.
fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (f1, x1)
    } else {
        (f2, x2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEstimates {
    pub v_hat: f64,
    pub delta_ed_hat: f64,
    pub x_hat: f64,
    pub delta_phi10d_hat: f64,
}

/// `ω̂_k·τ₃` for `τ₃ = 4τ₁`, each reduced into (−π, π].
pub fn tau3_phases(
    delta_ed_hat: f64,
    delta_phi10d_hat: f64,
    known: &KnownPhysics,
    tau1: f64,
    k_xy: i64,
    k_z: i64,
) -> [f64; 4] {
    let tau2 = 2.0 * tau1;
    let tau3 = 2.0 * tau2;
    // Ĵxy·τ₁/ħ and Ĵz·τ₂/ħ on the chosen determinations
    let jxy1 = -delta_ed_hat + k_xy as f64 * PI;
    let jxy2 = 2.0 * jxy1;
    let gb2 = known.zeeman_phase(tau2);
    let jz2 = delta_phi10d_hat + 2.0 * k_z as f64 * PI + jxy2 + gb2;
    // at τ₃: Jxy phase 4·jxy1, half the Jz phase is jz2
    let jxy3 = wrap_phase(4.0 * jxy1);
    let gb3 = wrap_phase(known.zeeman_phase(tau3));
    let half_jz3 = wrap_phase(jz2);
    [
        wrap_phase(gb3 - half_jz3),
        wrap_phase(-jxy3 + half_jz3),
        wrap_phase(jxy3 + half_jz3),
        wrap_phase(-gb3 - half_jz3),
    ]
}

/// `M̂(τ₃)`, identical for every choice of integer determinations.
pub fn reconstruct_process(
    delta_ed_hat: f64,
    delta_phi10d_hat: f64,
    known: &KnownPhysics,
    tau1: f64,
    k_xy: i64,
    k_z: i64,
) -> Unitary4 {
    evolution_from_phases(tau3_phases(
        delta_ed_hat,
        delta_phi10d_hat,
        known,
        tau1,
        k_xy,
        k_z,
    ))
}

/// The four preparation ensembles of the protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEnsembles {
    /// Part one, zero mean sin Δ_I.
    pub jxy_step1: EnsembleSpec,
    /// Part one, known positive mean sin Δ_I.
    pub jxy_step2: EnsembleSpec,
    pub jz_inst1: EnsembleSpec,
    pub jz_inst2: EnsembleSpec,
}

impl Default for ProtocolEnsembles {
    fn default() -> Self {
        let zero = ParamDist::Fixed(0.0);
        let low = ParamDist::uniform(0.1, 0.4);
        let high = ParamDist::uniform(0.6, 0.9);
        let full = ParamDist::uniform(0.0, 2.0 * PI);
        let half = ParamDist::uniform(-PI / 2.0, PI / 2.0);
        ProtocolEnsembles {
            jxy_step1: EnsembleSpec {
                r1: low,
                theta1: zero,
                phi1: full,
                r2: high,
                theta2: zero,
                phi2: full,
            },
            jxy_step2: EnsembleSpec {
                r1: low,
                theta1: zero,
                phi1: zero,
                r2: high,
                theta2: zero,
                phi2: ParamDist::uniform(0.0, PI),
            },
            jz_inst1: EnsembleSpec {
                r1: low,
                theta1: zero,
                phi1: half,
                r2: low,
                theta2: zero,
                phi2: half,
            },
            jz_inst2: EnsembleSpec {
                r1: high,
                theta1: zero,
                phi1: half,
                r2: high,
                theta2: zero,
                phi2: half,
            },
        }
    }
}

/// Measurement budget of one campaign family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// States per z-basis campaign.
    pub states: u64,
    /// Preparations per state.
    pub preps: u64,
    /// x-basis states as a multiple of `states`.
    pub xx_scale: f64,
}

impl Budget {
    pub fn xx_states(&self) -> u64 {
        ((self.states as f64 * self.xx_scale).round() as u64).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartOne {
    pub amplitudes: AmplitudeMoments,
    pub v: VEstimate,
    pub delta_ed_hat: f64,
    pub flags: Flags,
}

fn pooled(a: &Measured, b: &Measured) -> Prob4 {
    match (a.trials, b.trials) {
        (Some(la), Some(lb)) if la + lb > 0 => {
            let (wa, wb) = (la as f64, lb as f64);
            Prob4(std::array::from_fn(|k| {
                (a.probs.0[k] * wa + b.probs.0[k] * wb) / (wa + wb)
            }))
        }
        _ => Prob4(std::array::from_fn(|k| 0.5 * (a.probs.0[k] + b.probs.0[k]))),
    }
}

/// z-basis campaigns for both part-one ensembles at `tau`, then v̂ and Δ̂_Ed.
pub fn part_one<S: MeasurementSource + ?Sized>(
    source: &mut S,
    prefix: &str,
    tau: f64,
    ens: &ProtocolEnsembles,
    budget: &Budget,
) -> Result<PartOne> {
    let campaign = |step: &str, ensemble: EnsembleSpec| Campaign {
        label: format!("{prefix}_zz_{step}"),
        tau,
        ensemble,
        basis: Basis::ZZ,
        states: budget.states,
        preps: budget.preps,
    };
    let s1 = source.measure(&campaign("step1", ens.jxy_step1))?;
    let s2 = source.measure(&campaign("step2", ens.jxy_step2))?;
    // p₁ and p₄ do not depend on the phases, so both steps estimate a and b
    let amp_obs = pooled(&s1, &s2);
    let amplitudes = invert_amplitude_moments(amp_obs.p(1), amp_obs.p(4))?;
    let mom1 = EnsembleMoments::from_spec(&ens.jxy_step1).with_amplitudes(&amplitudes);
    let mom2 = EnsembleMoments::from_spec(&ens.jxy_step2).with_amplitudes(&amplitudes);
    let v = estimate_v(s1.probs.p(2), s2.probs.p(2), &mom1, &mom2)?;
    let mut flags = v.flags;
    if amplitudes.clamped {
        flags |= Flags::CLAMPED_MOMENTS;
    }
    Ok(PartOne {
        amplitudes,
        v,
        delta_ed_hat: delta_ed(v.v_hat),
        flags,
    })
}

/// x-basis campaigns for both part-two ensembles at `tau`, then the phase fit.
pub fn part_two<S: MeasurementSource + ?Sized>(
    source: &mut S,
    prefix: &str,
    tau: f64,
    ens: &ProtocolEnsembles,
    budget: &Budget,
    jxy_phase: f64,
    gb_phase: f64,
) -> Result<JzPhaseFit> {
    let mut obs = Vec::with_capacity(2);
    for (name, ensemble) in [("inst1", ens.jz_inst1), ("inst2", ens.jz_inst2)] {
        let c = Campaign {
            label: format!("{prefix}_xx_{name}"),
            tau,
            ensemble,
            basis: Basis::XX,
            states: budget.xx_states(),
            preps: budget.preps,
        };
        obs.push(PhaseObservation {
            ensemble,
            xx: source.measure(&c)?,
            zz: None,
        });
    }
    fit_jz_phase(&obs, jxy_phase, gb_phase)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BqptReport {
    pub phases: PhaseEstimates,
    pub process: Unitary4,
    pub tau3: f64,
    pub flags: Flags,
}

/// Full tomography at `τ₁`, `τ₂ = 2τ₁`, returning `M̂(4τ₁)`.
pub fn run_bqpt<S: MeasurementSource + ?Sized>(
    source: &mut S,
    known: &KnownPhysics,
    tau1: f64,
    ens: &ProtocolEnsembles,
    budget: &Budget,
) -> Result<BqptReport> {
    if !(tau1 > 0.0) {
        return Err(Error::Domain(format!("tau1 must be positive, got {tau1}")));
    }
    let one = part_one(source, "bqpt_t1", tau1, ens, budget)?;
    let tau2 = 2.0 * tau1;
    // Ĵxy·τ₂/ħ = −2Δ̂_Ed on any determination, up to 2π
    let fit = part_two(
        source,
        "bqpt_t2",
        tau2,
        ens,
        budget,
        -2.0 * one.delta_ed_hat,
        known.zeeman_phase(tau2),
    )?;
    let phases = PhaseEstimates {
        v_hat: one.v.v_hat,
        delta_ed_hat: one.delta_ed_hat,
        x_hat: fit.x_hat,
        delta_phi10d_hat: fit.delta_phi10d_hat,
    };
    Ok(BqptReport {
        process: reconstruct_process(
            phases.delta_ed_hat,
            phases.delta_phi10d_hat,
            known,
            tau1,
            0,
            0,
        ),
        phases,
        tau3: 4.0 * tau1,
        flags: one.flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heisenberg::{evolution_matrix, PhysicalModel, HBAR};
    use crate::measurement::{expected_outcome_probs, outcome_probs};
    use crate::qstate::{product_state, sample_params};
    use crate::source::ExactSource;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn amplitude_inversion_examples() {
        let r = invert_amplitude_moments(0.0399, 0.3999).unwrap();
        assert_abs_diff_eq!(r.a, 0.07, epsilon = 1e-12);
        assert_abs_diff_eq!(r.b, 0.57, epsilon = 1e-12);
        assert!(!r.clamped);
        let r = invert_amplitude_moments(1.0, 0.0).unwrap();
        assert_eq!((r.a, r.b), (1.0, 1.0));
        let r = invert_amplitude_moments(0.0, 1.0).unwrap();
        assert_eq!((r.a, r.b), (0.0, 0.0));
        let r = invert_amplitude_moments(0.3, 0.3).unwrap();
        assert!(r.clamped);
        assert!(invert_amplitude_moments(-0.1, 0.3).is_err());
    }

    #[test]
    fn ensemble_moments_of_default_part_one() {
        let ens = ProtocolEnsembles::default();
        let m = EnsembleMoments::from_spec(&ens.jxy_step1);
        assert_abs_diff_eq!(m.a, 0.07, epsilon = 1e-12);
        assert_abs_diff_eq!(m.b, 0.57, epsilon = 1e-12);
        assert!(m.s.abs() < 1e-15);
        let m2 = EnsembleMoments::from_spec(&ens.jxy_step2);
        assert_abs_diff_eq!(m2.s, 2.0 / PI, epsilon = 1e-15);
        // forward-substituted moments invert back to a, b
        let inv = invert_amplitude_moments(m.a * m.b, (1.0 - m.a) * (1.0 - m.b)).unwrap();
        assert_abs_diff_eq!(inv.a, m.a, epsilon = 1e-14);
        assert_abs_diff_eq!(inv.b, m.b, epsilon = 1e-14);
    }

    fn mom(a: f64, b: f64, s: f64) -> EnsembleMoments {
        EnsembleMoments {
            a,
            b,
            g1: 0.2,
            g2: 0.4,
            s,
        }
    }

    #[test]
    fn estimate_v_examples() {
        let (a, b) = (0.07, 0.57);
        let m1 = mom(a, b, 0.0);
        let m2 = mom(a, b, 2.0 / PI);
        let v = estimate_v(a * (1.0 - b), 0.1, &m1, &m2).unwrap();
        assert_eq!(v.v_hat.abs(), 0.0);
        let v = estimate_v((1.0 - a) * b, 0.1, &m1, &m2).unwrap();
        assert_abs_diff_eq!(v.v_hat.abs(), 1.0, epsilon = 1e-15);
        let v = estimate_v(0.2801, m2.expected_p2(-0.5f64.sqrt()), &m1, &m2).unwrap();
        assert_abs_diff_eq!(v.v_hat, -0.70711, epsilon = 1e-5);
        assert_abs_diff_eq!(m1.expected_p2(v.v_hat), 0.2801, epsilon = 1e-12);
        assert!(matches!(
            estimate_v(0.2, 0.2, &mom(0.3, 0.3, 0.0), &m2),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn sign_recovered_in_both_directions_and_flagged_when_unresolvable() {
        let m1 = mom(0.07, 0.57, 0.0);
        let m2 = mom(0.07, 0.57, 2.0 / PI);
        for v in [-0.9, -0.3, 0.2, 0.8] {
            let e = estimate_v(m1.expected_p2(v), m2.expected_p2(v), &m1, &m2).unwrap();
            assert_abs_diff_eq!(e.v_hat, v, epsilon = 1e-12);
            assert!(e.flags.is_empty());
        }
        let e = estimate_v(m1.expected_p2(0.5), 0.3, &m1, &mom(0.07, 0.57, 0.0)).unwrap();
        assert!(e.flags.contains(Flags::SIGN_INDETERMINATE));
        assert!(e.v_hat > 0.0);
        let e = estimate_v(0.9, 0.3, &m1, &m2).unwrap();
        assert!(e.flags.contains(Flags::CLAMPED_V));
        assert_eq!(e.v_hat.abs(), 1.0);
    }

    #[test]
    fn delta_ed_examples() {
        assert_eq!(delta_ed(0.0), 0.0);
        assert_abs_diff_eq!(delta_ed(1.0), PI / 2.0);
        assert_abs_diff_eq!(delta_ed(0.7071), 0.7854, epsilon = 1e-4);
    }

    #[test]
    fn p2_model_matches_simulated_ensemble() {
        // model expectation against a Monte-Carlo average of exact outcome probabilities
        let ens = ProtocolEnsembles::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in [ens.jxy_step1, ens.jxy_step2] {
            let m = PhysicalModel::from_kelvin(2.0, 0.99, rng.random_range(0.0..1.5), 1.0).unwrap();
            let tau = rng.random_range(0.2e-9..1e-9);
            let u = evolution_matrix(&m, tau).unwrap();
            let n = 200_000;
            let mc: f64 = (0..n)
                .map(|_| {
                    outcome_probs(
                        &product_state(&sample_params(&spec, &mut rng))
                            .unwrap()
                            .evolve(&u),
                        Basis::ZZ,
                    )
                    .unwrap()
                    .p(2)
                })
                .sum::<f64>()
                / n as f64;
            let de = -m.jxy * tau / HBAR;
            let v = de.cos().signum() * de.sin();
            let model = EnsembleMoments::from_spec(&spec).expected_p2(v);
            assert!(
                (mc - model).abs() < 5.0 * 0.5 / (n as f64).sqrt(),
                "{mc} vs {model}"
            );
            let exact = expected_outcome_probs(&spec, &u, Basis::ZZ).p(2);
            assert_abs_diff_eq!(exact, model, epsilon = 1e-12);
        }
    }

    fn synthetic(x_star: f64, jxy: f64, gb: f64) -> Vec<PhaseObservation> {
        let ens = ProtocolEnsembles::default();
        let u = evolution_from_phases(tau2_phases(x_star, jxy, gb));
        [ens.jz_inst1, ens.jz_inst2]
            .into_iter()
            .map(|e| PhaseObservation {
                ensemble: e,
                xx: Measured {
                    probs: expected_outcome_probs(&e, &u, Basis::XX),
                    trials: None,
                },
                zz: None,
            })
            .collect()
    }

    #[test]
    fn fit_self_inversion_examples() {
        let (jxy, gb) = (0.7, -2.1);
        for x_star in [1.2, 0.0, PI - 1e-4] {
            let fit = fit_jz_phase(&synthetic(x_star, jxy, gb), jxy, gb).unwrap();
            assert!(
                wrap_phase(fit.x_hat - x_star).abs() < 1e-3,
                "{x_star} -> {}",
                fit.x_hat
            );
            assert!(wrap_phase(fit.x_hat - x_star).abs() < 1e-8);
            assert_abs_diff_eq!(
                wrap_phase(fit.delta_phi10d_hat + jxy + gb - fit.x_hat),
                0.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn fit_recovers_physical_phase_from_exact_source() {
        let m = PhysicalModel::from_kelvin(2.0, 0.99, 0.3, 1.0).unwrap();
        let tau2 = 1.06e-9;
        let ens = ProtocolEnsembles::default();
        let mut src = ExactSource { model: m };
        let budget = Budget {
            states: 1,
            preps: 1,
            xx_scale: 1.0,
        };
        let known = m.known();
        let fit = part_two(
            &mut src,
            "t",
            tau2,
            &ens,
            &budget,
            m.jxy * tau2 / HBAR,
            known.zeeman_phase(tau2),
        )
        .unwrap();
        assert!(wrap_phase(fit.x_hat - m.jz * tau2 / HBAR).abs() < 1e-9);
    }

    #[test]
    fn true_phase_is_global_minimum_of_objective() {
        let (jxy, gb, x_star) = (2.5, 0.4, -1.9);
        let obs = synthetic(x_star, jxy, gb);
        let terms = obs
            .iter()
            .map(|o| (o.ensemble.mean_density(), Basis::XX, o.xx.probs))
            .collect();
        let model = FitModel {
            terms,
            jxy_phase: jxy,
            gb_phase: gb,
        };
        let f_true = model.objective(x_star);
        for i in 1..=FIT_GRID {
            let x = -PI + i as f64 * 2.0 * PI / FIT_GRID as f64;
            assert!(f_true <= model.objective(x));
        }
    }

    #[test]
    fn flat_objective_is_indeterminate() {
        // fully incoherent qubits carry no phase information
        let mut obs = synthetic(0.5, 0.1, 0.2);
        for o in obs.iter_mut() {
            o.ensemble.r1 = ParamDist::Fixed(1.0);
            o.ensemble.r2 = ParamDist::Fixed(1.0);
            o.xx.probs = Prob4([0.25; 4]);
            o.xx.trials = Some(1000);
        }
        assert!(matches!(
            fit_jz_phase(&obs, 0.1, 0.2),
            Err(Error::IndeterminatePhase { .. })
        ));
    }

    fn true_phases(m: &PhysicalModel, tau1: f64) -> (f64, f64) {
        let de = -m.jxy * tau1 / HBAR;
        let v = de.cos().signum() * de.sin();
        let tau2 = 2.0 * tau1;
        let x = m.jz * tau2 / HBAR;
        (
            delta_ed(v),
            wrap_phase(x - m.jxy * tau2 / HBAR - m.known().zeeman_phase(tau2)),
        )
    }

    #[test]
    fn reconstruct_examples() {
        let m = PhysicalModel::from_kelvin(2.0, 0.99, 0.3, 1.0).unwrap();
        let tau1 = 0.5e-9;
        let (ded, dphi) = true_phases(&m, tau1);
        let known = m.known();
        let m3 = evolution_matrix(&m, 4.0 * tau1).unwrap();
        let a = reconstruct_process(ded, dphi, &known, tau1, 0, 0);
        let b = reconstruct_process(ded, dphi, &known, tau1, 2, 1);
        assert!(a.max_abs_diff(&m3) < 1e-12);
        assert!(a.max_abs_diff(&b) < 1e-12);

        let gb2 = known.zeeman_phase(2.0 * tau1);
        let zero = reconstruct_process(0.0, wrap_phase(-gb2), &known, tau1, 0, 0);
        let g3 = known.zeeman_phase(4.0 * tau1);
        let d = Mat4::diag([
            crate::linalg::cis(-g3),
            crate::linalg::ONE,
            crate::linalg::ONE,
            crate::linalg::cis(g3),
        ]);
        assert!(zero.max_abs_diff(&d) < 1e-12);
    }

    #[test]
    fn bqpt_with_exact_expectations_recovers_process() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let m = PhysicalModel::from_kelvin(
                2.0,
                0.99,
                rng.random_range(0.05..1.5),
                rng.random_range(0.5..2.2),
            )
            .unwrap();
            let tau1 = 0.5e-9;
            let budget = Budget {
                states: 1,
                preps: 1,
                xx_scale: 1.0,
            };
            let r = run_bqpt(
                &mut ExactSource { model: m },
                &m.known(),
                tau1,
                &ProtocolEnsembles::default(),
                &budget,
            )
            .unwrap();
            let m3 = evolution_matrix(&m, 4.0 * tau1).unwrap();
            assert!(r.process.max_abs_diff(&m3) < 1e-9, "{:?}", r.phases);
        }
    }

    proptest! {
        #[test]
        fn v_roundtrip_through_model(v in -1.0f64..1.0, a in 0.0f64..0.3, b in 0.5f64..0.9) {
            let m1 = mom(a, b, 0.0);
            let m2 = mom(a, b, 0.6);
            let e = estimate_v(m1.expected_p2(v), m2.expected_p2(v), &m1, &m2).unwrap();
            prop_assert!((e.v_hat - v).abs() < 1e-7);
        }

        #[test]
        fn estimate_v_consumes_only_moments(shift in -3.0f64..3.0, v in -0.95f64..0.95) {
            // a common phase offset on θ₂ and φ₂ leaves every moment unchanged
            let ens = ProtocolEnsembles::default();
            let mut step2 = ens.jxy_step2;
            step2.theta2 = ParamDist::Fixed(shift);
            step2.phi2 = ParamDist::uniform(shift, shift + PI);
            let m1 = EnsembleMoments::from_spec(&ens.jxy_step1);
            let a = EnsembleMoments::from_spec(&ens.jxy_step2);
            let b = EnsembleMoments::from_spec(&step2);
            prop_assert!((a.s - b.s).abs() < 1e-12);
            let ea = estimate_v(m1.expected_p2(v), a.expected_p2(v), &m1, &a).unwrap();
            let eb = estimate_v(m1.expected_p2(v), a.expected_p2(v), &m1, &b).unwrap();
            prop_assert!((ea.v_hat - eb.v_hat).abs() < 1e-12);
        }

        #[test]
        fn reconstruction_is_k_invariant(ded in -1.5f64..1.5, dphi in -3.1f64..3.1, kx in -40i64..40, kz in -40i64..40) {
            let known = PhysicalModel::from_kelvin(2.0, 0.99, 0.0, 0.0).unwrap().known();
            let a = reconstruct_process(ded, dphi, &known, 0.5e-9, 0, 0);
            let b = reconstruct_process(ded, dphi, &known, 0.5e-9, kx, kz);
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
