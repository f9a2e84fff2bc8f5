//! Blind source separation and state restoration.
//!
//! The separator `U = Q·diag(e^{iγ_k})·Q` undoes `M(τ₃) = Q·diag(e^{−iω_kτ₃})·Q`
//! when `γ_k = ω̂_k·τ₃`. Adaptation consumes one stream of prepared states
//! through measurement campaigns; restoration applies `U` to a second,
//! disjoint stream, each state once.

use serde::{Deserialize, Serialize};

use crate::bqpt::{run_bqpt, tau3_phases, BqptReport, Budget, ProtocolEnsembles};
use crate::error::{Error, Result};
use crate::heisenberg::{conjugate_by_q, wrap_phase, KnownPhysics, Unitary4};
use crate::linalg::cis;
use crate::qstate::{inner, TwoQubitState};
use crate::source::MeasurementSource;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatorPhases {
    /// γ₁..γ₄, each reduced into (−π, π].
    pub gamma: [f64; 4],
}

/// γ from coupling estimates (joules) at `tau3`.
pub fn separator_phases(
    jxy_hat: f64,
    jz_hat: f64,
    known: &KnownPhysics,
    tau3: f64,
) -> SeparatorPhases {
    let f = tau3 / known.hbar;
    let gb = known.zeeman() * f;
    let xy = jxy_hat * f;
    let half_z = 0.5 * jz_hat * f;
    SeparatorPhases {
        gamma: [gb - half_z, -xy + half_z, xy + half_z, -gb - half_z].map(wrap_phase),
    }
}

/// γ straight from tomography phases and integer determinations; the result
/// does not depend on `k_xy`, `k_z`.
pub fn separator_phases_from_process(
    delta_ed_hat: f64,
    delta_phi10d_hat: f64,
    known: &KnownPhysics,
    tau1: f64,
    k_xy: i64,
    k_z: i64,
) -> SeparatorPhases {
    SeparatorPhases {
        gamma: tau3_phases(delta_ed_hat, delta_phi10d_hat, known, tau1, k_xy, k_z),
    }
}

pub fn separating_unitary(g: &SeparatorPhases) -> Unitary4 {
    conjugate_by_q(g.gamma.map(cis))
}

pub fn restore(state: &TwoQubitState, u: &Unitary4) -> TwoQubitState {
    state.evolve(u)
}

/// `|⟨reference|restored⟩|²`.
pub fn fidelity(restored: &TwoQubitState, reference: &TwoQubitState) -> f64 {
    inner(reference.amplitudes(), restored.amplitudes())
        .map(|z| z.norm_sqr().clamp(0.0, 1.0))
        .unwrap_or(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separator {
    pub phases: SeparatorPhases,
    pub unitary: Unitary4,
    /// Interval the separator inverts.
    pub tau3: f64,
    pub tomography: BqptReport,
}

/// Adaptation phase: tomography at `τ₁`, `2τ₁`, separator for `4τ₁`.
pub fn adapt<S: MeasurementSource + ?Sized>(
    source: &mut S,
    known: &KnownPhysics,
    tau1: f64,
    ens: &ProtocolEnsembles,
    budget: &Budget,
) -> Result<Separator> {
    let report = run_bqpt(source, known, tau1, ens, budget)?;
    let phases = separator_phases_from_process(
        report.phases.delta_ed_hat,
        report.phases.delta_phi10d_hat,
        known,
        tau1,
        0,
        0,
    );
    Ok(Separator {
        phases,
        unitary: separating_unitary(&phases),
        tau3: report.tau3,
        tomography: report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl FidelityStats {
    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Empty("fidelities"));
        }
        Ok(FidelityStats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heisenberg::{evolution_matrix, mixing_basis_q, PhysicalModel, HBAR};
    use crate::linalg::{Mat4, C64};
    use crate::qstate::random_pure_state;
    use crate::source::ExactSource;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn model() -> PhysicalModel {
        PhysicalModel::from_kelvin(2.0, 0.99, 0.3, 1.0).unwrap()
    }

    #[test]
    fn zero_couplings_and_tiny_field_give_identity() {
        let known = KnownPhysics {
            field_scale: 1.0,
            b_field: 1e-300,
            hbar: HBAR,
        };
        let g = separator_phases(0.0, 0.0, &known, 2e-9);
        assert!(g.gamma.iter().all(|x| x.abs() < 1e-200));
        assert!(separating_unitary(&g).max_abs_diff(&Mat4::identity()) < 1e-15);
    }

    #[test]
    fn true_couplings_cancel_the_evolution() {
        let m = model();
        let tau3 = 2e-9;
        let u = separating_unitary(&separator_phases(m.jxy, m.jz, &m.known(), tau3));
        let um = u * evolution_matrix(&m, tau3).unwrap();
        assert!(um.max_abs_diff(&Mat4::identity()) < 1e-12);
    }

    #[test]
    fn unitary_examples() {
        let z = separating_unitary(&SeparatorPhases { gamma: [0.0; 4] });
        assert!(z.max_abs_diff(&Mat4::identity()) < 1e-15);
        let u = separating_unitary(&SeparatorPhases {
            gamma: [0.0, PI, PI, 0.0],
        });
        let q = mixing_basis_q();
        let d = Mat4::diag([1.0, -1.0, -1.0, 1.0].map(|x| C64::new(x, 0.0)));
        assert!(u.max_abs_diff(&(q * d * q)) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g = SeparatorPhases {
                gamma: std::array::from_fn(|_| rng.random_range(-PI..PI)),
            };
            assert!(separating_unitary(&g).unitarity_error() < 1e-12);
        }
    }

    #[test]
    fn restore_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_pure_state(&mut rng);
        assert_eq!(restore(&c, &Mat4::identity()), c);

        let m = model();
        let m3 = evolution_matrix(&m, 2e-9).unwrap();
        let back = restore(&c.evolve(&m3), &m3.adjoint());
        for i in 0..4 {
            assert!((back.amplitudes()[i] - c.amplitudes()[i]).norm() < 1e-12);
        }

        let h = C64::new(FRAC_1_SQRT_2, 0.0);
        let bell = TwoQubitState::new([C64::new(0.0, 0.0), h, h, C64::new(0.0, 0.0)]).unwrap();
        let u = separating_unitary(&separator_phases(m.jxy, m.jz, &m.known(), 2e-9));
        assert_abs_diff_eq!(
            fidelity(&restore(&bell.evolve(&m3), &u), &bell),
            1.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn fidelity_examples() {
        let one = C64::new(1.0, 0.0);
        let zero = C64::new(0.0, 0.0);
        let a = TwoQubitState::new([one, zero, zero, zero]).unwrap();
        let b = TwoQubitState::new([zero, one, zero, zero]).unwrap();
        assert_eq!(fidelity(&a, &a), 1.0);
        assert_eq!(fidelity(&a, &b), 0.0);
        let g = TwoQubitState::new([C64::from_polar(1.0, 0.7), zero, zero, zero]).unwrap();
        assert_abs_diff_eq!(fidelity(&g, &a), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn exact_adaptation_restores_every_state() {
        let m = model();
        let tau1 = 0.5e-9;
        let budget = Budget {
            states: 1,
            preps: 1,
            xx_scale: 1.0,
        };
        let sep = adapt(
            &mut ExactSource { model: m },
            &m.known(),
            tau1,
            &ProtocolEnsembles::default(),
            &budget,
        )
        .unwrap();
        let m3 = evolution_matrix(&m, sep.tau3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let c = random_pure_state(&mut rng);
            assert_abs_diff_eq!(
                fidelity(&restore(&c.evolve(&m3), &sep.unitary), &c),
                1.0,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn stats_summary() {
        let s = FidelityStats::from_values(&[0.5, 1.0, 0.75]).unwrap();
        assert_eq!((s.count, s.mean, s.min, s.max), (3, 0.75, 0.5, 1.0));
        assert!(FidelityStats::from_values(&[]).is_err());
    }

    proptest! {
        #[test]
        fn determination_shifts_leave_separator_unchanged(
            ded in -1.5f64..1.5, dphi in -3.1f64..3.1, n in -30i64..30, k in -30i64..30,
        ) {
            let known = model().known();
            let a = separating_unitary(&separator_phases_from_process(ded, dphi, &known, 0.5e-9, 0, 0));
            let b = separating_unitary(&separator_phases_from_process(ded, dphi, &known, 0.5e-9, n, k));
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn coupling_shift_by_one_determination_is_invisible(j in 0.0f64..1.5, z in 0.4f64..2.3, n in -5i64..5) {
            // Ĵxy·τ₁/ħ shifted by nπ is Ĵxy·τ₃/ħ shifted by 4nπ
            let known = model().known();
            let (tau1, k_b) = (0.5e-9, crate::heisenberg::K_B);
            let jxy = j * k_b;
            let shifted = jxy + n as f64 * PI * HBAR / tau1;
            let a = separator_phases(jxy, z * k_b, &known, 4.0 * tau1);
            let b = separator_phases(shifted, z * k_b, &known, 4.0 * tau1);
            for i in 0..4 {
                prop_assert!(wrap_phase(a.gamma[i] - b.gamma[i]).abs() < 1e-9);
            }
        }
    }
}
