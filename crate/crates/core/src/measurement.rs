//! Simultaneous two-spin measurements, single-preparation trials and the
//! probability-expectation estimators built from their counts.
//!
//! Outcomes are always ordered (++, +−, −+, −−). The x basis applies the real
//! change `|±x⟩ = (|+⟩ ± |−⟩)/√2` to each qubit.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Ket4, Mat4, C64};
use crate::qstate::{EnsembleSpec, TwoQubitState};

const STATE_NORM_TOL: f64 = 1e-8;
const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    ZZ,
    XX,
}

impl Basis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Basis::ZZ => "ZZ",
            Basis::XX => "XX",
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ZZ" | "zz" => Ok(Basis::ZZ),
            "XX" | "xx" => Ok(Basis::XX),
            other => Err(Error::Parse(format!("unknown basis `{other}`"))),
        }
    }
}

/// Four outcome probabilities, or estimates of their expectations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prob4(pub [f64; 4]);

impl Prob4 {
    pub fn new(p: [f64; 4]) -> Result<Self> {
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Domain(format!("probabilities {p:?} outside [0, 1]")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Domain(format!("probabilities sum to {s}")));
        }
        Ok(Prob4(p))
    }

    /// Outcome `k` in 1..=4.
    pub fn p(&self, k: usize) -> f64 {
        self.0[k - 1]
    }

    pub fn max_abs_diff(&self, other: &Prob4) -> f64 {
        (0..4)
            .map(|i| (self.0[i] - other.0[i]).abs())
            .fold(0.0, f64::max)
    }
}

/// Occurrence counts over `trials` single-preparation trials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub basis: Basis,
    pub counts: [u64; 4],
    pub trials: u64,
}

impl CountTable {
    pub fn empty(basis: Basis) -> Self {
        CountTable {
            basis,
            counts: [0; 4],
            trials: 0,
        }
    }

    pub fn new(basis: Basis, counts: [u64; 4]) -> Self {
        CountTable {
            basis,
            counts,
            trials: counts.iter().sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s: u64 = self.counts.iter().sum();
        if s != self.trials {
            return Err(Error::Domain(format!(
                "counts sum to {s}, trials = {}",
                self.trials
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn record(&mut self, outcome: usize) {
        self.counts[outcome] += 1;
        self.trials += 1;
    }

    pub fn merge(&self, other: &CountTable) -> Result<CountTable> {
        if self.basis != other.basis {
            return Err(Error::Domain(
                "cannot merge counts from different bases".into(),
            ));
        }
        let mut counts = self.counts;
        for (c, o) in counts.iter_mut().zip(other.counts) {
            *c += o;
        }
        Ok(CountTable {
            basis: self.basis,
            counts,
            trials: self.trials + other.trials,
        })
    }

    /// Writes rows `basis,k,count,trials` with a header, k running 1..=4.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["basis", "k", "count", "trials"])?;
        for (k, c) in self.counts.iter().enumerate() {
            wr.write_record([
                self.basis.as_str().to_string(),
                (k + 1).to_string(),
                c.to_string(),
                self.trials.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<CountTable> {
        let mut rd = csv::Reader::from_reader(r);
        let mut basis = None;
        let mut counts = [None; 4];
        let mut trials = None;
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(Error::Parse(format!(
                    "expected 4 columns, got {}",
                    rec.len()
                )));
            }
            let b: Basis = rec[0].parse()?;
            if *basis.get_or_insert(b) != b {
                return Err(Error::Parse("mixed bases in one count table".into()));
            }
            let k: usize = parse_field(&rec[1], "k")?;
            if !(1..=4).contains(&k) {
                return Err(Error::Parse(format!("outcome index {k} outside 1..=4")));
            }
            let t: u64 = parse_field(&rec[3], "trials")?;
            if *trials.get_or_insert(t) != t {
                return Err(Error::Parse("inconsistent trials column".into()));
            }
            if counts[k - 1]
                .replace(parse_field::<u64>(&rec[2], "count")?)
                .is_some()
            {
                return Err(Error::Parse(format!("duplicate row for k = {k}")));
            }
        }
        let basis = basis.ok_or(Error::Empty("count table"))?;
        let mut c = [0u64; 4];
        for (i, v) in counts.iter().enumerate() {
            c[i] = v.ok_or_else(|| Error::Parse(format!("missing row for k = {}", i + 1)))?;
        }
        let t = CountTable {
            basis,
            counts: c,
            trials: trials.unwrap_or(0),
        };
        t.validate()?;
        Ok(t)
    }
}

fn parse_field<T: FromStr>(s: &str, name: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad {name} field `{s}`")))
}

/// Components of `c` in the product x basis, i.e. `(H⊗H)·c`.
#[inline]
pub fn to_x_basis(c: &Ket4) -> Ket4 {
    let s01 = c[0] + c[1];
    let d01 = c[0] - c[1];
    let s23 = c[2] + c[3];
    let d23 = c[2] - c[3];
    [
        (s01 + s23) * 0.5,
        (d01 + d23) * 0.5,
        (s01 - s23) * 0.5,
        (d01 - d23) * 0.5,
    ]
}

/// Outcome probabilities of a ket assumed to have unit norm.
#[inline]
pub fn ket_probs(c: &Ket4, basis: Basis) -> [f64; 4] {
    let c = match basis {
        Basis::ZZ => *c,
        Basis::XX => to_x_basis(c),
    };
    c.map(|x| x.norm_sqr())
}

pub fn outcome_probs(s: &TwoQubitState, basis: Basis) -> Result<Prob4> {
    let n = s.norm_sqr();
    if (n - 1.0).abs() > STATE_NORM_TOL {
        return Err(Error::Domain(format!("state norm² = {n}, expected 1")));
    }
    Ok(Prob4(ket_probs(s.amplitudes(), basis)))
}

/// Inverse-CDF categorical draw on one uniform `u ∈ [0, 1)`: the smallest
/// `k` with `u < p₁ + … + p_k`. Outcomes of zero probability are never
/// returned, even when rounding leaves the total slightly below 1.
#[inline]
pub fn draw_outcome(p: &[f64; 4], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(3)
}

/// Draws `preps_per_state` outcomes for every probability vector of the stream.
pub fn sample_counts<I, R>(
    prob_stream: I,
    basis: Basis,
    preps_per_state: u64,
    rng: &mut R,
) -> Result<CountTable>
where
    I: IntoIterator<Item = [f64; 4]>,
    R: Rng + ?Sized,
{
    if preps_per_state == 0 {
        return Err(Error::Domain(
            "need at least one preparation per state".into(),
        ));
    }
    let mut t = CountTable::empty(basis);
    for p in prob_stream {
        for _ in 0..preps_per_state {
            t.record(draw_outcome(&p, rng.random::<f64>()));
        }
    }
    Ok(t)
}

/// Relative frequencies `N(A_k, L)/L`.
pub fn single_prep_mean(t: &CountTable) -> Result<Prob4> {
    if t.trials == 0 {
        return Err(Error::Empty("count table with zero trials"));
    }
    t.validate()?;
    let l = t.trials as f64;
    Ok(Prob4(t.counts.map(|c| c as f64 / l)))
}

/// Componentwise mean of per-state frequency vectors.
pub fn two_level_mean(per_state: &[Prob4]) -> Result<Prob4> {
    if per_state.is_empty() {
        return Err(Error::Empty("per-state frequencies"));
    }
    let mut acc = [0.0; 4];
    for p in per_state {
        for (a, x) in acc.iter_mut().zip(p.0) {
            *a += x;
        }
    }
    let n = per_state.len() as f64;
    Ok(Prob4(acc.map(|a| a / n)))
}

/// `E{P(A_k)}` for states drawn from `spec` and evolved by `u`.
///
/// The outcome probability is linear in the projector of the prepared state
/// and the two qubits are drawn independently, so the expectation is the
/// outcome distribution of the mean density matrix.
pub fn expected_outcome_probs(spec: &EnsembleSpec, u: &Mat4, basis: Basis) -> Prob4 {
    expected_probs_of_density(&spec.mean_density(), u, basis)
}

pub fn expected_probs_of_density(rho: &Mat4, u: &Mat4, basis: Basis) -> Prob4 {
    // diag(B U ρ U† B†) with B the basis change; only the rows of B U matter.
    let mut bu = [[C64::new(0.0, 0.0); 4]; 4];
    for j in 0..4 {
        let col = [u.0[0][j], u.0[1][j], u.0[2][j], u.0[3][j]];
        let col = match basis {
            Basis::ZZ => col,
            Basis::XX => to_x_basis(&col),
        };
        for i in 0..4 {
            bu[i][j] = col[i];
        }
    }
    let mut p = [0.0; 4];
    for (k, row) in bu.iter().enumerate() {
        let mut acc = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                acc += (row[a] * rho.0[a][b] * row[b].conj()).re;
            }
        }
        p[k] = acc.clamp(0.0, 1.0);
    }
    Prob4(p)
}
