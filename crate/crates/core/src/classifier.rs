//! Overlap-based classification of classical unit vectors stored as register
//! kets, with a swap-test channel as the only quantum primitive.
//!
//! The channel returns 1 with probability `(1 − |⟨a|b⟩|²)/2`, so the overlap
//! is recovered as `1 − 2·(failure rate)`. Complex dot products come from
//! three overlaps with auxiliary normalized sums `v₁ + v₂` and `v₁ + i·v₂`.

use std::io::Read;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm_sqr, C64};
use crate::qstate::{gaussian, inner};

const ENCODE_NORM_TOL: f64 = 1e-8;
const KET_NORM_TOL: f64 = 1e-10;
/// Auxiliary sums shorter than this are treated as collapsed.
pub const DEGENERACY: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct RegisterKet {
    amplitudes: Vec<C64>,
    qubits: u32,
}

impl RegisterKet {
    pub fn new(amplitudes: Vec<C64>) -> Result<Self> {
        let len = amplitudes.len();
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::Domain(format!(
                "register length {len} is not a power of two"
            )));
        }
        let n = norm_sqr(&amplitudes);
        if (n - 1.0).abs() > KET_NORM_TOL {
            return Err(Error::Domain(format!("register norm² = {n}, expected 1")));
        }
        Ok(RegisterKet {
            amplitudes,
            qubits: len.trailing_zeros(),
        })
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn qubits(&self) -> u32 {
        self.qubits
    }
}

/// Pads a unit vector with zeros to `2^qubits` components.
pub fn encode(v: &[C64], qubits: u32) -> Result<RegisterKet> {
    let dim = 1usize
        .checked_shl(qubits)
        .filter(|d| *d > 0)
        .ok_or_else(|| Error::Domain(format!("{qubits} qubits is too many")))?;
    if v.len() > dim {
        return Err(Error::Domain(format!(
            "vector of length {} does not fit {qubits} qubits",
            v.len()
        )));
    }
    let n = norm_sqr(v);
    if (n - 1.0).abs() > ENCODE_NORM_TOL {
        return Err(Error::Domain(format!("vector norm² = {n}, expected 1")));
    }
    let mut amplitudes = v.to_vec();
    amplitudes.resize(dim, C64::new(0.0, 0.0));
    Ok(RegisterKet { amplitudes, qubits })
}

/// `|⟨a|b⟩|²`
pub fn overlap(a: &RegisterKet, b: &RegisterKet) -> Result<f64> {
    if a.qubits != b.qubits {
        return Err(Error::DimensionMismatch {
            left: a.amplitudes.len(),
            right: b.amplitudes.len(),
        });
    }
    Ok(inner(&a.amplitudes, &b.amplitudes)?.norm_sqr().min(1.0))
}

/// Probability that the swap test reports a difference.
pub fn swap_failure_probability(a: &RegisterKet, b: &RegisterKet) -> Result<f64> {
    Ok(0.5 * (1.0 - overlap(a, b)?))
}

/// One swap-test shot; `true` is the outcome 1.
pub fn overlap_channel<R: Rng + ?Sized>(
    a: &RegisterKet,
    b: &RegisterKet,
    rng: &mut R,
) -> Result<bool> {
    let p = swap_failure_probability(a, b)?;
    Ok(rng.random::<f64>() < p)
}

/// Counts register preparations consumed by channel shots.
#[derive(Debug, Default)]
pub struct PreparationLedger {
    count: AtomicU64,
}

impl PreparationLedger {
    pub fn record(&self, n: u64) {
        self.count.fetch_add(n, Ordering::Relaxed);
    }

    pub fn total(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

/// Swap-test channel that books two fresh preparations per shot.
#[derive(Debug, Default)]
pub struct OverlapChannel {
    pub ledger: PreparationLedger,
}

impl OverlapChannel {
    pub fn shot<R: Rng + ?Sized>(
        &self,
        a: &RegisterKet,
        b: &RegisterKet,
        rng: &mut R,
    ) -> Result<bool> {
        let bit = overlap_channel(a, b, rng)?;
        self.ledger.record(2);
        Ok(bit)
    }

    /// Number of outcomes 1 over `shots` shots.
    pub fn failures<R: Rng + ?Sized>(
        &self,
        a: &RegisterKet,
        b: &RegisterKet,
        shots: u64,
        rng: &mut R,
    ) -> Result<u64> {
        let p = swap_failure_probability(a, b)?;
        let n = (0..shots).filter(|_| rng.random::<f64>() < p).count() as u64;
        self.ledger.record(2 * shots);
        Ok(n)
    }
}

/// `clamp(1 − 2·failures/L, 0, 1)`
pub fn estimate_overlap(failures: u64, count: u64) -> Result<f64> {
    if count == 0 {
        return Err(Error::Empty("swap-test shots"));
    }
    Ok((1.0 - 2.0 * failures as f64 / count as f64).clamp(0.0, 1.0))
}

/// Where overlaps come from.
pub trait OverlapOracle {
    fn overlap(&mut self, a: &RegisterKet, b: &RegisterKet) -> Result<f64>;

    /// Mean overlap of `query` with `refs`, `budget` shots per reference.
    fn mean_overlap(
        &mut self,
        query: &RegisterKet,
        refs: &[RegisterKet],
        budget: u64,
    ) -> Result<f64> {
        let _ = budget;
        if refs.is_empty() {
            return Err(Error::Empty("class references"));
        }
        let mut s = 0.0;
        for r in refs {
            s += self.overlap(query, r)?;
        }
        Ok(s / refs.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ExactOverlap;

impl OverlapOracle for ExactOverlap {
    fn overlap(&mut self, a: &RegisterKet, b: &RegisterKet) -> Result<f64> {
        overlap(a, b)
    }
}

/// Estimates from `shots` swap tests per overlap; class means pool all shots.
pub struct ChannelOverlap<'a, R: Rng + ?Sized> {
    pub channel: &'a OverlapChannel,
    pub shots: u64,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> OverlapOracle for ChannelOverlap<'_, R> {
    fn overlap(&mut self, a: &RegisterKet, b: &RegisterKet) -> Result<f64> {
        let f = self.channel.failures(a, b, self.shots, self.rng)?;
        estimate_overlap(f, self.shots)
    }

    fn mean_overlap(
        &mut self,
        query: &RegisterKet,
        refs: &[RegisterKet],
        budget: u64,
    ) -> Result<f64> {
        if refs.is_empty() {
            return Err(Error::Empty("class references"));
        }
        let mut failures = 0;
        for r in refs {
            failures += self.channel.failures(query, r, budget, self.rng)?;
        }
        estimate_overlap(failures, budget * refs.len() as u64)
    }
}

fn normalized_sum(v1: &[C64], v2: &[C64], w: C64, name: &'static str) -> Result<(Vec<C64>, f64)> {
    let s: Vec<C64> = v1.iter().zip(v2).map(|(a, b)| a + w * b).collect();
    let n = norm_sqr(&s).sqrt();
    if n < DEGENERACY {
        return Err(Error::Degenerate(name));
    }
    let mu = 1.0 / n;
    Ok((s.into_iter().map(|x| x * mu).collect(), mu))
}

/// `⟨v₁|v₂⟩` from the overlaps of `ψ₁` with `ψ₂`, `ψ₃ ∝ v₁ + v₂` and
/// `ψ₄ ∝ v₁ + i·v₂`.
pub fn dot_product<O: OverlapOracle + ?Sized>(
    v1: &[C64],
    v2: &[C64],
    qubits: u32,
    oracle: &mut O,
) -> Result<C64> {
    if v1.len() != v2.len() {
        return Err(Error::DimensionMismatch {
            left: v1.len(),
            right: v2.len(),
        });
    }
    let (v3, mu3) = normalized_sum(v1, v2, C64::new(1.0, 0.0), "v1 + v2")?;
    let (v4, mu4) = normalized_sum(v1, v2, C64::new(0.0, 1.0), "v1 + i*v2")?;
    let k1 = encode(v1, qubits)?;
    let o12 = oracle.overlap(&k1, &encode(v2, qubits)?)?;
    let o13 = oracle.overlap(&k1, &encode(&v3, qubits)?)?;
    let o14 = oracle.overlap(&k1, &encode(&v4, qubits)?)?;
    let re = o13 / (2.0 * mu3 * mu3) - 0.5 * (1.0 + o12);
    let im = 0.5 * (1.0 + o12) - o14 / (2.0 * mu4 * mu4);
    Ok(C64::new(re, im))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassModel {
    pub class_id: u32,
    pub references: Vec<RegisterKet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Class(u32),
    Reject,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: Outcome,
    /// Mean overlap of the best class.
    pub score: f64,
}

/// Highest mean overlap wins, ties to the lower class id; a winning score
/// below `threshold` is a rejection.
pub fn classify<O: OverlapOracle + ?Sized>(
    query: &RegisterKet,
    classes: &[ClassModel],
    budget: u64,
    threshold: f64,
    oracle: &mut O,
) -> Result<Decision> {
    if classes.is_empty() {
        return Err(Error::Empty("class list"));
    }
    if budget == 0 {
        return Err(Error::Domain(
            "need at least one preparation per reference".into(),
        ));
    }
    let mut best: Option<(u32, f64)> = None;
    for c in classes {
        let s = oracle.mean_overlap(query, &c.references, budget)?;
        best = match best {
            Some((id, b)) if b > s || (b == s && id < c.class_id) => Some((id, b)),
            _ => Some((c.class_id, s)),
        };
    }
    let (id, score) = best.expect("nonempty class list");
    let outcome = if score < threshold {
        Outcome::Reject
    } else {
        Outcome::Class(id)
    };
    Ok(Decision { outcome, score })
}

/// Rows `id,c₀,c₁,…` with complex components such as `0.6`, `0.8i` or
/// `0.1+0.2i`; the first column is the class or query id.
pub fn read_vectors<R: Read>(r: R) -> Result<Vec<(u32, Vec<C64>)>> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let mut it = rec.iter();
        let id = it
            .next()
            .and_then(|s| s.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Parse(format!("bad id in row {:?}", rec)))?;
        let comps = it
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<C64>()
                    .map_err(|_| Error::Parse(format!("bad component `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((id, comps));
    }
    Ok(out)
}

/// Groups vectors by class id, encoding each into `qubits`; ids ascending.
pub fn build_classes(rows: &[(u32, Vec<C64>)], qubits: u32) -> Result<Vec<ClassModel>> {
    let mut map: std::collections::BTreeMap<u32, Vec<RegisterKet>> = Default::default();
    for (id, v) in rows {
        map.entry(*id).or_default().push(encode(v, qubits)?);
    }
    Ok(map
        .into_iter()
        .map(|(class_id, references)| ClassModel {
            class_id,
            references,
        })
        .collect())
}

/// Draws a uniformly distributed unit vector of `dim` complex components.
pub fn random_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<C64> {
    loop {
        let v: Vec<C64> = (0..dim)
            .map(|_| C64::new(gaussian(rng), gaussian(rng)))
            .collect();
        let n = norm_sqr(&v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
