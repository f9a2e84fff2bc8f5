//! Where measured expectation estimates come from.
//!
//! Estimators see a [`MeasurementSource`] only: they ask for a named
//! campaign (one ensemble, one interval, one basis, one budget) and get
//! back probability-expectation estimates. They never see parameter draws.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heisenberg::{evolution_matrix, BlockEvolution, PhysicalModel};
use crate::measurement::{
    draw_outcome, expected_outcome_probs, ket_probs, single_prep_mean, Basis, CountTable, Prob4,
};
use crate::qstate::{EnsembleSpec, PreparationSampler};
use crate::rng::{stream, StreamRole};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    /// Unique within a run; also keys the random streams and offline files.
    pub label: String,
    /// Evolution interval, seconds.
    pub tau: f64,
    pub ensemble: EnsembleSpec,
    pub basis: Basis,
    /// N: number of independently drawn states.
    pub states: u64,
    /// K: preparations per drawn state.
    pub preps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measured {
    pub probs: Prob4,
    /// Single-preparation trials behind `probs`; `None` for exact expectations.
    pub trials: Option<u64>,
}

impl Measured {
    /// Sum over outcomes of the estimator variance `m(1 − m)/L`.
    pub fn variance_sum(&self) -> f64 {
        match self.trials {
            Some(l) if l > 0 => self.probs.0.iter().map(|m| m * (1.0 - m)).sum::<f64>() / l as f64,
            _ => 0.0,
        }
    }
}

pub trait MeasurementSource {
    fn measure(&mut self, c: &Campaign) -> Result<Measured>;
}

/// Infinite-sample expectations of the true model.
#[derive(Clone, Debug)]
pub struct ExactSource {
    pub model: PhysicalModel,
}

impl MeasurementSource for ExactSource {
    fn measure(&mut self, c: &Campaign) -> Result<Measured> {
        c.ensemble.validate()?;
        let u = evolution_matrix(&self.model, c.tau)?;
        Ok(Measured {
            probs: expected_outcome_probs(&c.ensemble, &u, c.basis),
            trials: None,
        })
    }
}

/// Prepares, evolves and measures single states of the true model.
#[derive(Clone, Debug)]
pub struct SampledSource {
    pub model: PhysicalModel,
    pub master_seed: u64,
    pub run_id: u64,
    record: bool,
    recorded: BTreeMap<String, CountTable>,
}

impl SampledSource {
    pub fn new(model: PhysicalModel, master_seed: u64, run_id: u64) -> Self {
        SampledSource {
            model,
            master_seed,
            run_id,
            record: false,
            recorded: BTreeMap::new(),
        }
    }

    /// Keeps every count table so it can be dumped for offline runs.
    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn recorded(&self) -> &BTreeMap<String, CountTable> {
        &self.recorded
    }

    pub fn counts(&self, c: &Campaign) -> Result<CountTable> {
        simulate_campaign(&self.model, c, self.master_seed, self.run_id)
    }
}

impl MeasurementSource for SampledSource {
    fn measure(&mut self, c: &Campaign) -> Result<Measured> {
        let t = self.counts(c)?;
        if self.record {
            self.recorded.insert(c.label.clone(), t);
        }
        Ok(Measured {
            probs: single_prep_mean(&t)?,
            trials: Some(t.trials),
        })
    }
}

/// Draws `states` parameter sets from the campaign's own stream, evolves each
/// and records `preps` outcomes for it from a separate outcome stream.
pub fn simulate_campaign(
    model: &PhysicalModel,
    c: &Campaign,
    master_seed: u64,
    run_id: u64,
) -> Result<CountTable> {
    if c.states == 0 || c.preps == 0 {
        return Err(Error::Domain(format!(
            "campaign `{}` has an empty budget",
            c.label
        )));
    }
    let u = evolution_matrix(model, c.tau)?;
    let block = BlockEvolution::from_matrix(&u).expect("evolution operators are block shaped");
    let sampler = PreparationSampler::new(&c.ensemble)?;
    let mut params = stream(master_seed, run_id, &c.label, StreamRole::Params);
    let mut outcomes = stream(master_seed, run_id, &c.label, StreamRole::Outcomes);
    let mut t = CountTable::empty(c.basis);
    for _ in 0..c.states {
        let ket = block.apply(&sampler.sample_ket(&mut params));
        let p = ket_probs(&ket, c.basis);
        for _ in 0..c.preps {
            t.record(draw_outcome(&p, rand::Rng::random::<f64>(&mut outcomes)));
        }
    }
    Ok(t)
}

/// Count tables read back from disk, one `<label>.csv` per campaign.
#[derive(Clone, Debug, Default)]
pub struct OfflineSource {
    tables: BTreeMap<String, CountTable>,
}

impl OfflineSource {
    pub fn new(tables: BTreeMap<String, CountTable>) -> Self {
        OfflineSource { tables }
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut tables = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let Some(label) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let t = CountTable::read_csv(BufReader::new(File::open(&path)?))?;
            tables.insert(label.to_string(), t);
        }
        Ok(OfflineSource { tables })
    }
}

impl MeasurementSource for OfflineSource {
    fn measure(&mut self, c: &Campaign) -> Result<Measured> {
        let t = self
            .tables
            .get(&c.label)
            .ok_or_else(|| Error::MissingCampaign(c.label.clone()))?;
        if t.basis != c.basis {
            return Err(Error::Parse(format!(
                "campaign `{}` expects basis {}, file has {}",
                c.label, c.basis, t.basis
            )));
        }
        Ok(Measured {
            probs: single_prep_mean(t)?,
            trials: Some(t.trials),
        })
    }
}

pub fn dump_counts(dir: &Path, tables: &BTreeMap<String, CountTable>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (label, t) in tables {
        t.write_csv(BufWriter::new(File::create(
            dir.join(format!("{label}.csv")),
        )?))?;
    }
    Ok(())
}
