//! Reproducible experiments: configuration, task dispatch and reports.
//!
//! Every run of an experiment owns the random streams derived from the master
//! seed and its run id, so results do not depend on scheduling. Runs are
//! evaluated on the rayon pool and collected in run order; every file is
//! written from the calling thread afterwards.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bhpe::{self, estimate_hamiltonian, estimate_jxy, nrmse, BhpeConfig, JxyEstimate};
use crate::bqpt::{run_bqpt, Budget, ProtocolEnsembles};
use crate::bqss::{adapt, fidelity, restore, FidelityStats};
use crate::classifier::{
    build_classes, classify, encode, random_unit_vector, read_vectors, ChannelOverlap, ClassModel,
    Decision, ExactOverlap, Outcome, OverlapChannel, RegisterKet,
};
use crate::error::{Error, Result};
use crate::flags::Flags;
use crate::heisenberg::{evolution_matrix, PhysicalModel, K_B};
use crate::linalg::C64;
use crate::qstate::{
    random_pure_state, EnsembleSpec, ParamDist, PreparationSampler, TwoQubitState, ENSEMBLE_FIELDS,
};
use crate::rng::{stream, StreamRole};
use crate::source::{dump_counts, MeasurementSource, OfflineSource, SampledSource};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    pub g: f64,
    pub b_tesla: f64,
    pub jxy_kelvin: f64,
    pub jz_kelvin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub tau11_ns: f64,
    pub tau21_ns: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub jxy_kelvin: [f64; 2],
    pub jz_kelvin: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// States per campaign.
    pub n: u64,
    /// Preparations per state.
    pub k: u64,
    pub runs: u64,
    /// x-basis campaign size relative to `n`.
    pub xx_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BqssConfig {
    /// Restored states per run, for each of the product and entangled sets.
    pub restorations: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub qubits: u32,
    /// Synthetic problem size, used when no vector files are given.
    pub classes: u32,
    pub refs_per_class: u32,
    pub queries: u32,
    /// Swap-test shots per reference.
    pub budget: u64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigdataConfig {
    /// Fixed N·K products.
    pub products: Vec<u64>,
    /// K values tried for each product; those not dividing it are skipped.
    pub k_values: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub physics: PhysicsConfig,
    pub timing: TimingConfig,
    pub priors: PriorConfig,
    pub budget: BudgetConfig,
    pub ensembles: ProtocolEnsembles,
    pub bqss: BqssConfig,
    pub classify: ClassifyConfig,
    pub figdata: FigdataConfig,
}

pub fn default_config() -> ExperimentConfig {
    let s5 = 5f64.sqrt();
    ExperimentConfig {
        seed: 1,
        physics: PhysicsConfig {
            g: 2.0,
            b_tesla: 0.99,
            jxy_kelvin: 0.3,
            jz_kelvin: 1.0,
        },
        timing: TimingConfig {
            tau11_ns: 0.5,
            tau21_ns: 0.53,
        },
        priors: PriorConfig {
            jxy_kelvin: [0.0, 1.5],
            jz_kelvin: [1.0 / s5, s5],
        },
        budget: BudgetConfig {
            n: 100_000,
            k: 1,
            runs: 100,
            xx_scale: 1.0,
        },
        ensembles: ProtocolEnsembles::default(),
        bqss: BqssConfig { restorations: 1000 },
        classify: ClassifyConfig {
            qubits: 3,
            classes: 3,
            refs_per_class: 10,
            queries: 200,
            budget: 1000,
            threshold: 0.2,
        },
        figdata: FigdataConfig {
            products: vec![10_000, 100_000],
            k_values: vec![1, 10, 100, 1000],
        },
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        default_config()
    }
}

impl ExperimentConfig {
    pub fn model(&self) -> Result<PhysicalModel> {
        let p = &self.physics;
        PhysicalModel::from_kelvin(p.g, p.b_tesla, p.jxy_kelvin, p.jz_kelvin)
    }

    pub fn tau11(&self) -> f64 {
        self.timing.tau11_ns * 1e-9
    }

    pub fn tau21(&self) -> f64 {
        self.timing.tau21_ns * 1e-9
    }

    /// `τ₁₂` from the Jxy prior; depends on nothing measured.
    pub fn tau12(&self) -> Result<f64> {
        let m = self.model()?;
        let [lo, hi] = self.priors.jxy_kelvin.map(|x| x * K_B);
        let (a, b) = bhpe::xy_k_bounds(self.tau11(), lo, hi, m.hbar)?;
        bhpe::companion_interval(self.tau11(), a, b)
    }

    /// Spacing of the Jxy candidates at `τ₁₁`, kelvin.
    pub fn jxy_grid_step_kelvin(&self) -> Result<f64> {
        let m = self.model()?;
        Ok(bhpe::grid_step(bhpe::GridKind::XY, self.tau11(), m.hbar) / m.k_b)
    }

    pub fn protocol_budget(&self, states: u64, preps: u64) -> Budget {
        Budget {
            states,
            preps,
            xx_scale: self.budget.xx_scale,
        }
    }

    pub fn bhpe_config(&self, states: u64, preps: u64) -> Result<BhpeConfig> {
        let m = self.model()?;
        Ok(BhpeConfig {
            known: m.known(),
            tau11: self.tau11(),
            tau21: self.tau21(),
            jxy_prior: self.priors.jxy_kelvin.map(|x| x * K_B),
            jz_prior: self.priors.jz_kelvin.map(|x| x * K_B),
            ensembles: self.ensembles,
            budget: self.protocol_budget(states, preps),
        })
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(e) = self.model() {
            errs.push(format!("physics: {e}"));
        }
        for (name, v) in [
            ("timing.tau11_ns", self.timing.tau11_ns),
            ("timing.tau21_ns", self.timing.tau21_ns),
        ] {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, [lo, hi]) in [
            ("priors.jxy_kelvin", self.priors.jxy_kelvin),
            ("priors.jz_kelvin", self.priors.jz_kelvin),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                errs.push(format!("{name} needs lo < hi, got [{lo}, {hi}]"));
            }
        }
        if errs.is_empty() {
            let p = &self.physics;
            if !(self.priors.jxy_kelvin[0] <= p.jxy_kelvin
                && p.jxy_kelvin <= self.priors.jxy_kelvin[1])
            {
                errs.push(format!(
                    "physics.Jxy_kelvin = {} outside priors.jxy_kelvin",
                    p.jxy_kelvin
                ));
            }
            if !(self.priors.jz_kelvin[0] <= p.jz_kelvin && p.jz_kelvin <= self.priors.jz_kelvin[1])
            {
                errs.push(format!(
                    "physics.Jz_kelvin = {} outside priors.jz_kelvin",
                    p.jz_kelvin
                ));
            }
            if let Err(e) = self.tau12() {
                errs.push(format!(
                    "priors.jxy_kelvin: no grid candidate in range ({e})"
                ));
            }
        }
        for (name, v) in [
            ("budget.N", self.budget.n),
            ("budget.K", self.budget.k),
            ("budget.runs", self.budget.runs),
        ] {
            if v < 1 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        if !(self.budget.xx_scale.is_finite() && self.budget.xx_scale > 0.0) {
            errs.push(format!(
                "budget.xx_scale must be positive, got {}",
                self.budget.xx_scale
            ));
        }
        for (name, e) in ensemble_entries(&self.ensembles) {
            if let Err(err) = e.validate() {
                errs.push(format!("ensemble.{name}: {err}"));
            }
        }
        let c = &self.classify;
        if !(1..=16).contains(&c.qubits) {
            errs.push(format!(
                "classify.qubits must be in 1..=16, got {}",
                c.qubits
            ));
        }
        if c.classes < 1 || c.refs_per_class < 1 || c.budget < 1 {
            errs.push(
                "classify.classes, classify.refs_per_class and classify.budget must be >= 1".into(),
            );
        }
        if !(0.0..=1.0).contains(&c.threshold) {
            errs.push(format!(
                "classify.threshold must be in [0, 1], got {}",
                c.threshold
            ));
        }
        if self.figdata.products.contains(&0) || self.figdata.k_values.contains(&0) {
            errs.push("figdata products and K values must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn ensemble_entries(e: &ProtocolEnsembles) -> [(&'static str, EnsembleSpec); 4] {
    [
        ("jxy_step1", e.jxy_step1),
        ("jxy_step2", e.jxy_step2),
        ("jz_inst1", e.jz_inst1),
        ("jz_inst2", e.jz_inst2),
    ]
}

fn ensemble_slot<'a>(e: &'a mut ProtocolEnsembles, name: &str) -> &'a mut EnsembleSpec {
    match name {
        "jxy_step1" => &mut e.jxy_step1,
        "jxy_step2" => &mut e.jxy_step2,
        "jz_inst1" => &mut e.jz_inst1,
        _ => &mut e.jz_inst2,
    }
}

// ---- config text format ----

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_dist(d: &ParamDist) -> String {
    match d {
        ParamDist::Fixed(v) => fmt_f64(*v),
        ParamDist::UniformHalfOpen(lo, hi) => format!("[{}, {}]", fmt_f64(*lo), fmt_f64(*hi)),
    }
}

fn fmt_list<T: fmt::Display>(v: &[T]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

/// Flat `key = value` text, one key per line in a fixed order.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let seed = if cfg.seed <= i64::MAX as u64 {
        cfg.seed.to_string()
    } else {
        format!("\"{}\"", cfg.seed)
    };
    let mut line = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    line("seed", seed);
    line("physics.g", fmt_f64(cfg.physics.g));
    line("physics.B_tesla", fmt_f64(cfg.physics.b_tesla));
    line("physics.Jxy_kelvin", fmt_f64(cfg.physics.jxy_kelvin));
    line("physics.Jz_kelvin", fmt_f64(cfg.physics.jz_kelvin));
    line("timing.tau11_ns", fmt_f64(cfg.timing.tau11_ns));
    line("timing.tau21_ns", fmt_f64(cfg.timing.tau21_ns));
    let pair = |p: [f64; 2]| format!("[{}, {}]", fmt_f64(p[0]), fmt_f64(p[1]));
    line("priors.jxy_kelvin", pair(cfg.priors.jxy_kelvin));
    line("priors.jz_kelvin", pair(cfg.priors.jz_kelvin));
    line("budget.N", cfg.budget.n.to_string());
    line("budget.K", cfg.budget.k.to_string());
    line("budget.runs", cfg.budget.runs.to_string());
    line("budget.xx_scale", fmt_f64(cfg.budget.xx_scale));
    for (name, e) in ensemble_entries(&cfg.ensembles) {
        for (field, d) in ENSEMBLE_FIELDS.iter().zip(e.fields()) {
            line(&format!("ensemble.{name}.{field}"), fmt_dist(&d));
        }
    }
    line("bqss.restorations", cfg.bqss.restorations.to_string());
    let c = &cfg.classify;
    line("classify.qubits", c.qubits.to_string());
    line("classify.classes", c.classes.to_string());
    line("classify.refs_per_class", c.refs_per_class.to_string());
    line("classify.queries", c.queries.to_string());
    line("classify.budget", c.budget.to_string());
    line("classify.threshold", fmt_f64(c.threshold));
    line("figdata.products", fmt_list(&cfg.figdata.products));
    line("figdata.k_values", fmt_list(&cfg.figdata.k_values));
    s
}

fn flatten(prefix: &str, t: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in t {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(inner) => flatten(&key, inner, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

struct Fields {
    map: BTreeMap<String, toml::Value>,
    errs: Vec<String>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.map.remove(key)
    }

    fn f64(&mut self, key: &str, slot: &mut f64) {
        if let Some(v) = self.take(key) {
            match as_f64(&v) {
                Some(x) => *slot = x,
                None => self.errs.push(format!("{key}: expected a number, got {v}")),
            }
        }
    }

    fn u64(&mut self, key: &str, slot: &mut u64) {
        if let Some(v) = self.take(key) {
            match v.as_integer().and_then(|i| u64::try_from(i).ok()) {
                Some(x) => *slot = x,
                None => self
                    .errs
                    .push(format!("{key}: expected a nonnegative integer, got {v}")),
            }
        }
    }

    fn u32(&mut self, key: &str, slot: &mut u32) {
        let mut x = *slot as u64;
        self.u64(key, &mut x);
        match u32::try_from(x) {
            Ok(v) => *slot = v,
            Err(_) => self.errs.push(format!("{key}: value {x} too large")),
        }
    }

    fn pair(&mut self, key: &str, slot: &mut [f64; 2]) {
        if let Some(v) = self.take(key) {
            match as_pair(&v) {
                Some(p) => *slot = p,
                None => self.errs.push(format!("{key}: expected [lo, hi], got {v}")),
            }
        }
    }

    fn dist(&mut self, key: &str, slot: &mut ParamDist) {
        if let Some(v) = self.take(key) {
            if let Some(x) = as_f64(&v) {
                *slot = ParamDist::Fixed(x);
            } else if let Some([lo, hi]) = as_pair(&v) {
                *slot = ParamDist::UniformHalfOpen(lo, hi);
            } else {
                self.errs
                    .push(format!("{key}: expected a number or [lo, hi], got {v}"));
            }
        }
    }

    fn list(&mut self, key: &str, slot: &mut Vec<u64>) {
        if let Some(v) = self.take(key) {
            let parsed = v.as_array().and_then(|a| {
                a.iter()
                    .map(|x| x.as_integer().and_then(|i| u64::try_from(i).ok()))
                    .collect::<Option<Vec<_>>>()
            });
            match parsed {
                Some(l) => *slot = l,
                None => self.errs.push(format!(
                    "{key}: expected a list of nonnegative integers, got {v}"
                )),
            }
        }
    }
}

fn as_f64(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_pair(v: &toml::Value) -> Option<[f64; 2]> {
    match v.as_array()?.as_slice() {
        [a, b] => Some([as_f64(a)?, as_f64(b)?]),
        _ => None,
    }
}

/// Parses config text; absent keys keep their defaults, unknown keys are errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    let mut map = BTreeMap::new();
    flatten("", &table, &mut map);
    let mut f = Fields {
        map,
        errs: Vec::new(),
    };
    let mut cfg = default_config();

    match f.take("seed") {
        None => {}
        Some(toml::Value::Integer(i)) if i >= 0 => cfg.seed = i as u64,
        Some(toml::Value::String(s)) if s.parse::<u64>().is_ok() => {
            cfg.seed = s.parse().unwrap_or_default()
        }
        Some(v) => f.errs.push(format!("seed: expected a u64, got {v}")),
    }
    f.f64("physics.g", &mut cfg.physics.g);
    f.f64("physics.B_tesla", &mut cfg.physics.b_tesla);
    f.f64("physics.Jxy_kelvin", &mut cfg.physics.jxy_kelvin);
    f.f64("physics.Jz_kelvin", &mut cfg.physics.jz_kelvin);
    f.f64("timing.tau11_ns", &mut cfg.timing.tau11_ns);
    f.f64("timing.tau21_ns", &mut cfg.timing.tau21_ns);
    f.pair("priors.jxy_kelvin", &mut cfg.priors.jxy_kelvin);
    f.pair("priors.jz_kelvin", &mut cfg.priors.jz_kelvin);
    f.u64("budget.N", &mut cfg.budget.n);
    f.u64("budget.K", &mut cfg.budget.k);
    f.u64("budget.runs", &mut cfg.budget.runs);
    f.f64("budget.xx_scale", &mut cfg.budget.xx_scale);
    for name in ["jxy_step1", "jxy_step2", "jz_inst1", "jz_inst2"] {
        let spec = ensemble_slot(&mut cfg.ensembles, name);
        let mut fields = spec.fields();
        for (field, d) in ENSEMBLE_FIELDS.iter().zip(fields.iter_mut()) {
            f.dist(&format!("ensemble.{name}.{field}"), d);
        }
        *spec = EnsembleSpec::from_fields(fields);
    }
    f.u64("bqss.restorations", &mut cfg.bqss.restorations);
    f.u32("classify.qubits", &mut cfg.classify.qubits);
    f.u32("classify.classes", &mut cfg.classify.classes);
    f.u32("classify.refs_per_class", &mut cfg.classify.refs_per_class);
    f.u32("classify.queries", &mut cfg.classify.queries);
    f.u64("classify.budget", &mut cfg.classify.budget);
    f.f64("classify.threshold", &mut cfg.classify.threshold);
    f.list("figdata.products", &mut cfg.figdata.products);
    f.list("figdata.k_values", &mut cfg.figdata.k_values);

    for k in f.map.keys() {
        f.errs.push(format!("unknown key `{k}`"));
    }
    if !f.errs.is_empty() {
        return Err(Error::Config(f.errs));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

// ---- tasks ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Bqpt,
    Bhpe,
    Bqss,
    Classify,
    Figdata,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Bqpt => "bqpt",
            Task::Bhpe => "bhpe",
            Task::Bqss => "bqss",
            Task::Classify => "classify",
            Task::Figdata => "figdata",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bqpt" => Ok(Task::Bqpt),
            "bhpe" => Ok(Task::Bhpe),
            "bqss" => Ok(Task::Bqss),
            "classify" => Ok(Task::Classify),
            "figdata" => Ok(Task::Figdata),
            other => Err(Error::Parse(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Write 0 instead of the measured wall-clock time.
    pub no_wall_clock: bool,
    /// Read count tables from `<dir>/run_<id>/<label>.csv` instead of simulating.
    pub counts_in: Option<PathBuf>,
    /// Write every simulated count table under `<dir>/run_<id>/`.
    pub dump_counts: Option<PathBuf>,
    /// Class reference vectors for the classify task.
    pub classes_csv: Option<PathBuf>,
    /// Query vectors for the classify task.
    pub queries_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: u64,
    pub jxy_hat_kelvin: f64,
    pub jz_hat_kelvin: Option<f64>,
    pub flags: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: Task,
    pub n: u64,
    pub k: u64,
    pub runs: u64,
    pub nrmse_jxy: Option<f64>,
    pub nrmse_jz: Option<f64>,
    /// Jz NRMSE over runs whose Jxy error stayed below 5 %.
    pub nrmse_jz_conditioned: Option<f64>,
    pub rejections: u64,
    pub wall_seconds: f64,
}

impl AggregateRow {
    fn empty(task: Task, n: u64, k: u64, runs: u64) -> Self {
        AggregateRow {
            task,
            n,
            k,
            runs,
            nrmse_jxy: None,
            nrmse_jz: None,
            nrmse_jz_conditioned: None,
            rejections: 0,
            wall_seconds: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifySummary {
    pub queries: usize,
    pub rejected: usize,
    /// Fraction of channel decisions equal to the exact-overlap decision.
    pub agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub task: Task,
    pub seed: u64,
    pub aggregates: Vec<AggregateRow>,
    pub runs: Vec<RunRecord>,
    pub fidelity_product: Option<FidelityStats>,
    pub fidelity_entangled: Option<FidelityStats>,
    /// Largest entrywise |M̂ − M| over runs.
    pub max_process_error: Option<f64>,
    pub classification: Option<ClassifySummary>,
    pub wall_seconds: f64,
}

fn run_dir(base: &Path, run_id: u64) -> PathBuf {
    base.join(format!("run_{run_id}"))
}

/// Sampled source that hands its tables back for dumping.
struct Recorder<'a> {
    inner: SampledSource,
    dump: Option<&'a Path>,
}

impl Recorder<'_> {
    fn finish(self) -> Result<()> {
        if let Some(dir) = self.dump {
            dump_counts(&run_dir(dir, self.inner.run_id), self.inner.recorded())?;
        }
        Ok(())
    }
}

impl MeasurementSource for Recorder<'_> {
    fn measure(&mut self, c: &crate::source::Campaign) -> Result<crate::source::Measured> {
        self.inner.measure(c)
    }
}

/// Runs `f` once per run id with that run's measurement source.
fn per_run<T, F>(cfg: &ExperimentConfig, runs: u64, opts: &RunOptions, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut dyn MeasurementSource) -> Result<T> + Sync,
{
    let model = cfg.model()?;
    (0..runs)
        .into_par_iter()
        .map(|run_id| {
            if opts.counts_in.is_some() {
                let dir = opts.counts_in.as_deref().unwrap_or(Path::new("."));
                let mut src = OfflineSource::from_dir(&run_dir(dir, run_id))?;
                return f(run_id, &mut src);
            }
            let inner = SampledSource::new(model, cfg.seed, run_id);
            let inner = if opts.dump_counts.is_some() {
                inner.recording()
            } else {
                inner
            };
            let mut rec = Recorder {
                inner,
                dump: opts.dump_counts.as_deref(),
            };
            let out = f(run_id, &mut rec)?;
            rec.finish()?;
            Ok(out)
        })
        .collect()
}

/// Full two-parameter estimation for `runs` runs at budget (N, K).
pub fn bhpe_runs(
    cfg: &ExperimentConfig,
    n: u64,
    k: u64,
    runs: u64,
    opts: &RunOptions,
) -> Result<Vec<RunRecord>> {
    let bc = cfg.bhpe_config(n, k)?;
    per_run(cfg, runs, opts, |run_id, src| {
        let e = estimate_hamiltonian(src, &bc)?;
        Ok(RunRecord {
            run_id,
            jxy_hat_kelvin: e.jxy_hat / K_B,
            jz_hat_kelvin: e.jz_hat.map(|j| j / K_B),
            flags: e.flags.to_string(),
        })
    })
}

/// Jxy stage only, simulated, with the given master seed.
pub fn jxy_runs(
    cfg: &ExperimentConfig,
    n: u64,
    k: u64,
    runs: u64,
    seed: u64,
) -> Result<Vec<JxyEstimate>> {
    let mut c = cfg.clone();
    c.seed = seed;
    let bc = c.bhpe_config(n, k)?;
    per_run(&c, runs, &RunOptions::default(), |_, src| {
        estimate_jxy(src, &bc)
    })
}

pub fn aggregate_bhpe(
    cfg: &ExperimentConfig,
    task: Task,
    n: u64,
    k: u64,
    records: &[RunRecord],
) -> Result<AggregateRow> {
    let (jxy, jz) = (cfg.physics.jxy_kelvin, cfg.physics.jz_kelvin);
    let xy: Vec<f64> = records.iter().map(|r| r.jxy_hat_kelvin).collect();
    let z: Vec<f64> = records.iter().filter_map(|r| r.jz_hat_kelvin).collect();
    let z_cond: Vec<f64> = records
        .iter()
        .filter(|r| ((r.jxy_hat_kelvin - jxy) / jxy).abs() < 0.05)
        .filter_map(|r| r.jz_hat_kelvin)
        .collect();
    let nr = |v: &[f64], t: f64| {
        if v.is_empty() {
            Ok(None)
        } else {
            nrmse(v, t).map(Some)
        }
    };
    let mut row = AggregateRow::empty(task, n, k, records.len() as u64);
    row.nrmse_jxy = nr(&xy, jxy)?;
    row.nrmse_jz = nr(&z, jz)?;
    row.nrmse_jz_conditioned = nr(&z_cond, jz)?;
    row.rejections = (records.len() - z.len()) as u64;
    Ok(row)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_else(|| "NA".into())
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "task",
        "N",
        "K",
        "runs",
        "nrmse_jxy",
        "nrmse_jz",
        "rejections",
        "wall_seconds",
    ])?;
    for r in rows {
        w.write_record([
            r.task.to_string(),
            r.n.to_string(),
            r.k.to_string(),
            r.runs.to_string(),
            fmt_opt(r.nrmse_jxy),
            fmt_opt(r.nrmse_jz),
            r.rejections.to_string(),
            format!("{:.3}", r.wall_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_runs_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "run_id",
        "jxy_hat_kelvin",
        "jz_hat_kelvin_or_REJECTED",
        "flags",
    ])?;
    for r in records {
        w.write_record([
            r.run_id.to_string(),
            format!("{:e}", r.jxy_hat_kelvin),
            r.jz_hat_kelvin
                .map(|v| format!("{v:e}"))
                .unwrap_or_else(|| "REJECTED".into()),
            r.flags.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn elapsed(start: Instant, opts: &RunOptions) -> f64 {
    if opts.no_wall_clock {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    }
}

fn base_report(task: Task, cfg: &ExperimentConfig) -> EstimationReport {
    EstimationReport {
        task,
        seed: cfg.seed,
        aggregates: Vec::new(),
        runs: Vec::new(),
        fidelity_product: None,
        fidelity_entangled: None,
        max_process_error: None,
        classification: None,
        wall_seconds: 0.0,
    }
}

/// Runs `task`, writes its CSV files and `report.json` into `opts.out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    task: Task,
    opts: &RunOptions,
) -> Result<EstimationReport> {
    cfg.validate()?;
    fs::create_dir_all(&opts.out_dir)?;
    let start = Instant::now();
    let mut report = match task {
        Task::Bhpe => run_bhpe_task(cfg, opts)?,
        Task::Figdata => run_figdata_task(cfg, opts)?,
        Task::Bqpt => run_bqpt_task(cfg, opts)?,
        Task::Bqss => run_bqss_task(cfg, opts)?,
        Task::Classify => run_classify_task(cfg, opts)?,
    };
    report.wall_seconds = elapsed(start, opts);
    if task != Task::Figdata {
        for a in report.aggregates.iter_mut() {
            a.wall_seconds = report.wall_seconds;
        }
    }
    write_aggregate_csv(&opts.out_dir.join("aggregate.csv"), &report.aggregates)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(opts.out_dir.join("report.json"), json + "\n")?;
    Ok(report)
}

fn run_bhpe_task(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EstimationReport> {
    let (n, k) = (cfg.budget.n, cfg.budget.k);
    let records = bhpe_runs(cfg, n, k, cfg.budget.runs, opts)?;
    write_runs_csv(&opts.out_dir.join("runs.csv"), &records)?;
    let mut report = base_report(Task::Bhpe, cfg);
    report
        .aggregates
        .push(aggregate_bhpe(cfg, Task::Bhpe, n, k, &records)?);
    report.runs = records;
    Ok(report)
}

fn run_figdata_task(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EstimationReport> {
    let mut report = base_report(Task::Figdata, cfg);
    for &product in &cfg.figdata.products {
        for &k in cfg.figdata.k_values.iter().filter(|&&k| product % k == 0) {
            let t = Instant::now();
            let n = product / k;
            let records = bhpe_runs(cfg, n, k, cfg.budget.runs, opts)?;
            write_runs_csv(&opts.out_dir.join(format!("runs_N{n}_K{k}.csv")), &records)?;
            let mut row = aggregate_bhpe(cfg, Task::Figdata, n, k, &records)?;
            row.wall_seconds = elapsed(t, opts);
            report.aggregates.push(row);
        }
    }
    Ok(report)
}

fn run_bqpt_task(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EstimationReport> {
    let model = cfg.model()?;
    let budget = cfg.protocol_budget(cfg.budget.n, cfg.budget.k);
    let known = model.known();
    let results = per_run(cfg, cfg.budget.runs, opts, |_, src| {
        match run_bqpt(src, &known, cfg.tau11(), &cfg.ensembles, &budget) {
            Ok(r) => {
                let m3 = evolution_matrix(&model, r.tau3)?;
                Ok(Some((r, r.process.max_abs_diff(&m3))))
            }
            Err(Error::IndeterminatePhase { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    let mut w = csv::Writer::from_path(opts.out_dir.join("process_errors.csv"))?;
    w.write_record([
        "run_id",
        "max_abs_error",
        "v_hat",
        "delta_ed_hat",
        "x_hat",
        "delta_phi10d_hat",
        "flags",
    ])?;
    let mut worst: Option<f64> = None;
    for (run_id, r) in results.iter().enumerate() {
        match r {
            Some((rep, err)) => {
                worst = Some(worst.map_or(*err, |w| w.max(*err)));
                let p = &rep.phases;
                w.write_record([
                    run_id.to_string(),
                    format!("{err:e}"),
                    format!("{:e}", p.v_hat),
                    format!("{:e}", p.delta_ed_hat),
                    format!("{:e}", p.x_hat),
                    format!("{:e}", p.delta_phi10d_hat),
                    rep.flags.to_string(),
                ])?;
            }
            None => w.write_record([
                run_id.to_string(),
                "REJECTED".into(),
                "NA".into(),
                "NA".into(),
                "NA".into(),
                "NA".into(),
                Flags::JZ_REJECTED.to_string(),
            ])?,
        }
    }
    w.flush()?;
    let mut report = base_report(Task::Bqpt, cfg);
    let mut row = AggregateRow::empty(Task::Bqpt, cfg.budget.n, cfg.budget.k, cfg.budget.runs);
    row.rejections = results.iter().filter(|r| r.is_none()).count() as u64;
    report.aggregates.push(row);
    report.max_process_error = worst;
    Ok(report)
}

/// Infidelity decade bins: `[0, 1e-12)`, `[1e-12, 1e-11)`, …, `[0.1, 1]`.
pub fn infidelity_histogram(fidelities: &[f64]) -> Vec<(f64, f64, u64)> {
    let mut bins: Vec<(f64, f64, u64)> = Vec::new();
    bins.push((0.0, 1e-12, 0));
    for e in -12..0 {
        bins.push((10f64.powi(e), 10f64.powi(e + 1), 0));
    }
    for f in fidelities {
        let inf = (1.0 - f).max(0.0);
        let idx = bins
            .iter()
            .position(|(lo, hi, _)| inf >= *lo && inf < *hi)
            .unwrap_or(bins.len() - 1);
        bins[idx].2 += 1;
    }
    bins
}

fn run_bqss_task(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EstimationReport> {
    let model = cfg.model()?;
    let budget = cfg.protocol_budget(cfg.budget.n, cfg.budget.k);
    let known = model.known();
    let count = cfg.bqss.restorations as usize;
    let product_spec = EnsembleSpec::full_range();
    let results = per_run(cfg, cfg.budget.runs, opts, |run_id, src| {
        let sep = adapt(src, &known, cfg.tau11(), &cfg.ensembles, &budget)?;
        let m3 = evolution_matrix(&model, sep.tau3)?;
        // states used for restoration never enter a measurement campaign
        let mut rng = stream(cfg.seed, run_id, "bqss_restore", StreamRole::Aux);
        let sampler = PreparationSampler::new(&product_spec)?;
        let mut run_fid = |make: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> TwoQubitState| {
            (0..count)
                .map(|_| {
                    let c = make(&mut rng);
                    fidelity(&restore(&c.evolve(&m3), &sep.unitary), &c)
                })
                .collect::<Vec<f64>>()
        };
        let prod = run_fid(&mut |r| {
            TwoQubitState::normalized(sampler.sample_ket(r)).expect("unit product ket")
        });
        let ent = run_fid(&mut |r| random_pure_state(r));
        Ok((prod, ent, sep.tomography.flags))
    });
    let results = match results {
        Err(Error::IndeterminatePhase { .. }) => {
            return Err(Error::Domain(
                "adaptation failed: x-basis phase unresolved".into(),
            ))
        }
        r => r?,
    };
    let mut w = csv::Writer::from_path(opts.out_dir.join("bqss_runs.csv"))?;
    w.write_record([
        "run_id",
        "mean_fidelity_product",
        "min_fidelity_product",
        "mean_fidelity_entangled",
        "min_fidelity_entangled",
        "flags",
    ])?;
    let mut all_prod = Vec::new();
    let mut all_ent = Vec::new();
    for (run_id, (p, e, flags)) in results.iter().enumerate() {
        let (sp, se) = (
            FidelityStats::from_values(p)?,
            FidelityStats::from_values(e)?,
        );
        w.write_record([
            run_id.to_string(),
            format!("{:e}", sp.mean),
            format!("{:e}", sp.min),
            format!("{:e}", se.mean),
            format!("{:e}", se.min),
            flags.to_string(),
        ])?;
        all_prod.extend_from_slice(p);
        all_ent.extend_from_slice(e);
    }
    w.flush()?;
    let mut h = csv::Writer::from_path(opts.out_dir.join("fidelity_histogram.csv"))?;
    h.write_record(["kind", "infidelity_lo", "infidelity_hi", "count"])?;
    for (kind, v) in [("product", &all_prod), ("entangled", &all_ent)] {
        for (lo, hi, c) in infidelity_histogram(v) {
            h.write_record([
                kind.to_string(),
                format!("{lo:e}"),
                format!("{hi:e}"),
                c.to_string(),
            ])?;
        }
    }
    h.flush()?;
    let mut report = base_report(Task::Bqss, cfg);
    report.aggregates.push(AggregateRow::empty(
        Task::Bqss,
        cfg.budget.n,
        cfg.budget.k,
        cfg.budget.runs,
    ));
    report.fidelity_product = Some(FidelityStats::from_values(&all_prod)?);
    report.fidelity_entangled = Some(FidelityStats::from_values(&all_ent)?);
    Ok(report)
}

/// Class models and `(query id, query ket)` pairs.
pub type Problem = (Vec<ClassModel>, Vec<(u32, RegisterKet)>);

/// Random classes around well-separated centers, plus queries.
pub fn synthetic_problem(cfg: &ClassifyConfig, seed: u64) -> Result<Problem> {
    let dim = 1usize << cfg.qubits;
    let mut rng = stream(seed, 0, "classify_problem", StreamRole::Aux);
    let centers: Vec<Vec<C64>> = (0..cfg.classes)
        .map(|_| random_unit_vector(dim, &mut rng))
        .collect();
    let near = |c: &[C64], rng: &mut rand_chacha::ChaCha8Rng| -> Result<RegisterKet> {
        let noise = random_unit_vector(dim, rng);
        let w = rng.random_range(0.0..0.6);
        let v: Vec<C64> = c.iter().zip(&noise).map(|(a, b)| a + b * w).collect();
        let n = crate::linalg::norm_sqr(&v).sqrt();
        encode(
            &v.into_iter().map(|x| x / n).collect::<Vec<_>>(),
            cfg.qubits,
        )
    };
    let mut classes = Vec::new();
    for (id, c) in centers.iter().enumerate() {
        let refs = (0..cfg.refs_per_class)
            .map(|_| near(c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassModel {
            class_id: id as u32,
            references: refs,
        });
    }
    let mut queries = Vec::new();
    for q in 0..cfg.queries {
        let label = rng.random_range(0..cfg.classes);
        let ket = if rng.random::<f64>() < 0.1 {
            // off-distribution query, expected to be rejected
            encode(&random_unit_vector(dim, &mut rng), cfg.qubits)?
        } else {
            near(&centers[label as usize], &mut rng)?
        };
        queries.push((q, ket));
    }
    Ok((classes, queries))
}

fn decision_label(d: &Decision) -> String {
    match d.outcome {
        Outcome::Class(id) => id.to_string(),
        Outcome::Reject => "REJECT".into(),
    }
}

fn run_classify_task(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EstimationReport> {
    let c = &cfg.classify;
    let (classes, queries) = match (&opts.classes_csv, &opts.queries_csv) {
        (Some(cp), Some(qp)) => {
            let classes = build_classes(&read_vectors(File::open(cp)?)?, c.qubits)?;
            let queries = read_vectors(File::open(qp)?)?
                .into_iter()
                .map(|(id, v)| Ok((id, encode(&v, c.qubits)?)))
                .collect::<Result<Vec<_>>>()?;
            (classes, queries)
        }
        (None, None) => synthetic_problem(c, cfg.seed)?,
        _ => {
            return Err(Error::Config(vec![
                "classify needs both --classes and --queries, or neither".into(),
            ]))
        }
    };
    let channel = OverlapChannel::default();
    let mut rng = stream(cfg.seed, 0, "classify_channel", StreamRole::Outcomes);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(
        opts.out_dir.join("decisions.csv"),
    )?));
    w.write_record(["query_id", "decision", "score"])?;
    let (mut agree, mut rejected) = (0usize, 0usize);
    for (id, q) in &queries {
        let exact = classify(q, &classes, c.budget, c.threshold, &mut ExactOverlap)?;
        let mut oracle = ChannelOverlap {
            channel: &channel,
            shots: c.budget,
            rng: &mut rng,
        };
        let d = classify(q, &classes, c.budget, c.threshold, &mut oracle)?;
        agree += (d.outcome == exact.outcome) as usize;
        rejected += (d.outcome == Outcome::Reject) as usize;
        w.write_record([id.to_string(), decision_label(&d), format!("{:e}", d.score)])?;
    }
    w.flush()?;
    let mut report = base_report(Task::Classify, cfg);
    let mut row = AggregateRow::empty(Task::Classify, c.budget, 1, 1);
    row.rejections = rejected as u64;
    report.aggregates.push(row);
    report.classification = Some(ClassifySummary {
        queries: queries.len(),
        rejected,
        agreement: if queries.is_empty() {
            1.0
        } else {
            agree as f64 / queries.len() as f64
        },
    });
    Ok(report)
}

/// Writes a config file in the canonical text format.
pub fn write_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(serialize_config(cfg).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn defaults_match_reference_conditions() {
        let cfg = default_config();
        cfg.validate().unwrap();
        assert_abs_diff_eq!(cfg.tau12().unwrap(), 0.5e-9 * 31.5 / 31.0, epsilon = 1e-20);
        assert_abs_diff_eq!(cfg.jxy_grid_step_kelvin().unwrap(), 0.048, epsilon = 1e-4);
        let m = cfg.model().unwrap();
        assert_abs_diff_eq!(m.zeeman() / K_B, 1.33, epsilon = 5e-3);
        assert_eq!(cfg.budget.runs, 100);
        assert_abs_diff_eq!(
            cfg.priors.jz_kelvin[1] * cfg.priors.jz_kelvin[0],
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn config_roundtrip_is_byte_identical() {
        let text = serialize_config(&default_config());
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed, default_config());
        assert_eq!(serialize_config(&parsed), text);
        assert!(text.contains("physics.B_tesla = 0.99\n"));
        assert!(text.contains("priors.jxy_kelvin = [0.0, 1.5]\n"));
    }

    #[test]
    fn unknown_and_invalid_keys_are_listed() {
        let err = parse_config("budget.N = 0\nbogus.key = 3\nphysics.g = \"two\"\n").unwrap_err();
        let Error::Config(list) = err else {
            panic!("{err}")
        };
        assert!(list.iter().any(|e| e.contains("bogus.key")));
        assert!(list.iter().any(|e| e.contains("physics.g")));
        let err = parse_config("budget.N = 0\n").unwrap_err();
        assert!(err.to_string().contains("budget.N"));
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = parse_config("budget.N = 500\nensemble.jz_inst1.phi1 = 0.25\n").unwrap();
        assert_eq!(cfg.budget.n, 500);
        assert_eq!(cfg.ensembles.jz_inst1.phi1, ParamDist::Fixed(0.25));
        assert_eq!(cfg.physics, default_config().physics);
    }

    #[test]
    fn task_names() {
        for t in [
            Task::Bqpt,
            Task::Bhpe,
            Task::Bqss,
            Task::Classify,
            Task::Figdata,
        ] {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert!("nope".parse::<Task>().is_err());
    }

    #[test]
    fn histogram_bins_cover_unit_interval() {
        let h = infidelity_histogram(&[1.0, 1.0 - 5e-7, 0.5, 0.0]);
        assert_eq!(h.iter().map(|b| b.2).sum::<u64>(), 4);
        assert_eq!(h[0].2, 1);
        assert_eq!(h.last().unwrap().2, 2);
    }

    proptest! {
        #[test]
        fn roundtrip_random_configs(
            seed in any::<u64>(), g in 0.5f64..4.0, n in 1u64..1_000_000, xx in 0.1f64..4.0,
            lo in 0.0f64..0.2, w in 0.5f64..1.0,
        ) {
            let mut cfg = default_config();
            cfg.seed = seed;
            cfg.physics.g = g;
            cfg.budget.n = n;
            cfg.budget.xx_scale = xx;
            cfg.ensembles.jz_inst2.r1 = ParamDist::uniform(lo, lo + w * (1.0 - lo));
            let text = serialize_config(&cfg);
            let back = parse_config(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(serialize_config(&back), text);
        }
    }
}
