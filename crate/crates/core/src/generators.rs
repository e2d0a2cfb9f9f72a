//! Random normal programs and labeled datasets.
//!
//! Two families are generated: negative two-literal programs, where every
//! ordered pair of distinct atoms contributes `a :- not b.` independently,
//! and random 3-literal programs with a fixed rule count. Datasets are
//! written as one directory per difficulty split with `train/`, `val/` and
//! `test/` subdirectories and a JSON `manifest`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crisp::{enumerate_stable_models, OracleError};
use crate::program::{parse_program, serialize_program, ParseError, ProgramBuilder};
use crate::seeding::{derive_seed, rng_from_seed};
use crate::{GroundProgram, Interpretation, Rule};

pub const MANIFEST_FILE: &str = "manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_C1: f64 = 5.0;
pub const DEFAULT_C2: f64 = 1.0;
pub const DEFAULT_RULE_RATIO: f64 = 5.0;
/// Attempts per instance before rejection sampling gives up.
pub const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenError {
    #[error("invalid generator parameters: {0}")]
    Params(String),
    #[error(
        "{set} instance {index} needs labels but has {atoms} atoms, above the oracle cap {cap}"
    )]
    OracleCap {
        set: String,
        index: usize,
        atoms: usize,
        cap: usize,
    },
    #[error("no consistent {set} instance {index} after {attempts} attempts")]
    Exhausted {
        set: String,
        index: usize,
        attempts: usize,
    },
    #[error("counts must be at least 1")]
    EmptyCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct N2LParams {
    pub n: usize,
    pub c1: f64,
    pub c2: f64,
    pub seed: u64,
}

impl N2LParams {
    pub fn validate(&self) -> Result<(), GenError> {
        let n = self.n as f64;
        if self.n < 2 {
            return Err(GenError::Params(format!(
                "n = {} must be at least 2",
                self.n
            )));
        }
        if !(self.c1 >= 0.0 && self.c2 >= 0.0 && self.c1 <= n && self.c2 <= n) {
            return Err(GenError::Params(format!(
                "c1 = {}, c2 = {} must lie in [0, n]",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeLPParams {
    pub n: usize,
    pub l: usize,
    pub seed: u64,
}

impl ThreeLPParams {
    /// Number of distinct rules the generator can produce.
    pub fn distinct_rules(n: usize) -> u128 {
        if n < 4 {
            return 0;
        }
        let m = (n - 1) as u128;
        n as u128 * (m * (m - 1) * (m - 2) / 6) * 8
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.n < 4 || self.l < 1 {
            return Err(GenError::Params(format!(
                "need n >= 4 and l >= 1, got n = {}, l = {}",
                self.n, self.l
            )));
        }
        if self.l as u128 > Self::distinct_rules(self.n) {
            return Err(GenError::Params(format!(
                "{} atoms admit fewer than {} distinct rules",
                self.n, self.l
            )));
        }
        Ok(())
    }
}

fn numbered_atoms(n: usize) -> ProgramBuilder {
    let mut b = ProgramBuilder::new();
    for i in 0..n {
        b.atom(&format!("a{i}"));
    }
    b
}

/// Each ordered pair `(a, b)`, `a != b`, gives `a :- not b.` with
/// probability `c1 / n`; each atom gives `a :- not a.` with probability
/// `c2 / n`.
pub fn gen_n2l(params: &N2LParams) -> Result<GroundProgram, GenError> {
    params.validate()?;
    let n = params.n;
    let (p1, p2) = (params.c1 / n as f64, params.c2 / n as f64);
    let mut rng = rng_from_seed(params.seed);
    let mut b = numbered_atoms(n);
    for a in 0..n {
        for c in 0..n {
            if a != c && rng.gen_bool(p1) {
                b.rule(Rule::new(a, [], [c]));
            }
        }
        if rng.gen_bool(p2) {
            b.rule(Rule::new(a, [], [a]));
        }
    }
    Ok(b.build().0)
}

/// Exactly `l` distinct rules. Each has a uniform head and three distinct
/// body atoms other than the head, each negated with probability 1/2. A
/// draw that repeats an earlier rule is redrawn.
pub fn gen_3lp(params: &ThreeLPParams) -> Result<GroundProgram, GenError> {
    params.validate()?;
    let n = params.n;
    let mut rng = rng_from_seed(params.seed);
    let mut b = numbered_atoms(n);
    let mut seen = HashSet::new();
    while seen.len() < params.l {
        let head = rng.gen_range(0..n);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for k in sample(&mut rng, n - 1, 3).into_iter() {
            let atom = if k >= head { k + 1 } else { k };
            if rng.gen_bool(0.5) {
                neg.push(atom);
            } else {
                pos.push(atom);
            }
        }
        let rule = Rule::new(head, pos, neg);
        if seen.insert(rule.clone()) {
            b.rule(rule);
        }
    }
    Ok(b.build().0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Easy,
    Medium,
    Hard,
}

impl Split {
    pub fn atom_range(self) -> (usize, usize) {
        match self {
            Split::Easy => (5, 10),
            Split::Medium => (11, 50),
            Split::Hard => (51, 100),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Easy => "easy",
            Split::Medium => "medium",
            Split::Hard => "hard",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Split::Easy),
            "medium" => Ok(Split::Medium),
            "hard" => Ok(Split::Hard),
            _ => Err(format!(
                "unknown split `{s}` (expected easy, medium or hard)"
            )),
        }
    }
}

/// Generator family with its density constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorKind {
    N2l {
        c1: f64,
        c2: f64,
    },
    /// Rule count is `round(rule_ratio * n)`.
    #[serde(rename = "3lp")]
    ThreeLp {
        rule_ratio: f64,
    },
}

impl GeneratorKind {
    pub fn n2l_default() -> Self {
        GeneratorKind::N2l {
            c1: DEFAULT_C1,
            c2: DEFAULT_C2,
        }
    }

    pub fn three_lp_default() -> Self {
        GeneratorKind::ThreeLp {
            rule_ratio: DEFAULT_RULE_RATIO,
        }
    }

    pub fn generate(
        &self,
        n: usize,
        seed: u64,
    ) -> Result<(GroundProgram, InstanceParams), GenError> {
        match *self {
            GeneratorKind::N2l { c1, c2 } => {
                let params = N2LParams { n, c1, c2, seed };
                Ok((gen_n2l(&params)?, InstanceParams::N2l(params)))
            }
            GeneratorKind::ThreeLp { rule_ratio } => {
                let params = ThreeLPParams {
                    n,
                    l: ((rule_ratio * n as f64).round() as usize).max(1),
                    seed,
                };
                Ok((gen_3lp(&params)?, InstanceParams::ThreeLp(params)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InstanceParams {
    N2l(N2LParams),
    #[serde(rename = "3lp")]
    ThreeLp(ThreeLPParams),
}

impl InstanceParams {
    pub fn atoms(&self) -> usize {
        match self {
            InstanceParams::N2l(p) => p.n,
            InstanceParams::ThreeLp(p) => p.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }

    fn label(self) -> u64 {
        self as u64 + 1
    }

    fn requires_models(self) -> bool {
        !matches!(self, Subset::Test)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetInstance {
    pub subset: Subset,
    pub index: usize,
    pub program: GroundProgram,
    pub models: Vec<Interpretation>,
    pub labeled: bool,
    pub split: Split,
    pub params: InstanceParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Counts {
    pub fn get(&self, s: Subset) -> usize {
        match s {
            Subset::Train => self.train,
            Subset::Val => self.val,
            Subset::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subset: Subset,
    pub index: usize,
    pub params: InstanceParams,
    /// Draws discarded before this instance was accepted.
    pub rejected: usize,
    pub labeled: bool,
    pub models: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub generator: GeneratorKind,
    pub split: Split,
    pub counts: Counts,
    pub seed: u64,
    pub oracle_cap: usize,
    /// Test instances small enough to label were also rejection sampled.
    pub consistent_test: bool,
    pub rejected: Counts,
    pub instances: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub generator: GeneratorKind,
    pub split: Split,
    pub counts: Counts,
    pub seed: u64,
    pub oracle_cap: usize,
    /// Rejection-sample labelable test instances as well, so every test
    /// instance with at most `oracle_cap` atoms has a stable model.
    pub consistent_test: bool,
}

/// Generates one instance of `subset` by rejection sampling. Returns the
/// instance and the number of discarded draws.
pub fn generate_instance(
    spec: &DatasetSpec,
    subset: Subset,
    index: usize,
) -> Result<(DatasetInstance, usize), GenError> {
    let (lo, hi) = spec.split.atom_range();
    for attempt in 0..MAX_ATTEMPTS {
        let seed = derive_seed(spec.seed, &[subset.label(), index as u64, attempt as u64]);
        let n = rng_from_seed(seed).gen_range(lo..=hi);
        let (program, params) = spec.generator.generate(n, derive_seed(seed, &[0]))?;
        let labeled = n <= spec.oracle_cap;
        if subset.requires_models() && !labeled {
            return Err(GenError::OracleCap {
                set: subset.dir_name().into(),
                index,
                atoms: n,
                cap: spec.oracle_cap,
            });
        }
        let models = if labeled {
            match enumerate_stable_models(&program, spec.oracle_cap) {
                Ok(m) => m,
                Err(OracleError::ScaleExceeded { .. }) => unreachable!("checked against the cap"),
            }
        } else {
            Vec::new()
        };
        let must_be_consistent = subset.requires_models() || (spec.consistent_test && labeled);
        if must_be_consistent && models.is_empty() {
            continue;
        }
        let inst = DatasetInstance {
            subset,
            index,
            program,
            models,
            labeled,
            split: spec.split,
            params,
        };
        return Ok((inst, attempt));
    }
    Err(GenError::Exhausted {
        set: subset.dir_name().into(),
        index,
        attempts: MAX_ATTEMPTS,
    })
}

/// Generates every instance of a dataset in memory, instance order kept.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<DatasetInstance>, Manifest), GenError> {
    if spec.counts.train == 0 || spec.counts.val == 0 || spec.counts.test == 0 {
        return Err(GenError::EmptyCounts);
    }
    let jobs: Vec<(Subset, usize)> = Subset::ALL
        .iter()
        .flat_map(|&s| (0..spec.counts.get(s)).map(move |i| (s, i)))
        .collect();
    let results: Vec<Result<(DatasetInstance, usize), GenError>> = jobs
        .par_iter()
        .map(|&(s, i)| generate_instance(spec, s, i))
        .collect();
    let mut instances = Vec::with_capacity(jobs.len());
    let mut entries = Vec::with_capacity(jobs.len());
    let mut rejected = Counts {
        train: 0,
        val: 0,
        test: 0,
    };
    for r in results {
        let (inst, rej) = r?;
        match inst.subset {
            Subset::Train => rejected.train += rej,
            Subset::Val => rejected.val += rej,
            Subset::Test => rejected.test += rej,
        }
        entries.push(ManifestEntry {
            subset: inst.subset,
            index: inst.index,
            params: inst.params,
            rejected: rej,
            labeled: inst.labeled,
            models: inst.models.len(),
        });
        instances.push(inst);
    }
    log::info!(
        "rejected draws without stable models: train {}, val {}, test {}",
        rejected.train,
        rejected.val,
        rejected.test
    );
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        generator: spec.generator,
        split: spec.split,
        counts: spec.counts,
        seed: spec.seed,
        oracle_cap: spec.oracle_cap,
        consistent_test: spec.consistent_test,
        rejected,
        instances: entries,
    };
    Ok((instances, manifest))
}

/// One model per line; the empty model is an empty line. No models gives an
/// empty file.
pub fn format_models(p: &GroundProgram, models: &[Interpretation]) -> String {
    models
        .iter()
        .map(|m| format!("{}\n", p.format_model(m)))
        .collect()
}

pub fn parse_models(p: &GroundProgram, text: &str) -> Result<Vec<Interpretation>, ParseError> {
    text.split_terminator('\n')
        .map(|line| p.parse_model(line))
        .collect()
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn instance_path(root: &Path, subset: Subset, index: usize, ext: &str) -> PathBuf {
    root.join(subset.dir_name())
        .join(format!("{index:04}.{ext}"))
}

/// Generates and writes a dataset directory.
pub fn build_dataset(spec: &DatasetSpec, out: &Path) -> Result<Manifest, DatasetError> {
    let (instances, manifest) = generate_dataset(spec)?;
    for s in Subset::ALL {
        let dir = out.join(s.dir_name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for inst in &instances {
        let lp = instance_path(out, inst.subset, inst.index, "lp");
        fs::write(&lp, serialize_program(&inst.program)).map_err(io_err(&lp))?;
        let models = instance_path(out, inst.subset, inst.index, "models");
        fs::write(&models, format_models(&inst.program, &inst.models)).map_err(io_err(&models))?;
    }
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub instances: Vec<DatasetInstance>,
}

impl Dataset {
    pub fn subset(&self, s: Subset) -> impl Iterator<Item = &DatasetInstance> {
        self.instances.iter().filter(move |i| i.subset == s)
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetError::Format {
            path,
            message: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let mut instances = Vec::with_capacity(manifest.instances.len());
    for e in &manifest.instances {
        let lp = instance_path(root, e.subset, e.index, "lp");
        let text = fs::read_to_string(&lp).map_err(io_err(&lp))?;
        let (program, _) = parse_program(&text).map_err(|err| DatasetError::Format {
            path: lp.clone(),
            message: err.to_string(),
        })?;
        let mp = instance_path(root, e.subset, e.index, "models");
        let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
        let models = parse_models(&program, &text).map_err(|err| DatasetError::Format {
            path: mp.clone(),
            message: err.to_string(),
        })?;
        instances.push(DatasetInstance {
            subset: e.subset,
            index: e.index,
            program,
            models,
            labeled: e.labeled,
            split: manifest.split,
            params: e.params,
        });
    }
    Ok(Dataset {
        manifest,
        instances,
    })
}
