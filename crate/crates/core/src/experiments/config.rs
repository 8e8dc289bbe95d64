//! Experiment configuration: a flat `key = value` text format.
//!
//! ```text
//! # comment
//! [problem]
//! preference = 0.5 0.99 0.3; 0.01 0.5 0.25; 0.7 0.75 0.5
//! mu = uniform
//! [optimizer]
//! seed = 1 2 3
//! ```
//!
//! Section headers only group keys for the reader; every key is global and
//! may appear once. Matrices are rows separated by `;`, contexts separated
//! by `|`. A `preference_file` holds the same syntax where newlines also
//! separate rows and blank lines separate contexts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::datagen::TiePolicy;
use crate::error::{Error, Result};
use crate::fsutil::read_to_string;
use crate::losses::LossKind;
use crate::prefcore::{ActionSpace, BehaviorPolicy, ContextDistribution, PreferenceModel};

pub const STUDY_PREFERENCE: [[f64; 3]; 3] = [[0.5, 0.99, 0.3], [0.01, 0.5, 0.25], [0.7, 0.75, 0.5]];

const SECTIONS: [&str; 5] = ["problem", "dataset", "optimizer", "experiment", "output"];

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Srpo,
    Dpo,
    Ipo,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Srpo, Method::Dpo, Method::Ipo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Srpo => "srpo",
            Method::Dpo => "dpo",
            Method::Ipo => "ipo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn loss_kind(self, alpha: f64) -> LossKind {
        match self {
            Method::Srpo => LossKind::Srpo { alpha },
            Method::Dpo => LossKind::Dpo,
            Method::Ipo => LossKind::Ipo,
        }
    }
}

/// Behavior policy as written in the config, expanded once the space is known.
#[derive(Debug, Clone, PartialEq)]
pub enum MuSpec {
    Uniform,
    /// One row per context, or a single row shared by all contexts.
    Rows(Vec<Vec<f64>>),
}

impl MuSpec {
    pub fn build(&self, space: ActionSpace) -> Result<BehaviorPolicy> {
        match self {
            MuSpec::Uniform => Ok(BehaviorPolicy::uniform(space)),
            MuSpec::Rows(rows) if rows.len() == 1 => BehaviorPolicy::broadcast(space, &rows[0]),
            MuSpec::Rows(rows) => {
                if rows.len() != space.num_contexts() {
                    return Err(Error::Config(format!(
                        "mu has {} rows, expected 1 or {}",
                        rows.len(),
                        space.num_contexts()
                    )));
                }
                BehaviorPolicy::new(space, rows.concat())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RhoSpec {
    Uniform,
    Probs(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preference: PreferenceModel,
    pub mu: MuSpec,
    pub rho: RhoSpec,
    pub pairs: usize,
    pub tie_policy: TiePolicy,
    /// Methods to run; single-method commands use the first entry.
    pub methods: Vec<Method>,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_grid: Vec<f64>,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub revisions: usize,
    pub out: Option<PathBuf>,
    /// `contexts` / `actions` keys, checked against the preference model.
    pub declared_contexts: Option<usize>,
    pub declared_actions: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let rows: Vec<Vec<f64>> = STUDY_PREFERENCE.iter().map(|r| r.to_vec()).collect();
        ExperimentConfig {
            preference: PreferenceModel::from_matrix(&rows).expect("built-in matrix has a valid shape"),
            mu: MuSpec::Uniform,
            rho: RhoSpec::Uniform,
            pairs: 10_000,
            tie_policy: TiePolicy::KeepRandomLabel,
            methods: Method::ALL.to_vec(),
            beta: 1.0,
            alpha: 0.0,
            alpha_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            lr: 0.002,
            steps: 5000,
            batch: 128,
            seeds: vec![1, 2, 3],
            revisions: 5,
            out: None,
            declared_contexts: None,
            declared_actions: None,
        }
    }
}

fn parse_f64(key: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("{key}: `{s}` is not a finite number")))
}

fn parse_usize(key: &str, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Config(format!("{key}: `{s}` is not a non-negative integer")))
}

fn parse_list<T>(key: &str, s: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| item(key, t))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn parse_rows(key: &str, s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|row| parse_list(key, row, parse_f64))
        .collect()
}

/// Parses `rows | rows | ...` into one square matrix per context.
pub fn parse_preference(key: &str, s: &str) -> Result<PreferenceModel> {
    let matrices: Vec<Vec<Vec<f64>>> = s.split('|').map(|m| parse_rows(key, m)).collect::<Result<_>>()?;
    PreferenceModel::from_matrices(&matrices).map_err(|e| Error::Config(format!("{key}: {e}")))
}

fn preference_file_to_inline(text: &str) -> String {
    let mut contexts: Vec<Vec<&str>> = vec![Vec::new()];
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            if !contexts.last().is_some_and(Vec::is_empty) {
                contexts.push(Vec::new());
            }
            continue;
        }
        contexts.last_mut().expect("never empty").push(line);
    }
    if contexts.len() > 1 && contexts.last().is_some_and(Vec::is_empty) {
        contexts.pop();
    }
    contexts
        .iter()
        .map(|rows| rows.join(";"))
        .collect::<Vec<_>>()
        .join("|")
}

impl ExperimentConfig {
    /// Parses config text. Relative `preference_file` paths resolve
    /// against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(section) = line.strip_prefix('[') {
                let name = section.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("unterminated section header `{line}`"),
                })?;
                if !SECTIONS.contains(&name.trim()) {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unknown section `{name}` (known: {})", SECTIONS.join(", ")),
                    });
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            if let Some(first) = seen.insert(key.to_string(), line_no) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate key `{key}` (first set on line {first})"),
                });
            }
            let value = value.trim();
            if key == "preference_file" {
                let path = base_dir.join(value);
                let inline = preference_file_to_inline(&read_to_string(&path)?);
                cfg.preference = parse_preference(key, &inline)?;
                continue;
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(message) => Error::Parse { line: line_no, message },
                other => other,
            })?;
        }
        if seen.contains_key("preference") && seen.contains_key("preference_file") {
            return Err(Error::Config("set either preference or preference_file, not both".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        ExperimentConfig::parse(&text, base).map_err(|e| e.context(format!("config {}", path.display())))
    }

    /// Sets one key from its textual value; shared by the file parser and
    /// command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "contexts" => self.declared_contexts = Some(parse_usize(key, value)?),
            "actions" => self.declared_actions = Some(parse_usize(key, value)?),
            "preference" => self.preference = parse_preference(key, value)?,
            "mu" => {
                self.mu = if value == "uniform" {
                    MuSpec::Uniform
                } else {
                    MuSpec::Rows(parse_rows(key, value)?)
                }
            }
            "rho" => {
                self.rho = if value == "uniform" {
                    RhoSpec::Uniform
                } else {
                    RhoSpec::Probs(parse_list(key, value, parse_f64)?)
                }
            }
            "pairs" => self.pairs = parse_usize(key, value)?,
            "tie_policy" => {
                self.tie_policy = TiePolicy::parse(value).ok_or_else(|| {
                    Error::Config(format!("tie_policy: `{value}` (expected keep_random_label or resample_distinct)"))
                })?
            }
            "method" => {
                self.methods = parse_list(key, value, |k, t| {
                    Method::parse(t).ok_or_else(|| Error::Config(format!("{k}: unknown method `{t}` (srpo, dpo, ipo)")))
                })?
            }
            "beta" => self.beta = parse_f64(key, value)?,
            "alpha" => self.alpha = parse_f64(key, value)?,
            "alpha_grid" => self.alpha_grid = parse_list(key, value, parse_f64)?,
            "lr" => self.lr = parse_f64(key, value)?,
            "steps" => self.steps = parse_usize(key, value)?,
            "batch" => self.batch = parse_usize(key, value)?,
            "seed" => {
                self.seeds = parse_list(key, value, |k, t| {
                    t.parse::<u64>()
                        .map_err(|_| Error::Config(format!("{k}: `{t}` is not a 64-bit unsigned integer")))
                })?
            }
            "revisions" => self.revisions = parse_usize(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn space(&self) -> ActionSpace {
        self.preference.space()
    }

    pub fn behavior(&self) -> Result<BehaviorPolicy> {
        self.mu.build(self.space()).map_err(|e| e.context("mu"))
    }

    pub fn context_distribution(&self) -> Result<ContextDistribution> {
        match &self.rho {
            RhoSpec::Uniform => Ok(ContextDistribution::uniform(self.space().num_contexts())),
            RhoSpec::Probs(v) => {
                if v.len() != self.space().num_contexts() {
                    return Err(Error::Config(format!(
                        "rho has {} entries, expected {}",
                        v.len(),
                        self.space().num_contexts()
                    )));
                }
                ContextDistribution::new(v.clone()).map_err(|e| e.context("rho"))
            }
        }
    }

    /// Checks every field; run before any experiment.
    pub fn validate(&self) -> Result<()> {
        self.preference.validate().map_err(Error::InvalidModel)?;
        let space = self.space();
        if let Some(c) = self.declared_contexts.filter(|c| *c != space.num_contexts()) {
            return Err(Error::Config(format!("contexts = {c} but the preference model has {}", space.num_contexts())));
        }
        if let Some(a) = self.declared_actions.filter(|a| *a != space.num_actions()) {
            return Err(Error::Config(format!("actions = {a} but the preference model has {}", space.num_actions())));
        }
        self.behavior()?;
        self.context_distribution()?;
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        for a in std::iter::once(&self.alpha).chain(&self.alpha_grid) {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::Config(format!("alpha values must lie in [0, 1], got {a}")));
            }
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.pairs == 0 {
            return Err(Error::Config("pairs must be at least 1".into()));
        }
        if self.batch == 0 || self.batch > self.pairs {
            return Err(Error::Config(format!("batch must lie in 1..={}, got {}", self.pairs, self.batch)));
        }
        if self.seeds.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("seed and method lists must be non-empty".into()));
        }
        Ok(())
    }

    pub fn primary_method(&self) -> Method {
        self.methods[0]
    }

    pub fn primary_seed(&self) -> u64 {
        self.seeds[0]
    }
}
