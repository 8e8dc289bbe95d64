//! Synthetic preference data and text persistence for datasets and policies.
//!
//! Dataset format (UTF-8, `\n` line endings):
//!
//! ```text
//! #prefdata v1 contexts=<n> actions=<m>
//! <x>\t<y_w>\t<y_l>
//! ```
//!
//! Policy format: a header line followed by one tab-separated row per logit
//! row, generative rows first, values in 17-significant-digit scientific
//! notation so the round trip is bit-exact:
//!
//! ```text
//! #policy v1 contexts=<n> actions=<m>
//! gen\t<x>\t<logit>...
//! imp\t<x>\t<y_in>\t<logit>...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fsutil::{read_to_string, write_atomic};
use crate::prefcore::{
    ActionSpace, BehaviorPolicy, ContextDistribution, PreferenceDataset, PreferenceModel, PreferenceRecord,
    TabularPolicy,
};

/// ChaCha stream used by dataset generation.
pub const GENERATION_STREAM: u64 = 0;

/// What to do when both sampled completions are the same action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TiePolicy {
    /// Keep the pair; the fair-coin label leaves `y_w = y_l`.
    #[default]
    KeepRandomLabel,
    /// Redraw the second completion until it differs from the first.
    ResampleDistinct,
}

impl TiePolicy {
    pub fn name(self) -> &'static str {
        match self {
            TiePolicy::KeepRandomLabel => "keep_random_label",
            TiePolicy::ResampleDistinct => "resample_distinct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "keep_random_label" => Some(TiePolicy::KeepRandomLabel),
            "resample_distinct" => Some(TiePolicy::ResampleDistinct),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationSpec {
    pub num_pairs: usize,
    pub tie_policy: TiePolicy,
    pub seed: u64,
}

impl GenerationSpec {
    pub fn new(num_pairs: usize, seed: u64) -> Self {
        GenerationSpec {
            num_pairs,
            tie_policy: TiePolicy::default(),
            seed,
        }
    }
}

/// Draws `x ∼ ρ`, `y₁, y₂ ∼ μ(·|x)` i.i.d. and labels `y₁` the winner with
/// probability `p(y₁ ≻ y₂ | x)`.
pub fn generate_dataset(
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    spec: &GenerationSpec,
) -> Result<PreferenceDataset> {
    let space = p.space();
    if spec.num_pairs == 0 {
        return Err(Error::param("num_pairs must be at least 1"));
    }
    if mu.space() != space || rho.len() != space.num_contexts() {
        return Err(Error::Schema("μ and ρ must match the preference model's space".into()));
    }
    p.validate().map_err(Error::InvalidModel)?;

    let contexts = WeightedIndex::new(rho.as_slice()).map_err(|e| Error::param(format!("ρ: {e}")))?;
    let mut actions = Vec::with_capacity(space.num_contexts());
    for x in 0..space.num_contexts() {
        let row = mu.row(x);
        if spec.tie_policy == TiePolicy::ResampleDistinct && row.iter().filter(|v| **v > 0.0).count() < 2 {
            return Err(Error::param(format!(
                "resample_distinct needs at least two supported actions in context {x}"
            )));
        }
        // contexts with ρ(x) = 0 are never drawn, but μ rows are still well formed
        actions.push(WeightedIndex::new(row).map_err(|e| Error::param(format!("μ row {x}: {e}")))?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(GENERATION_STREAM);
    let mut records = Vec::with_capacity(spec.num_pairs);
    for _ in 0..spec.num_pairs {
        let x = contexts.sample(&mut rng);
        let y1 = actions[x].sample(&mut rng);
        let mut y2 = actions[x].sample(&mut rng);
        if spec.tie_policy == TiePolicy::ResampleDistinct {
            while y2 == y1 {
                y2 = actions[x].sample(&mut rng);
            }
        }
        let first_wins = rng.gen::<f64>() < p.prob(x, y1, y2);
        let (y_w, y_l) = if first_wins { (y1, y2) } else { (y2, y1) };
        records.push(PreferenceRecord::new(x, y_w, y_l));
    }
    PreferenceDataset::new(space, records)
}

const DATASET_MAGIC: &str = "#prefdata v1";
const POLICY_MAGIC: &str = "#policy v1";

fn header(magic: &str, space: ActionSpace) -> String {
    format!(
        "{magic} contexts={} actions={}\n",
        space.num_contexts(),
        space.num_actions()
    )
}

fn parse_header(line: Option<&str>, magic: &str) -> Result<ActionSpace> {
    let line = line.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let rest = line.strip_prefix(magic).ok_or_else(|| Error::Parse {
        line: 1,
        message: format!("expected header starting with `{magic}`"),
    })?;
    let mut contexts = None;
    let mut actions = None;
    for field in rest.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("malformed header field `{field}`"),
        })?;
        let value: usize = value.parse().map_err(|_| Error::Parse {
            line: 1,
            message: format!("header field `{field}` is not an integer"),
        })?;
        match key {
            "contexts" => contexts = Some(value),
            "actions" => actions = Some(value),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unknown header field `{key}`"),
                })
            }
        }
    }
    match (contexts, actions) {
        (Some(c), Some(a)) => ActionSpace::new(c, a).map_err(|e| Error::Schema(e.to_string())),
        _ => Err(Error::Parse {
            line: 1,
            message: "header must declare contexts and actions".into(),
        }),
    }
}

pub fn format_dataset(dataset: &PreferenceDataset) -> String {
    let mut out = header(DATASET_MAGIC, dataset.space());
    for r in dataset.records() {
        let _ = writeln!(out, "{}\t{}\t{}", r.x, r.y_w, r.y_l);
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<PreferenceDataset> {
    let mut lines = text.lines();
    let space = parse_header(lines.next(), DATASET_MAGIC)?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let mut ids = [0usize; 3];
        for (slot, f) in ids.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{f}` is not a non-negative integer"),
            })?;
        }
        let [x, y_w, y_l] = ids;
        if x >= space.num_contexts() || y_w >= space.num_actions() || y_l >= space.num_actions() {
            return Err(Error::Schema(format!(
                "line {line_no}: record ({x}, {y_w}, {y_l}) is outside a {}x{} space",
                space.num_contexts(),
                space.num_actions()
            )));
        }
        records.push(PreferenceRecord::new(x, y_w, y_l));
    }
    PreferenceDataset::new(space, records)
}

pub fn save_dataset(dataset: &PreferenceDataset, path: &Path) -> Result<()> {
    write_atomic(path, format_dataset(dataset).as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<PreferenceDataset> {
    parse_dataset(&read_to_string(path)?)
}

/// Loads a dataset and checks its header against the expected space.
pub fn load_dataset_for(path: &Path, space: ActionSpace) -> Result<PreferenceDataset> {
    let data = load_dataset(path)?;
    if data.space() != space {
        return Err(Error::Schema(format!(
            "{} declares {}x{}, expected {}x{}",
            path.display(),
            data.space().num_contexts(),
            data.space().num_actions(),
            space.num_contexts(),
            space.num_actions()
        )));
    }
    Ok(data)
}

pub fn format_policy(policy: &TabularPolicy) -> String {
    let space = policy.space();
    let n = space.num_actions();
    let mut out = header(POLICY_MAGIC, space);
    for (x, row) in policy.gen_logits().chunks(n).enumerate() {
        out.push_str(&format!("gen\t{x}"));
        for v in row {
            let _ = write!(out, "\t{v:.16e}");
        }
        out.push('\n');
    }
    for (k, row) in policy.imp_logits().chunks(n).enumerate() {
        out.push_str(&format!("imp\t{}\t{}", k / n, k % n));
        for v in row {
            let _ = write!(out, "\t{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_policy(text: &str) -> Result<TabularPolicy> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
    let space = parse_header(lines.next().map(|(_, l)| l), POLICY_MAGIC)?;
    let n = space.num_actions();
    let mut gen = Vec::with_capacity(space.gen_len());
    let mut imp = Vec::with_capacity(space.imp_len());

    let expected_rows = space.num_contexts() + space.num_contexts() * n;
    let mut row_index = 0;
    for (i, line) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let (tag, index_fields) = if row_index < space.num_contexts() {
            ("gen", 1)
        } else {
            ("imp", 2)
        };
        if row_index >= expected_rows {
            return Err(Error::Schema(format!("line {line_no}: more rows than a {}x{} policy holds", space.num_contexts(), n)));
        }
        if fields[0] != tag {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected a `{tag}` row"),
            });
        }
        let expected_index: Vec<usize> = if tag == "gen" {
            vec![row_index]
        } else {
            let k = row_index - space.num_contexts();
            vec![k / n, k % n]
        };
        for (f, want) in fields[1..].iter().take(index_fields).zip(&expected_index) {
            if f.parse::<usize>().ok() != Some(*want) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("row index `{f}` out of order, expected {want}"),
                });
            }
        }
        let values = &fields[(1 + index_fields).min(fields.len())..];
        if values.len() != n {
            return Err(Error::Schema(format!(
                "line {line_no}: {} logits, expected {n}",
                values.len()
            )));
        }
        let target = if tag == "gen" { &mut gen } else { &mut imp };
        for v in values {
            let parsed: f64 = v.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{v}` is not a number"),
            })?;
            if !parsed.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("`{v}` is not finite"),
                });
            }
            target.push(parsed);
        }
        row_index += 1;
    }
    if row_index != expected_rows {
        return Err(Error::Parse {
            line: text.lines().count() + 1,
            message: format!("truncated policy: {row_index} of {expected_rows} rows"),
        });
    }
    TabularPolicy::from_logits(space, gen, imp)
}

pub fn save_policy(policy: &TabularPolicy, path: &Path) -> Result<()> {
    write_atomic(path, format_policy(policy).as_bytes())
}

pub fn load_policy(path: &Path) -> Result<TabularPolicy> {
    parse_policy(&read_to_string(path)?)
}

/// Loads a policy and checks its header against the expected space.
pub fn load_policy_for(path: &Path, space: ActionSpace) -> Result<TabularPolicy> {
    let policy = load_policy(path)?;
    if policy.space() != space {
        return Err(Error::Schema(format!(
            "{} holds a {}x{} policy, expected {}x{}",
            path.display(),
            policy.space().num_contexts(),
            policy.space().num_actions(),
            space.num_contexts(),
            space.num_actions()
        )));
    }
    Ok(policy)
}
