//! Domain types for finite context/action spaces: preference models,
//! logit-parameterized tabular policies, behavior and context distributions,
//! and preference records.
//!
//! Dense tensors are stored row-major in flat `Vec<f64>`s:
//! `[x][y]` for generative tables and `[x][y_in][y_out]` for improvement
//! tables and preference models.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance used by every normalization check.
pub const PROB_TOL: f64 = 1e-12;

/// Sizes of the context set and the action (completion) set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionSpace {
    num_contexts: usize,
    num_actions: usize,
}

impl ActionSpace {
    pub fn new(num_contexts: usize, num_actions: usize) -> Result<Self> {
        if num_contexts < 1 {
            return Err(Error::param("an action space needs at least one context"));
        }
        if num_actions < 2 {
            return Err(Error::param("an action space needs at least two actions"));
        }
        Ok(ActionSpace {
            num_contexts,
            num_actions,
        })
    }

    /// Context-free bandit with `num_actions` arms.
    pub fn bandit(num_actions: usize) -> Result<Self> {
        Self::new(1, num_actions)
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn check_context(&self, x: usize) -> Result<()> {
        if x < self.num_contexts {
            Ok(())
        } else {
            Err(Error::Index {
                what: "context",
                index: x,
                limit: self.num_contexts,
            })
        }
    }

    pub fn check_action(&self, y: usize) -> Result<()> {
        if y < self.num_actions {
            Ok(())
        } else {
            Err(Error::Index {
                what: "action",
                index: y,
                limit: self.num_actions,
            })
        }
    }

    pub(crate) fn gen_len(&self) -> usize {
        self.num_contexts * self.num_actions
    }

    pub(crate) fn imp_len(&self) -> usize {
        self.num_contexts * self.num_actions * self.num_actions
    }

    #[inline]
    pub(crate) fn gen_row(&self, x: usize) -> usize {
        x * self.num_actions
    }

    #[inline]
    pub(crate) fn imp_row(&self, x: usize, y_in: usize) -> usize {
        (x * self.num_actions + y_in) * self.num_actions
    }
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Half the ℓ1 distance between two probability vectors.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "total variation needs equal lengths");
    0.5 * a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>()
}

/// `KL(q || r)` with the `0 · ln 0 = 0` convention.
pub fn kl_divergence(q: &[f64], r: &[f64]) -> f64 {
    q.iter()
        .zip(r)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, ri)| qi * (qi / ri).ln())
        .sum()
}

/// Index of the largest entry; the lowest index wins exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::param(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(Error::param(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// True preference probabilities `p(y_i ≻ y_j | x)`, stored as `[x][i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceModel {
    space: ActionSpace,
    probs: Vec<f64>,
}

/// First place where a preference tensor breaks its invariants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Violation {
    /// Entry outside `[0, 1]` or not finite.
    Range { x: usize, i: usize, j: usize, value: f64 },
    /// Diagonal entry different from 1/2.
    Diagonal { x: usize, i: usize, value: f64 },
    /// `p[x][i][j] + p[x][j][i]` differs from 1.
    Complementarity { x: usize, i: usize, j: usize, sum: f64 },
}

impl Violation {
    /// The violating `(x, i, j)` triple.
    pub fn index(&self) -> (usize, usize, usize) {
        match *self {
            Violation::Range { x, i, j, .. } | Violation::Complementarity { x, i, j, .. } => {
                (x, i, j)
            }
            Violation::Diagonal { x, i, .. } => (x, i, i),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Range { x, i, j, value } => {
                write!(f, "p[{x}][{i}][{j}] = {value} is not a probability")
            }
            Violation::Diagonal { x, i, value } => {
                write!(f, "p[{x}][{i}][{i}] = {value}, expected exactly 0.5")
            }
            Violation::Complementarity { x, i, j, sum } => {
                write!(f, "p[{x}][{i}][{j}] + p[{x}][{j}][{i}] = {sum}, expected 1")
            }
        }
    }
}

impl PreferenceModel {
    /// Wraps a flat `[x][i][j]` tensor. Only the shape is checked here; call
    /// [`validate_preference_model`] for the probabilistic invariants.
    pub fn new(space: ActionSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.imp_len() {
            return Err(Error::Schema(format!(
                "preference tensor has {} entries, expected {}",
                probs.len(),
                space.imp_len()
            )));
        }
        Ok(PreferenceModel { space, probs })
    }

    /// Single-context model from a square matrix with `rows[i][j] = p(y_i ≻ y_j)`.
    pub fn from_matrix(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_matrices(std::slice::from_ref(&rows.to_vec()))
    }

    /// One square matrix per context.
    pub fn from_matrices(matrices: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n = matrices.first().map_or(0, |m| m.len());
        let space = ActionSpace::new(matrices.len(), n)?;
        let mut probs = Vec::with_capacity(space.imp_len());
        for m in matrices {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(Error::Schema("preference matrices must be square and equal-sized".into()));
            }
            probs.extend(m.iter().flatten());
        }
        Self::new(space, probs)
    }

    /// The uninformative model `p ≡ 1/2`.
    pub fn indifferent(space: ActionSpace) -> Self {
        PreferenceModel {
            space,
            probs: vec![0.5; space.imp_len()],
        }
    }

    /// Bradley–Terry model `p(i ≻ j | x) = σ(s[x][i] − s[x][j])`.
    pub fn bradley_terry(space: ActionSpace, scores: &[f64]) -> Result<Self> {
        if scores.len() != space.gen_len() {
            return Err(Error::Schema("one score per (context, action) expected".into()));
        }
        let n = space.num_actions();
        let mut probs = vec![0.5; space.imp_len()];
        for x in 0..space.num_contexts() {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let d = scores[x * n + i] - scores[x * n + j];
                        probs[space.imp_row(x, i) + j] = 1.0 / (1.0 + (-d).exp());
                    }
                }
            }
        }
        Ok(PreferenceModel { space, probs })
    }

    /// Random valid model: upper-triangle entries uniform on `[lo, hi]`,
    /// lower triangle by complementarity, diagonal 1/2.
    pub fn random<R: Rng + ?Sized>(space: ActionSpace, lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = space.num_actions();
        let mut probs = vec![0.5; space.imp_len()];
        for x in 0..space.num_contexts() {
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = rng.gen_range(lo..=hi);
                    probs[space.imp_row(x, i) + j] = v;
                    probs[space.imp_row(x, j) + i] = 1.0 - v;
                }
            }
        }
        PreferenceModel { space, probs }
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    /// `p(y_i ≻ y_j | x)`.
    #[inline]
    pub fn prob(&self, x: usize, i: usize, j: usize) -> f64 {
        self.probs[self.space.imp_row(x, i) + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let n = self.space.num_actions();
        for x in 0..self.space.num_contexts() {
            for i in 0..n {
                for j in 0..n {
                    let value = self.prob(x, i, j);
                    if !(0.0..=1.0).contains(&value) {
                        return Err(Violation::Range { x, i, j, value });
                    }
                    if i == j {
                        if value != 0.5 {
                            return Err(Violation::Diagonal { x, i, value });
                        }
                    } else {
                        let sum = value + self.prob(x, j, i);
                        if (sum - 1.0).abs() > PROB_TOL {
                            return Err(Violation::Complementarity { x, i, j, sum });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Checks complementarity and the 1/2 diagonal; returns the first violation
/// in `(x, i, j)` row-major order.
pub fn validate_preference_model(p: &PreferenceModel) -> std::result::Result<(), Violation> {
    p.validate()
}

/// Generative probabilities `π(y | x)` as a `[x][y]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeProbs {
    space: ActionSpace,
    probs: Vec<f64>,
}

impl GenerativeProbs {
    pub fn new(space: ActionSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.gen_len() {
            return Err(Error::Schema("generative table has the wrong length".into()));
        }
        for row in probs.chunks(space.num_actions()) {
            check_distribution(row, "generative row")?;
        }
        Ok(GenerativeProbs { space, probs })
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let s = self.space.gen_row(x);
        &self.probs[s..s + self.space.num_actions()]
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[self.space.gen_row(x) + y]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Improvement kernel `π†(y_out | y_in, x)` as a `[x][y_in][y_out]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementProbs {
    space: ActionSpace,
    probs: Vec<f64>,
}

impl ImprovementProbs {
    pub fn new(space: ActionSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.imp_len() {
            return Err(Error::Schema("improvement table has the wrong length".into()));
        }
        for row in probs.chunks(space.num_actions()) {
            check_distribution(row, "improvement row")?;
        }
        Ok(ImprovementProbs { space, probs })
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn row(&self, x: usize, y_in: usize) -> &[f64] {
        let s = self.space.imp_row(x, y_in);
        &self.probs[s..s + self.space.num_actions()]
    }

    pub fn get(&self, x: usize, y_in: usize, y_out: usize) -> f64 {
        self.probs[self.space.imp_row(x, y_in) + y_out]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// A generative policy and an improvement policy, both stored as
/// unconstrained logits and read through a softmax.
///
/// The two tables share no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    space: ActionSpace,
    gen_logits: Vec<f64>,
    imp_logits: Vec<f64>,
}

impl TabularPolicy {
    /// All-zero logits: uniform generative and improvement distributions.
    pub fn uniform(space: ActionSpace) -> Self {
        TabularPolicy {
            space,
            gen_logits: vec![0.0; space.gen_len()],
            imp_logits: vec![0.0; space.imp_len()],
        }
    }

    pub fn from_logits(space: ActionSpace, gen_logits: Vec<f64>, imp_logits: Vec<f64>) -> Result<Self> {
        if gen_logits.len() != space.gen_len() || imp_logits.len() != space.imp_len() {
            return Err(Error::Schema(format!(
                "policy logits have lengths ({}, {}), expected ({}, {})",
                gen_logits.len(),
                imp_logits.len(),
                space.gen_len(),
                space.imp_len()
            )));
        }
        if gen_logits.iter().chain(&imp_logits).any(|v| !v.is_finite()) {
            return Err(Error::param("policy logits must be finite"));
        }
        Ok(TabularPolicy {
            space,
            gen_logits,
            imp_logits,
        })
    }

    /// Logits `ln π`; every probability must be strictly positive.
    pub fn from_probs(gen: &GenerativeProbs, imp: &ImprovementProbs) -> Result<Self> {
        if gen.space() != imp.space() {
            return Err(Error::Schema("generative and improvement tables disagree on shape".into()));
        }
        if gen.as_slice().iter().chain(imp.as_slice()).any(|v| *v <= 0.0) {
            return Err(Error::Domain("logit parameterization needs strictly positive probabilities".into()));
        }
        Self::from_logits(
            gen.space(),
            gen.as_slice().iter().map(|v| v.ln()).collect(),
            imp.as_slice().iter().map(|v| v.ln()).collect(),
        )
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn gen_logits(&self) -> &[f64] {
        &self.gen_logits
    }

    pub fn imp_logits(&self) -> &[f64] {
        &self.imp_logits
    }

    /// Mutable views of both logit tables, for the optimizer.
    pub fn logits_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.gen_logits, &mut self.imp_logits)
    }

    /// `softmax(gen_logits[x])`.
    pub fn policy_probs(&self, x: usize) -> Result<Vec<f64>> {
        self.space.check_context(x)?;
        let s = self.space.gen_row(x);
        Ok(softmax(&self.gen_logits[s..s + self.space.num_actions()]))
    }

    /// `softmax(imp_logits[x][y_in])`.
    pub fn improvement_probs(&self, x: usize, y_in: usize) -> Result<Vec<f64>> {
        self.space.check_context(x)?;
        self.space.check_action(y_in)?;
        let s = self.space.imp_row(x, y_in);
        Ok(softmax(&self.imp_logits[s..s + self.space.num_actions()]))
    }

    pub fn generative(&self) -> GenerativeProbs {
        GenerativeProbs {
            space: self.space,
            probs: self
                .gen_logits
                .chunks(self.space.num_actions())
                .flat_map(softmax)
                .collect(),
        }
    }

    pub fn improvement(&self) -> ImprovementProbs {
        ImprovementProbs {
            space: self.space,
            probs: self
                .imp_logits
                .chunks(self.space.num_actions())
                .flat_map(softmax)
                .collect(),
        }
    }

    /// Log-probabilities of both tables, computed once.
    pub fn log_probs(&self) -> LogProbs {
        let n = self.space.num_actions();
        LogProbs {
            space: self.space,
            gen: self.gen_logits.chunks(n).flat_map(log_softmax).collect(),
            imp: self.imp_logits.chunks(n).flat_map(log_softmax).collect(),
        }
    }
}

/// Cached `ln π(y|x)` and `ln π†(y_out|y_in,x)` for a policy.
#[derive(Debug, Clone)]
pub struct LogProbs {
    space: ActionSpace,
    gen: Vec<f64>,
    imp: Vec<f64>,
}

impl LogProbs {
    #[inline]
    pub fn gen(&self, x: usize, y: usize) -> f64 {
        self.gen[self.space.gen_row(x) + y]
    }

    #[inline]
    pub fn imp(&self, x: usize, y_in: usize, y_out: usize) -> f64 {
        self.imp[self.space.imp_row(x, y_in) + y_out]
    }
}

/// Sampling distribution `μ(y | x)` of the completions in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    space: ActionSpace,
    probs: Vec<f64>,
}

impl BehaviorPolicy {
    pub fn new(space: ActionSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.gen_len() {
            return Err(Error::Schema("behavior table has the wrong length".into()));
        }
        for row in probs.chunks(space.num_actions()) {
            check_distribution(row, "behavior row")?;
        }
        Ok(BehaviorPolicy { space, probs })
    }

    pub fn uniform(space: ActionSpace) -> Self {
        let n = space.num_actions();
        BehaviorPolicy {
            space,
            probs: vec![1.0 / n as f64; space.gen_len()],
        }
    }

    /// Same row for every context.
    pub fn broadcast(space: ActionSpace, row: &[f64]) -> Result<Self> {
        if row.len() != space.num_actions() {
            return Err(Error::Schema("behavior row has the wrong length".into()));
        }
        Self::new(space, row.repeat(space.num_contexts()))
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let s = self.space.gen_row(x);
        &self.probs[s..s + self.space.num_actions()]
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[self.space.gen_row(x) + y]
    }
}

/// Context distribution `ρ(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextDistribution {
    probs: Vec<f64>,
}

impl ContextDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::param("context distribution is empty"));
        }
        check_distribution(&probs, "context distribution")?;
        Ok(ContextDistribution { probs })
    }

    pub fn uniform(num_contexts: usize) -> Self {
        ContextDistribution {
            probs: vec![1.0 / num_contexts as f64; num_contexts],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, x: usize) -> f64 {
        self.probs[x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// One labelled comparison: `y_w ≻ y_l` in context `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PreferenceRecord {
    pub x: usize,
    pub y_w: usize,
    pub y_l: usize,
}

impl PreferenceRecord {
    pub fn new(x: usize, y_w: usize, y_l: usize) -> Self {
        PreferenceRecord { x, y_w, y_l }
    }

    pub fn is_tie(&self) -> bool {
        self.y_w == self.y_l
    }
}

/// Records together with the space they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    space: ActionSpace,
    records: Vec<PreferenceRecord>,
}

impl PreferenceDataset {
    pub fn new(space: ActionSpace, records: Vec<PreferenceRecord>) -> Result<Self> {
        for r in &records {
            space.check_context(r.x)?;
            space.check_action(r.y_w)?;
            space.check_action(r.y_l)?;
        }
        Ok(PreferenceDataset { space, records })
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
