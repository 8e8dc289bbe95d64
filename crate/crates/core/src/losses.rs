//! Population (exact) and sampled (minibatch) losses for SRPO and the
//! DPO/IPO baselines, each returning its value together with the gradient
//! with respect to both logit tables.
//!
//! Gradients go through the log-softmax: for a row with probabilities `π`,
//! `∂ ln π(k) / ∂ logit(j) = 1[j = k] − π(j)`.

use crate::error::{Error, Result};
use crate::prefcore::{
    ActionSpace, BehaviorPolicy, ContextDistribution, LogProbs, PreferenceModel, PreferenceRecord,
    TabularPolicy,
};

/// Records of one minibatch, with optional per-record weights.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    records: &'a [PreferenceRecord],
    weights: Option<&'a [f64]>,
}

impl<'a> LossBatch<'a> {
    pub fn new(records: &'a [PreferenceRecord]) -> Self {
        LossBatch { records, weights: None }
    }

    /// The loss becomes `Σ wᵢ ℓᵢ / Σ wᵢ`.
    pub fn weighted(records: &'a [PreferenceRecord], weights: &'a [f64]) -> Result<Self> {
        if weights.len() != records.len() {
            return Err(Error::param("one weight per record expected"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::param("weights must be non-negative with a positive sum"));
        }
        Ok(LossBatch {
            records,
            weights: Some(weights),
        })
    }

    pub fn records(&self) -> &'a [PreferenceRecord] {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Normalized weight of each record (they sum to one).
    fn normalized_weights(&self) -> Vec<f64> {
        match self.weights {
            Some(w) => {
                let total: f64 = w.iter().sum();
                w.iter().map(|v| v / total).collect()
            }
            None => vec![1.0 / self.records.len() as f64; self.records.len()],
        }
    }
}

/// Loss value and gradients shaped like the policy's logit tables.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_gen: Vec<f64>,
    pub grad_imp: Vec<f64>,
}

impl LossOutput {
    fn scaled_add(&mut self, other: &LossOutput, scale: f64) {
        self.value += scale * other.value;
        for (g, o) in self.grad_gen.iter_mut().zip(&other.grad_gen) {
            *g += scale * o;
        }
        for (g, o) in self.grad_imp.iter_mut().zip(&other.grad_imp) {
            *g += scale * o;
        }
    }
}

/// Which objective a trainer minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// `(1 − α)·L̂ + α·L̂†`.
    Srpo { alpha: f64 },
    Dpo,
    Ipo,
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Srpo { alpha } => check_alpha(alpha),
            _ => Ok(()),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("beta must be a positive real, got {beta}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::param(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

fn check_batch(batch: &LossBatch<'_>, space: ActionSpace) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::param("loss batch is empty"));
    }
    for r in batch.records {
        space.check_context(r.x)?;
        space.check_action(r.y_w)?;
        space.check_action(r.y_l)?;
    }
    Ok(())
}

fn check_population(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
) -> Result<()> {
    let space = policy.space();
    if reference.space() != space || p.space() != space || mu.space() != space {
        return Err(Error::Schema("policy, reference, preference model and μ must share a space".into()));
    }
    if rho.len() != space.num_contexts() {
        return Err(Error::Schema("context distribution has the wrong length".into()));
    }
    Ok(())
}

/// Log-ratios against the reference plus gradient accumulation.
struct Workspace {
    space: ActionSpace,
    log: LogProbs,
    ref_log: LogProbs,
    gen_probs: Vec<f64>,
    imp_probs: Vec<f64>,
    out: LossOutput,
}

impl Workspace {
    fn new(policy: &TabularPolicy, reference: &TabularPolicy) -> Self {
        let space = policy.space();
        Workspace {
            space,
            log: policy.log_probs(),
            ref_log: reference.log_probs(),
            gen_probs: policy.generative().as_slice().to_vec(),
            imp_probs: policy.improvement().as_slice().to_vec(),
            out: LossOutput {
                value: 0.0,
                grad_gen: vec![0.0; space.gen_len()],
                grad_imp: vec![0.0; space.imp_len()],
            },
        }
    }

    /// `ln π(y|x) − ln π_ref(y|x)`.
    #[inline]
    fn gen_ratio(&self, x: usize, y: usize) -> f64 {
        self.log.gen(x, y) - self.ref_log.gen(x, y)
    }

    /// `ln π†(y_out|y_in,x) − ln π_ref(y_out|y_in,x)`.
    #[inline]
    fn imp_ratio(&self, x: usize, y_in: usize, y_out: usize) -> f64 {
        self.log.imp(x, y_in, y_out) - self.ref_log.imp(x, y_in, y_out)
    }

    /// Adds `coef · ∂ ln π(y|x) / ∂ gen_logits`.
    fn push_gen(&mut self, x: usize, y: usize, coef: f64) {
        let start = self.space.gen_row(x);
        let n = self.space.num_actions();
        for j in 0..n {
            let indicator = if j == y { 1.0 } else { 0.0 };
            self.out.grad_gen[start + j] += coef * (indicator - self.gen_probs[start + j]);
        }
    }

    /// Adds `coef · ∂ ln π†(y_out|y_in,x) / ∂ imp_logits`.
    fn push_imp(&mut self, x: usize, y_in: usize, y_out: usize, coef: f64) {
        let start = self.space.imp_row(x, y_in);
        let n = self.space.num_actions();
        for j in 0..n {
            let indicator = if j == y_out { 1.0 } else { 0.0 };
            self.out.grad_imp[start + j] += coef * (indicator - self.imp_probs[start + j]);
        }
    }

    fn finish(self) -> LossOutput {
        self.out
    }
}

/// Visits every `(x, y₁, y₂)` with positive weight `ρ(x) μ(y₁|x) μ(y₂|x)`.
fn for_each_population_pair(
    space: ActionSpace,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    mut f: impl FnMut(usize, usize, usize, f64),
) {
    let n = space.num_actions();
    for x in 0..space.num_contexts() {
        let wx = rho.get(x);
        if wx == 0.0 {
            continue;
        }
        for y1 in 0..n {
            for y2 in 0..n {
                let w = wx * mu.get(x, y1) * mu.get(x, y2);
                if w > 0.0 {
                    f(x, y1, y2, w);
                }
            }
        }
    }
}

/// Improvement residual `p(y₂≻y₁) − 1/2 − β[ρ†(y₂|y₁) − ρ†(y₁|y₁)]`,
/// squared and averaged over `x ∼ ρ`, `y₁, y₂ ∼ μ`.
pub fn population_loss_improvement(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    beta: f64,
) -> Result<LossOutput> {
    check_beta(beta)?;
    check_population(policy, reference, p, mu, rho)?;
    let mut ws = Workspace::new(policy, reference);
    for_each_population_pair(policy.space(), mu, rho, |x, y1, y2, w| {
        let delta = ws.imp_ratio(x, y1, y2) - ws.imp_ratio(x, y1, y1);
        let r = p.prob(x, y2, y1) - 0.5 - beta * delta;
        ws.out.value += w * r * r;
        let c = -2.0 * w * r * beta;
        ws.push_imp(x, y1, y2, c);
        ws.push_imp(x, y1, y1, -c);
    });
    Ok(ws.finish())
}

/// Joint residual
/// `p(y₂≻y₁) − 1/2 − β/2 [ρ†(y₂|y₁) − ρ(y₁) − ρ†(y₁|y₂) + ρ(y₂)]`,
/// squared and averaged over `x ∼ ρ`, `y₁, y₂ ∼ μ`.
pub fn population_loss_srpo(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    beta: f64,
) -> Result<LossOutput> {
    check_beta(beta)?;
    check_population(policy, reference, p, mu, rho)?;
    let mut ws = Workspace::new(policy, reference);
    for_each_population_pair(policy.space(), mu, rho, |x, y1, y2, w| {
        let m = ws.imp_ratio(x, y1, y2) - ws.gen_ratio(x, y1) - ws.imp_ratio(x, y2, y1) + ws.gen_ratio(x, y2);
        let r = p.prob(x, y2, y1) - 0.5 - 0.5 * beta * m;
        ws.out.value += w * r * r;
        let c = -w * r * beta;
        ws.push_imp(x, y1, y2, c);
        ws.push_gen(x, y1, -c);
        ws.push_imp(x, y2, y1, -c);
        ws.push_gen(x, y2, c);
    });
    Ok(ws.finish())
}

/// `(1 − α)·population_loss_srpo + α·population_loss_improvement`.
pub fn population_loss_combined(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    beta: f64,
    alpha: f64,
) -> Result<LossOutput> {
    check_alpha(alpha)?;
    let joint = population_loss_srpo(policy, reference, p, mu, rho, beta)?;
    let improvement = population_loss_improvement(policy, reference, p, mu, rho, beta)?;
    Ok(mix(&joint, &improvement, alpha))
}

/// Expected sampled baseline loss under Bernoulli labelling of
/// `y₁, y₂ ∼ μ`: both orientations weighted by their label probability.
fn population_baseline(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    beta: f64,
    per_margin: impl Fn(f64) -> (f64, f64),
) -> Result<LossOutput> {
    check_beta(beta)?;
    check_population(policy, reference, p, mu, rho)?;
    let mut ws = Workspace::new(policy, reference);
    for_each_population_pair(policy.space(), mu, rho, |x, y1, y2, w| {
        for (win, lose) in [(y1, y2), (y2, y1)] {
            let q = w * p.prob(x, win, lose);
            if q == 0.0 {
                continue;
            }
            let h = ws.gen_ratio(x, win) - ws.gen_ratio(x, lose);
            let (value, slope) = per_margin(h);
            ws.out.value += q * value;
            ws.push_gen(x, win, q * slope);
            ws.push_gen(x, lose, -q * slope);
        }
    });
    Ok(ws.finish())
}

pub fn population_loss_dpo(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    beta: f64,
) -> Result<LossOutput> {
    population_baseline(policy, reference, p, mu, rho, beta, |h| dpo_term(h, beta))
}

pub fn population_loss_ipo(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    beta: f64,
) -> Result<LossOutput> {
    population_baseline(policy, reference, p, mu, rho, beta, |h| ipo_term(h, beta))
}

/// Population objective matching a [`LossKind`].
pub fn population_loss(
    kind: LossKind,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    beta: f64,
) -> Result<LossOutput> {
    match kind {
        LossKind::Srpo { alpha } => population_loss_combined(policy, reference, p, mu, rho, beta, alpha),
        LossKind::Dpo => population_loss_dpo(policy, reference, p, mu, rho, beta),
        LossKind::Ipo => population_loss_ipo(policy, reference, p, mu, rho, beta),
    }
}

/// Sampled improvement loss: per record,
/// `[1/2 − β(ρ†(y_w|y_l) − ρ†(y_l|y_l))]² + [1/2 − β(ρ†(y_w|y_w) − ρ†(y_l|y_w))]²`.
pub fn sampled_loss_improvement(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &LossBatch<'_>,
    beta: f64,
) -> Result<LossOutput> {
    check_beta(beta)?;
    check_batch(batch, policy.space())?;
    let mut ws = Workspace::new(policy, reference);
    for (r, w) in batch.records.iter().zip(batch.normalized_weights()) {
        let (x, yw, yl) = (r.x, r.y_w, r.y_l);

        let t1 = 0.5 - beta * (ws.imp_ratio(x, yl, yw) - ws.imp_ratio(x, yl, yl));
        let c1 = -2.0 * w * t1 * beta;
        ws.push_imp(x, yl, yw, c1);
        ws.push_imp(x, yl, yl, -c1);

        let t2 = 0.5 - beta * (ws.imp_ratio(x, yw, yw) - ws.imp_ratio(x, yw, yl));
        let c2 = -2.0 * w * t2 * beta;
        ws.push_imp(x, yw, yw, c2);
        ws.push_imp(x, yw, yl, -c2);

        ws.out.value += w * (t1 * t1 + t2 * t2);
    }
    Ok(ws.finish())
}

/// Sampled SRPO loss: per record
/// `[β(ρ†(y_w|y_l) + ρ(y_w) − ρ†(y_l|y_w) − ρ(y_l)) − 1]²`.
pub fn sampled_loss_srpo(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &LossBatch<'_>,
    beta: f64,
) -> Result<LossOutput> {
    check_beta(beta)?;
    check_batch(batch, policy.space())?;
    let mut ws = Workspace::new(policy, reference);
    for (r, w) in batch.records.iter().zip(batch.normalized_weights()) {
        let (x, yw, yl) = (r.x, r.y_w, r.y_l);
        let m = ws.imp_ratio(x, yl, yw) + ws.gen_ratio(x, yw) - ws.imp_ratio(x, yw, yl) - ws.gen_ratio(x, yl);
        let t = beta * m - 1.0;
        ws.out.value += w * t * t;
        let c = 2.0 * w * t * beta;
        ws.push_imp(x, yl, yw, c);
        ws.push_gen(x, yw, c);
        ws.push_imp(x, yw, yl, -c);
        ws.push_gen(x, yl, -c);
    }
    Ok(ws.finish())
}

fn mix(joint: &LossOutput, improvement: &LossOutput, alpha: f64) -> LossOutput {
    let mut out = LossOutput {
        value: 0.0,
        grad_gen: vec![0.0; joint.grad_gen.len()],
        grad_imp: vec![0.0; joint.grad_imp.len()],
    };
    out.scaled_add(joint, 1.0 - alpha);
    out.scaled_add(improvement, alpha);
    out
}

/// `(1 − α)·sampled_loss_srpo + α·sampled_loss_improvement`.
pub fn combined_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &LossBatch<'_>,
    beta: f64,
    alpha: f64,
) -> Result<LossOutput> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return sampled_loss_srpo(policy, reference, batch, beta);
    }
    if alpha == 1.0 {
        return sampled_loss_improvement(policy, reference, batch, beta);
    }
    let joint = sampled_loss_srpo(policy, reference, batch, beta)?;
    let improvement = sampled_loss_improvement(policy, reference, batch, beta)?;
    Ok(mix(&joint, &improvement, alpha))
}

/// `softplus(−x) = −ln σ(x)`, stable for large `|x|`.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// DPO loss of one margin and its derivative with respect to the margin.
fn dpo_term(h: f64, beta: f64) -> (f64, f64) {
    (neg_log_sigmoid(beta * h), -beta * sigmoid(-beta * h))
}

/// IPO loss of one margin and its derivative with respect to the margin.
fn ipo_term(h: f64, beta: f64) -> (f64, f64) {
    let d = h - 1.0 / (2.0 * beta);
    (d * d, 2.0 * d)
}

fn sampled_baseline(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &LossBatch<'_>,
    beta: f64,
    per_margin: impl Fn(f64) -> (f64, f64),
) -> Result<LossOutput> {
    check_beta(beta)?;
    check_batch(batch, policy.space())?;
    let mut ws = Workspace::new(policy, reference);
    for (r, w) in batch.records.iter().zip(batch.normalized_weights()) {
        let h = ws.gen_ratio(r.x, r.y_w) - ws.gen_ratio(r.x, r.y_l);
        let (value, slope) = per_margin(h);
        ws.out.value += w * value;
        ws.push_gen(r.x, r.y_w, w * slope);
        ws.push_gen(r.x, r.y_l, -w * slope);
    }
    Ok(ws.finish())
}

/// `−ln σ(β (ρ(y_w) − ρ(y_l)))` averaged over the batch.
pub fn sampled_loss_dpo(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &LossBatch<'_>,
    beta: f64,
) -> Result<LossOutput> {
    sampled_baseline(policy, reference, batch, beta, |h| dpo_term(h, beta))
}

/// `(ρ(y_w) − ρ(y_l) − 1/(2β))²` averaged over the batch.
pub fn sampled_loss_ipo(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &LossBatch<'_>,
    beta: f64,
) -> Result<LossOutput> {
    sampled_baseline(policy, reference, batch, beta, |h| ipo_term(h, beta))
}

/// Sampled objective matching a [`LossKind`].
pub fn sampled_loss(
    kind: LossKind,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &LossBatch<'_>,
    beta: f64,
) -> Result<LossOutput> {
    match kind {
        LossKind::Srpo { alpha } => combined_loss(policy, reference, batch, beta, alpha),
        LossKind::Dpo => sampled_loss_dpo(policy, reference, batch, beta),
        LossKind::Ipo => sampled_loss_ipo(policy, reference, batch, beta),
    }
}
