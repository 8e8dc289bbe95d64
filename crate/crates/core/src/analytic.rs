//! Closed-form SRPO optima, the preference identities they satisfy, the exact
//! min-max objective, and the softmax-of-expected-preference solutions of
//! the IPO and DPO baselines.
//!
//! All expectations are exact sums over the finite action set.

use crate::error::{Error, Result};
use crate::prefcore::{
    kl_divergence, log_sum_exp, BehaviorPolicy, GenerativeProbs, ImprovementProbs, LogProbs,
    PreferenceModel, TabularPolicy,
};

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("beta must be a positive real, got {beta}")))
    }
}

fn check_shapes(p: &PreferenceModel, reference: &TabularPolicy) -> Result<()> {
    if p.space() != reference.space() {
        return Err(Error::Schema(
            "preference model and reference policy disagree on the action space".into(),
        ));
    }
    Ok(())
}

/// Both optimal policies together with their log-normalizers.
#[derive(Debug, Clone)]
pub struct AnalyticSolution {
    /// `π†*(y_out | y_in, x)`.
    pub imp_star: ImprovementProbs,
    /// `π*(y | x)`.
    pub gen_star: GenerativeProbs,
    /// `log Z*(y, x)` stored `[x][y]`: normalizer of the improvement row `y`.
    pub log_z_cond: Vec<f64>,
    /// `log Z*(x)`: normalizer of the generative row.
    pub log_z: Vec<f64>,
    pub beta: f64,
}

impl AnalyticSolution {
    pub fn solve(p: &PreferenceModel, reference: &TabularPolicy, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        check_shapes(p, reference)?;
        let space = p.space();
        let n = space.num_actions();
        let ref_log = reference.log_probs();

        let mut imp = Vec::with_capacity(space.imp_len());
        let mut log_z_cond = Vec::with_capacity(space.gen_len());
        for x in 0..space.num_contexts() {
            for y1 in 0..n {
                // exp(p(y2 ≻ y1)/β) · π_ref(y2 | y1)
                let scores: Vec<f64> = (0..n)
                    .map(|y2| p.prob(x, y2, y1) / beta + ref_log.imp(x, y1, y2))
                    .collect();
                let lz = log_sum_exp(&scores);
                imp.extend(scores.iter().map(|s| (s - lz).exp()));
                log_z_cond.push(lz);
            }
        }

        let mut gen = Vec::with_capacity(space.gen_len());
        let mut log_z = Vec::with_capacity(space.num_contexts());
        for x in 0..space.num_contexts() {
            // π_ref(y|x) / π_ref(y|y,x) · π†*(y|y,x), with ln π†*(y|y,x) = p(y≻y)/β + ln π_ref(y|y,x) − log Z*(y,x)
            let scores: Vec<f64> = (0..n)
                .map(|y| {
                    let log_imp_diag = p.prob(x, y, y) / beta + ref_log.imp(x, y, y)
                        - log_z_cond[space.gen_row(x) + y];
                    ref_log.gen(x, y) - ref_log.imp(x, y, y) + log_imp_diag
                })
                .collect();
            let lz = log_sum_exp(&scores);
            gen.extend(scores.iter().map(|s| (s - lz).exp()));
            log_z.push(lz);
        }

        Ok(AnalyticSolution {
            imp_star: ImprovementProbs::new(space, imp)?,
            gen_star: GenerativeProbs::new(space, gen)?,
            log_z_cond,
            log_z,
            beta,
        })
    }

    /// `log Z*(y, x)`.
    pub fn log_z_cond(&self, x: usize, y: usize) -> f64 {
        self.log_z_cond[x * self.gen_star.space().num_actions() + y]
    }

    /// The solution as logits (`ln π`), e.g. to seed revision sampling.
    pub fn policy(&self) -> TabularPolicy {
        TabularPolicy::from_probs(&self.gen_star, &self.imp_star)
            .expect("analytic solution has strictly positive probabilities")
    }

    /// `β · (E_{y∼gen}[log Z*(y, x)] + KL(gen ‖ π_ref))`: the objective after
    /// the inner maximization has been solved.
    pub fn reduced_objective(&self, gen: &GenerativeProbs, reference: &TabularPolicy, x: usize) -> f64 {
        let ref_gen = reference.generative();
        let expected_log_z: f64 = gen
            .row(x)
            .iter()
            .enumerate()
            .map(|(y, g)| g * self.log_z_cond(x, y))
            .sum();
        self.beta * (expected_log_z + kl_divergence(gen.row(x), ref_gen.row(x)))
    }
}

/// `π†*(y₂|y₁,x) ∝ exp(p(y₂≻y₁|x)/β) · π_ref(y₂|y₁,x)`.
pub fn optimal_improvement(p: &PreferenceModel, reference: &TabularPolicy, beta: f64) -> Result<ImprovementProbs> {
    Ok(AnalyticSolution::solve(p, reference, beta)?.imp_star)
}

/// `π*(y|x) ∝ π_ref(y|x) / π_ref(y|y,x) · π†*(y|y,x)`.
pub fn optimal_generative(p: &PreferenceModel, reference: &TabularPolicy, beta: f64) -> Result<GenerativeProbs> {
    Ok(AnalyticSolution::solve(p, reference, beta)?.gen_star)
}

/// The same optimum through the conditional normalizers:
/// `π*(y|x) ∝ π_ref(y|x) · exp(−log Z*(y, x))`. Computed independently of
/// [`optimal_generative`] so the two routes can be compared.
pub fn optimal_generative_via_normalizers(
    p: &PreferenceModel,
    reference: &TabularPolicy,
    beta: f64,
) -> Result<GenerativeProbs> {
    check_beta(beta)?;
    check_shapes(p, reference)?;
    let space = p.space();
    let n = space.num_actions();
    let ref_log = reference.log_probs();
    let mut gen = Vec::with_capacity(space.gen_len());
    for x in 0..space.num_contexts() {
        let scores: Vec<f64> = (0..n)
            .map(|y| {
                let cond: Vec<f64> = (0..n).map(|y2| p.prob(x, y2, y) / beta + ref_log.imp(x, y, y2)).collect();
                ref_log.gen(x, y) - log_sum_exp(&cond)
            })
            .collect();
        let lz = log_sum_exp(&scores);
        gen.extend(scores.iter().map(|s| (s - lz).exp()));
    }
    GenerativeProbs::new(space, gen)
}

fn imp_log_ratio(imp: &ImprovementProbs, ref_log: &LogProbs, x: usize, y_in: usize, y_out: usize) -> f64 {
    imp.get(x, y_in, y_out).ln() - ref_log.imp(x, y_in, y_out)
}

fn gen_log_ratio(gen: &GenerativeProbs, ref_log: &LogProbs, x: usize, y: usize) -> f64 {
    gen.get(x, y).ln() - ref_log.gen(x, y)
}

/// Preference implied by an improvement policy:
/// `1/2 + β [ln(π†(y₂|y₁)/π_ref(y₂|y₁)) − ln(π†(y₁|y₁)/π_ref(y₁|y₁))]`.
pub fn preference_from_improvement(
    imp: &ImprovementProbs,
    reference: &TabularPolicy,
    beta: f64,
    x: usize,
    y1: usize,
    y2: usize,
) -> f64 {
    let ref_log = reference.log_probs();
    0.5 + beta * (imp_log_ratio(imp, &ref_log, x, y1, y2) - imp_log_ratio(imp, &ref_log, x, y1, y1))
}

/// Preference implied jointly by an improvement and a generative policy:
/// `1/2 + β/2 [ρ†(y₂|y₁) − ρ(y₁) − (ρ†(y₁|y₂) − ρ(y₂))]` with `ρ` the
/// log-ratios against the reference.
pub fn preference_from_pair(
    imp: &ImprovementProbs,
    gen: &GenerativeProbs,
    reference: &TabularPolicy,
    beta: f64,
    x: usize,
    y1: usize,
    y2: usize,
) -> f64 {
    let ref_log = reference.log_probs();
    let forward = imp_log_ratio(imp, &ref_log, x, y1, y2) - gen_log_ratio(gen, &ref_log, x, y1);
    let backward = imp_log_ratio(imp, &ref_log, x, y2, y1) - gen_log_ratio(gen, &ref_log, x, y2);
    0.5 + 0.5 * beta * (forward - backward)
}

/// Decomposed value of the min-max objective at one context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    /// `E_{y₁∼π, y₂∼π†(·|y₁)}[p(y₂ ≻ y₁)]`.
    pub preference_term: f64,
    /// `E_{y₁∼π}[KL(π†(·|y₁) ‖ π_ref(·|y₁))]`.
    pub kl_improvement_term: f64,
    /// `KL(π ‖ π_ref)`.
    pub kl_generative_term: f64,
}

/// Exact value of
/// `E[p(y₂≻y₁|x)] − β·E[KL(π†‖π_ref | y₁)] + β·KL(π‖π_ref)` at context `x`.
pub fn srpo_objective(
    gen: &GenerativeProbs,
    imp: &ImprovementProbs,
    p: &PreferenceModel,
    reference: &TabularPolicy,
    beta: f64,
    x: usize,
) -> Result<ObjectiveValue> {
    check_beta(beta)?;
    check_shapes(p, reference)?;
    p.space().check_context(x)?;
    let n = p.space().num_actions();
    let (ref_gen, ref_imp) = (reference.generative(), reference.improvement());

    let mut preference_term = 0.0;
    let mut kl_improvement_term = 0.0;
    for y1 in 0..n {
        let w = gen.get(x, y1);
        let row = imp.row(x, y1);
        preference_term += w * row.iter().enumerate().map(|(y2, q)| q * p.prob(x, y2, y1)).sum::<f64>();
        kl_improvement_term += w * kl_divergence(row, ref_imp.row(x, y1));
    }
    let kl_generative_term = kl_divergence(gen.row(x), ref_gen.row(x));
    Ok(ObjectiveValue {
        value: preference_term - beta * kl_improvement_term + beta * kl_generative_term,
        preference_term,
        kl_improvement_term,
        kl_generative_term,
    })
}

/// Transform applied to preferences inside the baseline solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Psi {
    /// IPO.
    Identity,
    /// DPO: `σ⁻¹(p) = ln(p / (1 − p))`; 0 and 1 are domain errors.
    InverseSigmoid,
    /// DPO with the argument clamped to `[1e-12, 1 − 1e-12]`.
    ClampedInverseSigmoid,
}

/// Clamp bound for [`Psi::ClampedInverseSigmoid`].
pub const LOGIT_CLAMP: f64 = 1e-12;

impl Psi {
    pub fn apply(self, p: f64) -> Result<f64> {
        match self {
            Psi::Identity => Ok(p),
            Psi::InverseSigmoid => {
                if p <= 0.0 || p >= 1.0 {
                    return Err(Error::Domain(format!("inverse sigmoid undefined at {p}")));
                }
                Ok((p / (1.0 - p)).ln())
            }
            Psi::ClampedInverseSigmoid => {
                let q = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
                Ok((q / (1.0 - q)).ln())
            }
        }
    }
}

/// `π*(y|x) ∝ exp(E_{y'∼μ(·|x)}[Ψ(p(y≻y'|x))] / β) · π_ref(y|x)`.
pub fn baseline_solution(
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    reference: &TabularPolicy,
    beta: f64,
    psi: Psi,
) -> Result<GenerativeProbs> {
    check_beta(beta)?;
    check_shapes(p, reference)?;
    if mu.space() != p.space() {
        return Err(Error::Schema("behavior policy and preference model disagree on shape".into()));
    }
    let space = p.space();
    let n = space.num_actions();
    let ref_log = reference.log_probs();
    let mut gen = Vec::with_capacity(space.gen_len());
    for x in 0..space.num_contexts() {
        let mut scores = Vec::with_capacity(n);
        for y in 0..n {
            let mut expected = 0.0;
            for y2 in 0..n {
                let w = mu.get(x, y2);
                if w > 0.0 {
                    expected += w * psi.apply(p.prob(x, y, y2))?;
                }
            }
            scores.push(expected / beta + ref_log.gen(x, y));
        }
        let lz = log_sum_exp(&scores);
        gen.extend(scores.iter().map(|s| (s - lz).exp()));
    }
    GenerativeProbs::new(space, gen)
}
