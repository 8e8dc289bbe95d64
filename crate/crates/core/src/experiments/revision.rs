//! N-revision sampling and its exact kernel-power counterpart.
//!
//! A 0-revision is a draw from the generative policy; the k-revision applies
//! the improvement policy once to the (k−1)-revision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::prefcore::{ContextDistribution, PreferenceModel, TabularPolicy};

/// ChaCha stream used by [`revise`].
pub const REVISE_STREAM: u64 = 2;

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final partial sum: fall back to the last
    // action with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Applies the improvement policy `steps` times starting from `y`.
pub fn revise_with_rng<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    x: usize,
    y: usize,
    steps: usize,
    rng: &mut R,
) -> Result<usize> {
    let space = policy.space();
    space.check_context(x)?;
    space.check_action(y)?;
    let imp = policy.improvement();
    let mut current = y;
    for _ in 0..steps {
        current = sample_index(imp.row(x, current), rng);
    }
    Ok(current)
}

/// Seeded [`revise_with_rng`]: the seed alone determines the result.
pub fn revise(policy: &TabularPolicy, x: usize, y: usize, steps: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(REVISE_STREAM);
    revise_with_rng(policy, x, y, steps, &mut rng)
}

/// `d ↦ d·K` with `K[y_in][y_out] = π†(y_out | y_in, x)`.
fn apply_kernel(policy: &TabularPolicy, x: usize, d: &[f64]) -> Vec<f64> {
    let n = d.len();
    let imp = policy.improvement();
    let mut next = vec![0.0; n];
    for (y_in, w) in d.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for (slot, k) in next.iter_mut().zip(imp.row(x, y_in)) {
            *slot += w * k;
        }
    }
    next
}

/// `[d⁰, d¹, …, dᴺ]` with `dᵏ = dᵏ⁻¹·K` starting from `start`.
pub fn revision_distributions(policy: &TabularPolicy, x: usize, start: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
    let space = policy.space();
    space.check_context(x)?;
    if start.len() != space.num_actions() {
        return Err(Error::Schema(format!(
            "start distribution has {} entries, expected {}",
            start.len(),
            space.num_actions()
        )));
    }
    let mut out = Vec::with_capacity(n + 1);
    out.push(start.to_vec());
    for _ in 0..n {
        let next = apply_kernel(policy, x, out.last().expect("non-empty"));
        out.push(next);
    }
    Ok(out)
}

/// Exact law of `revise(policy, x, y, k, ·)`.
pub fn kernel_power_row(policy: &TabularPolicy, x: usize, y: usize, k: usize) -> Result<Vec<f64>> {
    policy.space().check_action(y)?;
    let mut start = vec![0.0; policy.space().num_actions()];
    start[y] = 1.0;
    Ok(revision_distributions(policy, x, &start, k)?.pop().expect("non-empty"))
}

fn check_inputs(policy: &TabularPolicy, p: &PreferenceModel, rho: &ContextDistribution, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::param("revision count must be at least 1"));
    }
    if p.space() != policy.space() || rho.len() != p.space().num_contexts() {
        return Err(Error::Schema("policy, preference model and ρ disagree on the space".into()));
    }
    Ok(())
}

/// `m(k) = E_x E_{y′∼dᵏ⁻¹} E_{y∼π†(·|y′)}[p(y ≻ y′)]` for `k = 1..=n`, each
/// revision scored against the draft it was produced from, with `d⁰` the
/// generative policy.
pub fn eval_revision_curve(
    policy: &TabularPolicy,
    p: &PreferenceModel,
    rho: &ContextDistribution,
    n: usize,
) -> Result<Vec<f64>> {
    check_inputs(policy, p, rho, n)?;
    let mut curve = vec![0.0; n];
    for x in 0..policy.space().num_contexts() {
        let start = policy.policy_probs(x)?;
        let curve_x = eval_revision_curve_from(policy, p, x, &start, n)?;
        for (m, v) in curve.iter_mut().zip(curve_x) {
            *m += rho.get(x) * v;
        }
    }
    Ok(curve)
}

/// Per-context curve from an arbitrary start distribution `d⁰`.
pub fn eval_revision_curve_from(
    policy: &TabularPolicy,
    p: &PreferenceModel,
    x: usize,
    start: &[f64],
    n: usize,
) -> Result<Vec<f64>> {
    let imp = policy.improvement();
    let ds = revision_distributions(policy, x, start, n)?;
    Ok(ds[..n]
        .iter()
        .map(|prev| {
            prev.iter()
                .enumerate()
                .map(|(y_prev, w)| {
                    w * imp
                        .row(x, y_prev)
                        .iter()
                        .enumerate()
                        .map(|(y, k)| k * p.prob(x, y, y_prev))
                        .sum::<f64>()
                })
                .sum()
        })
        .collect())
}

/// `E_x E_{y∼dᵏ, y′∼dᵏ⁻¹}[p(y ≻ y′)]` with the two revisions drawn
/// independently from their marginals.
pub fn eval_revision_curve_marginal(
    policy: &TabularPolicy,
    p: &PreferenceModel,
    rho: &ContextDistribution,
    n: usize,
) -> Result<Vec<f64>> {
    check_inputs(policy, p, rho, n)?;
    let m = policy.space().num_actions();
    let mut curve = vec![0.0; n];
    for x in 0..policy.space().num_contexts() {
        let ds = revision_distributions(policy, x, &policy.policy_probs(x)?, n)?;
        for k in 1..=n {
            let mut v = 0.0;
            for y in 0..m {
                for y_prev in 0..m {
                    v += ds[k][y] * ds[k - 1][y_prev] * p.prob(x, y, y_prev);
                }
            }
            curve[k - 1] += rho.get(x) * v;
        }
    }
    Ok(curve)
}
