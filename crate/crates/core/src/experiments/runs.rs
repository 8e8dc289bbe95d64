//! Experiment drivers: dataset generation and training from a config, the
//! behavior-policy robustness study and the α sweep.

use crate::datagen::{generate_dataset, GenerationSpec};
use crate::error::{Error, Result};
use crate::losses::{sampled_loss_improvement, sampled_loss_srpo, LossBatch};
use crate::optim::{train, AdamConfig, TrainConfig, TrainReport};
use crate::prefcore::{argmax, BehaviorPolicy, ContextDistribution, PreferenceDataset, TabularPolicy};

use super::config::{ExperimentConfig, Method};
use super::report::{AlphaRow, EvalReport, RunRecord};
use super::revision::eval_revision_curve;

/// The skewed behavior policy of the robustness study, over three actions.
pub const SKEWED_MU: [f64; 3] = [0.15, 0.7, 0.15];

pub fn dataset_for(cfg: &ExperimentConfig, mu: &BehaviorPolicy, seed: u64) -> Result<PreferenceDataset> {
    let spec = GenerationSpec {
        num_pairs: cfg.pairs,
        tie_policy: cfg.tie_policy,
        seed,
    };
    generate_dataset(&cfg.preference, mu, &cfg.context_distribution()?, &spec)
}

pub fn train_config(cfg: &ExperimentConfig, method: Method, alpha: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        loss: method.loss_kind(alpha),
        beta: cfg.beta,
        steps: cfg.steps,
        batch_size: cfg.batch,
        seed,
        adam: AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        snapshot_stride: 0,
    }
}

/// Trains one method from the uniform reference.
pub fn train_method(
    cfg: &ExperimentConfig,
    dataset: &PreferenceDataset,
    method: Method,
    alpha: f64,
    seed: u64,
) -> Result<TrainReport> {
    let reference = TabularPolicy::uniform(cfg.space());
    train(dataset, &reference, &train_config(cfg, method, alpha, seed))
}

/// `Σ_x ρ(x) π(·|x)`.
pub fn marginal_probs(policy: &TabularPolicy, rho: &ContextDistribution) -> Result<Vec<f64>> {
    let mut out = vec![0.0; policy.space().num_actions()];
    for x in 0..policy.space().num_contexts() {
        for (o, p) in out.iter_mut().zip(policy.policy_probs(x)?) {
            *o += rho.get(x) * p;
        }
    }
    Ok(out)
}

fn record(method: Method, label: &str, seed: u64, report: TrainReport, rho: &ContextDistribution) -> Result<RunRecord> {
    let probs = marginal_probs(&report.final_policy, rho)?;
    Ok(RunRecord {
        method,
        label: label.to_string(),
        seed,
        argmax: argmax(&probs),
        probs,
        loss_trace: report.losses,
    })
}

/// The robustness study: for the uniform behavior policy (`mu0`) and the
/// skewed one (`mu1`), generate a dataset per seed and train every
/// configured method on it from the uniform reference. The config's own
/// `mu` is not used. The revision curve is the seed mean for SRPO under
/// `mu0`, when SRPO is among the methods.
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let space = cfg.space();
    if space.num_actions() != SKEWED_MU.len() {
        return Err(Error::Config(format!(
            "the robustness study needs {} actions, the preference model has {}",
            SKEWED_MU.len(),
            space.num_actions()
        )));
    }
    let rho = cfg.context_distribution()?;
    let behaviors = [
        ("mu0", BehaviorPolicy::uniform(space)),
        ("mu1", BehaviorPolicy::broadcast(space, &SKEWED_MU)?),
    ];
    let mut report = EvalReport::new(space.num_actions());
    let mut curve_sum = vec![0.0; cfg.revisions];
    let mut curve_count = 0usize;
    for (label, mu) in &behaviors {
        for &seed in &cfg.seeds {
            let dataset = dataset_for(cfg, mu, seed).map_err(|e| e.context(format!("generate {label} seed {seed}")))?;
            for &method in &cfg.methods {
                let ctx = || format!("train {} on {label} seed {seed}", method.name());
                let trained = train_method(cfg, &dataset, method, cfg.alpha, seed).map_err(|e| e.context(ctx()))?;
                if method == Method::Srpo && *label == "mu0" && cfg.revisions > 0 {
                    let curve = eval_revision_curve(&trained.final_policy, &cfg.preference, &rho, cfg.revisions)?;
                    for (s, v) in curve_sum.iter_mut().zip(curve) {
                        *s += v;
                    }
                    curve_count += 1;
                }
                report.runs.push(record(method, label, seed, trained, &rho)?);
            }
        }
    }
    if curve_count > 0 {
        report.revision_curve = curve_sum.into_iter().map(|s| s / curve_count as f64).collect();
    }
    Ok(report)
}

/// Trains SRPO at every α of the grid on one dataset (config `mu`, first
/// seed) and records the final full-dataset loss components and `m(1)`.
pub fn run_alpha_sweep(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let seed = cfg.primary_seed();
    let rho = cfg.context_distribution()?;
    let dataset = dataset_for(cfg, &cfg.behavior()?, seed).map_err(|e| e.context("generate sweep dataset"))?;
    let reference = TabularPolicy::uniform(cfg.space());
    let full = LossBatch::new(dataset.records());
    let mut report = EvalReport::new(cfg.space().num_actions());
    for &alpha in &cfg.alpha_grid {
        let trained =
            train_method(cfg, &dataset, Method::Srpo, alpha, seed).map_err(|e| e.context(format!("train alpha {alpha}")))?;
        let policy = &trained.final_policy;
        let loss_srpo = sampled_loss_srpo(policy, &reference, &full, cfg.beta)?.value;
        let loss_improvement = sampled_loss_improvement(policy, &reference, &full, cfg.beta)?.value;
        let revision_gain = eval_revision_curve(policy, &cfg.preference, &rho, 1)?[0];
        report.alpha_rows.push(AlphaRow {
            alpha,
            loss_srpo,
            loss_improvement,
            revision_gain,
        });
        report.runs.push(record(Method::Srpo, &format!("alpha{alpha}"), seed, trained, &rho)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::train as train_direct;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            pairs: 500,
            steps: 50,
            batch: 32,
            seeds: vec![4],
            revisions: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn fig2_report_shape() {
        let report = run_fig2(&small_cfg()).unwrap();
        assert_eq!(report.runs.len(), 6);
        assert_eq!(report.groups().len(), 6);
        assert_eq!(report.revision_curve.len(), 2);
        for r in &report.runs {
            assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(r.loss_trace.len(), 50);
        }
    }

    #[test]
    fn fig2_needs_three_actions() {
        let mut cfg = small_cfg();
        cfg.set("preference", "0.5 0.6; 0.4 0.5").unwrap();
        assert!(matches!(run_fig2(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_endpoints_match_direct_training() {
        let mut cfg = small_cfg();
        cfg.alpha_grid = vec![0.0, 0.5, 1.0];
        let report = run_alpha_sweep(&cfg).unwrap();
        assert_eq!(report.alpha_rows.len(), 3);
        let dataset = dataset_for(&cfg, &cfg.behavior().unwrap(), 4).unwrap();
        let reference = TabularPolicy::uniform(cfg.space());
        for (i, alpha) in [(0usize, 0.0), (2, 1.0)] {
            let direct = train_direct(&dataset, &reference, &train_config(&cfg, Method::Srpo, alpha, 4)).unwrap();
            assert_eq!(report.runs[i].loss_trace, direct.losses);
        }
        let mid = report.alpha_rows[1];
        assert!(mid.loss_srpo.is_finite() && mid.loss_improvement.is_finite());
    }
}
