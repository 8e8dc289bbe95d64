//! Adam over policy logits, and the two training loops: minibatch training
//! on a labelled dataset and full-gradient training on a population loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{population_loss, sampled_loss, LossBatch, LossKind};
use crate::prefcore::{BehaviorPolicy, ContextDistribution, PreferenceDataset, PreferenceModel, PreferenceRecord, TabularPolicy};

/// ChaCha stream reserved for minibatch sampling.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("Adam decay rates must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::param("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        })
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::param(format!(
                "shape mismatch: {} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((w, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    state.step(params, grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Keep a policy snapshot every `snapshot_stride` steps; 0 disables.
    pub snapshot_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Srpo { alpha: 0.0 },
            beta: 1.0,
            steps: 2000,
            batch_size: 128,
            seed: 1,
            adam: AdamConfig::default(),
            snapshot_stride: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::param(format!("beta must be a positive real, got {}", self.beta)));
        }
        self.loss.validate()?;
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    /// Number of updates applied before the snapshot.
    pub step: usize,
    pub policy: TabularPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss before each update.
    pub losses: Vec<f64>,
    pub final_policy: TabularPolicy,
    pub snapshots: Vec<PolicySnapshot>,
    pub seed: u64,
}

struct PolicyAdam {
    gen: AdamState,
    imp: AdamState,
}

impl PolicyAdam {
    fn new(policy: &TabularPolicy, config: AdamConfig) -> Result<Self> {
        Ok(PolicyAdam {
            gen: AdamState::new(policy.gen_logits().len(), config)?,
            imp: AdamState::new(policy.imp_logits().len(), config)?,
        })
    }

    fn step(&mut self, policy: &mut TabularPolicy, grad_gen: &[f64], grad_imp: &[f64]) -> Result<()> {
        let (gen, imp) = policy.logits_mut();
        self.gen.step(gen, grad_gen)?;
        self.imp.step(imp, grad_imp)
    }
}

fn run_loop(
    reference: &TabularPolicy,
    config: &TrainConfig,
    mut loss_at: impl FnMut(&TabularPolicy) -> Result<crate::losses::LossOutput>,
) -> Result<TrainReport> {
    let mut policy = reference.clone();
    let mut adam = PolicyAdam::new(&policy, config.adam)?;
    let mut losses = Vec::with_capacity(config.steps);
    let mut snapshots = Vec::new();
    for step in 0..config.steps {
        if config.snapshot_stride > 0 && step % config.snapshot_stride == 0 {
            snapshots.push(PolicySnapshot {
                step,
                policy: policy.clone(),
            });
        }
        let out = loss_at(&policy)?;
        if !out.value.is_finite() {
            return Err(Error::Domain(format!("loss became non-finite at step {step}")));
        }
        losses.push(out.value);
        adam.step(&mut policy, &out.grad_gen, &out.grad_imp)?;
    }
    if config.snapshot_stride > 0 && config.steps.is_multiple_of(config.snapshot_stride) {
        snapshots.push(PolicySnapshot {
            step: config.steps,
            policy: policy.clone(),
        });
    }
    Ok(TrainReport {
        losses,
        final_policy: policy,
        snapshots,
        seed: config.seed,
    })
}

/// Minibatch training: start from `reference`, sample `batch_size` records
/// uniformly with replacement each step, take one Adam step on the loss.
pub fn train(dataset: &PreferenceDataset, reference: &TabularPolicy, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::param("training dataset is empty"));
    }
    if config.batch_size == 0 || config.batch_size > dataset.len() {
        return Err(Error::param(format!(
            "batch size {} must lie in 1..={}",
            config.batch_size,
            dataset.len()
        )));
    }
    if dataset.space() != reference.space() {
        return Err(Error::Schema("dataset and reference policy disagree on the action space".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);
    let records = dataset.records();
    let mut batch: Vec<PreferenceRecord> = Vec::with_capacity(config.batch_size);
    run_loop(reference, config, |policy| {
        batch.clear();
        batch.extend((0..config.batch_size).map(|_| records[rng.gen_range(0..records.len())]));
        sampled_loss(config.loss, policy, reference, &LossBatch::new(&batch), config.beta)
    })
}

/// Deterministic full-gradient training on the exact population loss.
/// `batch_size` and `seed` are unused apart from being reported.
pub fn train_population(
    p: &PreferenceModel,
    mu: &BehaviorPolicy,
    rho: &ContextDistribution,
    reference: &TabularPolicy,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    run_loop(reference, config, |policy| {
        population_loss(config.loss, policy, reference, p, mu, rho, config.beta)
    })
}

/// Exponential moving average with smoothing factor `1 / window`.
pub fn smoothed(trace: &[f64], window: usize) -> Vec<f64> {
    let a = 1.0 / window.max(1) as f64;
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = match trace.first() {
        Some(v) => *v,
        None => return out,
    };
    for v in trace {
        acc = a * v + (1.0 - a) * acc;
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{baseline_solution, AnalyticSolution, Psi};
    use crate::prefcore::{argmax, total_variation, ActionSpace};
    use proptest::prelude::*;

    fn study_p() -> PreferenceModel {
        PreferenceModel::from_matrix(&[
            vec![0.5, 0.99, 0.3],
            vec![0.01, 0.5, 0.25],
            vec![0.7, 0.75, 0.5],
        ])
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, AdamConfig::default()).unwrap();
        let mut w = vec![1.0, -2.0, 3.0];
        s.step(&mut w, &[0.0; 3]).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(3, cfg).unwrap();
        let mut w = vec![0.0; 3];
        s.step(&mut w, &[2.5, -0.3, 1e-3]).unwrap();
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps)
        assert!((w[0] + cfg.lr).abs() < 1e-9);
        assert!((w[1] - cfg.lr).abs() < 1e-9);
        assert!((w[2] + cfg.lr).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_parameter_error() {
        let mut s = AdamState::new(3, AdamConfig::default()).unwrap();
        let mut w = vec![0.0; 3];
        assert!(matches!(s.step(&mut w, &[1.0; 2]), Err(Error::Parameter(_))));
        let mut w4 = vec![0.0; 4];
        assert!(matches!(adam_step(&mut w4, &[1.0; 4], &mut s), Err(Error::Parameter(_))));
        assert!(AdamState::new(3, AdamConfig { lr: 0.0, ..AdamConfig::default() }).is_err());
    }

    proptest! {
        #[test]
        fn joint_update_equals_separate_updates(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            b in prop::collection::vec(-3.0f64..3.0, 3),
            ga in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..5),
            gb in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 5),
        ) {
            let cfg = AdamConfig::default();
            let mut joint: Vec<f64> = a.iter().chain(&b).copied().collect();
            let mut sj = AdamState::new(7, cfg).unwrap();
            let (mut pa, mut pb) = (a.clone(), b.clone());
            let (mut sa, mut sb) = (AdamState::new(4, cfg).unwrap(), AdamState::new(3, cfg).unwrap());
            for (g1, g2) in ga.iter().zip(&gb) {
                let g: Vec<f64> = g1.iter().chain(g2).copied().collect();
                sj.step(&mut joint, &g).unwrap();
                sa.step(&mut pa, g1).unwrap();
                sb.step(&mut pb, g2).unwrap();
            }
            let separate: Vec<f64> = pa.iter().chain(&pb).copied().collect();
            prop_assert_eq!(joint, separate);
        }
    }

    fn small_dataset() -> PreferenceDataset {
        let space = ActionSpace::bandit(3).unwrap();
        let records = vec![
            PreferenceRecord::new(0, 2, 1),
            PreferenceRecord::new(0, 0, 1),
            PreferenceRecord::new(0, 2, 0),
            PreferenceRecord::new(0, 1, 2),
        ];
        PreferenceDataset::new(space, records).unwrap()
    }

    #[test]
    fn zero_steps_returns_reference() {
        let data = small_dataset();
        let reference = TabularPolicy::from_logits(data.space(), vec![0.1, 0.2, 0.3], vec![0.5; 9]).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let report = train(&data, &reference, &cfg).unwrap();
        assert_eq!(report.final_policy, reference);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let data = small_dataset();
        let reference = TabularPolicy::uniform(data.space());
        let empty = PreferenceDataset::new(data.space(), vec![]).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&empty, &reference, &cfg), Err(Error::Parameter(_))));
        let big = TrainConfig { batch_size: 5, ..cfg };
        assert!(matches!(train(&data, &reference, &big), Err(Error::Parameter(_))));
        let bad_alpha = TrainConfig {
            loss: LossKind::Srpo { alpha: 2.0 },
            ..cfg
        };
        assert!(matches!(train(&data, &reference, &bad_alpha), Err(Error::Parameter(_))));
    }

    #[test]
    fn training_is_deterministic_and_snapshots_on_stride() {
        let data = small_dataset();
        let reference = TabularPolicy::uniform(data.space());
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 3,
            snapshot_stride: 10,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = train(&data, &reference, &cfg).unwrap();
        let b = train(&data, &reference, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.losses.len(), 50);
        let steps: Vec<usize> = a.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30, 40, 50]);
        assert_eq!(a.snapshots[0].policy, reference);
        assert_eq!(a.snapshots.last().unwrap().policy, a.final_policy);
        let c = train(&data, &reference, &TrainConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.final_policy, c.final_policy);
    }

    #[test]
    fn indifferent_population_keeps_reference() {
        let space = ActionSpace::bandit(3).unwrap();
        let reference = TabularPolicy::uniform(space);
        let p = PreferenceModel::indifferent(space);
        let mu = BehaviorPolicy::uniform(space);
        let rho = ContextDistribution::uniform(1);
        for loss in [LossKind::Srpo { alpha: 0.3 }, LossKind::Ipo, LossKind::Dpo] {
            let cfg = TrainConfig {
                loss,
                steps: 200,
                ..TrainConfig::default()
            };
            let init = population_loss(loss, &reference, &reference, &p, &mu, &rho, 1.0).unwrap();
            assert!(init.grad_gen.iter().chain(&init.grad_imp).all(|g| g.abs() < 1e-15));
            let report = train_population(&p, &mu, &rho, &reference, &cfg).unwrap();
            let drift = report
                .final_policy
                .gen_logits()
                .iter()
                .chain(report.final_policy.imp_logits())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(drift < 1e-9, "{loss:?} drifted by {drift}");
        }
    }

    #[test]
    fn population_srpo_reaches_analytic_solution() {
        let p = study_p();
        let space = p.space();
        let reference = TabularPolicy::uniform(space);
        let sol = AnalyticSolution::solve(&p, &reference, 1.0).unwrap();
        for mu in [
            BehaviorPolicy::uniform(space),
            BehaviorPolicy::broadcast(space, &[0.15, 0.7, 0.15]).unwrap(),
        ] {
            let cfg = TrainConfig {
                loss: LossKind::Srpo { alpha: 0.5 },
                steps: 20_000,
                ..TrainConfig::default()
            };
            let report = train_population(&p, &mu, &ContextDistribution::uniform(1), &reference, &cfg).unwrap();
            let gen = report.final_policy.generative();
            let imp = report.final_policy.improvement();
            assert!(total_variation(gen.row(0), sol.gen_star.row(0)) < 1e-3);
            for y in 0..3 {
                assert!(total_variation(imp.row(0, y), sol.imp_star.row(0, y)) < 1e-3);
            }
        }
    }

    #[test]
    fn population_ipo_argmax_depends_on_mu() {
        let p = study_p();
        let space = p.space();
        let reference = TabularPolicy::uniform(space);
        let cfg = TrainConfig {
            loss: LossKind::Ipo,
            steps: 5000,
            ..TrainConfig::default()
        };
        let rho = ContextDistribution::uniform(1);
        let mu0 = BehaviorPolicy::uniform(space);
        let mu1 = BehaviorPolicy::broadcast(space, &[0.15, 0.7, 0.15]).unwrap();
        let a = train_population(&p, &mu0, &rho, &reference, &cfg).unwrap().final_policy.generative();
        let b = train_population(&p, &mu1, &rho, &reference, &cfg).unwrap().final_policy.generative();
        assert_eq!(argmax(a.row(0)), 2);
        assert_eq!(argmax(b.row(0)), 0);
        let oracle = baseline_solution(&p, &mu1, &reference, 1.0, Psi::Identity).unwrap();
        assert!(total_variation(b.row(0), oracle.row(0)) < 1e-2);
    }

    #[test]
    fn population_dpo_matches_softmax_solution_for_bradley_terry() {
        // the σ⁻¹ softmax form is the DPO optimum when p is Bradley–Terry
        let space = ActionSpace::bandit(4).unwrap();
        let p = PreferenceModel::bradley_terry(space, &[0.4, -0.8, 1.1, 0.0]).unwrap();
        let reference = TabularPolicy::uniform(space);
        let mu = BehaviorPolicy::new(space, vec![0.1, 0.5, 0.2, 0.2]).unwrap();
        let cfg = TrainConfig {
            loss: LossKind::Dpo,
            steps: 20_000,
            ..TrainConfig::default()
        };
        let got = train_population(&p, &mu, &ContextDistribution::uniform(1), &reference, &cfg)
            .unwrap()
            .final_policy
            .generative();
        let oracle = baseline_solution(&p, &mu, &reference, 1.0, Psi::InverseSigmoid).unwrap();
        assert!(total_variation(got.row(0), oracle.row(0)) < 1e-2);
    }

    #[test]
    fn smoothing() {
        assert!(smoothed(&[], 100).is_empty());
        let s = smoothed(&[1.0, 1.0, 1.0], 10);
        assert_eq!(s, vec![1.0, 1.0, 1.0]);
        let s = smoothed(&[2.0, 0.0], 2);
        assert_eq!(s, vec![2.0, 1.0]);
    }
}
