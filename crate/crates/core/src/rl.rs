//! Clinical-quality reinforcement learning: PPO on sampled reports with a
//! KL penalty towards a frozen copy of the supervised generator.
//!
//! The visual feature extractor is frozen, so per-sample visual rows are
//! computed once and reused by every rollout and update.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrg_autodiff::Tensor;
use thiserror::Error;

use crate::generator::{DecodeMode, Generation};
use crate::metrics::nlg::bleu4;
use crate::metrics::{report_tokens, Components, EmbeddingCache, RadCliqWeights};
use crate::model::{is_extractor_param, Model, ModelError};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::params::{Graph, ParamStore};
use crate::text::BOS;

#[derive(Debug, Error)]
pub enum RlError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] rrg_autodiff::TensorError),
    #[error("invalid RL configuration: {0}")]
    Config(String),
    #[error("adaptive KL weight needs a non-zero threshold")]
    ZeroThreshold,
    #[error("distribution sequences differ: {policy} vs {reference} positions")]
    LengthMismatch { policy: usize, reference: usize },
    #[error("RL corpus is empty")]
    EmptyCorpus,
    #[error("frozen parameter {0} received a gradient or changed")]
    FrozenViolation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    /// `offset − RadCliQ-proxy`.
    RadCliq,
    /// Sentence BLEU-4 against the reference report.
    Bleu4,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KlWeight {
    /// Per-sample `adaptive_lambda(reward, θ)`.
    Adaptive,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlConfig {
    /// Threshold `θ` for the RadCliQ reward.
    pub theta: f64,
    /// Threshold used instead of `theta` under the BLEU-4 reward.
    pub bleu_theta: f64,
    /// Constant added to the negated RadCliQ-proxy so that rewards are
    /// positive on the threshold's scale.
    pub reward_offset: f64,
    pub reward: RewardKind,
    pub kl_weight: KlWeight,
    pub clip_eps: f64,
    pub rollouts: usize,
    pub temperature: f64,
    pub lr: f64,
    pub ppo_epochs: usize,
    pub iterations: usize,
    pub baseline_momentum: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            theta: 40.0,
            bleu_theta: 0.8,
            reward_offset: 5.0,
            reward: RewardKind::RadCliq,
            kl_weight: KlWeight::Adaptive,
            clip_eps: 0.2,
            rollouts: 32,
            temperature: 1.0,
            lr: 5e-5,
            ppo_epochs: 2,
            iterations: 250,
            baseline_momentum: 0.9,
            clip_norm: Some(1.0),
            seed: 7,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !self.theta.is_finite() || !self.bleu_theta.is_finite() || !self.reward_offset.is_finite() {
            return bad("theta and reward offset must be finite");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip epsilon must lie in (0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.lr > 0.0) || self.rollouts == 0 || self.ppo_epochs == 0 {
            return bad("learning rate, rollouts and PPO epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return bad("baseline momentum must lie in [0, 1)");
        }
        if let KlWeight::Fixed(w) = self.kl_weight {
            if !(0.0..=1.0).contains(&w) {
                return bad("fixed KL weight must lie in [0, 1]");
            }
        }
        Ok(())
    }

    fn active_theta(&self) -> f64 {
        match self.reward {
            RewardKind::RadCliq => self.theta,
            RewardKind::Bleu4 => self.bleu_theta,
        }
    }
}

/// KL weight for one sample: 1 once the reward reaches `θ`, otherwise
/// `reward/θ` clamped to `[0, 1]`.
pub fn adaptive_lambda(reward: f64, theta: f64) -> Result<f64, RlError> {
    if theta == 0.0 {
        return Err(RlError::ZeroThreshold);
    }
    if reward >= theta {
        return Ok(1.0);
    }
    Ok((reward / theta).clamp(0.0, 1.0))
}

/// Mean over positions of `KL(policy ‖ reference)` between full
/// next-token distributions.
pub fn kl_penalty(policy: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64, RlError> {
    if policy.len() != reference.len() {
        return Err(RlError::LengthMismatch {
            policy: policy.len(),
            reference: reference.len(),
        });
    }
    if policy.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, q) in policy.iter().zip(reference) {
        if p.len() != q.len() {
            return Err(RlError::LengthMismatch {
                policy: p.len(),
                reference: q.len(),
            });
        }
        total += p
            .iter()
            .zip(q)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
            .sum::<f64>();
    }
    Ok((total / policy.len() as f64).max(0.0))
}

/// Scores a candidate report against its reference.
pub struct RewardModel<F> {
    pub kind: RewardKind,
    pub weights: RadCliqWeights,
    pub offset: f64,
    pub embeddings: EmbeddingCache<F>,
}

/// Reward of one report together with its RadCliQ-proxy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub reward: f64,
    pub radcliq: f64,
    pub components: Components,
}

impl<F: FnMut(&str) -> Option<Vec<f64>>> RewardModel<F> {
    pub fn score(&mut self, candidate: &str, reference: &str) -> Scored {
        let components = self.embeddings.components(candidate, reference);
        let radcliq = self.weights.score(&components);
        let reward = match self.kind {
            RewardKind::RadCliq => self.offset - radcliq,
            RewardKind::Bleu4 => bleu4(&report_tokens(candidate), &report_tokens(reference)),
        };
        Scored {
            reward,
            radcliq,
            components,
        }
    }
}

/// Reward of `candidate` under `weights`; pure in its arguments.
pub fn compute_reward(
    kind: RewardKind,
    candidate: &str,
    reference: &str,
    cand_emb: Option<&[f64]>,
    ref_emb: Option<&[f64]>,
    weights: &RadCliqWeights,
    offset: f64,
) -> f64 {
    match kind {
        RewardKind::RadCliq => {
            offset - weights.score(&crate::metrics::component_vector(candidate, reference, cand_emb, ref_emb))
        }
        RewardKind::Bleu4 => bleu4(&report_tokens(candidate), &report_tokens(reference)),
    }
}

/// One sampled report with everything PPO needs.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Index into the RL corpus.
    pub sample: usize,
    pub generation: Generation,
    pub text: String,
    pub reward: f64,
    pub radcliq: f64,
    /// Reference log-probabilities at the sampling temperature,
    /// `tokens × V`.
    pub ref_log_probs: Tensor,
}

/// Per-iteration diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RlLogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_radcliq: f64,
    pub mean_kl: f64,
    pub mean_lambda_kl: f64,
    pub policy_loss: f64,
}

pub const RL_LOG_HEADER: &str = "iteration,mean_reward,mean_radcliq,mean_kl,mean_lambda_kl,policy_loss";

pub fn rl_log_csv(rows: &[RlLogRow]) -> String {
    let mut out = format!("{RL_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.iteration, r.mean_reward, r.mean_radcliq, r.mean_kl, r.mean_lambda_kl, r.policy_loss
        );
    }
    out
}

/// Inputs of the RL stage: cached visual rows and reference reports.
pub struct RlCorpus {
    pub visual: Vec<Tensor>,
    pub reports: Vec<String>,
}

impl RlCorpus {
    pub fn new(model: &Model, examples: &[crate::model::Example]) -> Result<Self, RlError> {
        let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
        Ok(Self {
            visual: model.visual_features(&images)?,
            reports: examples.iter().map(|e| e.report.clone()).collect(),
        })
    }
}

/// Diagnostics of one PPO update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub surrogate: f64,
    pub kl: f64,
    pub lambda_kl: f64,
    pub loss: f64,
}

/// Mutable PPO state: the running reward baseline and optimizer moments.
pub struct Ppo {
    pub config: RlConfig,
    pub optimizer: Optimizer,
    pub baseline: Option<f64>,
}

impl Ppo {
    pub fn new(config: RlConfig, policy: &Model) -> Result<Self, RlError> {
        config.validate()?;
        let optimizer = Optimizer::new(
            OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: config.lr,
                clip_norm: config.clip_norm,
                ..OptimizerConfig::default()
            },
            &policy.params,
        );
        Ok(Self {
            config,
            optimizer,
            baseline: None,
        })
    }

    /// Sequence-level advantages `reward − baseline`; the baseline starts at
    /// the first batch mean and then follows a running mean.
    pub fn advantages(&mut self, rewards: &[f64]) -> Vec<f64> {
        let mean = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
        let base = *self.baseline.get_or_insert(mean);
        let adv = rewards.iter().map(|r| r - base).collect();
        let m = self.config.baseline_momentum;
        self.baseline = Some(m * base + (1.0 - m) * mean);
        adv
    }

    fn lambda(&self, reward: f64) -> Result<f64, RlError> {
        match self.config.kl_weight {
            KlWeight::Adaptive => adaptive_lambda(reward, self.config.active_theta()),
            KlWeight::Fixed(w) => Ok(w),
        }
    }

    /// One gradient step on `mean_i [surrogate_i + λ_i·KL_i]` over the
    /// rollouts. Only generator parameters are trainable; any gradient on
    /// an extractor parameter is an error.
    pub fn step(
        &mut self,
        policy: &mut Model,
        corpus: &RlCorpus,
        rollouts: &[Rollout],
        advantages: &[f64],
    ) -> Result<StepStats, RlError> {
        let temperature = self.config.temperature;
        let mut stats = StepStats::default();
        let grads = {
            let mut g = Graph::select(&policy.params, |n| !is_extractor_param(n));
            let mut total = None;
            for (r, &adv) in rollouts.iter().zip(advantages) {
                let tokens = &r.generation.tokens;
                let visual = g.input(corpus.visual[r.sample].clone());
                let transferred = policy.vtrans.forward(&mut g, visual, 1)?;
                let prompt = policy.prompt(&mut g, transferred, 0)?;
                let mut prefix = Vec::with_capacity(tokens.len());
                prefix.push(BOS);
                prefix.extend_from_slice(&tokens[..tokens.len() - 1]);
                let logits = policy.decoder.logits(&mut g, prompt, &prefix)?;
                let logp = g.tape.token_log_probs(logits, tokens, temperature)?;
                let surrogate = g.tape.clipped_surrogate(logp, &r.generation.log_probs, adv, self.config.clip_eps)?;
                let kl = g.tape.kl_to_reference(logits, &r.ref_log_probs, temperature)?;
                let lambda = self.lambda(r.reward)?;
                let weighted = g.tape.scale(kl, lambda)?;
                let loss = g.tape.add(surrogate, weighted)?;
                stats.surrogate += g.tape.value(surrogate).item();
                stats.kl += g.tape.value(kl).item();
                stats.lambda_kl += lambda;
                total = Some(match total {
                    Some(acc) => g.tape.add(acc, loss)?,
                    None => loss,
                });
            }
            let total = total.ok_or(RlError::EmptyCorpus)?;
            let loss = g.tape.scale(total, 1.0 / rollouts.len() as f64)?;
            stats.loss = g.tape.value(loss).item();
            g.backward(loss)?;
            if g.frozen_gradient_norm() != 0.0 {
                return Err(RlError::FrozenViolation("extractor".into()));
            }
            g.gradients()
        };
        for (id, grad) in policy.params.ids().zip(&grads) {
            if grad.is_some() && is_extractor_param(policy.params.name(id)) {
                return Err(RlError::FrozenViolation(policy.params.name(id).to_string()));
            }
        }
        self.optimizer.step(&mut policy.params, &grads);
        let n = rollouts.len() as f64;
        stats.surrogate /= n;
        stats.kl /= n;
        stats.lambda_kl /= n;
        Ok(stats)
    }
}

/// Samples one report per index from the policy, scores it and records the
/// reference distributions along the sampled sequence.
pub fn collect_rollouts<F: FnMut(&str) -> Option<Vec<f64>>>(
    policy: &Model,
    reference: &Model,
    corpus: &RlCorpus,
    indices: &[usize],
    rewards: &mut RewardModel<F>,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Rollout>, RlError> {
    let runner = policy.decoder.runner(&policy.params);
    let ref_runner = reference.decoder.runner(&reference.params);
    let max_len = policy.config.max_report_len;
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let prompt = policy.prompt_from_features(&corpus.visual[i])?;
        let generation = runner.generate(&prompt, DecodeMode::Sample { temperature }, max_len, rng)?;
        let text = policy.vocab.detokenize(generation.content()).map_err(ModelError::from)?;
        let scored = rewards.score(&text, &corpus.reports[i]);
        let ref_prompt = reference.prompt_from_features(&corpus.visual[i])?;
        let ref_log_probs = ref_runner.sequence_log_probs(&ref_prompt, &generation.tokens, temperature)?;
        out.push(Rollout {
            sample: i,
            generation,
            text,
            reward: scored.reward,
            radcliq: scored.radcliq,
            ref_log_probs,
        });
    }
    Ok(out)
}

fn same_bits(a: &ParamStore, b: &ParamStore, pred: impl Fn(&str) -> bool) -> Result<(), RlError> {
    for ((name, x), (_, y)) in a.iter().zip(b.iter()) {
        if pred(name) && x.data().iter().zip(y.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Err(RlError::FrozenViolation(name.to_string()));
        }
    }
    Ok(())
}

pub struct RlOutcome {
    pub log: Vec<RlLogRow>,
    /// The untouched reference generator.
    pub reference: Model,
}

/// Fine-tunes `policy` in place. The reference generator is a copy of the
/// policy at entry; both it and the extractor are verified bitwise
/// unchanged at the end.
pub fn rl_finetune<F: FnMut(&str) -> Option<Vec<f64>>>(
    policy: &mut Model,
    corpus: &RlCorpus,
    rewards: &mut RewardModel<F>,
    config: &RlConfig,
    mut on_iteration: impl FnMut(&RlLogRow),
) -> Result<RlOutcome, RlError> {
    config.validate()?;
    if corpus.visual.is_empty() {
        return Err(RlError::EmptyCorpus);
    }
    let reference = policy.clone();
    let snapshot = reference.params.clone();
    let mut ppo = Ppo::new(config.clone(), policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.iterations);
    for iteration in 1..=config.iterations {
        let mut indices = Vec::with_capacity(config.rollouts);
        while indices.len() < config.rollouts {
            if order.is_empty() {
                order = (0..corpus.visual.len()).collect();
                order.shuffle(&mut rng);
            }
            indices.push(order.pop().expect("refilled above"));
        }
        let rollouts = collect_rollouts(policy, &reference, corpus, &indices, rewards, config.temperature, &mut rng)?;
        let reward_values: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let advantages = ppo.advantages(&reward_values);
        let mut first = StepStats::default();
        for epoch in 0..config.ppo_epochs {
            let stats = ppo.step(policy, corpus, &rollouts, &advantages)?;
            if epoch == 0 {
                first = stats;
            }
        }
        let n = rollouts.len() as f64;
        let row = RlLogRow {
            iteration,
            mean_reward: reward_values.iter().sum::<f64>() / n,
            mean_radcliq: rollouts.iter().map(|r| r.radcliq).sum::<f64>() / n,
            mean_kl: first.kl,
            mean_lambda_kl: first.lambda_kl,
            policy_loss: first.loss,
        };
        log::info!(
            "rl iteration {iteration}: reward {:.4} radcliq {:.4} kl {:.5} lambda {:.3}",
            row.mean_reward,
            row.mean_radcliq,
            row.mean_kl,
            row.mean_lambda_kl
        );
        on_iteration(&row);
        log.push(row);
    }
    same_bits(&snapshot, &policy.params, is_extractor_param)?;
    same_bits(&snapshot, &reference.params, |_| true)?;
    Ok(RlOutcome { log, reference })
}
