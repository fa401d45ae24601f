//! Objective alignment with clipped PPO over the token-level MDP: the state
//! is the prompt plus the generated prefix, the action is the next token,
//! and the task reward arrives at the final token.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::address::TokenId;
use crate::datasets::RewriteSample;
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, AdamW, AdamWConfig, Matrix, Scalar};
use crate::policy::{PolicyModel, Prompt, PromptContext, SampleMode, ValueModel};
use crate::reward::{total_reward, RewardBreakdown, RewardConfig, SemanticEmbedder};
use crate::rng::seeded;
use crate::world::{Coordinate, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// `log pi(a_t|s_t) - log pi_0(a_t|s_t)` at the sampled action.
    SampledAction,
    /// Exact `KL(pi(.|s_t) || pi_0(.|s_t))` at each visited state.
    FullDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub lr: f64,
    pub rollout_batch: usize,
    pub minibatch: usize,
    /// Gradient passes over each rollout batch.
    pub update_passes: usize,
    pub temperature: f64,
    pub normalize_advantages: bool,
    pub kl_estimator: KlEstimator,
    /// Mean per-token KL against the reference that triggers a restart of
    /// the epoch at half the learning rate.
    pub kl_ceiling: f64,
    pub max_restarts: usize,
    pub grad_clip: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            kl_beta: 0.05,
            gae_lambda: 0.95,
            gamma: 1.0,
            value_coef: 0.5,
            epochs: 4,
            lr: 2e-4,
            rollout_batch: 64,
            minibatch: 16,
            update_passes: 2,
            temperature: 1.0,
            normalize_advantages: true,
            kl_estimator: KlEstimator::SampledAction,
            kl_ceiling: 0.5,
            max_restarts: 6,
            grad_clip: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("clip_eps must lie in (0, 1)".into()));
        }
        if !(self.kl_beta >= 0.0) || !(self.value_coef >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::Config(
                "kl_beta, value_coef and lr must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(
                "gae_lambda and gamma must lie in [0, 1]".into(),
            ));
        }
        if self.rollout_batch == 0 || self.minibatch == 0 || self.update_passes == 0 {
            return Err(Error::Config(
                "batch sizes and update_passes must be >= 1".into(),
            ));
        }
        if !(self.temperature > 0.0) || !(self.kl_ceiling > 0.0) {
            return Err(Error::Config(
                "temperature and kl_ceiling must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// The composite task reward bound to a world.
#[derive(Debug, Clone)]
pub struct RewardFn<'a> {
    pub world: &'a World,
    pub embedder: SemanticEmbedder,
    pub cfg: RewardConfig,
}

impl<'a> RewardFn<'a> {
    pub fn new(world: &'a World, cfg: RewardConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(RewardFn {
            world,
            embedder: SemanticEmbedder::from_config(&cfg)?,
            cfg,
        })
    }

    pub fn score(&self, x: &str, y: &str, c: &Coordinate) -> Result<RewardBreakdown> {
        total_reward(x, y, c, self.world, &self.embedder, &self.cfg)
    }

    /// Reward of generated tokens, rendered the way downstream consumers see
    /// them.
    pub fn score_tokens(
        &self,
        x: &str,
        tokens: &[TokenId],
        c: &Coordinate,
    ) -> Result<RewardBreakdown> {
        self.score(x, &self.world.lexicon.render_output(tokens), c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Prompt,
    pub input_text: String,
    pub coordinate: Coordinate,
    pub tokens: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub kl: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminal: RewardBreakdown,
    pub truncated: bool,
}

/// Shaped per-token rewards: `-beta * kl_t`, plus the task reward at the
/// last token.
pub fn shaped_rewards(terminal: f64, kl: &[f64], beta: f64) -> Vec<f64> {
    let last = kl.len().saturating_sub(1);
    kl.iter()
        .enumerate()
        .map(|(t, &k)| if t == last { terminal } else { 0.0 } - beta * k)
        .collect()
}

/// Generalized advantage estimates and value targets with a zero bootstrap
/// after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    lambda: f64,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "one value per reward");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// `min(k * A, clip(k, 1 - eps, 1 + eps) * A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Derivative of `clipped_objective` with respect to `log k`.
fn clipped_objective_grad(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    let inside = (1.0 - eps..=1.0 + eps).contains(&ratio);
    if unclipped <= clipped || inside {
        (advantage * ratio, false)
    } else {
        (0.0, true)
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|&x| x - lse).collect()
}

/// `KL(p || q)` between two distributions given as logits.
pub fn kl_from_logits(p: &[f64], q: &[f64]) -> f64 {
    let (lp, lq) = (log_softmax(p), log_softmax(q));
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Samples outputs from `policy` and scores them. Prompts are built by the
/// caller; `samples` supply the input text and delivery coordinate.
#[allow(clippy::too_many_arguments)]
pub fn rollout_batch<S: Scalar>(
    policy: &PolicyModel<S>,
    reference: &PolicyModel<S>,
    value: &ValueModel<S>,
    reward: &RewardFn,
    prompts: &[&Prompt],
    samples: &[&RewriteSample],
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Trajectory>> {
    let mut gens = Vec::with_capacity(prompts.len());
    for p in prompts {
        gens.push(policy.generate(
            p,
            SampleMode::Sample {
                temperature: cfg.temperature,
            },
            rng,
        )?);
    }
    let items: Vec<(&Prompt, &[TokenId])> = prompts
        .iter()
        .zip(&gens)
        .map(|(p, g)| (*p, g.tokens.as_slice()))
        .collect();
    let values = value.values(&items);
    let (ref_lp, kls): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match cfg.kl_estimator {
        KlEstimator::SampledAction => {
            let ref_lp = reference.logprobs_batch(&items)?;
            let kls = ref_lp
                .iter()
                .zip(&gens)
                .map(|(r, g)| g.logprobs.iter().zip(r).map(|(a, b)| a - b).collect())
                .collect();
            (ref_lp, kls)
        }
        KlEstimator::FullDistribution => {
            let pz = policy.logits(&items)?;
            let rz = reference.logits(&items)?;
            let mut ref_lp = Vec::with_capacity(items.len());
            let mut kls = Vec::with_capacity(items.len());
            for ((p, r), (_, out)) in pz.iter().zip(&rz).zip(&items) {
                ref_lp.push(
                    (0..out.len())
                        .map(|t| log_softmax(r.row(t))[out[t] as usize])
                        .collect(),
                );
                kls.push(
                    (0..out.len())
                        .map(|t| kl_from_logits(p.row(t), r.row(t)))
                        .collect(),
                );
            }
            (ref_lp, kls)
        }
    };
    let mut out = Vec::with_capacity(prompts.len());
    for ((((p, s), g), (v, rl)), kl) in prompts
        .iter()
        .zip(samples)
        .zip(gens)
        .zip(values.into_iter().zip(ref_lp))
        .zip(kls)
    {
        let c = s.delivery_coordinate.ok_or_else(|| {
            Error::InvalidArgument("alignment sample lacks a delivery coordinate".into())
        })?;
        let terminal = reward.score_tokens(&s.input_text, &g.tokens, &c)?;
        out.push(Trajectory {
            prompt: (*p).clone(),
            input_text: s.input_text.clone(),
            coordinate: c,
            rewards: shaped_rewards(terminal.total, &kl, cfg.kl_beta),
            tokens: g.tokens,
            old_logprobs: g.logprobs,
            ref_logprobs: rl,
            values: v,
            kl,
            terminal,
            truncated: g.truncated,
        });
    }
    Ok(out)
}

/// Builds the prompt for one alignment sample and rolls it out.
#[allow(clippy::too_many_arguments)]
pub fn rollout<S: Scalar>(
    policy: &PolicyModel<S>,
    reference: &PolicyModel<S>,
    value: &ValueModel<S>,
    ctx: &PromptContext,
    reward: &RewardFn,
    sample: &RewriteSample,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    if sample.target_text.is_some() {
        return Err(Error::InvalidArgument(
            "alignment samples carry no target".into(),
        ));
    }
    let prompt = ctx.prompt(sample.task, &sample.input_text)?;
    Ok(rollout_batch(
        policy,
        reference,
        value,
        reward,
        &[&prompt],
        &[sample],
        cfg,
        rng,
    )?
    .remove(0))
}

#[derive(Debug, Clone)]
pub struct PpoLoss<S> {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub policy_grads: Vec<Matrix<S>>,
    pub value_grads: Vec<Matrix<S>>,
}

/// Clipped policy loss, value loss, and their gradients for one minibatch.
/// `advantages` and `returns` are per trajectory and token.
pub fn ppo_loss<S: Scalar>(
    trajs: &[&Trajectory],
    advantages: &[Vec<f64>],
    returns: &[Vec<f64>],
    policy: &PolicyModel<S>,
    value: &ValueModel<S>,
    cfg: &PpoConfig,
) -> Result<PpoLoss<S>> {
    let n: usize = trajs.iter().map(|t| t.tokens.len()).sum();
    let inv = 1.0 / n.max(1) as f64;
    let items: Vec<(&Prompt, &[TokenId])> = trajs
        .iter()
        .map(|t| (&t.prompt, t.tokens.as_slice()))
        .collect();
    let mut clipped = 0usize;
    let (policy_loss, policy_grads) = policy.logits_loss(&items, |i, t, z| {
        let lp = log_softmax(z);
        let a = trajs[i].tokens[t] as usize;
        let ratio = (lp[a] - trajs[i].old_logprobs[t]).exp();
        let adv = advantages[i][t];
        let (dobj, was_clipped) = clipped_objective_grad(ratio, adv, cfg.clip_eps);
        clipped += was_clipped as usize;
        // d(-obj/n)/dz = -(dobj/dlogp) (onehot - softmax) / n
        let grad = lp
            .iter()
            .enumerate()
            .map(|(j, &l)| -dobj * inv * (if j == a { 1.0 } else { 0.0 } - l.exp()))
            .collect();
        (-clipped_objective(ratio, adv, cfg.clip_eps) * inv, grad)
    })?;
    let (value_loss, mut value_grads) = value.values_loss(&items, |i, t, v| {
        let e = v - returns[i][t];
        (e * e * inv, 2.0 * e * inv)
    });
    let c = S::of(cfg.value_coef);
    for g in &mut value_grads {
        g.scale(c);
    }
    Ok(PpoLoss {
        policy_loss,
        value_loss,
        total: policy_loss + cfg.value_coef * value_loss,
        clip_fraction: clipped as f64 * inv,
        policy_grads,
        value_grads,
    })
}

/// Per-batch normalization to zero mean and unit variance.
pub fn normalize(advantages: &mut [Vec<f64>]) {
    let all: Vec<f64> = advantages.iter().flatten().copied().collect();
    if all.len() < 2 {
        return;
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / all.len() as f64;
    let std = var.sqrt().max(1e-8);
    for a in advantages.iter_mut().flatten() {
        *a = (*a - mean) / std;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub restarts: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub truncated: usize,
    pub heldout_reward: f64,
    pub heldout_greedy_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    /// Held-out rewards of the starting policy.
    pub initial_heldout_reward: f64,
    pub initial_heldout_greedy_reward: f64,
    pub epochs: Vec<EpochStats>,
}

impl AlignReport {
    pub fn final_heldout_reward(&self) -> f64 {
        self.epochs
            .last()
            .map_or(self.initial_heldout_reward, |e| e.heldout_reward)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_record([
            "epoch",
            "lr",
            "restarts",
            "mean_reward",
            "mean_kl",
            "clip_fraction",
            "policy_loss",
            "value_loss",
            "truncated",
            "heldout_reward",
            "heldout_greedy_reward",
        ])?;
        w.write_record([
            "0".to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            format!("{:.6}", self.initial_heldout_reward),
            format!("{:.6}", self.initial_heldout_greedy_reward),
        ])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.lr),
                e.restarts.to_string(),
                format!("{:.6}", e.mean_reward),
                format!("{:.6}", e.mean_kl),
                format!("{:.6}", e.clip_fraction),
                format!("{:.6}", e.policy_loss),
                format!("{:.6}", e.value_loss),
                e.truncated.to_string(),
                format!("{:.6}", e.heldout_reward),
                format!("{:.6}", e.heldout_greedy_reward),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean terminal reward over held-out samples. Sampling uses a fixed seed so
/// successive evaluations see the same random stream.
pub fn heldout_reward<S: Scalar>(
    policy: &PolicyModel<S>,
    prompts: &[Prompt],
    samples: &[RewriteSample],
    reward: &RewardFn,
    mode: SampleMode,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("held-out set is empty".into()));
    }
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for (p, s) in prompts.iter().zip(samples) {
        let g = policy.generate(p, mode, &mut rng)?;
        let c = s.delivery_coordinate.ok_or_else(|| {
            Error::InvalidArgument("held-out sample lacks a delivery coordinate".into())
        })?;
        total += reward.score_tokens(&s.input_text, &g.tokens, &c)?.total;
    }
    Ok(total / prompts.len() as f64)
}

pub fn build_prompts(ctx: &PromptContext, samples: &[RewriteSample]) -> Result<Vec<Prompt>> {
    samples
        .iter()
        .map(|s| ctx.prompt(s.task, &s.input_text))
        .collect()
}

const HELDOUT_SEED: u64 = 0x6865_6c64;

/// Runs PPO from `policy`, which also serves as the frozen reference.
/// Retrieval is deterministic, so prompts are built once up front.
#[allow(clippy::too_many_arguments)]
pub fn align(
    policy: &mut PolicyModel<f32>,
    value: &mut ValueModel<f32>,
    data: &[RewriteSample],
    heldout: &[RewriteSample],
    ctx: &PromptContext,
    reward: &RewardFn,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<AlignReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("alignment dataset is empty".into()));
    }
    let reference = policy.clone();
    let prompts = build_prompts(ctx, data)?;
    let held_prompts = build_prompts(ctx, heldout)?;
    let eval = |p: &PolicyModel<f32>| -> Result<(f64, f64)> {
        if heldout.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let sampled = heldout_reward(
            p,
            &held_prompts,
            heldout,
            reward,
            SampleMode::Sample { temperature: 1.0 },
            HELDOUT_SEED,
        )?;
        let greedy = heldout_reward(
            p,
            &held_prompts,
            heldout,
            reward,
            SampleMode::Greedy,
            HELDOUT_SEED,
        )?;
        Ok((sampled, greedy))
    };
    let (h0, g0) = eval(policy)?;
    log::info!("align start: held-out reward {h0:.4} (greedy {g0:.4})");
    let mut report = AlignReport {
        initial_heldout_reward: h0,
        initial_heldout_greedy_reward: g0,
        epochs: Vec::new(),
    };
    let adam = AdamWConfig::default();
    let mut popt = AdamW::new(&policy.params, adam);
    let mut vopt = AdamW::new(&value.params, adam);
    let mut lr = cfg.lr;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let snapshot = (
            policy.params.clone(),
            value.params.clone(),
            popt.clone(),
            vopt.clone(),
        );
        let mut restarts = 0;
        let stats = loop {
            match run_epoch(
                policy, value, &reference, &mut popt, &mut vopt, &prompts, data, &mut order,
                reward, cfg, lr, rng,
            )? {
                Some(s) => break s,
                None => {
                    restarts += 1;
                    if restarts > cfg.max_restarts {
                        return Err(Error::Diagnostic(format!(
                            "alignment diverged: KL above {} after {} restarts",
                            cfg.kl_ceiling, cfg.max_restarts
                        )));
                    }
                    lr *= 0.5;
                    log::warn!("epoch {epoch}: KL ceiling exceeded, restarting with lr {lr:e}");
                    policy.params = snapshot.0.clone();
                    value.params = snapshot.1.clone();
                    popt = snapshot.2.clone();
                    vopt = snapshot.3.clone();
                }
            }
        };
        let (h, g) = eval(policy)?;
        log::info!(
            "align epoch {epoch}: reward {:.4} kl {:.4} clip {:.3} held-out {h:.4} (greedy {g:.4})",
            stats.mean_reward,
            stats.mean_kl,
            stats.clip_fraction
        );
        report.epochs.push(EpochStats {
            epoch,
            lr,
            restarts,
            heldout_reward: h,
            heldout_greedy_reward: g,
            ..stats
        });
    }
    Ok(report)
}

/// One pass over the data. Returns `None` when the running mean KL crosses
/// the ceiling.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    policy: &mut PolicyModel<f32>,
    value: &mut ValueModel<f32>,
    reference: &PolicyModel<f32>,
    popt: &mut AdamW,
    vopt: &mut AdamW,
    prompts: &[Prompt],
    data: &[RewriteSample],
    order: &mut [usize],
    reward: &RewardFn,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<Option<EpochStats>> {
    order.shuffle(rng);
    let (mut reward_sum, mut kl_sum, mut tokens, mut seqs, mut truncated) =
        (0.0, 0.0, 0usize, 0usize, 0usize);
    let (mut clip_sum, mut ploss_sum, mut vloss_sum, mut updates) = (0.0, 0.0, 0.0, 0usize);
    for batch in order.chunks(cfg.rollout_batch) {
        let bp: Vec<&Prompt> = batch.iter().map(|&i| &prompts[i]).collect();
        let bs: Vec<&RewriteSample> = batch.iter().map(|&i| &data[i]).collect();
        let trajs = rollout_batch(policy, reference, value, reward, &bp, &bs, cfg, rng)?;
        for t in &trajs {
            reward_sum += t.terminal.total;
            kl_sum += t.kl.iter().sum::<f64>();
            tokens += t.tokens.len();
            truncated += t.truncated as usize;
        }
        seqs += trajs.len();
        if kl_sum / tokens as f64 > cfg.kl_ceiling {
            return Ok(None);
        }
        let (mut adv, ret): (Vec<Vec<f64>>, Vec<Vec<f64>>) = trajs
            .iter()
            .map(|t| compute_gae(&t.rewards, &t.values, cfg.gae_lambda, cfg.gamma))
            .unzip();
        if cfg.normalize_advantages {
            normalize(&mut adv);
        }
        let mut idx: Vec<usize> = (0..trajs.len()).collect();
        for _ in 0..cfg.update_passes {
            idx.shuffle(rng);
            for mb in idx.chunks(cfg.minibatch) {
                let mt: Vec<&Trajectory> = mb.iter().map(|&i| &trajs[i]).collect();
                let ma: Vec<Vec<f64>> = mb.iter().map(|&i| adv[i].clone()).collect();
                let mr: Vec<Vec<f64>> = mb.iter().map(|&i| ret[i].clone()).collect();
                let mut loss = ppo_loss(&mt, &ma, &mr, policy, value, cfg)?;
                clip_global_norm(&mut loss.policy_grads, cfg.grad_clip);
                clip_global_norm(&mut loss.value_grads, cfg.grad_clip);
                popt.step(&mut policy.params, &loss.policy_grads, lr, |_| true);
                vopt.step(&mut value.params, &loss.value_grads, lr, |_| true);
                clip_sum += loss.clip_fraction;
                ploss_sum += loss.policy_loss;
                vloss_sum += loss.value_loss;
                updates += 1;
            }
        }
    }
    let u = updates.max(1) as f64;
    Ok(Some(EpochStats {
        epoch: 0,
        lr,
        restarts: 0,
        mean_reward: reward_sum / seqs.max(1) as f64,
        mean_kl: kl_sum / tokens.max(1) as f64,
        clip_fraction: clip_sum / u,
        policy_loss: ploss_sum / u,
        value_loss: vloss_sum / u,
        truncated,
        heldout_reward: f64::NAN,
        heldout_greedy_reward: f64::NAN,
    }))
}
