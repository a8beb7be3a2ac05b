//! Desk-scale group-relative policy optimization.
//!
//! Groups of sampled episodes are scored, rewards are normalized into
//! per-trajectory advantages against the group mean, and the policy is
//! updated with a clipped importance-ratio surrogate plus a KL penalty
//! toward a reference policy. Only policy-generated tokens (mask 1) carry
//! loss; observation and prompt tokens contribute exactly zero.
//!
//! The toy policy is a tabular softmax over a template-action vocabulary
//! conditioned on a discrete environment state. It exists so the loss and
//! its analytic gradient can be checked against finite differences exactly,
//! and so the closed training loop can be verified end to end on a planted
//! task.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::{combine, RewardWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coefficient: f64,
    pub learning_rate: f64,
    pub advantage_std_floor: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 5,
            clip_epsilon: 0.2,
            kl_coefficient: 0.01,
            learning_rate: 1e-6,
            advantage_std_floor: 1e-6,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) || self.kl_coefficient < 0.0 {
            return Err(GrpoError::InvalidConfig);
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("group size {0} too small, need at least 2")]
    GroupTooSmall(usize),
    #[error("invalid trainer configuration")]
    InvalidConfig,
    #[error("trajectory has no policy-generated tokens")]
    EmptyMask,
    #[error("non-finite loss, training diverged")]
    Divergence,
    #[error("checkpoint io error: {0}")]
    Checkpoint(String),
}

/// One tokenized episode: per-position token ids, the discrete environment
/// state each token was emitted in, the policy-generated mask, and frozen
/// log-probabilities under the sampling policy and the reference policy.
/// Current-policy log-probabilities are recomputed at loss time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedTrajectory {
    pub token_ids: Vec<usize>,
    pub states: Vec<usize>,
    /// 1 on policy-generated tokens, 0 on prompt/observation tokens.
    pub mask: Vec<bool>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
}

impl TokenizedTrajectory {
    pub fn masked_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// A sampled group with scalar rewards and group-normalized advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoGroup {
    pub trajectories: Vec<TokenizedTrajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Group-relative advantages: reward minus group mean, over the population
/// standard deviation (floored). Identical rewards yield all-zero
/// advantages.
pub fn compute_advantages(rewards: &[f64], config: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= config.advantage_std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

// ---------------------------------------------------------------------------
// Toy policy
// ---------------------------------------------------------------------------

/// Tabular softmax policy over a template-action vocabulary, conditioned on
/// a discrete environment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub num_states: usize,
    pub num_actions: usize,
    /// Row-major logits, `theta[state * num_actions + action]`.
    pub theta: Vec<f64>,
}

impl ToyPolicy {
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        ToyPolicy {
            num_states,
            num_actions,
            theta: vec![0.0; num_states * num_actions],
        }
    }

    fn logits(&self, state: usize) -> &[f64] {
        &self.theta[state * self.num_actions..(state + 1) * self.num_actions]
    }

    /// Probability row for one state.
    pub fn probs(&self, state: usize) -> Vec<f64> {
        let logits = self.logits(state);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        self.probs(state)[action].ln()
    }

    pub fn sample(&self, state: usize, rng: &mut impl Rng) -> usize {
        let probs = self.probs(state);
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                return a;
            }
        }
        probs.len() - 1
    }

    pub fn greedy(&self, state: usize) -> usize {
        let probs = self.probs(state);
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

// ---------------------------------------------------------------------------
// Toy environment
// ---------------------------------------------------------------------------

/// Template actions of the toy environment.
pub const TOY_SEARCH: usize = 0;
pub const TOY_CROP: usize = 1;
pub const TOY_ANSWER: usize = 2;
pub const TOY_NUM_ACTIONS: usize = 3;

/// States: nothing retrieved yet / golden page in context / zoomed crop in
/// context.
pub const TOY_NUM_STATES: usize = 3;

/// Planted single-task environment: searching always retrieves the golden
/// page first, cropping refines it, answering is only correct once the page
/// is in context. Rewards are composed with the real reward combination.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    pub weights: RewardWeights,
    pub max_steps: usize,
}

impl Default for ToyEnv {
    fn default() -> Self {
        ToyEnv {
            weights: RewardWeights::post_sft(),
            max_steps: 4,
        }
    }
}

/// Outcome of one toy episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEpisode {
    pub actions: Vec<usize>,
    pub states: Vec<usize>,
    pub reward: f64,
}

impl ToyEnv {
    fn transition(&self, state: usize, action: usize) -> (usize, bool) {
        match (state, action) {
            (_, TOY_ANSWER) => (state, true),
            (0, TOY_SEARCH) => (1, false),
            (_, TOY_SEARCH) => (state, false), // repeat search retrieves a distractor
            (0, TOY_CROP) => (0, false),       // invalid: nothing to crop yet
            (_, TOY_CROP) => (2, false),
            _ => unreachable!("action out of vocabulary"),
        }
    }

    /// Terminal reward for an action sequence, composed exactly like the
    /// full reward engine: retrieval NDCG over the retrieved ids, binary
    /// answer correctness, pattern reward gated on answering.
    pub fn score(&self, actions: &[usize]) -> f64 {
        let mut state = 0usize;
        let mut retrieved: Vec<bool> = Vec::new(); // true = golden
        let mut answered = false;
        let mut answered_informed = false;
        let mut invalid = 0usize;
        for &a in actions {
            match a {
                TOY_SEARCH => {
                    // first search lands the golden page, repeats land distractors
                    retrieved.push(!retrieved.iter().any(|&g| g));
                }
                TOY_CROP => {
                    if state == 0 {
                        invalid += 1;
                    }
                }
                TOY_ANSWER => {
                    answered = true;
                    answered_informed = state != 0;
                }
                _ => {}
            }
            let (next, done) = self.transition(state, a);
            state = next;
            if done {
                break;
            }
        }
        let labels: Vec<u8> = retrieved.iter().map(|&g| u8::from(g)).collect();
        let r_ret = if labels.is_empty() {
            0.0
        } else {
            crate::reward::dcg(&labels) / crate::reward::idcg(1)
        };
        let r_ans = if answered && answered_informed { 1.0 } else { 0.0 };
        let r_pat = if answered {
            let valid = actions.len() - invalid;
            valid as f64 / actions.len() as f64
        } else {
            0.0
        };
        combine(r_ret, r_ans, r_pat, &self.weights).expect("valid weights")
    }

    /// Runs one episode under a sampling policy.
    pub fn run_episode(&self, policy: &ToyPolicy, rng: &mut impl Rng) -> ToyEpisode {
        let mut state = 0usize;
        let mut actions = Vec::new();
        let mut states = Vec::new();
        for _ in 0..self.max_steps {
            let action = policy.sample(state, rng);
            states.push(state);
            actions.push(action);
            let (next, done) = self.transition(state, action);
            state = next;
            if done {
                break;
            }
        }
        let reward = self.score(&actions);
        ToyEpisode {
            actions,
            states,
            reward,
        }
    }

    /// Greedy episode reward under the current policy.
    pub fn greedy_reward(&self, policy: &ToyPolicy) -> f64 {
        let mut state = 0usize;
        let mut actions = Vec::new();
        for _ in 0..self.max_steps {
            let action = policy.greedy(state);
            actions.push(action);
            let (next, done) = self.transition(state, action);
            state = next;
            if done {
                break;
            }
        }
        self.score(&actions)
    }

    /// Brute-force optimum: the best reward over every action sequence of
    /// up to `max_steps` actions.
    pub fn enumerate_optimal_reward(&self) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
        while let Some(prefix) = stack.pop() {
            if !prefix.is_empty() {
                best = best.max(self.score(&prefix));
            }
            if prefix.len() < self.max_steps && !prefix.ends_with(&[TOY_ANSWER]) {
                for a in 0..TOY_NUM_ACTIONS {
                    let mut next = prefix.clone();
                    next.push(a);
                    stack.push(next);
                }
            }
        }
        best
    }
}

/// Tokenizes a toy episode: one masked token per policy action, one
/// unmasked observation token after every non-terminal action.
pub fn tokenize_episode(episode: &ToyEpisode, sampling_policy: &ToyPolicy) -> TokenizedTrajectory {
    let mut token_ids = Vec::new();
    let mut states = Vec::new();
    let mut mask = Vec::new();
    let mut logp_old = Vec::new();
    let n = episode.actions.len();
    for (i, (&action, &state)) in episode.actions.iter().zip(&episode.states).enumerate() {
        token_ids.push(action);
        states.push(state);
        mask.push(true);
        logp_old.push(sampling_policy.log_prob(state, action));
        if i + 1 < n {
            // observation token for the environment response
            token_ids.push(TOY_NUM_ACTIONS + episode.states[i + 1]);
            states.push(episode.states[i + 1]);
            mask.push(false);
            logp_old.push(0.0);
        }
    }
    let logp_ref = logp_old.clone();
    TokenizedTrajectory {
        token_ids,
        states,
        mask,
        logp_old,
        logp_ref,
    }
}

/// Samples a group of episodes, scores them, and computes advantages.
/// `logp_old` is frozen from the sampling policy; `logp_ref` from the
/// reference policy.
pub fn sample_group(
    env: &ToyEnv,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    config: &GrpoConfig,
    rng: &mut impl Rng,
) -> Result<GrpoGroup, GrpoError> {
    config.validate()?;
    let mut trajectories = Vec::with_capacity(config.group_size);
    let mut rewards = Vec::with_capacity(config.group_size);
    for _ in 0..config.group_size {
        let episode = env.run_episode(policy, rng);
        let mut tok = tokenize_episode(&episode, policy);
        for (i, (&state, &masked)) in tok.states.iter().zip(&tok.mask).enumerate() {
            if masked {
                tok.logp_ref[i] = reference.log_prob(state, tok.token_ids[i]);
            }
        }
        rewards.push(episode.reward);
        trajectories.push(tok);
    }
    let advantages = compute_advantages(&rewards, config)?;
    Ok(GrpoGroup {
        trajectories,
        rewards,
        advantages,
    })
}

/// Clipped-surrogate group loss with exact per-token KL to the reference
/// policy, plus its analytic gradient with respect to the policy logits.
///
/// The objective is the group mean over trajectories of the per-trajectory
/// token mean (over masked tokens) of
/// `min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`, minus
/// `kl_coefficient` times the masked-token mean KL. The returned loss is
/// its negation.
pub fn grpo_loss(
    group: &GrpoGroup,
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    config: &GrpoConfig,
) -> Result<(f64, Vec<f64>), GrpoError> {
    config.validate()?;
    let g = group.trajectories.len() as f64;
    let mut objective = 0.0;
    let mut grad = vec![0.0; policy.theta.len()];
    let eps = config.clip_epsilon;

    // clipped surrogate, per-trajectory token mean, group averaged
    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        let n = traj.masked_len();
        if n == 0 {
            return Err(GrpoError::EmptyMask);
        }
        let n = n as f64;
        for (i, &masked) in traj.mask.iter().enumerate() {
            if !masked {
                continue;
            }
            let state = traj.states[i];
            let action = traj.token_ids[i];
            let probs = policy.probs(state);
            let logp = probs[action].ln();
            let ratio = (logp - traj.logp_old[i]).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
            let (term, dterm_dlogp) = if unclipped <= clipped {
                (unclipped, ratio * adv)
            } else {
                (clipped, 0.0)
            };
            objective += term / (n * g);
            let coeff = dterm_dlogp / (n * g);
            // d logp(a|s) / d theta[s][b] = delta_ab - pi(b|s)
            for (b, &pb) in probs.iter().enumerate() {
                let delta = if b == action { 1.0 } else { 0.0 };
                grad[state * policy.num_actions + b] += coeff * (delta - pb);
            }
        }
    }

    // exact KL(pi_theta || pi_ref) averaged over masked tokens
    if config.kl_coefficient > 0.0 {
        let total_masked: usize = group.trajectories.iter().map(|t| t.masked_len()).sum();
        let m = total_masked as f64;
        let mut kl_sum = 0.0;
        for traj in &group.trajectories {
            for (i, &masked) in traj.mask.iter().enumerate() {
                if !masked {
                    continue;
                }
                let state = traj.states[i];
                let p = policy.probs(state);
                let q = reference.probs(state);
                let kl: f64 = p
                    .iter()
                    .zip(&q)
                    .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
                    .sum();
                kl_sum += kl;
                // d KL / d theta[s][k] = p_k * (ln p_k - ln q_k - KL)
                let coeff = config.kl_coefficient / m;
                for (k, (&pk, &qk)) in p.iter().zip(&q).enumerate() {
                    grad[state * policy.num_actions + k] -=
                        coeff * pk * (pk.ln() - qk.ln() - kl);
                }
            }
        }
        objective -= config.kl_coefficient * kl_sum / m;
    }

    if !objective.is_finite() {
        return Err(GrpoError::Divergence);
    }
    // loss is the negated objective; flip the gradient accordingly
    Ok((-objective, grad.iter().map(|v| -v).collect()))
}

/// Unbiased k3-style KL estimate from log-prob ratios, for policies that
/// expose only token log-probabilities.
pub fn kl_k3(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp() - d - 1.0
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub update: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub greedy_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
    pub diverged: bool,
}

/// Runs `updates` GRPO steps on the toy environment. The sampling snapshot
/// is taken once per batch (single inner epoch); the reference policy is
/// the initial policy.
pub fn train_toy(
    env: &ToyEnv,
    policy: &mut ToyPolicy,
    config: &GrpoConfig,
    updates: usize,
    seed: u64,
) -> Result<TrainingCurve, GrpoError> {
    config.validate()?;
    let reference = policy.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(updates);
    for update in 0..updates {
        let group = sample_group(env, policy, &reference, config, &mut rng)?;
        let (loss, grad) = match grpo_loss(&group, policy, &reference, config) {
            Ok(out) => out,
            Err(GrpoError::Divergence) => {
                return Ok(TrainingCurve {
                    points,
                    diverged: true,
                })
            }
            Err(e) => return Err(e),
        };
        for (t, g) in policy.theta.iter_mut().zip(&grad) {
            *t -= config.learning_rate * g;
        }
        if policy.theta.iter().any(|v| !v.is_finite()) {
            return Ok(TrainingCurve {
                points,
                diverged: true,
            });
        }
        let mean_reward = group.rewards.iter().sum::<f64>() / group.rewards.len() as f64;
        points.push(CurvePoint {
            update,
            mean_reward,
            loss,
            greedy_reward: env.greedy_reward(policy),
        });
    }
    Ok(TrainingCurve {
        points,
        diverged: false,
    })
}

/// Writes a training curve as comma-separated values.
pub fn write_curve_csv(path: &Path, curve: &TrainingCurve) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "update,mean_reward,loss,greedy_reward")?;
    for p in &curve.points {
        writeln!(
            out,
            "{},{},{},{}",
            p.update, p.mean_reward, p.loss, p.greedy_reward
        )?;
    }
    out.flush()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"GRPOCK01";

/// Saves policy parameters, trainer config, and the training seed as a
/// versioned binary checkpoint.
pub fn save_checkpoint(
    path: &Path,
    policy: &ToyPolicy,
    config: &GrpoConfig,
    seed: u64,
) -> Result<(), GrpoError> {
    let io_err = |e: std::io::Error| GrpoError::Checkpoint(e.to_string());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    out.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    let config_json =
        serde_json::to_vec(config).map_err(|e| GrpoError::Checkpoint(e.to_string()))?;
    out.write_u32::<LittleEndian>(config_json.len() as u32)
        .map_err(io_err)?;
    out.write_all(&config_json).map_err(io_err)?;
    out.write_u64::<LittleEndian>(seed).map_err(io_err)?;
    out.write_u32::<LittleEndian>(policy.num_states as u32)
        .map_err(io_err)?;
    out.write_u32::<LittleEndian>(policy.num_actions as u32)
        .map_err(io_err)?;
    for &v in &policy.theta {
        out.write_f64::<LittleEndian>(v).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyPolicy, GrpoConfig, u64), GrpoError> {
    let io_err = |e: std::io::Error| GrpoError::Checkpoint(e.to_string());
    let mut input = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GrpoError::Checkpoint("bad magic or version".to_string()));
    }
    let config_len = input.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut config_json = vec![0u8; config_len];
    input.read_exact(&mut config_json).map_err(io_err)?;
    let config: GrpoConfig = serde_json::from_slice(&config_json)
        .map_err(|e| GrpoError::Checkpoint(e.to_string()))?;
    let seed = input.read_u64::<LittleEndian>().map_err(io_err)?;
    let num_states = input.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let num_actions = input.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut theta = vec![0.0; num_states * num_actions];
    for v in &mut theta {
        *v = input.read_f64::<LittleEndian>().map_err(io_err)?;
    }
    Ok((
        ToyPolicy {
            num_states,
            num_actions,
            theta,
        },
        config,
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_identical_rewards_are_zero() {
        let config = GrpoConfig::default();
        let adv = compute_advantages(&[1.0; 5], &config).unwrap();
        assert_eq!(adv, vec![0.0; 5]);
    }

    #[test]
    fn advantages_two_pass_oracle() {
        let config = GrpoConfig::default();
        let adv = compute_advantages(&[1.0, 0.0, 1.0, 0.0, 1.0], &config).unwrap();
        let expected = [0.8165, -1.2247, 0.8165, -1.2247, 0.8165];
        for (a, e) in adv.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
        assert!(adv.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn advantages_single_reward_rejected() {
        let config = GrpoConfig::default();
        assert_eq!(
            compute_advantages(&[1.0], &config),
            Err(GrpoError::GroupTooSmall(1))
        );
    }

    #[test]
    fn toy_optimum_is_search_then_answer() {
        let env = ToyEnv::default();
        assert!((env.score(&[TOY_SEARCH, TOY_ANSWER]) - 1.0).abs() < 1e-12);
        assert!((env.enumerate_optimal_reward() - 1.0).abs() < 1e-12);
        // answering blind scores worse
        assert!(env.score(&[TOY_ANSWER]) < 0.5);
    }

    fn random_policy(rng: &mut impl Rng) -> ToyPolicy {
        let mut p = ToyPolicy::uniform(TOY_NUM_STATES, TOY_NUM_ACTIONS);
        for v in &mut p.theta {
            *v = rng.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn loss_with_identical_policies_has_unit_ratio_and_zero_kl() {
        let env = ToyEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = random_policy(&mut rng);
        let config = GrpoConfig::default();
        let group = sample_group(&env, &policy, &policy, &config, &mut rng).unwrap();
        let (loss, _) = grpo_loss(&group, &policy, &policy, &config).unwrap();
        // ratio == 1 everywhere, KL == 0, so loss reduces to -mean(A)
        let expected: f64 = -group.advantages.iter().sum::<f64>() / group.advantages.len() as f64;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn masked_tokens_do_not_affect_loss() {
        let env = ToyEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sampler = random_policy(&mut rng);
        let current = random_policy(&mut rng);
        let config = GrpoConfig::default();
        let mut group = sample_group(&env, &sampler, &sampler, &config, &mut rng).unwrap();
        let (loss_before, grad_before) = grpo_loss(&group, &current, &sampler, &config).unwrap();
        for traj in &mut group.trajectories {
            for (i, &masked) in traj.mask.clone().iter().enumerate() {
                if !masked {
                    traj.logp_old[i] = rng.random_range(-5.0..0.0);
                    traj.logp_ref[i] = rng.random_range(-5.0..0.0);
                }
            }
        }
        let (loss_after, grad_after) = grpo_loss(&group, &current, &sampler, &config).unwrap();
        assert_eq!(loss_before, loss_after);
        assert_eq!(grad_before, grad_after);
    }

    #[test]
    fn empty_mask_rejected() {
        let config = GrpoConfig::default();
        let traj = TokenizedTrajectory {
            token_ids: vec![3],
            states: vec![0],
            mask: vec![false],
            logp_old: vec![0.0],
            logp_ref: vec![0.0],
        };
        let group = GrpoGroup {
            trajectories: vec![traj.clone(), traj],
            rewards: vec![0.0, 1.0],
            advantages: vec![-1.0, 1.0],
        };
        let policy = ToyPolicy::uniform(TOY_NUM_STATES, TOY_NUM_ACTIONS);
        assert_eq!(
            grpo_loss(&group, &policy, &policy, &config).unwrap_err(),
            GrpoError::EmptyMask
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let env = ToyEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sampler = random_policy(&mut rng);
        let mut current = random_policy(&mut rng);
        let config = GrpoConfig {
            kl_coefficient: 0.05,
            ..Default::default()
        };
        let group = sample_group(&env, &sampler, &sampler, &config, &mut rng).unwrap();
        let (_, grad) = grpo_loss(&group, &current, &sampler, &config).unwrap();
        let h = 1e-6;
        for i in 0..current.theta.len() {
            let orig = current.theta[i];
            current.theta[i] = orig + h;
            let (lp, _) = grpo_loss(&group, &current, &sampler, &config).unwrap();
            current.theta[i] = orig - h;
            let (lm, _) = grpo_loss(&group, &current, &sampler, &config).unwrap();
            current.theta[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn clipped_token_has_zero_gradient() {
        // single-token group engineered so the ratio exceeds 1 + eps with
        // positive advantage: the clip is active and the gradient vanishes
        let config = GrpoConfig {
            kl_coefficient: 0.0,
            ..Default::default()
        };
        let mut policy = ToyPolicy::uniform(1, 2);
        policy.theta = vec![2.0, -2.0];
        let traj = |action: usize, logp_old: f64| TokenizedTrajectory {
            token_ids: vec![action],
            states: vec![0],
            mask: vec![true],
            logp_old: vec![logp_old],
            logp_ref: vec![logp_old],
        };
        // token 0: ratio >> 1 + eps with positive advantage; token 1:
        // ratio << 1 - eps with negative advantage. Both hit the clip.
        let group = GrpoGroup {
            trajectories: vec![traj(0, -3.0), traj(1, -0.1)],
            rewards: vec![1.0, 0.0],
            advantages: vec![1.0, -1.0],
        };
        let (_, grad) = grpo_loss(&group, &policy, &policy, &config).unwrap();
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn training_learns_the_planted_task() {
        let env = ToyEnv::default();
        let config = GrpoConfig {
            learning_rate: 0.5,
            ..Default::default()
        };
        let mut policy = ToyPolicy::uniform(TOY_NUM_STATES, TOY_NUM_ACTIONS);
        let curve = train_toy(&env, &mut policy, &config, 300, 17).unwrap();
        assert!(!curve.diverged);
        let optimal = env.enumerate_optimal_reward();
        assert!(
            env.greedy_reward(&policy) >= 0.95 * optimal,
            "greedy {} vs optimal {optimal}",
            env.greedy_reward(&policy)
        );
    }

    #[test]
    fn huge_kl_pins_policy_to_reference() {
        let env = ToyEnv::default();
        let config = GrpoConfig {
            learning_rate: 0.02,
            kl_coefficient: 100.0,
            ..Default::default()
        };
        let mut policy = ToyPolicy::uniform(TOY_NUM_STATES, TOY_NUM_ACTIONS);
        train_toy(&env, &mut policy, &config, 200, 17).unwrap();
        // the policy barely moves off uniform
        for state in 0..TOY_NUM_STATES {
            for p in policy.probs(state) {
                assert!((p - 1.0 / TOY_NUM_ACTIONS as f64).abs() < 0.1);
            }
        }
    }

    #[test]
    fn zero_updates_leave_parameters_unchanged() {
        let env = ToyEnv::default();
        let config = GrpoConfig::default();
        let mut policy = ToyPolicy::uniform(TOY_NUM_STATES, TOY_NUM_ACTIONS);
        let before = policy.clone();
        train_toy(&env, &mut policy, &config, 0, 0).unwrap();
        assert_eq!(policy, before);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = random_policy(&mut rng);
        let config = GrpoConfig::default();
        save_checkpoint(&path, &policy, &config, 99).unwrap();
        let (loaded, loaded_config, seed) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, policy);
        assert_eq!(loaded_config, config);
        assert_eq!(seed, 99);
    }

    #[test]
    fn kl_k3_is_nonnegative_and_zero_at_equality() {
        assert_eq!(kl_k3(-1.0, -1.0), 0.0);
        for (a, b) in [(-0.5, -1.5), (-2.0, -0.3)] {
            assert!(kl_k3(a, b) > 0.0);
        }
    }
}
