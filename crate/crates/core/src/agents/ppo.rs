//! PPO-lite: unsquashed Gaussian actor with a state-independent log-std
//! vector, a separate value network, clipped surrogate, GAE advantages
//! normalized per rollout, and a KL early stop.
//!
//! Actions are clipped to the environment bounds; the log-density is taken
//! of the raw draw. Per mini-batch the loss is
//!
//! ```text
//! -mean(w * min(r * A, clip(r, 1 - c, 1 + c) * A)) + vf_coef * mean((V - R)^2) - ent_coef * H
//! ```
//!
//! with `r = exp(log pi_new - log pi_old)` and `w` the optional
//! importance weight (1, or `1 / N` on steps whose action was picked out
//! of `N` candidates by the memory).

use serde::{Deserialize, Serialize};

use super::{Learner, LossReport, LN_2PI};
use crate::envs::{EnvSpec, StepResult};
use crate::error::{check_width, Error, Result};
use crate::memory::EndTag;
use crate::numeric::codec::{Decoder, Encoder};
use crate::numeric::{mean_std, Adam, AdamConfig, Gradients, Matrix, Mlp, MlpSpec, Rng};
use crate::selection::{Decision, GaussianHead, StochasticPolicy};

use super::sac::{LOG_STD_MAX, LOG_STD_MIN};

const PPO_MAGIC: &[u8; 4] = b"FPPO";
const PPO_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub hidden: usize,
    /// Steps collected per worker before each update phase.
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub vf_coef: f64,
    pub ent_coef: f64,
    /// Stop the update phase once the approximate KL exceeds
    /// `1.5 * target_kl`.
    pub target_kl: Option<f64>,
    pub init_log_std: f64,
    /// Down-weight memory-steered steps by `1 / N` in the surrogate.
    pub importance_correction: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            hidden: 64,
            rollout_len: 256,
            epochs: 10,
            minibatch: 64,
            vf_coef: 0.5,
            ent_coef: 0.0,
            target_kl: Some(0.02),
            init_log_std: -0.5,
            importance_correction: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("ppo.gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("ppo.gae_lambda must lie in [0, 1]".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("ppo.clip must lie in (0, 1)".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("ppo.lr must be non-negative".into()));
        }
        if self.hidden == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::Config("ppo.hidden, rollout_len, epochs and minibatch must be positive".into()));
        }
        if let Some(kl) = self.target_kl {
            if !(kl > 0.0) {
                return Err(Error::Config("ppo.target_kl must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoPolicy {
    pub actor: Mlp,
    /// Raw log-std; clamped into `[LOG_STD_MIN, LOG_STD_MAX]` on use.
    pub log_std: Vec<f64>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

fn clamp_ls(ls: f64) -> (f64, bool) {
    let c = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
    (c, c == ls)
}

impl PpoPolicy {
    pub fn new(spec: &EnvSpec, hidden: usize, init_log_std: f64, rng: &mut Rng) -> Result<Self> {
        let actor = Mlp::init_with(&MlpSpec::two_hidden(spec.state_dim, hidden, spec.action_dim), rng)?;
        Ok(Self {
            actor,
            log_std: vec![init_log_std; spec.action_dim],
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        })
    }

    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.squash(&self.actor.forward(state)?))
    }

    fn stds(&self) -> Vec<f64> {
        self.log_std.iter().map(|&l| clamp_ls(l).0.exp()).collect()
    }

    /// Entropy of the Gaussian (state independent).
    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|&l| clamp_ls(l).0 + 0.5 * (LN_2PI + 1.0))
            .sum()
    }
}

/// Diagonal Gaussian log-density.
fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    let mut lp = 0.0;
    for k in 0..x.len() {
        let ls = clamp_ls(log_std[k]).0;
        let z = (x[k] - mean[k]) / ls.exp();
        lp += -0.5 * z * z - ls - 0.5 * LN_2PI;
    }
    lp
}

impl StochasticPolicy for PpoPolicy {
    fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    fn head(&self, state: &[f64]) -> Result<GaussianHead> {
        GaussianHead::new(self.actor.forward(state)?, self.stds())
    }

    fn squash(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(k, &a)| a.clamp(self.low[k], self.high[k]))
            .collect()
    }

    fn log_prob(&self, head: &GaussianHead, raw: &[f64]) -> f64 {
        if head.is_deterministic() {
            return f64::NAN;
        }
        let mut lp = 0.0;
        for (k, &x) in raw.iter().enumerate() {
            let s = head.std[k];
            let z = (x - head.mean[k]) / s;
            lp += -0.5 * z * z - s.ln() - 0.5 * LN_2PI;
        }
        lp
    }
}

/// Frozen mini-batch for one surrogate evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    pub states: Matrix,
    /// Raw (unclipped) Gaussian draws.
    pub raws: Matrix,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoLoss {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoGrads {
    pub actor: Gradients,
    pub log_std: Vec<f64>,
    pub critic: Gradients,
}

impl PpoGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.actor.to_flat();
        v.extend_from_slice(&self.log_std);
        v.extend(self.critic.to_flat());
        v
    }
}

/// Loss and analytic gradients for actor, log-std and critic.
pub fn ppo_loss_and_grads(
    policy: &PpoPolicy,
    critic: &Mlp,
    batch: &PpoBatch,
    clip: f64,
    vf_coef: f64,
    ent_coef: f64,
) -> Result<(PpoLoss, PpoGrads)> {
    let n = batch.states.rows();
    let d_a = policy.log_std.len();
    check_width("ppo raws", n, batch.raws.rows())?;
    check_width("ppo raw width", d_a, batch.raws.cols())?;
    for (ctx, len) in [
        ("ppo old log-probs", batch.old_log_probs.len()),
        ("ppo advantages", batch.advantages.len()),
        ("ppo returns", batch.returns.len()),
        ("ppo weights", batch.weights.len()),
    ] {
        check_width(ctx, n, len)?;
    }
    let inv_n = 1.0 / n as f64;
    let a_cache = policy.actor.forward_batch(&batch.states)?;
    let v_cache = critic.forward_batch(&batch.states)?;
    let clamped: Vec<(f64, bool)> = policy.log_std.iter().map(|&l| clamp_ls(l)).collect();
    let mut loss = PpoLoss::default();
    let mut g_mean = Matrix::zeros(n, d_a);
    let mut g_ls = vec![0.0; d_a];
    let mut g_v = Matrix::zeros(n, 1);
    let mut clipped = 0usize;
    for b in 0..n {
        let mean = a_cache.output().row(b);
        let x = batch.raws.row(b);
        let lp = gaussian_log_prob(mean, &policy.log_std, x);
        let ratio = (lp - batch.old_log_probs[b]).exp();
        let adv = batch.advantages[b];
        let w = batch.weights[b];
        let unclipped = ratio * adv;
        let clipped_term = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        loss.policy -= w * unclipped.min(clipped_term) * inv_n;
        loss.approx_kl += (batch.old_log_probs[b] - lp) * inv_n;
        if (ratio - 1.0).abs() > clip {
            clipped += 1;
        }
        // d(loss)/d(log pi_new) for this sample
        let d_lp = if unclipped <= clipped_term { -w * ratio * adv * inv_n } else { 0.0 };
        if d_lp != 0.0 {
            let gm = g_mean.row_mut(b);
            for k in 0..d_a {
                let (ls, free) = clamped[k];
                let var = (2.0 * ls).exp();
                let diff = x[k] - mean[k];
                gm[k] = d_lp * diff / var;
                if free {
                    g_ls[k] += d_lp * (diff * diff / var - 1.0);
                }
            }
        }
        let v = v_cache.output().get(b, 0);
        let e = v - batch.returns[b];
        loss.value += e * e * inv_n;
        g_v.set(b, 0, vf_coef * 2.0 * e * inv_n);
    }
    loss.entropy = policy.entropy();
    for (k, &(_, free)) in clamped.iter().enumerate() {
        if free {
            g_ls[k] -= ent_coef;
        }
    }
    loss.total = loss.policy + vf_coef * loss.value - ent_coef * loss.entropy;
    loss.clip_fraction = clipped as f64 * inv_n;
    let (actor, _) = policy.actor.backward(&a_cache, &g_mean)?;
    let (critic_g, _) = critic.backward(&v_cache, &g_v)?;
    Ok((
        loss,
        PpoGrads {
            actor,
            log_std: g_ls,
            critic: critic_g,
        },
    ))
}

/// Generalized advantage estimates for one worker's slab.
///
/// `next_values[t]` is the value of the state reached after step `t`
/// (zero after a true termination); `cuts[t]` marks an episode boundary
/// after step `t`, which stops the backward recursion.
pub fn gae(rewards: &[f64], values: &[f64], next_values: &[f64], cuts: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        if cuts[t] {
            carry = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        carry = delta + gamma * lambda * carry;
        adv[t] = carry;
    }
    adv
}

/// Standardizes in place (population std, guarded by `1e-8`).
pub fn normalize_advantages(adv: &mut [f64]) {
    let (m, s) = mean_std(adv);
    for a in adv.iter_mut() {
        *a = (*a - m) / (s + 1e-8);
    }
}

#[derive(Debug, Clone, Default)]
struct Slab {
    states: Vec<Vec<f64>>,
    raws: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    /// Known successor values; `None` means "value of the next entry".
    next_values: Vec<Option<f64>>,
    cuts: Vec<bool>,
    weights: Vec<f64>,
    last_next_state: Vec<f64>,
}

impl Slab {
    fn len(&self) -> usize {
        self.rewards.len()
    }
}

pub struct PpoAgent {
    cfg: PpoConfig,
    policy: PpoPolicy,
    critic: Mlp,
    net_adam: Adam,
    std_adam: Adam,
    rng: Rng,
    slabs: Vec<Slab>,
    updates: u64,
}

impl PpoAgent {
    pub fn new(spec: &EnvSpec, cfg: PpoConfig, init_rng: &mut Rng, rng: Rng) -> Result<Self> {
        cfg.validate()?;
        let policy = PpoPolicy::new(spec, cfg.hidden, cfg.init_log_std, init_rng)?;
        let critic = Mlp::init_with(&MlpSpec::two_hidden(spec.state_dim, cfg.hidden, 1), init_rng)?;
        let net_adam = Adam::for_nets(&[&policy.actor, &critic], AdamConfig::with_lr(cfg.lr));
        let std_adam = Adam::new(spec.action_dim, AdamConfig::with_lr(cfg.lr));
        Ok(Self {
            cfg,
            policy,
            critic,
            net_adam,
            std_adam,
            rng,
            slabs: Vec::new(),
            updates: 0,
        })
    }

    pub fn config(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(state)?[0])
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.policy.actor.params_flat();
        v.extend_from_slice(&self.policy.log_std);
        v.extend(self.critic.params_flat());
        v
    }

    /// Assembles the rollout batch: GAE per slab, then advantages
    /// normalized over the whole batch.
    fn build_batch(&self) -> Result<PpoBatch> {
        let d_s = self.policy.actor.input_dim();
        let d_a = self.policy.log_std.len();
        let mut states = Vec::new();
        let mut raws = Vec::new();
        let mut old = Vec::new();
        let mut advs = Vec::new();
        let mut rets = Vec::new();
        let mut weights = Vec::new();
        for slab in &self.slabs {
            let n = slab.len();
            let bootstrap = self.value(&slab.last_next_state)?;
            let next_values: Vec<f64> = (0..n)
                .map(|t| match slab.next_values[t] {
                    Some(v) => v,
                    None if t + 1 < n => slab.values[t + 1],
                    None => bootstrap,
                })
                .collect();
            let adv = gae(
                &slab.rewards,
                &slab.values,
                &next_values,
                &slab.cuts,
                self.cfg.gamma,
                self.cfg.gae_lambda,
            );
            for t in 0..n {
                rets.push(adv[t] + slab.values[t]);
            }
            advs.extend(adv);
            states.extend(slab.states.iter().flatten().copied());
            raws.extend(slab.raws.iter().flatten().copied());
            old.extend_from_slice(&slab.log_probs);
            weights.extend_from_slice(&slab.weights);
        }
        normalize_advantages(&mut advs);
        let n = advs.len();
        Ok(PpoBatch {
            states: Matrix::from_vec(n, d_s, states)?,
            raws: Matrix::from_vec(n, d_a, raws)?,
            old_log_probs: old,
            advantages: advs,
            returns: rets,
            weights,
        })
    }

    fn subset(batch: &PpoBatch, idx: &[usize]) -> Result<PpoBatch> {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(PpoBatch {
            states: Matrix::from_rows(batch.states.cols(), idx.iter().map(|&i| batch.states.row(i)))?,
            raws: Matrix::from_rows(batch.raws.cols(), idx.iter().map(|&i| batch.raws.row(i)))?,
            old_log_probs: pick(&batch.old_log_probs),
            advantages: pick(&batch.advantages),
            returns: pick(&batch.returns),
            weights: pick(&batch.weights),
        })
    }

    /// One update phase over a rollout batch.
    pub fn update(&mut self, batch: &PpoBatch) -> Result<LossReport> {
        let n = batch.advantages.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut last = PpoLoss::default();
        let mut steps = 0u64;
        let mut early_stop = 0.0;
        'epochs: for _ in 0..self.cfg.epochs {
            self.rng.shuffle(&mut order);
            for chunk in order.chunks(self.cfg.minibatch) {
                let mb = Self::subset(batch, chunk)?;
                let (loss, grads) = ppo_loss_and_grads(
                    &self.policy,
                    &self.critic,
                    &mb,
                    self.cfg.clip,
                    self.cfg.vf_coef,
                    self.cfg.ent_coef,
                )?;
                if !loss.total.is_finite() {
                    return Err(Error::Training(format!(
                        "ppo loss is {} (policy {}, value {}) at update {}",
                        loss.total, loss.policy, loss.value, self.updates
                    )));
                }
                last = loss;
                if let Some(kl) = self.cfg.target_kl {
                    if loss.approx_kl > 1.5 * kl {
                        early_stop = 1.0;
                        break 'epochs;
                    }
                }
                self.net_adam
                    .step(&mut [&mut self.policy.actor, &mut self.critic], &[&grads.actor, &grads.critic])?;
                self.std_adam.step_flat(&mut self.policy.log_std, &grads.log_std)?;
                steps += 1;
            }
        }
        self.updates += 1;
        let values = [
            ("total", last.total),
            ("policy", last.policy),
            ("value", last.value),
            ("entropy", last.entropy),
            ("approx_kl", last.approx_kl),
            ("clip_fraction", last.clip_fraction),
            ("gradient_steps", steps as f64),
            ("early_stop", early_stop),
        ];
        Ok(LossReport {
            updates: self.updates,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        })
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(PPO_MAGIC).u32(PPO_FORMAT_VERSION);
        enc.vec(&self.policy.low).vec(&self.policy.high);
        enc.mlp(&self.policy.actor).vec(&self.policy.log_std).mlp(&self.critic);
        enc.adam(&self.net_adam).adam(&self.std_adam);
        enc.rng_state(&self.rng.state()).u64(self.updates);
    }

    pub fn decode(dec: &mut Decoder<'_>, cfg: PpoConfig) -> Result<Self> {
        dec.expect_magic(PPO_MAGIC)?;
        let v = dec.u32()?;
        if v != PPO_FORMAT_VERSION {
            return Err(Error::Format(format!("ppo format version {v}")));
        }
        let low = dec.vec()?;
        let high = dec.vec()?;
        let actor = dec.mlp()?;
        let log_std = dec.vec()?;
        let critic = dec.mlp()?;
        let net_adam = dec.adam()?;
        let std_adam = dec.adam()?;
        let rng = Rng::from_state(dec.rng_state()?);
        let updates = dec.u64()?;
        check_width("ppo bounds", low.len(), high.len())?;
        check_width("ppo log-std", low.len(), log_std.len())?;
        check_width("ppo actor output", low.len(), actor.output_dim())?;
        Ok(Self {
            cfg,
            policy: PpoPolicy {
                actor,
                log_std,
                low,
                high,
            },
            critic,
            net_adam,
            std_adam,
            rng,
            slabs: Vec::new(),
            updates,
        })
    }
}

impl Learner for PpoAgent {
    type Policy = PpoPolicy;

    fn policy(&self) -> &PpoPolicy {
        &self.policy
    }

    fn begin(&mut self, workers: usize) -> Result<()> {
        self.slabs = vec![Slab::default(); workers];
        Ok(())
    }

    fn observe(&mut self, worker: usize, state: &[f64], decision: &Decision, result: &StepResult) -> Result<()> {
        let value = self.value(state)?;
        let next_value = match result.end {
            EndTag::None => None,
            EndTag::TimeLimit => Some(self.value(&result.state)?),
            EndTag::Hazard | EndTag::Success => Some(0.0),
        };
        let weight = if self.cfg.importance_correction && decision.influenced() {
            1.0 / decision.candidates as f64
        } else {
            1.0
        };
        let slab = self
            .slabs
            .get_mut(worker)
            .ok_or_else(|| Error::Usage(format!("worker {worker} was not registered")))?;
        slab.states.push(state.to_vec());
        slab.raws.push(decision.raw.clone());
        slab.log_probs.push(decision.log_prob);
        slab.rewards.push(result.reward);
        slab.values.push(value);
        slab.next_values.push(next_value);
        slab.cuts.push(result.end.is_terminal());
        slab.weights.push(weight);
        slab.last_next_state = result.state.clone();
        Ok(())
    }

    fn after_tick(&mut self, _total_steps: u64) -> Result<Option<LossReport>> {
        let full = !self.slabs.is_empty() && self.slabs.iter().all(|s| s.len() >= self.cfg.rollout_len);
        if !full {
            return Ok(None);
        }
        let batch = self.build_batch()?;
        let report = self.update(&batch)?;
        for s in &mut self.slabs {
            *s = Slab::default();
        }
        Ok(Some(report))
    }

    fn swap_allowed(&self) -> bool {
        self.slabs.iter().all(|s| s.len() == 0)
    }
}
