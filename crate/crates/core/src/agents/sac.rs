//! SAC-lite: tanh-squashed Gaussian actor, twin Q critics with Polyak
//! targets, and a learned entropy temperature.
//!
//! The actor network outputs `2 * d_a` values: the Gaussian mean and a raw
//! log-std that is mapped smoothly into `[LOG_STD_MIN, LOG_STD_MAX]` by
//! `min + (max - min) * (tanh(raw) + 1) / 2`. Actions are
//! `low + (high - low) * (tanh(u) + 1) / 2` for a draw `u`.
//!
//! Losses, all averaged over the batch:
//!
//! - critics: `(Q_i(s, a) - y)^2` with
//!   `y = r + gamma * (1 - done) * (min_i Qtarg_i(s', a') - alpha * log pi(a'|s'))`
//! - actor: `alpha * log pi(a|s) - min_i Q_i(s, a)`, reparameterized
//! - temperature: `-log_alpha * (log pi(a|s) + target_entropy)`

use serde::{Deserialize, Serialize};

use super::replay::{ReplayBuffer, SacBatch};
use super::{softplus, Learner, LossReport, LN_2PI};
use crate::envs::{EnvSpec, StepResult};
use crate::error::{check_width, Error, Result};
use crate::memory::EndTag;
use crate::numeric::codec::{Decoder, Encoder};
use crate::numeric::{Adam, AdamConfig, Gradients, Matrix, Mlp, MlpSpec, Rng};
use crate::selection::{Decision, GaussianHead, StochasticPolicy};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const SAC_MAGIC: &[u8; 4] = b"FSAC";
const SAC_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub hidden: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// No gradient steps before this many environment steps.
    pub update_after: u64,
    /// Environment steps between update rounds.
    pub update_every: u64,
    /// Gradient steps per update round.
    pub gradient_steps: usize,
    pub init_alpha: f64,
    /// Defaults to `-d_a`.
    pub target_entropy: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            hidden: 64,
            batch_size: 64,
            buffer_capacity: 100_000,
            update_after: 1_000,
            update_every: 1,
            gradient_steps: 1,
            init_alpha: 0.2,
            target_entropy: None,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("init_alpha", self.init_alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sac.{name} must be positive")));
            }
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("alpha_lr", self.alpha_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sac.{name} must be non-negative")));
            }
        }
        if self.gamma > 1.0 {
            return Err(Error::Config("sac.gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("sac.tau must lie in [0, 1]".into()));
        }
        if self.hidden == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("sac.hidden, batch_size and buffer_capacity must be positive".into()));
        }
        if self.update_every == 0 || self.gradient_steps == 0 {
            return Err(Error::Config("sac.update_every and gradient_steps must be positive".into()));
        }
        Ok(())
    }
}

/// `log(1 - tanh(u)^2)`, stable for large `|u|`.
#[inline]
pub fn log1m_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

#[inline]
fn log_std_of(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

/// The actor as a sampling policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SacPolicy {
    pub actor: Mlp,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// Per-sample quantities of a reparameterized actor draw.
struct Draw {
    std: Vec<f64>,
    raw_ls: Vec<f64>,
    u: Vec<f64>,
    action: Vec<f64>,
    log_prob: f64,
}

impl SacPolicy {
    pub fn new(d_s: usize, spec: &EnvSpec, hidden: usize, rng: &mut Rng) -> Result<Self> {
        check_width("sac state", spec.state_dim, d_s)?;
        let d_a = spec.action_dim;
        let actor = Mlp::init_with(&MlpSpec::two_hidden(d_s, hidden, 2 * d_a), rng)?;
        Ok(Self {
            actor,
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
        })
    }

    fn d_a(&self) -> usize {
        self.low.len()
    }

    fn half(&self, k: usize) -> f64 {
        0.5 * (self.high[k] - self.low[k])
    }

    /// Deterministic action: the squashed mean.
    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        let out = self.actor.forward(state)?;
        Ok(self.squash(&out[..self.d_a()]))
    }

    fn draw(&self, out: &[f64], eps: &[f64]) -> Draw {
        let d = self.d_a();
        let mean = out[..d].to_vec();
        let raw_ls = out[d..].to_vec();
        let std: Vec<f64> = raw_ls.iter().map(|&r| log_std_of(r).exp()).collect();
        let u: Vec<f64> = (0..d).map(|k| mean[k] + std[k] * eps[k]).collect();
        let action = self.squash(&u);
        let mut log_prob = 0.0;
        for k in 0..d {
            log_prob += -0.5 * eps[k] * eps[k] - std[k].ln() - 0.5 * LN_2PI - self.half(k).ln() - log1m_tanh_sq(u[k]);
        }
        Draw {
            std,
            raw_ls,
            u,
            action,
            log_prob,
        }
    }
}

impl StochasticPolicy for SacPolicy {
    fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    fn action_dim(&self) -> usize {
        self.d_a()
    }

    fn head(&self, state: &[f64]) -> Result<GaussianHead> {
        let out = self.actor.forward(state)?;
        let d = self.d_a();
        let std = out[d..].iter().map(|&r| log_std_of(r).exp()).collect();
        GaussianHead::new(out[..d].to_vec(), std)
    }

    fn squash(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(k, &u)| self.low[k] + self.half(k) * (u.tanh() + 1.0))
            .collect()
    }

    fn log_prob(&self, head: &GaussianHead, raw: &[f64]) -> f64 {
        if head.is_deterministic() {
            return f64::NAN;
        }
        let mut lp = 0.0;
        for (k, &u) in raw.iter().enumerate() {
            let s = head.std[k];
            let z = (u - head.mean[k]) / s;
            lp += -0.5 * z * z - s.ln() - 0.5 * LN_2PI - self.half(k).ln() - log1m_tanh_sq(u);
        }
        lp
    }
}

fn min_target_q(q1: &Mlp, q2: &Mlp, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
    let x = states.hcat(actions)?;
    let a = q1.predict(&x)?;
    let b = q2.predict(&x)?;
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x.min(*y)).collect())
}

/// Critic targets and the twin critic losses with their gradients.
/// `next_noise` holds the standard-normal draws for the next actions.
#[allow(clippy::too_many_arguments)]
pub fn critic_losses_and_grads(
    policy: &SacPolicy,
    q1: &Mlp,
    q2: &Mlp,
    q1_target: &Mlp,
    q2_target: &Mlp,
    alpha: f64,
    gamma: f64,
    batch: &SacBatch,
    next_noise: &Matrix,
) -> Result<([f64; 2], [Gradients; 2])> {
    let n = batch.len();
    let d_a = policy.d_a();
    check_width("next-action noise rows", n, next_noise.rows())?;
    check_width("next-action noise width", d_a, next_noise.cols())?;
    let next_out = policy.actor.predict(&batch.next_states)?;
    let mut next_actions = Matrix::zeros(n, d_a);
    let mut next_logp = Vec::with_capacity(n);
    for b in 0..n {
        let d = policy.draw(next_out.row(b), next_noise.row(b));
        next_actions.row_mut(b).copy_from_slice(&d.action);
        next_logp.push(d.log_prob);
    }
    let q_next = min_target_q(q1_target, q2_target, &batch.next_states, &next_actions)?;
    let targets: Vec<f64> = (0..n)
        .map(|b| {
            let cont = if batch.terminals[b] { 0.0 } else { 1.0 };
            batch.rewards[b] + gamma * cont * (q_next[b] - alpha * next_logp[b])
        })
        .collect();
    let x = batch.states.hcat(&batch.actions)?;
    let mut losses = [0.0; 2];
    let mut grads = Vec::with_capacity(2);
    for (i, q) in [q1, q2].into_iter().enumerate() {
        let cache = q.forward_batch(&x)?;
        let pred = cache.output();
        let mut g = Matrix::zeros(n, 1);
        for b in 0..n {
            let e = pred.get(b, 0) - targets[b];
            losses[i] += e * e / n as f64;
            g.set(b, 0, 2.0 * e / n as f64);
        }
        grads.push(q.backward(&cache, &g)?.0);
    }
    let g2 = grads.pop().expect("two critics");
    let g1 = grads.pop().expect("two critics");
    Ok((losses, [g1, g2]))
}

/// Reparameterized actor loss, its gradient and the batch mean of
/// `log pi`. `noise` holds one standard-normal row per sample.
pub fn actor_loss_and_grads(
    policy: &SacPolicy,
    q1: &Mlp,
    q2: &Mlp,
    alpha: f64,
    states: &Matrix,
    noise: &Matrix,
) -> Result<(f64, Gradients, f64)> {
    let n = states.rows();
    let d_a = policy.d_a();
    check_width("actor noise rows", n, noise.rows())?;
    check_width("actor noise width", d_a, noise.cols())?;
    let cache = policy.actor.forward_batch(states)?;
    let draws: Vec<Draw> = (0..n).map(|b| policy.draw(cache.output().row(b), noise.row(b))).collect();
    let mut actions = Matrix::zeros(n, d_a);
    for (b, d) in draws.iter().enumerate() {
        actions.row_mut(b).copy_from_slice(&d.action);
    }
    let x = states.hcat(&actions)?;
    let c1 = q1.forward_batch(&x)?;
    let c2 = q2.forward_batch(&x)?;
    let inv_n = 1.0 / n as f64;
    let mut g1 = Matrix::zeros(n, 1);
    let mut g2 = Matrix::zeros(n, 1);
    let mut loss = 0.0;
    let mut mean_logp = 0.0;
    for (b, d) in draws.iter().enumerate() {
        let (a, c) = (c1.output().get(b, 0), c2.output().get(b, 0));
        if a <= c {
            g1.set(b, 0, -inv_n);
        } else {
            g2.set(b, 0, -inv_n);
        }
        loss += (alpha * d.log_prob - a.min(c)) * inv_n;
        mean_logp += d.log_prob * inv_n;
    }
    let (_, dx1) = q1.backward(&c1, &g1)?;
    let (_, dx2) = q2.backward(&c2, &g2)?;
    let d_s = states.cols();
    let mut grad_out = Matrix::zeros(n, 2 * d_a);
    for (b, d) in draws.iter().enumerate() {
        let row = grad_out.row_mut(b);
        for k in 0..d_a {
            let t = d.u[k].tanh();
            let dq_da = dx1.get(b, d_s + k) + dx2.get(b, d_s + k);
            let dq_du = dq_da * policy.half(k) * (1.0 - t * t);
            let eps = noise.get(b, k);
            let d_mean = alpha * inv_n * 2.0 * t + dq_du;
            let d_std = alpha * inv_n * (-1.0 / d.std[k] + 2.0 * t * eps) + dq_du * eps;
            let th = d.raw_ls[k].tanh();
            let dls_draw = 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - th * th);
            row[k] = d_mean;
            row[d_a + k] = d_std * d.std[k] * dls_draw;
        }
    }
    let (grads, _) = policy.actor.backward(&cache, &grad_out)?;
    Ok((loss, grads, mean_logp))
}

/// Temperature loss and its derivative with respect to `log_alpha`.
pub fn alpha_loss_and_grad(log_alpha: f64, mean_log_prob: f64, target_entropy: f64) -> (f64, f64) {
    let g = -(mean_log_prob + target_entropy);
    (log_alpha * g, g)
}

pub struct SacAgent {
    cfg: SacConfig,
    policy: SacPolicy,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    log_alpha: f64,
    target_entropy: f64,
    actor_adam: Adam,
    critic_adam: Adam,
    alpha_adam: Adam,
    replay: ReplayBuffer,
    rng: Rng,
    last_steps: u64,
    updates: u64,
}

impl SacAgent {
    /// `init_rng` draws the network parameters; `rng` drives replay
    /// sampling and reparameterization noise during updates.
    pub fn new(spec: &EnvSpec, cfg: SacConfig, init_rng: &mut Rng, rng: Rng) -> Result<Self> {
        cfg.validate()?;
        let d_s = spec.state_dim;
        let d_a = spec.action_dim;
        let policy = SacPolicy::new(d_s, spec, cfg.hidden, init_rng)?;
        let qspec = MlpSpec::two_hidden(d_s + d_a, cfg.hidden, 1);
        let q1 = Mlp::init_with(&qspec, init_rng)?;
        let q2 = Mlp::init_with(&qspec, init_rng)?;
        let actor_adam = Adam::for_nets(&[&policy.actor], AdamConfig::with_lr(cfg.actor_lr));
        let critic_adam = Adam::for_nets(&[&q1, &q2], AdamConfig::with_lr(cfg.critic_lr));
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            policy,
            log_alpha: cfg.init_alpha.ln(),
            target_entropy: cfg.target_entropy.unwrap_or(-(d_a as f64)),
            actor_adam,
            critic_adam,
            alpha_adam: Adam::new(1, AdamConfig::with_lr(cfg.alpha_lr)),
            replay: ReplayBuffer::new(cfg.buffer_capacity, d_s, d_a)?,
            rng,
            cfg,
            last_steps: 0,
            updates: 0,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn critics(&self) -> [&Mlp; 4] {
        [&self.q1, &self.q2, &self.q1_target, &self.q2_target]
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Flat copy of every trainable parameter, for equality checks.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.policy.actor.params_flat();
        for q in self.critics() {
            v.extend(q.params_flat());
        }
        v.push(self.log_alpha);
        v
    }

    /// One gradient step on a sampled batch.
    pub fn update(&mut self, batch: &SacBatch) -> Result<LossReport> {
        let n = batch.len();
        let d_a = self.policy.d_a();
        let alpha = self.alpha();
        let mut next_noise = Matrix::zeros(n, d_a);
        next_noise.as_mut_slice().iter_mut().for_each(|e| *e = self.rng.normal());
        let (closs, [g1, g2]) = critic_losses_and_grads(
            &self.policy,
            &self.q1,
            &self.q2,
            &self.q1_target,
            &self.q2_target,
            alpha,
            self.cfg.gamma,
            batch,
            &next_noise,
        )?;
        self.critic_adam.step(&mut [&mut self.q1, &mut self.q2], &[&g1, &g2])?;

        let mut noise = Matrix::zeros(n, d_a);
        noise.as_mut_slice().iter_mut().for_each(|e| *e = self.rng.normal());
        let (aloss, ga, mean_logp) =
            actor_loss_and_grads(&self.policy, &self.q1, &self.q2, alpha, &batch.states, &noise)?;
        self.actor_adam.step_one(&mut self.policy.actor, &ga)?;

        let (tloss, tgrad) = alpha_loss_and_grad(self.log_alpha, mean_logp, self.target_entropy);
        let mut la = [self.log_alpha];
        self.alpha_adam.step_flat(&mut la, &[tgrad])?;
        self.log_alpha = la[0];

        self.q1_target.soft_update_from(&self.q1, self.cfg.tau)?;
        self.q2_target.soft_update_from(&self.q2, self.cfg.tau)?;
        self.updates += 1;

        let values = [
            ("critic1", closs[0]),
            ("critic2", closs[1]),
            ("actor", aloss),
            ("temperature", tloss),
            ("alpha", self.alpha()),
            ("entropy", -mean_logp),
        ];
        if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Training(format!(
                "sac {name} is {v} after {} updates (alpha {}, batch {n})",
                self.updates,
                self.alpha()
            )));
        }
        Ok(LossReport {
            updates: self.updates,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        })
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(SAC_MAGIC).u32(SAC_FORMAT_VERSION);
        enc.vec(&self.policy.low).vec(&self.policy.high);
        enc.mlp(&self.policy.actor);
        for q in self.critics() {
            enc.mlp(q);
        }
        enc.f64(self.log_alpha).f64(self.target_entropy);
        enc.adam(&self.actor_adam).adam(&self.critic_adam).adam(&self.alpha_adam);
        enc.rng_state(&self.rng.state()).u64(self.last_steps).u64(self.updates);
    }

    /// Restores a saved agent. The replay buffer starts empty.
    pub fn decode(dec: &mut Decoder<'_>, cfg: SacConfig) -> Result<Self> {
        dec.expect_magic(SAC_MAGIC)?;
        let v = dec.u32()?;
        if v != SAC_FORMAT_VERSION {
            return Err(Error::Format(format!("sac format version {v}")));
        }
        let low = dec.vec()?;
        let high = dec.vec()?;
        let actor = dec.mlp()?;
        let q1 = dec.mlp()?;
        let q2 = dec.mlp()?;
        let q1_target = dec.mlp()?;
        let q2_target = dec.mlp()?;
        let log_alpha = dec.f64()?;
        let target_entropy = dec.f64()?;
        let actor_adam = dec.adam()?;
        let critic_adam = dec.adam()?;
        let alpha_adam = dec.adam()?;
        let rng = Rng::from_state(dec.rng_state()?);
        let last_steps = dec.u64()?;
        let updates = dec.u64()?;
        check_width("sac bounds", low.len(), high.len())?;
        check_width("sac actor output", 2 * low.len(), actor.output_dim())?;
        let d_s = actor.input_dim();
        let d_a = low.len();
        Ok(Self {
            replay: ReplayBuffer::new(cfg.buffer_capacity, d_s, d_a)?,
            cfg,
            policy: SacPolicy { actor, low, high },
            q1,
            q2,
            q1_target,
            q2_target,
            log_alpha,
            target_entropy,
            actor_adam,
            critic_adam,
            alpha_adam,
            rng,
            last_steps,
            updates,
        })
    }
}

impl Learner for SacAgent {
    type Policy = SacPolicy;

    fn policy(&self) -> &SacPolicy {
        &self.policy
    }

    fn begin(&mut self, _workers: usize) -> Result<()> {
        Ok(())
    }

    fn observe(&mut self, _worker: usize, state: &[f64], decision: &Decision, result: &StepResult) -> Result<()> {
        let terminal = matches!(result.end, EndTag::Hazard | EndTag::Success);
        self.replay
            .push(state, &decision.action, result.reward, &result.state, terminal)
    }

    fn after_tick(&mut self, total_steps: u64) -> Result<Option<LossReport>> {
        let mut report = None;
        for step in self.last_steps + 1..=total_steps {
            if step < self.cfg.update_after || step % self.cfg.update_every != 0 {
                continue;
            }
            if self.replay.len() < self.cfg.batch_size {
                continue;
            }
            for _ in 0..self.cfg.gradient_steps {
                let batch = self.replay.sample(self.cfg.batch_size, &mut self.rng)?;
                report = Some(self.update(&batch)?);
            }
        }
        self.last_steps = total_steps;
        Ok(report)
    }
}
