//! Compact SAC and PPO learners plus the memory hook that sits at their
//! action-selection point.
//!
//! A [`Learner`] exposes its current policy for acting and consumes the
//! executed transitions. The [`FemaHook`] owns the failure memory and the
//! embedding stack; when present, the runner routes every training-time
//! decision through [`select`](crate::selection::select) and stages the
//! tail of each hazard-terminated episode.

mod ppo;
mod replay;
mod sac;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::embedding::{EmbeddingConfig, EmbeddingStack};
use crate::envs::{Env, StepResult};
use crate::error::Result;
use crate::memory::{capture_failure, EndTag, FailureMemory, FemaConfig, MemoryDims, Transition, UpdateReport};
use crate::numeric::Rng;
use crate::selection::{plain_decision, select, Decision, StochasticPolicy};

pub use ppo::{gae, normalize_advantages, ppo_loss_and_grads, PpoAgent, PpoBatch, PpoConfig, PpoGrads, PpoLoss, PpoPolicy};
pub use replay::{ReplayBuffer, SacBatch};
pub use sac::{
    actor_loss_and_grads, alpha_loss_and_grad, critic_losses_and_grads, log1m_tanh_sq, SacAgent, SacConfig,
    SacPolicy, LOG_STD_MAX, LOG_STD_MIN,
};

/// Scalar diagnostics from one learner update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub updates: u64,
    pub values: BTreeMap<String, f64>,
}

pub trait Learner: Send {
    type Policy: StochasticPolicy;

    fn policy(&self) -> &Self::Policy;

    /// Called once before the first step with the number of workers.
    fn begin(&mut self, workers: usize) -> Result<()>;

    /// One executed step of `worker`: the state it acted in, what it did
    /// and what the environment returned.
    fn observe(&mut self, worker: usize, state: &[f64], decision: &Decision, result: &StepResult) -> Result<()>;

    /// End of a lockstep tick; `total_steps` counts every environment step
    /// so far. Returns a report when parameters changed.
    fn after_tick(&mut self, total_steps: u64) -> Result<Option<LossReport>>;

    /// Whether a memory generation swap may happen now. On-policy learners
    /// only allow it between rollout phases.
    fn swap_allowed(&self) -> bool {
        true
    }
}

/// Failure memory plus the embedding stack it is searched with.
#[derive(Debug)]
pub struct FemaHook {
    cfg: FemaConfig,
    emb_cfg: EmbeddingConfig,
    pub memory: FailureMemory,
    pub stack: EmbeddingStack,
    rng: Rng,
    /// Attach a selection trace to every decision.
    pub trace: bool,
}

impl FemaHook {
    /// `init_seed` seeds the stack parameters; `train_rng` drives the
    /// shuffling during memory updates.
    pub fn new(
        d_s: usize,
        d_a: usize,
        cfg: FemaConfig,
        emb_cfg: EmbeddingConfig,
        init_seed: u64,
        train_rng: Rng,
    ) -> Result<Self> {
        let stack = EmbeddingStack::new(d_s, d_a, &emb_cfg, init_seed)?;
        let memory = FailureMemory::new(cfg, MemoryDims::of(&stack))?;
        Ok(Self {
            cfg,
            emb_cfg,
            memory,
            stack,
            rng: train_rng,
            trace: false,
        })
    }

    pub fn config(&self) -> &FemaConfig {
        &self.cfg
    }

    pub fn embedding_config(&self) -> &EmbeddingConfig {
        &self.emb_cfg
    }

    pub fn train_rng(&self) -> &Rng {
        &self.rng
    }

    /// Reassembles a hook from restored parts.
    pub fn from_parts(
        cfg: FemaConfig,
        emb_cfg: EmbeddingConfig,
        memory: FailureMemory,
        stack: EmbeddingStack,
        train_rng: Rng,
    ) -> Self {
        Self {
            cfg,
            emb_cfg,
            memory,
            stack,
            rng: train_rng,
            trace: false,
        }
    }

    pub fn decide<P: StochasticPolicy + ?Sized>(&self, policy: &P, state: &[f64], rng: &mut Rng) -> Result<Decision> {
        select(state, policy, &self.memory, &self.stack, &self.cfg, rng, self.trace)
    }

    /// Captures and stages the failure tail of a finished episode.
    /// Returns whether an event was staged.
    pub fn record_episode(&self, episode: &[Transition], episode_id: u64, capture_step: u64) -> Result<bool> {
        match capture_failure(episode, &self.cfg, episode_id, capture_step)? {
            Some(event) => {
                self.memory.stage(event)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Runs the periodic update if `M` events are waiting.
    pub fn update_if_due(&mut self) -> Result<Option<UpdateReport>> {
        if !self.memory.is_due() {
            return Ok(None);
        }
        self.force_update().map(Some)
    }

    pub fn force_update(&mut self) -> Result<UpdateReport> {
        self.memory.update(&mut self.stack, &self.emb_cfg, &mut self.rng)
    }
}

/// Training-time action for one worker: through the hook if present,
/// otherwise a plain policy draw.
pub fn decide<P: StochasticPolicy + ?Sized>(
    policy: &P,
    hook: Option<&FemaHook>,
    state: &[f64],
    rng: &mut Rng,
) -> Result<Decision> {
    match hook {
        Some(h) => h.decide(policy, state, rng),
        None => plain_decision(policy, state, rng),
    }
}

/// Deterministic action: the squashed Gaussian mean.
pub fn greedy_action<P: StochasticPolicy + ?Sized>(policy: &P, state: &[f64]) -> Result<Vec<f64>> {
    Ok(policy.squash(&policy.head(state)?.mean))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalEpisode {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub length: usize,
    pub end: EndTag,
}

/// Rolls out the deterministic policy for `episodes` episodes, without
/// the memory.
pub fn evaluate<P: StochasticPolicy + ?Sized>(policy: &P, env: &mut dyn Env, episodes: usize) -> Result<Vec<EvalEpisode>> {
    let mut out = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let mut state = env.reset();
        let mut ret = 0.0;
        let mut length = 0;
        loop {
            let r = env.step(&greedy_action(policy, &state)?)?;
            ret += r.reward;
            length += 1;
            state = r.state;
            if r.end.is_terminal() {
                out.push(EvalEpisode {
                    episode,
                    ret,
                    length,
                    end: r.end,
                });
                break;
            }
        }
    }
    Ok(out)
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;
