//! Lockstep runner over several environment workers.
//!
//! Every tick, each active worker picks an action (through the memory hook
//! when one is attached) and steps its own environment; workers run in
//! parallel because they share nothing mutable. The results are then
//! folded in worker order: the learner observes them, finished episodes
//! are reported and failure tails are staged. A memory update runs at the
//! end of a tick once enough events are pending and the learner allows a
//! swap. Step budgets are honored exactly, so the last tick may only move
//! the first few workers.

use rayon::prelude::*;
use serde::Serialize;

use super::{Env, StepResult};
use crate::agents::{decide, FemaHook, Learner, LossReport};
use crate::error::{check_width, Error, Result};
use crate::memory::{EndTag, Transition, UpdateReport};
use crate::numeric::Rng;
use crate::selection::{Decision, StochasticPolicy};

/// One environment instance with its own action stream and episode state.
pub struct Worker {
    env: Box<dyn Env>,
    rng: Rng,
    state: Vec<f64>,
    episode: Vec<Transition>,
    ep_return: f64,
    fallbacks: usize,
    influenced: usize,
    clipped: usize,
}

impl Worker {
    /// Resets `env` and takes ownership; `rng` drives action sampling.
    pub fn new(mut env: Box<dyn Env>, rng: Rng) -> Self {
        let state = env.reset();
        Self {
            env,
            rng,
            state,
            episode: Vec::new(),
            ep_return: 0.0,
            fallbacks: 0,
            influenced: 0,
            clipped: 0,
        }
    }

    pub fn env(&self) -> &dyn Env {
        self.env.as_ref()
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn episode_len(&self) -> usize {
        self.episode.len()
    }

    fn act<P: StochasticPolicy + ?Sized>(&mut self, policy: &P, hook: Option<&FemaHook>) -> Result<(Decision, StepResult)> {
        let decision = decide(policy, hook, &self.state, &mut self.rng)?;
        let result = self.env.step(&decision.action)?;
        if !result.reward.is_finite() {
            return Err(Error::Env(format!("{} produced reward {}", self.env.spec().name, result.reward)));
        }
        Ok((decision, result))
    }
}

/// Summary of one finished episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub worker: usize,
    /// Environment steps taken by all workers when the episode ended.
    pub step: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub length: usize,
    pub end: EndTag,
    /// Steps whose action was clipped into bounds.
    pub clipped_actions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fema: Option<EpisodeFema>,
}

/// Memory diagnostics attached to an episode when the hook is active.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeFema {
    pub fallback_rate: f64,
    pub influenced_steps: usize,
    pub staged: bool,
    pub memory_records: usize,
    pub memory_events: usize,
    pub pending: usize,
}

/// Callbacks for logging and evaluation. All have no-op defaults.
pub trait RunObserver<L: ?Sized> {
    fn on_episode(&mut self, _record: &EpisodeRecord) -> Result<()> {
        Ok(())
    }
    fn on_decision(&mut self, _step: u64, _worker: usize, _decision: &Decision) -> Result<()> {
        Ok(())
    }
    fn on_loss(&mut self, _step: u64, _report: &LossReport) -> Result<()> {
        Ok(())
    }
    fn on_memory_update(&mut self, _step: u64, _report: &UpdateReport) -> Result<()> {
        Ok(())
    }
    /// End of every tick, after learner and memory updates.
    fn on_tick(&mut self, _step: u64, _learner: &L) -> Result<()> {
        Ok(())
    }
}

impl<L: ?Sized> RunObserver<L> for () {}

/// Counters that persist across calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Environment steps taken so far.
    pub step: u64,
    /// Episodes finished so far.
    pub episodes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub memory_updates: usize,
}

fn check_workers(workers: &[Worker]) -> Result<()> {
    let Some(first) = workers.first() else {
        return Err(Error::Config("at least one worker is required".into()));
    };
    let spec = first.env.spec();
    for w in &workers[1..] {
        if w.env.spec() != spec {
            return Err(Error::Config(format!(
                "workers mix environment specs `{}` and `{}`",
                spec.name,
                w.env.spec().name
            )));
        }
    }
    Ok(())
}

/// One lockstep tick over `workers[..active]`; finished episodes are
/// appended to `summary`.
fn tick<L: Learner, O: RunObserver<L> + ?Sized>(
    workers: &mut [Worker],
    active: usize,
    learner: &mut L,
    hook: Option<&mut FemaHook>,
    clock: &mut RunOptions,
    observer: &mut O,
    summary: &mut RunSummary,
) -> Result<()> {
    let outcomes: Vec<Result<(Decision, StepResult)>> = {
        let policy = learner.policy();
        let h = hook.as_deref();
        if active > 1 {
            workers[..active].par_iter_mut().map(|w| w.act(policy, h)).collect()
        } else {
            workers[..active].iter_mut().map(|w| w.act(policy, h)).collect()
        }
    };
    let base_step = clock.step;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let (decision, result) = outcome?;
        let step = base_step + i as u64 + 1;
        observer.on_decision(step, i, &decision)?;
        let w = &mut workers[i];
        learner.observe(i, &w.state, &decision, &result)?;
        w.ep_return += result.reward;
        w.fallbacks += decision.fallback as usize;
        w.influenced += decision.influenced() as usize;
        w.clipped += result.action_clipped as usize;
        w.episode.push(Transition {
            state: std::mem::take(&mut w.state),
            action: decision.action,
            reward: result.reward,
            next_state: result.state.clone(),
            end: result.end,
        });
        w.state = result.state;
        if result.end.is_terminal() {
            let episode_id = clock.episodes;
            clock.episodes += 1;
            let mut fema = None;
            if let Some(h) = hook.as_deref() {
                let staged = h.record_episode(&w.episode, episode_id, step)?;
                fema = Some(EpisodeFema {
                    fallback_rate: w.fallbacks as f64 / w.episode.len() as f64,
                    influenced_steps: w.influenced,
                    staged,
                    memory_records: h.memory.record_count(),
                    memory_events: h.memory.event_count(),
                    pending: h.memory.pending_count(),
                });
            }
            let record = EpisodeRecord {
                episode: episode_id,
                worker: i,
                step,
                ret: w.ep_return,
                length: w.episode.len(),
                end: result.end,
                clipped_actions: w.clipped,
                fema,
            };
            observer.on_episode(&record)?;
            summary.episodes.push(record);
            w.episode.clear();
            w.ep_return = 0.0;
            w.fallbacks = 0;
            w.influenced = 0;
            w.clipped = 0;
            w.state = w.env.reset();
        }
    }
    clock.step += active as u64;
    summary.steps += active as u64;
    if let Some(report) = learner.after_tick(clock.step)? {
        observer.on_loss(clock.step, &report)?;
    }
    if let Some(h) = hook {
        if learner.swap_allowed() {
            if let Some(report) = h.update_if_due()? {
                summary.memory_updates += 1;
                observer.on_memory_update(clock.step, &report)?;
            }
        }
    }
    observer.on_tick(clock.step, learner)?;
    Ok(())
}

/// Runs exactly `steps` environment steps across `workers`.
pub fn vec_run<L: Learner, O: RunObserver<L> + ?Sized>(
    workers: &mut [Worker],
    learner: &mut L,
    mut hook: Option<&mut FemaHook>,
    clock: &mut RunOptions,
    steps: u64,
    observer: &mut O,
) -> Result<RunSummary> {
    check_workers(workers)?;
    check_width(
        "policy state",
        learner.policy().state_dim(),
        workers[0].env.spec().state_dim,
    )?;
    let mut summary = RunSummary::default();
    let end = clock.step + steps;
    while clock.step < end {
        let active = ((end - clock.step) as usize).min(workers.len());
        tick(workers, active, learner, hook.as_deref_mut(), clock, observer, &mut summary)?;
    }
    Ok(summary)
}

/// Runs `worker` until its current episode ends.
pub fn run_episode<L: Learner, O: RunObserver<L> + ?Sized>(
    worker: &mut Worker,
    learner: &mut L,
    mut hook: Option<&mut FemaHook>,
    clock: &mut RunOptions,
    observer: &mut O,
) -> Result<EpisodeRecord> {
    let workers = std::slice::from_mut(worker);
    check_width(
        "policy state",
        learner.policy().state_dim(),
        workers[0].env.spec().state_dim,
    )?;
    let mut summary = RunSummary::default();
    loop {
        tick(workers, 1, learner, hook.as_deref_mut(), clock, observer, &mut summary)?;
        if let Some(record) = summary.episodes.pop() {
            return Ok(record);
        }
    }
}
