//! Deterministic evaluation of a saved checkpoint.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Result};
use fema_core::agents::{evaluate, EvalEpisode};
use fema_core::envs::EnvConfig;
use fema_core::numeric::Rng;
use fema_core::selection::StochasticPolicy;

use crate::checkpoint::{self, AgentState};
use crate::run::streams;

/// Loads `ckpt` and rolls out its mean action on `env` for `episodes`
/// episodes. The memory is never consulted here.
pub fn eval_checkpoint(ckpt: &Path, env: Option<&str>, episodes: usize, seed: u64) -> Result<Vec<EvalEpisode>> {
    let cp = checkpoint::load(ckpt)?;
    let env_cfg = match env {
        None => cp.config.env.clone(),
        Some(name) if name == cp.config.env.name() => cp.config.env.clone(),
        Some(name) => EnvConfig::by_name(name)?,
    };
    let spec = env_cfg.spec();
    let mut env = env_cfg.build(Rng::derive(seed, streams::EVAL_ENV))?;
    let mut run = |p: &dyn DynPolicy| -> Result<Vec<EvalEpisode>> {
        if p.state_dim() != spec.state_dim || p.action_dim() != spec.action_dim {
            bail!(
                "checkpoint policy is {}x{} (state x action) but `{}` is {}x{}",
                p.state_dim(),
                p.action_dim(),
                spec.name,
                spec.state_dim,
                spec.action_dim
            );
        }
        Ok(p.eval(env.as_mut(), episodes)?)
    };
    match &cp.agent {
        AgentState::Sac(a) => run(a.policy_ref()),
        AgentState::Ppo(a) => run(a.policy_ref()),
    }
}

/// Object-safe view over the concrete policies.
trait DynPolicy {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn eval(&self, env: &mut dyn fema_core::envs::Env, episodes: usize) -> fema_core::Result<Vec<EvalEpisode>>;
}

impl<P: StochasticPolicy> DynPolicy for P {
    fn state_dim(&self) -> usize {
        StochasticPolicy::state_dim(self)
    }
    fn action_dim(&self) -> usize {
        StochasticPolicy::action_dim(self)
    }
    fn eval(&self, env: &mut dyn fema_core::envs::Env, episodes: usize) -> fema_core::Result<Vec<EvalEpisode>> {
        evaluate(self, env, episodes)
    }
}

trait PolicyRef {
    fn policy_ref(&self) -> &dyn DynPolicy;
}

impl<L: fema_core::agents::Learner> PolicyRef for L {
    fn policy_ref(&self) -> &dyn DynPolicy {
        self.policy()
    }
}

/// Writes the per-episode table as CSV.
pub fn write_table<W: Write>(out: W, episodes: &[EvalEpisode]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "return", "length", "end"])?;
    for e in episodes {
        w.write_record([
            e.episode.to_string(),
            format!("{:.6}", e.ret),
            e.length.to_string(),
            e.end.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
