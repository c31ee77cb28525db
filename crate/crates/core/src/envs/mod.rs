//! Hazard-terminating toy environments and the vectorized runner.
//!
//! All environments integrate with fixed-step explicit Euler and draw any
//! disturbance from their own seeded stream, so a trajectory is a pure
//! function of (initial seed, actions).

mod cliff;
mod grid;
mod pole;
mod vec;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::EndTag;
use crate::numeric::Rng;

pub use cliff::{CliffCorridor, CliffParams};
pub use grid::{grid_optimal_return, snap_action, GridHazard, GridParams, Move};
pub use pole::{PoleParams, TiltPole};
pub use vec::{run_episode, vec_run, EpisodeRecord, RunObserver, RunOptions, RunSummary, Worker};

/// Static description of an environment, echoed into every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_steps: usize,
    pub hazard: String,
    /// Every dynamics constant, by name.
    pub constants: BTreeMap<String, f64>,
}

impl EnvSpec {
    /// Clamps `action` into bounds; the flag reports whether anything moved.
    pub fn clip_action(&self, action: &[f64]) -> (Vec<f64>, bool) {
        let mut clipped = false;
        let out = action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| {
                let c = a.clamp(lo, hi);
                clipped |= c != a;
                c
            })
            .collect();
        (out, clipped)
    }

    pub(crate) fn check_action(&self, action: &[f64]) -> Result<()> {
        if action.len() != self.action_dim {
            return Err(Error::shape("env action", self.action_dim, action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Env("non-finite action".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: Vec<f64>,
    pub reward: f64,
    pub end: EndTag,
    /// The action was outside the bounds and got clipped.
    pub action_clipped: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    /// Starts a new episode and returns its first observation.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
    /// Current observation.
    fn state(&self) -> Vec<f64>;
}

/// Environment selection plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    CliffCorridor(CliffParams),
    TiltPole(PoleParams),
    GridHazard(GridParams),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::CliffCorridor(CliffParams::default())
    }
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::CliffCorridor(_) => "cliff_corridor",
            EnvConfig::TiltPole(_) => "tilt_pole",
            EnvConfig::GridHazard(_) => "grid_hazard",
        }
    }

    /// Default parameters for an environment name.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "cliff_corridor" => EnvConfig::CliffCorridor(CliffParams::default()),
            "tilt_pole" => EnvConfig::TiltPole(PoleParams::default()),
            "grid_hazard" => EnvConfig::GridHazard(GridParams::default()),
            other => return Err(Error::Config(format!("unknown environment `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::CliffCorridor(p) => p.validate(),
            EnvConfig::TiltPole(p) => p.validate(),
            EnvConfig::GridHazard(p) => p.validate(),
        }
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            EnvConfig::CliffCorridor(p) => p.spec(),
            EnvConfig::TiltPole(p) => p.spec(),
            EnvConfig::GridHazard(p) => p.spec(),
        }
    }

    /// Builds an instance whose disturbances come from `rng`.
    pub fn build(&self, rng: Rng) -> Result<Box<dyn Env>> {
        self.validate()?;
        Ok(match self {
            EnvConfig::CliffCorridor(p) => Box::new(CliffCorridor::new(p.clone(), rng)),
            EnvConfig::TiltPole(p) => Box::new(TiltPole::new(p.clone(), rng)),
            EnvConfig::GridHazard(p) => Box::new(GridHazard::new(p.clone(), rng)),
        })
    }
}

pub(crate) fn require(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what.to_string()))
    }
}
