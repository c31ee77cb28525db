//! Point mass running down a corridor with cliffs on both sides.
//!
//! State `(x, y, vx, vy)`, action `(ax, ay)` in `[-1, 1]^2`. One step:
//!
//! ```text
//! x'  = x + dt * vx
//! y'  = y + dt * vy
//! vx' = vx + dt * (forward_gain * ax - damping * vx)
//! vy' = vy + dt * (lateral_gain * ay - damping * vy) + noise * xi,  xi ~ N(0, 1)
//! ```
//!
//! `x'` is clamped to `x_max` (with `vx'` floored at zero there). Reward is
//! `vx' - control_cost * |a|^2`. The episode ends with a hazard when
//! `|y'| >= half_width` or `x' < x_min`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{require, Env, EnvSpec, StepResult};
use crate::error::{check_width, Result};
use crate::memory::EndTag;
use crate::numeric::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliffParams {
    pub dt: f64,
    pub damping: f64,
    pub forward_gain: f64,
    pub lateral_gain: f64,
    /// Standard deviation of the lateral velocity kick per step.
    pub noise: f64,
    pub control_cost: f64,
    pub half_width: f64,
    pub x_min: f64,
    pub x_max: f64,
    /// Initial `y` is uniform in `[-init_spread, init_spread]`.
    pub init_spread: f64,
    pub max_steps: usize,
}

impl Default for CliffParams {
    fn default() -> Self {
        Self {
            dt: 0.05,
            damping: 1.0,
            forward_gain: 0.5,
            lateral_gain: 12.0,
            noise: 0.25,
            control_cost: 0.01,
            half_width: 1.0,
            x_min: -0.5,
            x_max: 10.0,
            init_spread: 0.05,
            max_steps: 400,
        }
    }
}

impl CliffParams {
    pub fn validate(&self) -> Result<()> {
        require(self.dt > 0.0 && self.dt.is_finite(), "cliff dt must be positive")?;
        require(self.damping >= 0.0, "cliff damping must be non-negative")?;
        require(self.noise >= 0.0, "cliff noise must be non-negative")?;
        require(self.half_width > 0.0, "cliff half_width must be positive")?;
        require(self.x_min < 0.0 && self.x_max > 0.0, "cliff start must lie inside [x_min, x_max]")?;
        require(
            self.init_spread >= 0.0 && self.init_spread < self.half_width,
            "cliff init_spread must lie inside the corridor",
        )?;
        require(self.max_steps >= 1, "cliff max_steps must be at least 1")
    }

    pub fn spec(&self) -> EnvSpec {
        let constants = BTreeMap::from([
            ("dt".to_string(), self.dt),
            ("damping".to_string(), self.damping),
            ("forward_gain".to_string(), self.forward_gain),
            ("lateral_gain".to_string(), self.lateral_gain),
            ("noise".to_string(), self.noise),
            ("control_cost".to_string(), self.control_cost),
            ("half_width".to_string(), self.half_width),
            ("x_min".to_string(), self.x_min),
            ("x_max".to_string(), self.x_max),
            ("init_spread".to_string(), self.init_spread),
        ]);
        EnvSpec {
            name: "cliff_corridor".into(),
            state_dim: 4,
            action_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            max_steps: self.max_steps,
            hazard: format!("|y| >= {} or x < {}", self.half_width, self.x_min),
            constants,
        }
    }
}

pub struct CliffCorridor {
    params: CliffParams,
    spec: EnvSpec,
    rng: Rng,
    state: [f64; 4],
    t: usize,
}

impl CliffCorridor {
    pub fn new(params: CliffParams, rng: Rng) -> Self {
        let spec = params.spec();
        Self {
            params,
            spec,
            rng,
            state: [0.0; 4],
            t: 0,
        }
    }

    pub fn params(&self) -> &CliffParams {
        &self.params
    }

    /// Places the mass at `state` with a fresh step counter.
    pub fn reset_to(&mut self, state: &[f64]) -> Result<()> {
        check_width("cliff state", 4, state.len())?;
        self.state.copy_from_slice(state);
        self.t = 0;
        Ok(())
    }
}

impl Env for CliffCorridor {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        let w = self.params.init_spread;
        let y = self.rng.uniform(-w, w);
        self.state = [0.0, y, 0.0, 0.0];
        self.t = 0;
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        self.spec.check_action(action)?;
        let (a, action_clipped) = self.spec.clip_action(action);
        let p = &self.params;
        let [x, y, vx, vy] = self.state;
        let xi = self.rng.normal();
        let mut nx = x + p.dt * vx;
        let ny = y + p.dt * vy;
        let mut nvx = vx + p.dt * (p.forward_gain * a[0] - p.damping * vx);
        let nvy = vy + p.dt * (p.lateral_gain * a[1] - p.damping * vy) + p.noise * xi;
        if nx > p.x_max {
            nx = p.x_max;
            nvx = nvx.min(0.0);
        }
        let reward = nvx - p.control_cost * (a[0] * a[0] + a[1] * a[1]);
        self.state = [nx, ny, nvx, nvy];
        self.t += 1;
        let end = if ny.abs() >= p.half_width || nx < p.x_min {
            EndTag::Hazard
        } else if self.t >= p.max_steps {
            EndTag::TimeLimit
        } else {
            EndTag::None
        };
        Ok(StepResult {
            state: self.state.to_vec(),
            reward,
            end,
            action_clipped,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.state.to_vec()
    }
}
