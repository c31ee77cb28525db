//! Torque-driven inverted pendulum that must stay near upright.
//!
//! State `(theta, omega)`, action `u` in `[-1, 1]`, torque
//! `tau = max_torque * u`. One step:
//!
//! ```text
//! theta' = theta + dt * omega
//! omega' = omega + dt * (g / l * sin(theta) - damping * omega + tau / (m * l^2)) + noise * xi
//! ```
//!
//! Reward is `1 - |theta'| / theta_fail`; `|theta'| >= theta_fail` is a
//! hazard.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{require, Env, EnvSpec, StepResult};
use crate::error::{check_width, Result};
use crate::memory::EndTag;
use crate::numeric::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoleParams {
    pub dt: f64,
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub damping: f64,
    pub max_torque: f64,
    pub theta_fail: f64,
    pub noise: f64,
    pub init_spread: f64,
    pub max_steps: usize,
}

impl Default for PoleParams {
    fn default() -> Self {
        Self {
            dt: 0.02,
            gravity: 9.81,
            length: 1.0,
            mass: 1.0,
            damping: 0.1,
            max_torque: 10.0,
            theta_fail: 0.8,
            noise: 0.0,
            init_spread: 0.05,
            max_steps: 500,
        }
    }
}

impl PoleParams {
    pub fn validate(&self) -> Result<()> {
        require(self.dt > 0.0 && self.dt.is_finite(), "pole dt must be positive")?;
        require(self.length > 0.0 && self.mass > 0.0, "pole length and mass must be positive")?;
        require(self.theta_fail > 0.0, "pole theta_fail must be positive")?;
        require(self.noise >= 0.0, "pole noise must be non-negative")?;
        require(
            self.init_spread >= 0.0 && self.init_spread < self.theta_fail,
            "pole init_spread must be below theta_fail",
        )?;
        require(self.max_steps >= 1, "pole max_steps must be at least 1")
    }

    pub fn spec(&self) -> EnvSpec {
        let constants = BTreeMap::from([
            ("dt".to_string(), self.dt),
            ("gravity".to_string(), self.gravity),
            ("length".to_string(), self.length),
            ("mass".to_string(), self.mass),
            ("damping".to_string(), self.damping),
            ("max_torque".to_string(), self.max_torque),
            ("theta_fail".to_string(), self.theta_fail),
            ("noise".to_string(), self.noise),
            ("init_spread".to_string(), self.init_spread),
        ]);
        EnvSpec {
            name: "tilt_pole".into(),
            state_dim: 2,
            action_dim: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            max_steps: self.max_steps,
            hazard: format!("|theta| >= {}", self.theta_fail),
            constants,
        }
    }
}

pub struct TiltPole {
    params: PoleParams,
    spec: EnvSpec,
    rng: Rng,
    state: [f64; 2],
    t: usize,
}

impl TiltPole {
    pub fn new(params: PoleParams, rng: Rng) -> Self {
        let spec = params.spec();
        Self {
            params,
            spec,
            rng,
            state: [0.0; 2],
            t: 0,
        }
    }

    pub fn reset_to(&mut self, state: &[f64]) -> Result<()> {
        check_width("pole state", 2, state.len())?;
        self.state.copy_from_slice(state);
        self.t = 0;
        Ok(())
    }
}

impl Env for TiltPole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        let w = self.params.init_spread;
        self.state = [self.rng.uniform(-w, w), 0.0];
        self.t = 0;
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        self.spec.check_action(action)?;
        let (a, action_clipped) = self.spec.clip_action(action);
        let p = &self.params;
        let [theta, omega] = self.state;
        let xi = self.rng.normal();
        let tau = p.max_torque * a[0];
        let alpha = p.gravity / p.length * theta.sin() - p.damping * omega
            + tau / (p.mass * p.length * p.length);
        let nt = theta + p.dt * omega;
        let nw = omega + p.dt * alpha + p.noise * xi;
        self.state = [nt, nw];
        self.t += 1;
        let end = if nt.abs() >= p.theta_fail {
            EndTag::Hazard
        } else if self.t >= p.max_steps {
            EndTag::TimeLimit
        } else {
            EndTag::None
        };
        Ok(StepResult {
            state: self.state.to_vec(),
            reward: 1.0 - nt.abs() / p.theta_fail,
            end,
            action_clipped,
        })
    }

    fn state(&self) -> Vec<f64> {
        self.state.to_vec()
    }
}
