//! Deterministic grid with hazard cells and a goal.
//!
//! Positions are integer cells carried as floats. A continuous action is
//! snapped to one of four moves by its larger-magnitude component (ties go
//! to x, and a zero component counts as positive). Moves off the grid
//! leave the agent in place.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{require, Env, EnvSpec, StepResult};
use crate::error::Result;
use crate::memory::EndTag;
use crate::numeric::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridParams {
    pub size: i64,
    pub start: [i64; 2],
    pub goal: [i64; 2],
    pub hazards: Vec<[i64; 2]>,
    pub step_cost: f64,
    pub goal_reward: f64,
    pub hazard_reward: f64,
    pub max_steps: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            size: 5,
            start: [0, 0],
            goal: [4, 4],
            hazards: vec![[1, 1], [2, 3], [3, 2]],
            step_cost: 0.04,
            goal_reward: 1.0,
            hazard_reward: -1.0,
            max_steps: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Move {
    PlusX,
    MinusX,
    PlusY,
    MinusY,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::PlusX, Move::MinusX, Move::PlusY, Move::MinusY];

    pub fn delta(self) -> [i64; 2] {
        match self {
            Move::PlusX => [1, 0],
            Move::MinusX => [-1, 0],
            Move::PlusY => [0, 1],
            Move::MinusY => [0, -1],
        }
    }

    /// A continuous action that snaps to this move.
    pub fn action(self) -> [f64; 2] {
        let [dx, dy] = self.delta();
        [dx as f64, dy as f64]
    }
}

pub fn snap_action(a: &[f64]) -> Move {
    if a[0].abs() >= a[1].abs() {
        if a[0] >= 0.0 {
            Move::PlusX
        } else {
            Move::MinusX
        }
    } else if a[1] >= 0.0 {
        Move::PlusY
    } else {
        Move::MinusY
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<()> {
        require(self.size >= 2, "grid size must be at least 2")?;
        let inside = |c: &[i64; 2]| (0..self.size).contains(&c[0]) && (0..self.size).contains(&c[1]);
        require(inside(&self.start) && inside(&self.goal), "grid start and goal must be on the grid")?;
        require(self.hazards.iter().all(inside), "grid hazards must be on the grid")?;
        require(
            !self.hazards.contains(&self.start) && !self.hazards.contains(&self.goal),
            "grid start and goal cannot be hazards",
        )?;
        require(self.start != self.goal, "grid start and goal must differ")?;
        require(self.max_steps >= 1, "grid max_steps must be at least 1")
    }

    pub fn spec(&self) -> EnvSpec {
        let constants = BTreeMap::from([
            ("size".to_string(), self.size as f64),
            ("step_cost".to_string(), self.step_cost),
            ("goal_reward".to_string(), self.goal_reward),
            ("hazard_reward".to_string(), self.hazard_reward),
        ]);
        EnvSpec {
            name: "grid_hazard".into(),
            state_dim: 2,
            action_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            max_steps: self.max_steps,
            hazard: format!("cell in {:?}", self.hazards),
            constants,
        }
    }

    /// Deterministic transition: next cell, reward, terminal tag (ignoring
    /// the time limit).
    pub fn transition(&self, cell: [i64; 2], mv: Move) -> ([i64; 2], f64, EndTag) {
        let [dx, dy] = mv.delta();
        let mut next = [cell[0] + dx, cell[1] + dy];
        if !(0..self.size).contains(&next[0]) || !(0..self.size).contains(&next[1]) {
            next = cell;
        }
        if self.hazards.contains(&next) {
            (next, self.hazard_reward, EndTag::Hazard)
        } else if next == self.goal {
            (next, self.goal_reward, EndTag::Success)
        } else {
            (next, -self.step_cost, EndTag::None)
        }
    }
}

/// Best undiscounted return from `start` within `max_steps`, by dynamic
/// programming over (cell, steps left).
pub fn grid_optimal_return(p: &GridParams) -> f64 {
    let n = p.size as usize;
    let idx = |c: [i64; 2]| c[0] as usize * n + c[1] as usize;
    let mut value = vec![0.0; n * n];
    for _ in 0..p.max_steps {
        let mut next = vec![f64::NEG_INFINITY; n * n];
        for x in 0..p.size {
            for y in 0..p.size {
                let c = [x, y];
                for mv in Move::ALL {
                    let (c2, r, end) = p.transition(c, mv);
                    let v = if end.is_terminal() { r } else { r + value[idx(c2)] };
                    next[idx(c)] = next[idx(c)].max(v);
                }
            }
        }
        value = next;
    }
    value[idx(p.start)]
}

pub struct GridHazard {
    params: GridParams,
    spec: EnvSpec,
    cell: [i64; 2],
    t: usize,
}

impl GridHazard {
    /// The grid is deterministic; `rng` is accepted for interface parity.
    pub fn new(params: GridParams, _rng: Rng) -> Self {
        let spec = params.spec();
        let cell = params.start;
        Self {
            params,
            spec,
            cell,
            t: 0,
        }
    }

    pub fn cell(&self) -> [i64; 2] {
        self.cell
    }
}

impl Env for GridHazard {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        self.cell = self.params.start;
        self.t = 0;
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        self.spec.check_action(action)?;
        let (a, action_clipped) = self.spec.clip_action(action);
        let (next, reward, mut end) = self.params.transition(self.cell, snap_action(&a));
        self.cell = next;
        self.t += 1;
        if end == EndTag::None && self.t >= self.params.max_steps {
            end = EndTag::TimeLimit;
        }
        Ok(StepResult {
            state: self.state(),
            reward,
            end,
            action_clipped,
        })
    }

    fn state(&self) -> Vec<f64> {
        vec![self.cell[0] as f64, self.cell[1] as f64]
    }
}
