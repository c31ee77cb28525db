use crate::error::{check_width, Error, Result};
use crate::numeric::{Matrix, Rng};

/// A frozen mini-batch of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SacBatch {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    /// True when the episode really ended here (not a horizon cut).
    pub terminals: Vec<bool>,
}

impl SacBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    d_s: usize,
    d_a: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<bool>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, d_s: usize, d_a: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            d_s,
            d_a,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            terminals: Vec::new(),
            len: 0,
            head: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, state: &[f64], action: &[f64], reward: f64, next_state: &[f64], terminal: bool) -> Result<()> {
        check_width("replay state", self.d_s, state.len())?;
        check_width("replay action", self.d_a, action.len())?;
        check_width("replay next state", self.d_s, next_state.len())?;
        if self.len < self.capacity {
            self.states.extend_from_slice(state);
            self.actions.extend_from_slice(action);
            self.rewards.push(reward);
            self.next_states.extend_from_slice(next_state);
            self.terminals.push(terminal);
            self.len += 1;
        } else {
            let i = self.head;
            self.states[i * self.d_s..(i + 1) * self.d_s].copy_from_slice(state);
            self.actions[i * self.d_a..(i + 1) * self.d_a].copy_from_slice(action);
            self.rewards[i] = reward;
            self.next_states[i * self.d_s..(i + 1) * self.d_s].copy_from_slice(next_state);
            self.terminals[i] = terminal;
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    /// Gathers the given slots, in order.
    pub fn gather(&self, idx: &[usize]) -> Result<SacBatch> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len) {
            return Err(Error::Usage(format!("replay index {bad} out of {}", self.len)));
        }
        let rows = |buf: &[f64], w: usize| Matrix::from_rows(w, idx.iter().map(|&i| &buf[i * w..(i + 1) * w]));
        Ok(SacBatch {
            states: rows(&self.states, self.d_s)?,
            actions: rows(&self.actions, self.d_a)?,
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: rows(&self.next_states, self.d_s)?,
            terminals: idx.iter().map(|&i| self.terminals[i]).collect(),
        })
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<SacBatch> {
        if self.len == 0 {
            return Err(Error::Usage("cannot sample from an empty replay buffer".into()));
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(self.len)).collect();
        self.gather(&idx)
    }
}
