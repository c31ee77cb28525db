//! Failure episodic memory.
//!
//! Hazard-terminated episodes leave their last `K` transitions behind as a
//! [`FailureEvent`], with the discounted return-to-termination of every
//! step. Events are staged into a pending queue and only become searchable
//! when [`FailureMemory::update`] runs: it fits the embedding stack on every
//! stored event, re-encodes all of them with the new parameters and
//! publishes one immutable [`Generation`] of per-transition records.
//!
//! Retrieval is an exact linear scan: records whose state code lies within
//! `epsilon` (Euclidean) of the query, then the `top_o` of those with the
//! lowest return, ties broken by record order (older first).

mod snapshot;

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingConfig, EmbeddingStack, RiskSample, TrainReport, TrainStatus};
use crate::error::{check_width, Error, Result};
use crate::numeric::{l2_distance, Matrix, Rng};

pub use snapshot::{SNAPSHOT_FORMAT_VERSION, SNAPSHOT_MAGIC};

/// How an episode step ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndTag {
    None,
    /// Entered a hazardous state: a failure.
    Hazard,
    /// Ran out of horizon.
    TimeLimit,
    /// Reached a goal; terminal but not a failure.
    Success,
}

impl EndTag {
    pub fn is_terminal(self) -> bool {
        self != EndTag::None
    }

    /// The serialized name.
    pub fn as_str(self) -> &'static str {
        match self {
            EndTag::None => "none",
            EndTag::Hazard => "hazard",
            EndTag::TimeLimit => "time_limit",
            EndTag::Success => "success",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            EndTag::None => 0,
            EndTag::Hazard => 1,
            EndTag::TimeLimit => 2,
            EndTag::Success => 3,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => EndTag::None,
            1 => EndTag::Hazard,
            2 => EndTag::TimeLimit,
            3 => EndTag::Success,
            t => return Err(Error::Format(format!("unknown end tag {t}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub end: EndTag,
}

/// The tail of a hazard-terminated episode with per-step returns.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureEvent {
    pub episode_id: u64,
    /// Global environment step at which the failure was captured.
    pub capture_step: u64,
    pub transitions: Vec<Transition>,
    /// `returns[t] = sum_{n >= t} gamma^(n - t) * r_n` over the suffix.
    pub returns: Vec<f64>,
}

impl FailureEvent {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// How candidate-to-record distances are folded into one score term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceAggregator {
    Mean,
    Min,
    Sum,
}

impl DistanceAggregator {
    fn tag(self) -> u8 {
        match self {
            DistanceAggregator::Mean => 0,
            DistanceAggregator::Min => 1,
            DistanceAggregator::Sum => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FemaConfig {
    /// Suffix length kept from each failure episode.
    pub k: usize,
    /// Staged events that trigger a memory update.
    pub m: usize,
    /// Candidate actions sampled per decision.
    pub n_candidates: usize,
    /// Retrieval radius in state-code space. `inf` matches everything.
    pub epsilon: f64,
    /// Cap on retrieved records, lowest returns first.
    pub top_o: usize,
    pub lambda_risk: f64,
    pub gamma: f64,
    /// Maximum number of stored events.
    pub capacity: usize,
    pub aggregator: DistanceAggregator,
}

impl Default for FemaConfig {
    fn default() -> Self {
        Self {
            k: 10,
            m: 100,
            n_candidates: 10,
            epsilon: 0.03,
            top_o: 5,
            lambda_risk: 0.5,
            gamma: 0.99,
            capacity: 2000,
            aggregator: DistanceAggregator::Mean,
        }
    }
}

impl FemaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return fail("k must be >= 1");
        }
        if self.m == 0 {
            return fail("m must be >= 1");
        }
        if self.n_candidates == 0 {
            return fail("n_candidates must be >= 1");
        }
        if !(self.epsilon >= 0.0) {
            return fail("epsilon must be >= 0");
        }
        if self.top_o == 0 {
            return fail("top_o must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if self.capacity < self.m {
            return fail("capacity must be >= m");
        }
        if !self.lambda_risk.is_finite() {
            return fail("lambda_risk must be finite");
        }
        Ok(())
    }

    /// Stable digest of every field, stored in snapshots.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for v in [self.k, self.m, self.n_candidates, self.top_o, self.capacity] {
            h.update((v as u64).to_le_bytes());
        }
        for v in [self.epsilon, self.lambda_risk, self.gamma] {
            h.update(v.to_le_bytes());
        }
        h.update([self.aggregator.tag()]);
        let digest = h.finalize();
        let mut first = [0u8; 8];
        first.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(first)
    }
}

/// Discounted return-to-termination for every step of a reward tail.
pub fn tail_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = if t + 1 == rewards.len() {
            *r
        } else {
            r + gamma * acc
        };
        out[t] = acc;
    }
    out
}

/// Builds a failure event from a finished episode, or `None` when the
/// episode did not end in a hazard.
pub fn capture_failure(
    episode: &[Transition],
    cfg: &FemaConfig,
    episode_id: u64,
    capture_step: u64,
) -> Result<Option<FailureEvent>> {
    let Some(last) = episode.last() else {
        return Err(Error::Usage("cannot capture an empty episode".into()));
    };
    if let Some(i) = episode[..episode.len() - 1]
        .iter()
        .position(|t| t.end.is_terminal())
    {
        return Err(Error::Usage(format!(
            "episode has a terminal tag at step {i} of {}",
            episode.len()
        )));
    }
    if last.end != EndTag::Hazard {
        return Ok(None);
    }
    let start = episode.len().saturating_sub(cfg.k);
    let transitions = episode[start..].to_vec();
    let rewards: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
    Ok(Some(FailureEvent {
        episode_id,
        capture_step,
        returns: tail_returns(&rewards, cfg.gamma),
        transitions,
    }))
}

/// One searchable entry: a stored transition under one embedding version.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub z_s: Vec<f64>,
    pub action: Vec<f64>,
    pub phi: Vec<f64>,
    pub ret: f64,
    pub event_id: u64,
    /// Position of the transition inside its event.
    pub step: u32,
    pub version: u64,
}

/// An immutable, published set of records sharing one embedding version.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub version: u64,
    pub records: Vec<MemoryRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStatus {
    /// Nothing has been published yet.
    Cold,
    Ready,
}

/// Result of a lookup: indices into the generation it was served from.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub status: RetrievalStatus,
    pub generation: Option<Arc<Generation>>,
    pub indices: Vec<usize>,
}

impl Retrieval {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &MemoryRecord> {
        let records = self.generation.as_ref().map(|g| g.records.as_slice());
        self.indices
            .iter()
            .map(move |&i| &records.expect("indices imply a generation")[i])
    }

    pub fn version(&self) -> Option<u64> {
        self.generation.as_ref().map(|g| g.version)
    }
}

/// Widths that must agree between a memory and its embedding stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryDims {
    pub d_s: usize,
    pub d_a: usize,
    pub d_z: usize,
    pub d_phi: usize,
}

impl MemoryDims {
    pub fn of(stack: &EmbeddingStack) -> Self {
        let d = stack.dims();
        Self {
            d_s: d.d_s,
            d_a: d.d_a,
            d_z: d.d_z,
            d_phi: d.d_phi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStatus {
    Published,
    /// Nothing stored and nothing pending.
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub status: UpdateStatus,
    pub records: usize,
    pub events: usize,
    pub evicted: usize,
    pub training: Option<TrainReport>,
}

#[derive(Debug)]
pub struct FailureMemory {
    cfg: FemaConfig,
    dims: MemoryDims,
    pending: Mutex<VecDeque<FailureEvent>>,
    events: VecDeque<FailureEvent>,
    generation: Option<Arc<Generation>>,
}

impl FailureMemory {
    pub fn new(cfg: FemaConfig, dims: MemoryDims) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            dims,
            pending: Mutex::new(VecDeque::new()),
            events: VecDeque::new(),
            generation: None,
        })
    }

    pub fn config(&self) -> &FemaConfig {
        &self.cfg
    }

    pub fn dims(&self) -> MemoryDims {
        self.dims
    }

    fn pending_lock(&self) -> MutexGuard<'_, VecDeque<FailureEvent>> {
        self.pending.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn check_event(&self, event: &FailureEvent) -> Result<()> {
        if event.transitions.is_empty() {
            return Err(Error::Usage("failure event without transitions".into()));
        }
        check_width("event returns", event.transitions.len(), event.returns.len())?;
        for t in &event.transitions {
            check_width("event state", self.dims.d_s, t.state.len())?;
            check_width("event action", self.dims.d_a, t.action.len())?;
            check_width("event next state", self.dims.d_s, t.next_state.len())?;
        }
        if event.returns.iter().any(|h| !h.is_finite()) {
            return Err(Error::Usage("failure event with non-finite return".into()));
        }
        Ok(())
    }

    /// Queues an event; published records are untouched. When the queue
    /// exceeds capacity the oldest pending event is dropped. Returns the
    /// pending count. Safe to call from several workers at once.
    pub fn stage(&self, event: FailureEvent) -> Result<usize> {
        self.check_event(&event)?;
        let mut pending = self.pending_lock();
        pending.push_back(event);
        while pending.len() > self.cfg.capacity {
            pending.pop_front();
        }
        Ok(pending.len())
    }

    pub fn pending_count(&self) -> usize {
        self.pending_lock().len()
    }

    pub fn pending_events(&self) -> Vec<FailureEvent> {
        self.pending_lock().iter().cloned().collect()
    }

    /// True once `M` events are waiting.
    pub fn is_due(&self) -> bool {
        self.pending_count() >= self.cfg.m
    }

    /// Stored events behind the current (or next) generation, oldest first.
    pub fn events(&self) -> impl Iterator<Item = &FailureEvent> {
        self.events.iter()
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn generation(&self) -> Option<Arc<Generation>> {
        self.generation.clone()
    }

    pub fn is_cold(&self) -> bool {
        self.generation.is_none()
    }

    pub fn record_count(&self) -> usize {
        self.generation.as_ref().map_or(0, |g| g.records.len())
    }

    /// Version of the published records, if any.
    pub fn version(&self) -> Option<u64> {
        self.generation.as_ref().map(|g| g.version)
    }

    /// Drains pending events, refits the stack on every stored event,
    /// re-encodes all of them and publishes a new generation.
    pub fn update(
        &mut self,
        stack: &mut EmbeddingStack,
        emb_cfg: &EmbeddingConfig,
        rng: &mut Rng,
    ) -> Result<UpdateReport> {
        if MemoryDims::of(stack) != self.dims {
            return Err(Error::Config(format!(
                "embedding stack dims {:?} do not match memory dims {:?}",
                MemoryDims::of(stack),
                self.dims
            )));
        }
        let drained: Vec<FailureEvent> = self.pending_lock().drain(..).collect();
        if drained.is_empty() && self.events.is_empty() {
            return Ok(UpdateReport {
                status: UpdateStatus::Empty,
                records: 0,
                events: 0,
                evicted: 0,
                training: None,
            });
        }
        self.events.extend(drained);
        self.events
            .make_contiguous()
            .sort_by_key(|e| e.capture_step);
        let mut evicted = 0;
        while self.events.len() > self.cfg.capacity {
            self.events.pop_front();
            evicted += 1;
        }

        let samples: Vec<RiskSample<'_>> = self
            .events
            .iter()
            .flat_map(|e| {
                e.transitions
                    .iter()
                    .zip(&e.returns)
                    .map(|(t, &ret)| RiskSample {
                        state: &t.state,
                        action: &t.action,
                        ret,
                    })
            })
            .collect();
        let training = stack.train_risk(&samples, emb_cfg, rng)?;
        debug_assert_eq!(training.status, TrainStatus::Trained);
        let generation = self.encode_all(stack)?;
        let records = generation.records.len();
        self.generation = Some(Arc::new(generation));
        Ok(UpdateReport {
            status: UpdateStatus::Published,
            records,
            events: self.events.len(),
            evicted,
            training: Some(training),
        })
    }

    fn encode_all(&self, stack: &EmbeddingStack) -> Result<Generation> {
        let trans = || self.events.iter().flat_map(|e| e.transitions.iter());
        let states = Matrix::from_rows(self.dims.d_s, trans().map(|t| &t.state))?;
        let actions = Matrix::from_rows(self.dims.d_a, trans().map(|t| &t.action))?;
        let z = stack.encode_states(&states)?;
        let phi = stack.embed_batch(&states, &actions)?;
        let version = stack.version();
        let mut records = Vec::with_capacity(states.rows());
        let mut row = 0;
        for e in &self.events {
            for (i, (t, &ret)) in e.transitions.iter().zip(&e.returns).enumerate() {
                records.push(MemoryRecord {
                    z_s: z.row(row).to_vec(),
                    action: t.action.clone(),
                    phi: phi.row(row).to_vec(),
                    ret,
                    event_id: e.episode_id,
                    step: i as u32,
                    version,
                });
                row += 1;
            }
        }
        Ok(Generation { version, records })
    }

    /// Threshold-then-top-O lookup against the published generation.
    pub fn retrieve_with(&self, z_query: &[f64], epsilon: f64, top_o: usize) -> Result<Retrieval> {
        check_width("query state code", self.dims.d_z, z_query.len())?;
        let Some(generation) = self.generation.clone() else {
            return Ok(Retrieval {
                status: RetrievalStatus::Cold,
                generation: None,
                indices: Vec::new(),
            });
        };
        let mut hits: Vec<usize> = generation
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| l2_distance(&r.z_s, z_query) <= epsilon)
            .map(|(i, _)| i)
            .collect();
        let recs = &generation.records;
        hits.sort_by(|&a, &b| recs[a].ret.total_cmp(&recs[b].ret).then(a.cmp(&b)));
        hits.truncate(top_o);
        Ok(Retrieval {
            status: RetrievalStatus::Ready,
            generation: Some(generation),
            indices: hits,
        })
    }

    /// Lookup with the configured `epsilon` and `top_o`.
    pub fn retrieve(&self, z_query: &[f64]) -> Result<Retrieval> {
        self.retrieve_with(z_query, self.cfg.epsilon, self.cfg.top_o)
    }
}
