//! Risk-aware action selection.
//!
//! A decision encodes the current state, looks up hazardous precedents in
//! the failure memory, and (when any are found) samples `N` candidate
//! actions from the policy's Gaussian, scoring each by
//! `S = D - lambda_risk * rho`: `D` aggregates the distances from the
//! candidate's joint embedding to the retrieved records, `rho` is the risk
//! head's estimate. The highest score wins, ties going to the lowest index.
//!
//! When nothing is retrieved the decision falls back to a single plain
//! policy draw, consuming the random stream exactly like an agent without
//! memory would.

use serde::Serialize;

use crate::embedding::EmbeddingStack;
use crate::error::{check_width, Error, Result};
use crate::memory::{DistanceAggregator, FailureMemory, FemaConfig, Retrieval, RetrievalStatus};
use crate::numeric::{l2_distance, Rng};

/// Diagonal Gaussian over pre-squash actions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    deterministic: bool,
}

impl GaussianHead {
    /// A proper Gaussian; every `std` entry must be positive and finite.
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_width("gaussian std", mean.len(), std.len())?;
        if let Some(s) = std.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Policy(format!("standard deviation must be positive, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Policy("non-finite policy mean".into()));
        }
        Ok(Self {
            mean,
            std,
            deterministic: false,
        })
    }

    /// The zero-variance head used for evaluation: every draw is the mean.
    pub fn deterministic(mean: Vec<f64>) -> Self {
        let std = vec![0.0; mean.len()];
        Self {
            mean,
            std,
            deterministic: true,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A stochastic policy as seen by the selector.
pub trait StochasticPolicy: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// The Gaussian over pre-squash actions at `state`.
    fn head(&self, state: &[f64]) -> Result<GaussianHead>;
    /// Maps a raw Gaussian draw to the action sent to the environment.
    fn squash(&self, raw: &[f64]) -> Vec<f64>;
    /// Log-density of the executed action, given its raw draw.
    fn log_prob(&self, head: &GaussianHead, raw: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    /// Pre-squash Gaussian draw.
    pub raw: Vec<f64>,
    /// Executed action.
    pub action: Vec<f64>,
}

/// Draws `n` independent candidates from `head`, in order.
pub fn sample_from_head<P: StochasticPolicy + ?Sized>(
    policy: &P,
    head: &GaussianHead,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Candidate>> {
    if n == 0 {
        return Err(Error::Usage("at least one candidate is required".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let raw: Vec<f64> = if head.deterministic {
            head.mean.clone()
        } else {
            head.mean
                .iter()
                .zip(&head.std)
                .map(|(m, s)| m + s * rng.normal())
                .collect()
        };
        let action = policy.squash(&raw);
        out.push(Candidate { raw, action });
    }
    Ok(out)
}

pub fn sample_candidates<P: StochasticPolicy + ?Sized>(
    policy: &P,
    state: &[f64],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Candidate>> {
    check_width("policy state", policy.state_dim(), state.len())?;
    let head = policy.head(state)?;
    sample_from_head(policy, &head, n, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub action: Vec<f64>,
    pub phi: Vec<f64>,
    /// Aggregated distance to the retrieved joint embeddings.
    pub distance: f64,
    pub risk: f64,
    pub score: f64,
}

/// Folds per-record distances into one term.
pub fn aggregate(agg: DistanceAggregator, distances: &[f64]) -> f64 {
    match agg {
        DistanceAggregator::Mean => distances.iter().sum::<f64>() / distances.len() as f64,
        DistanceAggregator::Min => distances.iter().copied().fold(f64::INFINITY, f64::min),
        DistanceAggregator::Sum => distances.iter().sum(),
    }
}

/// Scores candidate actions at `state` against retrieved records.
pub fn score_candidates(
    state: &[f64],
    actions: &[Vec<f64>],
    retrieval: &Retrieval,
    stack: &EmbeddingStack,
    lambda_risk: f64,
    agg: DistanceAggregator,
) -> Result<Vec<ScoredCandidate>> {
    let Some(version) = retrieval.version() else {
        return Err(Error::Usage("cannot score against a cold memory".into()));
    };
    if version != stack.version() {
        return Err(Error::Coherence {
            records: version,
            stack: stack.version(),
        });
    }
    if retrieval.is_empty() {
        return Err(Error::Usage("scoring needs at least one retrieved record".into()));
    }
    let z_s = stack.encode_state(state)?;
    let mut distances = Vec::with_capacity(retrieval.len());
    actions
        .iter()
        .map(|a| {
            let phi = stack.joint_embed(&z_s, &stack.encode_action(a)?)?;
            distances.clear();
            distances.extend(retrieval.records().map(|r| l2_distance(&phi, &r.phi)));
            let distance = aggregate(agg, &distances);
            let risk = stack.risk(&phi)?;
            Ok(ScoredCandidate {
                action: a.clone(),
                phi,
                distance,
                risk,
                score: distance - lambda_risk * risk,
            })
        })
        .collect()
}

/// Index of the largest score, first one on ties. NaN never wins.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || scores[best].is_nan() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionTrace {
    pub state: Vec<f64>,
    pub status: RetrievalStatus,
    /// `(event id, step in event)` of each retrieved record.
    pub retrieved: Vec<(u64, u32)>,
    pub candidates: Vec<ScoredCandidate>,
    pub chosen: usize,
    pub fallback: bool,
    pub aggregator: DistanceAggregator,
    pub lambda_risk: f64,
}

/// The action a worker executes, plus what the learner needs to know.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub raw: Vec<f64>,
    pub action: Vec<f64>,
    /// Log-density of the executed action under the current policy.
    pub log_prob: f64,
    pub fallback: bool,
    /// Number of candidates the executed action was chosen from.
    pub candidates: usize,
    pub trace: Option<SelectionTrace>,
}

impl Decision {
    /// Whether memory actually steered this action.
    pub fn influenced(&self) -> bool {
        !self.fallback && self.candidates > 1
    }
}

/// Plain policy draw: what an agent without memory does.
pub fn plain_decision<P: StochasticPolicy + ?Sized>(
    policy: &P,
    state: &[f64],
    rng: &mut Rng,
) -> Result<Decision> {
    check_width("policy state", policy.state_dim(), state.len())?;
    let head = policy.head(state)?;
    let c = sample_from_head(policy, &head, 1, rng)?.swap_remove(0);
    Ok(Decision {
        log_prob: policy.log_prob(&head, &c.raw),
        raw: c.raw,
        action: c.action,
        fallback: true,
        candidates: 1,
        trace: None,
    })
}

/// Full selection pipeline. With `trace` set, the decision carries a
/// [`SelectionTrace`].
pub fn select<P: StochasticPolicy + ?Sized>(
    state: &[f64],
    policy: &P,
    memory: &FailureMemory,
    stack: &EmbeddingStack,
    cfg: &FemaConfig,
    rng: &mut Rng,
    trace: bool,
) -> Result<Decision> {
    check_width("policy state", policy.state_dim(), state.len())?;
    let z_s = stack.encode_state(state)?;
    let retrieval = memory.retrieve_with(&z_s, cfg.epsilon, cfg.top_o)?;
    let head = policy.head(state)?;
    if retrieval.is_empty() {
        let c = sample_from_head(policy, &head, 1, rng)?.swap_remove(0);
        let t = trace.then(|| SelectionTrace {
            state: state.to_vec(),
            status: retrieval.status,
            retrieved: Vec::new(),
            candidates: Vec::new(),
            chosen: 0,
            fallback: true,
            aggregator: cfg.aggregator,
            lambda_risk: cfg.lambda_risk,
        });
        return Ok(Decision {
            log_prob: policy.log_prob(&head, &c.raw),
            raw: c.raw,
            action: c.action,
            fallback: true,
            candidates: 1,
            trace: t,
        });
    }
    let mut cands = sample_from_head(policy, &head, cfg.n_candidates, rng)?;
    let actions: Vec<Vec<f64>> = cands.iter().map(|c| c.action.clone()).collect();
    let scored = score_candidates(state, &actions, &retrieval, stack, cfg.lambda_risk, cfg.aggregator)?;
    let scores: Vec<f64> = scored.iter().map(|c| c.score).collect();
    let chosen = argmax_first(&scores);
    let c = cands.swap_remove(chosen);
    let t = trace.then(|| SelectionTrace {
        state: state.to_vec(),
        status: retrieval.status,
        retrieved: retrieval.records().map(|r| (r.event_id, r.step)).collect(),
        candidates: scored,
        chosen,
        fallback: false,
        aggregator: cfg.aggregator,
        lambda_risk: cfg.lambda_risk,
    });
    Ok(Decision {
        log_prob: policy.log_prob(&head, &c.raw),
        raw: c.raw,
        action: c.action,
        fallback: false,
        candidates: cfg.n_candidates,
        trace: t,
    })
}
