use fema_core::embedding::{EmbeddingConfig, EmbeddingStack};
use fema_core::memory::{
    capture_failure, DistanceAggregator, EndTag, FailureMemory, FemaConfig, MemoryDims, Transition,
};
use fema_core::numeric::{l2_distance, Activation, AdamConfig, Layer, Mlp, Rng};
use fema_core::selection::{
    argmax_first, plain_decision, score_candidates, select, GaussianHead, StochasticPolicy,
};
use fema_core::Error;

/// Gaussian policy with a fixed head and identity squashing.
struct Fixed {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl StochasticPolicy for Fixed {
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        self.mean.len()
    }
    fn head(&self, _: &[f64]) -> fema_core::Result<GaussianHead> {
        GaussianHead::new(self.mean.clone(), self.std.clone())
    }
    fn squash(&self, raw: &[f64]) -> Vec<f64> {
        raw.to_vec()
    }
    fn log_prob(&self, head: &GaussianHead, raw: &[f64]) -> f64 {
        raw.iter()
            .zip(&head.mean)
            .zip(&head.std)
            .map(|((x, m), s)| -0.5 * ((x - m) / s).powi(2) - s.ln())
            .sum()
    }
}

fn identity(n: usize) -> Mlp {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = 1.0;
    }
    Mlp::from_layers(vec![Layer::new(n, n, w, vec![0.0; n], Activation::Identity).unwrap()]).unwrap()
}

/// `phi = [s, a]` and `risk = w . phi`, so every score is computable by
/// hand.
fn transparent_stack(risk_w: Vec<f64>) -> EmbeddingStack {
    let h = Mlp::from_layers(vec![Layer::new(4, 1, risk_w, vec![0.0], Activation::Identity).unwrap()]).unwrap();
    EmbeddingStack::from_networks(identity(2), identity(2), identity(4), h, AdamConfig::with_lr(0.0)).unwrap()
}

fn frozen() -> EmbeddingConfig {
    EmbeddingConfig {
        lr: 0.0,
        epochs: 1,
        ..EmbeddingConfig::default()
    }
}

fn hazard_episode(states: &[[f64; 2]], actions: &[[f64; 2]]) -> Vec<Transition> {
    let n = states.len();
    (0..n)
        .map(|i| Transition {
            state: states[i].to_vec(),
            action: actions[i].to_vec(),
            reward: -(i as f64),
            next_state: states[i].to_vec(),
            end: if i + 1 == n { EndTag::Hazard } else { EndTag::None },
        })
        .collect()
}

fn memory_at_region_a(cfg: FemaConfig, stack: &mut EmbeddingStack) -> FailureMemory {
    let mut memory = FailureMemory::new(cfg, MemoryDims::of(stack)).unwrap();
    let states = [[0.0, 0.0], [0.05, 0.0], [0.0, 0.05]];
    let actions = [[1.0, 1.0], [1.0, 0.9], [0.9, 1.0]];
    let ep = hazard_episode(&states, &actions);
    memory.stage(capture_failure(&ep, &cfg, 0, 3).unwrap().unwrap()).unwrap();
    memory.update(stack, &frozen(), &mut Rng::seed_from(0)).unwrap();
    memory
}

#[test]
fn zero_risk_weight_picks_the_far_candidate() {
    let cfg = FemaConfig {
        k: 3,
        m: 1,
        epsilon: 0.5,
        top_o: 3,
        lambda_risk: 0.0,
        ..FemaConfig::default()
    };
    let mut stack = transparent_stack(vec![0.0, 0.0, 1.0, 1.0]);
    let memory = memory_at_region_a(cfg, &mut stack);
    let state = [0.0, 0.0];
    let retrieval = memory.retrieve(&stack.encode_state(&state).unwrap()).unwrap();
    assert_eq!(retrieval.len(), 3);
    let near = vec![1.0, 1.0];
    let far = vec![-1.0, -1.0];
    let scored = score_candidates(&state, &[near.clone(), far.clone()], &retrieval, &stack, 0.0, DistanceAggregator::Mean)
        .unwrap();
    for c in &scored {
        let mut phi = state.to_vec();
        phi.extend(&c.action);
        let d: Vec<f64> = retrieval.records().map(|r| l2_distance(&phi, &r.phi)).collect();
        assert_eq!(c.distance, d.iter().sum::<f64>() / d.len() as f64);
        assert_eq!(c.risk, c.action[0] + c.action[1]);
    }
    assert_eq!(argmax_first(&scored.iter().map(|c| c.score).collect::<Vec<_>>()), 1);
    assert_eq!(scored[1].action, far);
}

#[test]
fn risk_term_can_overturn_distance() {
    let mut stack = transparent_stack(vec![0.0, 0.0, -10.0, 0.0]);
    let cfg = FemaConfig {
        k: 3,
        m: 1,
        epsilon: 0.5,
        top_o: 3,
        lambda_risk: 1.0,
        ..FemaConfig::default()
    };
    let memory = memory_at_region_a(cfg, &mut stack);
    let state = [0.0, 0.0];
    let retrieval = memory.retrieve(&stack.encode_state(&state).unwrap()).unwrap();
    // The far candidate has risk +10, the near one -10.
    let scored = score_candidates(
        &state,
        &[vec![1.0, 1.0], vec![-1.0, -1.0]],
        &retrieval,
        &stack,
        1.0,
        DistanceAggregator::Mean,
    )
    .unwrap();
    assert!(scored[0].score > scored[1].score);
}

#[test]
fn traces_reconstruct_scores_exactly() {
    let emb = EmbeddingConfig {
        d_z: 3,
        d_z_a: 2,
        d_phi: 4,
        hidden: 8,
        epochs: 2,
        ..EmbeddingConfig::default()
    };
    let mut rng = Rng::seed_from(12);
    for trial in 0..20 {
        let cfg = FemaConfig {
            k: 5,
            m: 1,
            epsilon: f64::INFINITY,
            top_o: 1 + rng.below(6),
            lambda_risk: rng.uniform(0.0, 3.0),
            n_candidates: 2 + rng.below(10),
            aggregator: [DistanceAggregator::Mean, DistanceAggregator::Min, DistanceAggregator::Sum][trial % 3],
            ..FemaConfig::default()
        };
        let mut stack = EmbeddingStack::new(2, 2, &emb, trial as u64).unwrap();
        let mut memory = FailureMemory::new(cfg, MemoryDims::of(&stack)).unwrap();
        for id in 0..4 {
            let states: Vec<[f64; 2]> = (0..5).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect();
            let actions: Vec<[f64; 2]> = (0..5).map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]).collect();
            let ep = hazard_episode(&states, &actions);
            memory.stage(capture_failure(&ep, &cfg, id, id).unwrap().unwrap()).unwrap();
        }
        memory.update(&mut stack, &emb, &mut rng).unwrap();
        let policy = Fixed {
            mean: vec![rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)],
            std: vec![0.5, 0.3],
        };
        for _ in 0..10 {
            let s = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            let d = select(&s, &policy, &memory, &stack, &cfg, &mut rng, true).unwrap();
            let t = d.trace.unwrap();
            assert!(!t.fallback);
            let gen = memory.generation().unwrap();
            let phis: Vec<&Vec<f64>> = t
                .retrieved
                .iter()
                .map(|(e, i)| &gen.records.iter().find(|r| r.event_id == *e && r.step == *i).unwrap().phi)
                .collect();
            for c in &t.candidates {
                let phi = stack.embed(&s, &c.action).unwrap();
                assert_eq!(phi, c.phi);
                let dists: Vec<f64> = phis.iter().map(|p| l2_distance(&phi, p)).collect();
                let dist = match cfg.aggregator {
                    DistanceAggregator::Mean => dists.iter().sum::<f64>() / dists.len() as f64,
                    DistanceAggregator::Min => dists.iter().copied().fold(f64::INFINITY, f64::min),
                    DistanceAggregator::Sum => dists.iter().sum(),
                };
                assert_eq!(dist.to_bits(), c.distance.to_bits());
                let score = dist - cfg.lambda_risk * stack.risk(&phi).unwrap();
                assert_eq!(score.to_bits(), c.score.to_bits());
            }
            let scores: Vec<f64> = t.candidates.iter().map(|c| c.score).collect();
            assert_eq!(t.chosen, argmax_first(&scores));
            assert_eq!(d.action, t.candidates[t.chosen].action);
        }
    }
}

#[test]
fn argmax_ignores_a_common_shift() {
    let mut rng = Rng::seed_from(3);
    for _ in 0..1000 {
        let n = 1 + rng.below(12);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let c = rng.uniform(-100.0, 100.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        assert_eq!(argmax_first(&scores), argmax_first(&shifted));
    }
}

#[test]
fn stale_stack_is_a_coherence_error() {
    let cfg = FemaConfig {
        k: 3,
        m: 1,
        epsilon: 0.5,
        ..FemaConfig::default()
    };
    let mut stack = transparent_stack(vec![0.0; 4]);
    let memory = memory_at_region_a(cfg, &mut stack);
    let mut other = stack.clone();
    let ep = hazard_episode(&[[0.0, 0.0], [0.1, 0.1]], &[[0.0, 0.0], [0.5, 0.5]]);
    let ev = capture_failure(&ep, &cfg, 1, 1).unwrap().unwrap();
    let mut scratch = FailureMemory::new(cfg, MemoryDims::of(&other)).unwrap();
    scratch.stage(ev).unwrap();
    scratch.update(&mut other, &frozen(), &mut Rng::seed_from(1)).unwrap();
    assert_ne!(other.version(), stack.version());
    let policy = Fixed {
        mean: vec![0.0, 0.0],
        std: vec![1.0, 1.0],
    };
    let err = select(&[0.0, 0.0], &policy, &memory, &other, &cfg, &mut Rng::seed_from(2), false).unwrap_err();
    assert!(matches!(err, Error::Coherence { .. }));
}

#[test]
fn degenerate_settings_replay_the_plain_draw() {
    let base = FemaConfig {
        k: 3,
        m: 1,
        epsilon: 0.5,
        ..FemaConfig::default()
    };
    let mut stack = transparent_stack(vec![1.0; 4]);
    let memory = memory_at_region_a(base, &mut stack);
    let cold = FailureMemory::new(base, MemoryDims::of(&stack)).unwrap();
    let policy = Fixed {
        mean: vec![0.2, -0.1],
        std: vec![0.7, 0.4],
    };
    let one = FemaConfig {
        n_candidates: 1,
        ..base
    };
    let exact = FemaConfig {
        epsilon: 0.0,
        ..base
    };
    for (mem, cfg) in [(&memory, one), (&memory, exact), (&cold, base)] {
        let mut r1 = Rng::seed_from(5);
        let mut r2 = Rng::seed_from(5);
        for i in 0..200 {
            let s = [0.003 + 0.01 * (i % 7) as f64, 0.0];
            let a = select(&s, &policy, mem, &stack, &cfg, &mut r1, false).unwrap();
            let b = plain_decision(&policy, &s, &mut r2).unwrap();
            assert_eq!(a.action, b.action);
            assert_eq!(a.log_prob.to_bits(), b.log_prob.to_bits());
            assert!(!a.influenced());
        }
        assert_eq!(r1.next_u64(), r2.next_u64());
    }
}
