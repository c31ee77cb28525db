use fema_core::embedding::{EmbeddingConfig, EmbeddingStack};
use fema_core::memory::{
    capture_failure, tail_returns, EndTag, FailureEvent, FailureMemory, FemaConfig, MemoryDims, MemoryRecord,
    Transition,
};
use fema_core::numeric::{l2_distance, Rng};

const D_S: usize = 3;
const D_A: usize = 2;

fn quick_embedding() -> EmbeddingConfig {
    EmbeddingConfig {
        d_z: 4,
        d_z_a: 2,
        d_phi: 4,
        hidden: 8,
        epochs: 1,
        max_steps: Some(2),
        ..EmbeddingConfig::default()
    }
}

fn random_episode(rng: &mut Rng, len: usize, end: EndTag) -> Vec<Transition> {
    (0..len)
        .map(|i| Transition {
            state: (0..D_S).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            action: (0..D_A).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            reward: rng.below(5) as f64 - 2.0,
            next_state: (0..D_S).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            end: if i + 1 == len { end } else { EndTag::None },
        })
        .collect()
}

fn event(rng: &mut Rng, cfg: &FemaConfig, id: u64) -> FailureEvent {
    let len = 1 + rng.below(2 * cfg.k);
    capture_failure(&random_episode(rng, len, EndTag::Hazard), cfg, id, id)
        .unwrap()
        .unwrap()
}

fn setup(cfg: FemaConfig, seed: u64) -> (FailureMemory, EmbeddingStack, Rng) {
    let stack = EmbeddingStack::new(D_S, D_A, &quick_embedding(), seed).unwrap();
    let memory = FailureMemory::new(cfg, MemoryDims::of(&stack)).unwrap();
    (memory, stack, Rng::seed_from(seed + 1000))
}

#[test]
fn captured_returns_match_direct_summation() {
    let mut rng = Rng::seed_from(7);
    for gamma in [0.9, 0.99, 1.0] {
        let cfg = FemaConfig {
            k: 50,
            gamma,
            ..FemaConfig::default()
        };
        for _ in 0..100 {
            let len = 1 + rng.below(50);
            let rewards: Vec<f64> = (0..len).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let mut ep = random_episode(&mut rng, len, EndTag::Hazard);
            for (t, r) in ep.iter_mut().zip(&rewards) {
                t.reward = *r;
            }
            let ev = capture_failure(&ep, &cfg, 0, 0).unwrap().unwrap();
            for t in 0..len {
                let direct: f64 = (t..len).map(|n| gamma.powi((n - t) as i32) * rewards[n]).sum();
                assert!((ev.returns[t] - direct).abs() < 1e-12);
                if t + 1 < len {
                    let bellman = rewards[t] + gamma * ev.returns[t + 1];
                    assert!((ev.returns[t] - bellman).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn suffix_returns_ignore_earlier_rewards() {
    let cfg = FemaConfig {
        k: 2,
        gamma: 0.5,
        ..FemaConfig::default()
    };
    let mut rng = Rng::seed_from(8);
    let mut ep = random_episode(&mut rng, 5, EndTag::Hazard);
    for (t, r) in ep.iter_mut().zip([100.0, 100.0, 100.0, 2.0, 4.0]) {
        t.reward = r;
    }
    let ev = capture_failure(&ep, &cfg, 3, 9).unwrap().unwrap();
    assert_eq!(ev.returns, vec![4.0, 4.0]);
    assert_eq!(tail_returns(&[2.0, 4.0], 0.5), vec![4.0, 4.0]);
    assert_eq!(ev.transitions, ep[3..].to_vec());
}

fn oracle(records: &[MemoryRecord], q: &[f64], eps: f64, top_o: usize) -> Vec<usize> {
    let mut hits = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if l2_distance(&r.z_s, q) <= eps {
            hits.push(i);
        }
    }
    // Stable insertion sort on the return keeps earlier records first.
    for i in 1..hits.len() {
        let mut j = i;
        while j > 0 && records[hits[j - 1]].ret > records[hits[j]].ret {
            hits.swap(j - 1, j);
            j -= 1;
        }
    }
    hits.truncate(top_o);
    hits
}

#[test]
fn retrieval_matches_linear_scan() {
    let mut rng = Rng::seed_from(9);
    for store in 0..10 {
        let cfg = FemaConfig {
            k: 10,
            m: 1,
            capacity: 500,
            ..FemaConfig::default()
        };
        let (mut memory, mut stack, mut train_rng) = setup(cfg, store);
        for id in 0..(1 + rng.below(200)) as u64 {
            memory.stage(event(&mut rng, &cfg, id)).unwrap();
        }
        memory.update(&mut stack, &quick_embedding(), &mut train_rng).unwrap();
        let generation = memory.generation().unwrap();
        for _ in 0..50 {
            let anchor = &generation.records[rng.below(generation.records.len())].z_s;
            let q: Vec<f64> = anchor.iter().map(|x| x + rng.uniform(-0.2, 0.2)).collect();
            let eps = rng.uniform(0.0, 0.6);
            let top_o = 1 + rng.below(20);
            let got = memory.retrieve_with(&q, eps, top_o).unwrap();
            assert_eq!(got.indices, oracle(&generation.records, &q, eps, top_o));
            assert_eq!(got.version(), Some(stack.version()));
        }
        let all = memory.retrieve_with(&generation.records[0].z_s, f64::INFINITY, usize::MAX).unwrap();
        assert_eq!(all.len(), generation.records.len());
        let rets: Vec<f64> = all.records().map(|r| r.ret).collect();
        assert!(rets.windows(2).all(|w| w[0] <= w[1]));
        let none = memory.retrieve_with(&[9.0; 4], 0.0, 5).unwrap();
        assert!(none.is_empty());
    }
}

#[test]
fn publication_lifecycle() {
    let cfg = FemaConfig {
        k: 4,
        m: 5,
        capacity: 12,
        ..FemaConfig::default()
    };
    let (mut memory, mut stack, mut rng) = setup(cfg, 3);
    let mut erng = Rng::seed_from(4);
    let probe = vec![0.0; 4];

    // First generation.
    for id in 0..5 {
        memory.stage(event(&mut erng, &cfg, id)).unwrap();
    }
    assert!(memory.is_due());
    memory.update(&mut stack, &quick_embedding(), &mut rng).unwrap();
    let before = memory.retrieve_with(&probe, f64::INFINITY, 1000).unwrap();

    // M - 1 more staged events are invisible to retrieval.
    for id in 5..9 {
        memory.stage(event(&mut erng, &cfg, id)).unwrap();
        assert!(!memory.is_due());
        let now = memory.retrieve_with(&probe, f64::INFINITY, 1000).unwrap();
        assert_eq!(now.indices, before.indices);
        assert_eq!(now.version(), before.version());
    }
    memory.stage(event(&mut erng, &cfg, 9)).unwrap();
    assert!(memory.is_due());
    let report = memory.update(&mut stack, &quick_embedding(), &mut rng).unwrap();
    assert_eq!(report.events, 10);
    let generation = memory.generation().unwrap();
    assert!(generation.records.iter().all(|r| r.version == stack.version()));
    assert_ne!(Some(generation.version), before.version());

    // Capacity 12: two more rounds evict the oldest events first.
    for id in 10..20 {
        memory.stage(event(&mut erng, &cfg, id)).unwrap();
    }
    let report = memory.update(&mut stack, &quick_embedding(), &mut rng).unwrap();
    assert_eq!(report.evicted, 8);
    let ids: Vec<u64> = memory.events().map(|e| e.episode_id).collect();
    assert_eq!(ids, (8..20).collect::<Vec<_>>());
}

#[test]
fn snapshot_round_trip_preserves_retrieval() {
    let cfg = FemaConfig {
        k: 6,
        m: 4,
        ..FemaConfig::default()
    };
    let (mut memory, mut stack, mut rng) = setup(cfg, 5);
    let mut erng = Rng::seed_from(6);
    for id in 0..7 {
        memory.stage(event(&mut erng, &cfg, id)).unwrap();
    }
    memory.update(&mut stack, &quick_embedding(), &mut rng).unwrap();
    memory.stage(event(&mut erng, &cfg, 7)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.bin");
    memory.snapshot(&path).unwrap();
    let back = FailureMemory::load(&path, cfg, memory.dims()).unwrap();
    assert_eq!(back.pending_count(), 1);
    assert_eq!(back.event_count(), memory.event_count());
    assert_eq!(back.version(), memory.version());
    for _ in 0..50 {
        let q: Vec<f64> = (0..4).map(|_| erng.uniform(-1.0, 1.0)).collect();
        let a = memory.retrieve_with(&q, 0.8, 7).unwrap();
        let b = back.retrieve_with(&q, 0.8, 7).unwrap();
        assert_eq!(a.indices, b.indices);
        let ra: Vec<&MemoryRecord> = a.records().collect();
        let rb: Vec<&MemoryRecord> = b.records().collect();
        assert_eq!(ra, rb);
    }
    assert_eq!(back.to_bytes(), memory.to_bytes());
}

#[test]
fn concurrent_staging_keeps_every_event() {
    let cfg = FemaConfig {
        k: 3,
        m: 1000,
        capacity: 1000,
        ..FemaConfig::default()
    };
    let (memory, _, _) = setup(cfg, 1);
    std::thread::scope(|s| {
        for w in 0..4u64 {
            let memory = &memory;
            s.spawn(move || {
                let mut rng = Rng::seed_from(w);
                for i in 0..50 {
                    memory.stage(event(&mut rng, &cfg, w * 100 + i)).unwrap();
                }
            });
        }
    });
    assert_eq!(memory.pending_count(), 200);
    assert!(memory.is_cold());
}
