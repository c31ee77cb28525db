use fema_core::embedding::{normalize_returns, EmbeddingConfig, EmbeddingStack, RiskSample};
use fema_core::numeric::{mean_std, Matrix, Mlp, Rng};

fn small_cfg() -> EmbeddingConfig {
    EmbeddingConfig {
        d_z: 4,
        d_z_a: 3,
        d_phi: 5,
        hidden: 6,
        ..EmbeddingConfig::default()
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.5, 1.5)).collect()).unwrap()
}

#[test]
fn normalized_targets_have_zero_mean_unit_std() {
    let mut rng = Rng::seed_from(1);
    for _ in 0..200 {
        let n = 2 + rng.below(100);
        let scale = rng.uniform(0.01, 100.0);
        let h: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0) * scale).collect();
        let (_, sd) = mean_std(&h);
        if sd <= 1e-3 {
            continue;
        }
        let y = normalize_returns(&h).unwrap();
        let (m, s) = mean_std(&y);
        assert!(m.abs() < 1e-9);
        assert!((s - 1.0).abs() < 1e-5);
        // Lower returns map to higher targets.
        let lo = (0..n).min_by(|&a, &b| h[a].total_cmp(&h[b])).unwrap();
        assert!(y.iter().all(|&v| v <= y[lo]));
    }
}

#[test]
fn risk_loss_gradient_matches_central_differences() {
    let mut rng = Rng::seed_from(2);
    let h = 1e-5;
    for seed in 0..20 {
        let mut stack = EmbeddingStack::new(3, 2, &small_cfg(), seed).unwrap();
        let s = random_matrix(&mut rng, 6, 3);
        let a = random_matrix(&mut rng, 6, 2);
        let targets = normalize_returns(&(0..6).map(|_| rng.uniform(-5.0, 5.0)).collect::<Vec<_>>()).unwrap();
        let (loss, grads) = stack.risk_loss_and_grads(&s, &a, &targets).unwrap();
        assert!((loss - stack.risk_loss(&s, &a, &targets).unwrap()).abs() < 1e-12);
        let analytic = grads.to_flat();
        let base = stack.params_flat();
        assert_eq!(base.len(), analytic.len());
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            stack.set_params_flat(&p).unwrap();
            let up = stack.risk_loss(&s, &a, &targets).unwrap();
            p[i] -= 2.0 * h;
            stack.set_params_flat(&p).unwrap();
            let down = stack.risk_loss(&s, &a, &targets).unwrap();
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max((fd - analytic[i]).abs() / denom);
        }
        stack.set_params_flat(&base).unwrap();
        assert!(worst < 1e-4, "seed {seed}: relative error {worst}");
    }
}

/// Largest singular value by power iteration on `W^T W`.
fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0; cols];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let u: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * v[c]).sum()).collect();
        let mut next: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| w[r * cols + c] * u[r]).sum()).collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        sigma = norm.sqrt();
        v = next;
    }
    sigma
}

fn lipschitz_bound(net: &Mlp) -> f64 {
    net.layers()
        .iter()
        .map(|l| spectral_norm(l.weights(), l.outputs(), l.inputs()))
        .product()
}

#[test]
fn state_encoder_respects_weight_lipschitz_bound() {
    let mut rng = Rng::seed_from(3);
    for seed in 0..10 {
        let stack = EmbeddingStack::new(4, 2, &EmbeddingConfig::default(), seed).unwrap();
        let l = lipschitz_bound(stack.networks()[0]) * (1.0 + 1e-6);
        for _ in 0..20 {
            let s: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let mut d: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            d.iter_mut().for_each(|x| *x *= 1e-6 / n);
            let s2: Vec<f64> = s.iter().zip(&d).map(|(a, b)| a + b).collect();
            let z1 = stack.encode_state(&s).unwrap();
            let z2 = stack.encode_state(&s2).unwrap();
            let dz = z1.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dz <= l * 1e-6, "moved {dz}, bound {}", l * 1e-6);
        }
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, sa) = mean_std(&ra);
    let (mb, sb) = mean_std(&rb);
    ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (ra.len() as f64 * sa * sb)
}

#[test]
fn trained_risk_orders_by_return() {
    for seed in 0..3 {
        let mut rng = Rng::seed_from(100 + seed);
        let cfg = EmbeddingConfig {
            lr: 1e-3,
            epochs: 60,
            ..EmbeddingConfig::default()
        };
        let mut stack = EmbeddingStack::new(3, 2, &cfg, seed).unwrap();
        let make = |rng: &mut Rng| {
            let s: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let h = -4.0 * s[0] + 1.0;
            (s, a, h)
        };
        let train: Vec<_> = (0..512).map(|_| make(&mut rng)).collect();
        let samples: Vec<RiskSample> = train
            .iter()
            .map(|(s, a, h)| RiskSample {
                state: s,
                action: a,
                ret: *h,
            })
            .collect();
        let report = stack.train_risk(&samples, &cfg, &mut rng).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let held: Vec<_> = (0..200).map(|_| make(&mut rng)).collect();
        let rho: Vec<f64> = held.iter().map(|(s, a, _)| stack.risk(&stack.embed(s, a).unwrap()).unwrap()).collect();
        let neg_h: Vec<f64> = held.iter().map(|(_, _, h)| -h).collect();
        let c = spearman(&rho, &neg_h);
        assert!(c >= 0.9, "seed {seed}: spearman {c}");
    }
}
