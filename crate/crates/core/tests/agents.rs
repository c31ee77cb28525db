use std::collections::BTreeMap;

use fema_core::agents::{gae, normalize_advantages, ppo_loss_and_grads, PpoBatch, PpoPolicy, SacBatch};
use fema_core::agents::{actor_loss_and_grads, alpha_loss_and_grad, critic_losses_and_grads, SacPolicy};
use fema_core::agents::{Learner, SacAgent, SacConfig};
use fema_core::envs::{vec_run, Env, EnvConfig, EnvSpec, RunOptions, StepResult, Worker};
use fema_core::memory::EndTag;
use fema_core::numeric::{mean_std, Matrix, Mlp, MlpSpec, Rng};

const H: f64 = 1e-5;

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect()).unwrap()
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Worst relative error between `analytic` and central differences of
/// `loss` over every coordinate of `params`.
fn fd_worst(params: &[f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.to_vec();
        p[i] += H;
        let up = loss(&p);
        p[i] -= 2.0 * H;
        let down = loss(&p);
        let fd = (up - down) / (2.0 * H);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}

fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
    let mut n = net.clone();
    n.set_params_flat(p).unwrap();
    n
}

fn cliff_spec() -> EnvSpec {
    EnvConfig::default().spec()
}

fn sac_batch(rng: &mut Rng, n: usize) -> SacBatch {
    SacBatch {
        states: random_matrix(rng, n, 4, 1.0),
        actions: random_matrix(rng, n, 2, 1.0),
        rewards: (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        next_states: random_matrix(rng, n, 4, 1.0),
        terminals: (0..n).map(|_| rng.below(3) == 0).collect(),
    }
}

fn critic(seed: u64) -> Mlp {
    Mlp::init(&MlpSpec::two_hidden(6, 8, 1), seed).unwrap()
}

#[test]
fn sac_critic_gradients_match_central_differences() {
    let spec = cliff_spec();
    let mut rng = Rng::seed_from(31);
    for seed in 0..20 {
        let policy = SacPolicy::new(4, &spec, 8, &mut Rng::seed_from(seed)).unwrap();
        let (q1, q2, t1, t2) = (critic(4 * seed), critic(4 * seed + 1), critic(4 * seed + 2), critic(4 * seed + 3));
        let batch = sac_batch(&mut rng, 6);
        let noise = normal_matrix(&mut rng, 6, 2);
        let (_, grads) = critic_losses_and_grads(&policy, &q1, &q2, &t1, &t2, 0.2, 0.99, &batch, &noise).unwrap();
        let w1 = fd_worst(&q1.params_flat(), &grads[0].to_flat(), |p| {
            critic_losses_and_grads(&policy, &with_params(&q1, p), &q2, &t1, &t2, 0.2, 0.99, &batch, &noise).unwrap().0[0]
        });
        let w2 = fd_worst(&q2.params_flat(), &grads[1].to_flat(), |p| {
            critic_losses_and_grads(&policy, &q1, &with_params(&q2, p), &t1, &t2, 0.2, 0.99, &batch, &noise).unwrap().0[1]
        });
        assert!(w1 < 1e-4 && w2 < 1e-4, "seed {seed}: {w1} {w2}");
    }
}

#[test]
fn sac_actor_gradient_matches_central_differences() {
    let spec = cliff_spec();
    let mut rng = Rng::seed_from(32);
    for seed in 0..20 {
        let policy = SacPolicy::new(4, &spec, 8, &mut Rng::seed_from(seed)).unwrap();
        let (q1, q2) = (critic(100 + seed), critic(200 + seed));
        let states = random_matrix(&mut rng, 6, 4, 1.0);
        let noise = normal_matrix(&mut rng, 6, 2);
        let alpha = rng.uniform(0.05, 1.0);
        let (loss, grads, _) = actor_loss_and_grads(&policy, &q1, &q2, alpha, &states, &noise).unwrap();
        assert!(loss.is_finite());
        let worst = fd_worst(&policy.actor.params_flat(), &grads.to_flat(), |p| {
            let mut moved = policy.clone();
            moved.actor.set_params_flat(p).unwrap();
            actor_loss_and_grads(&moved, &q1, &q2, alpha, &states, &noise).unwrap().0
        });
        assert!(worst < 1e-4, "seed {seed}: {worst}");
    }
}

#[test]
fn temperature_gradient_matches_central_differences() {
    let mut rng = Rng::seed_from(33);
    for _ in 0..20 {
        let (la, lp, te) = (rng.uniform(-3.0, 1.0), rng.uniform(-4.0, 4.0), rng.uniform(-3.0, 0.0));
        let (_, g) = alpha_loss_and_grad(la, lp, te);
        let fd = (alpha_loss_and_grad(la + H, lp, te).0 - alpha_loss_and_grad(la - H, lp, te).0) / (2.0 * H);
        assert!((fd - g).abs() <= 1e-4 * fd.abs().max(1e-6));
    }
}

fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    (0..x.len())
        .map(|k| {
            let z = (x[k] - mean[k]) / log_std[k].exp();
            -0.5 * z * z - log_std[k] - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

#[test]
fn ppo_gradients_match_central_differences() {
    let spec = cliff_spec();
    let mut rng = Rng::seed_from(34);
    let (clip, vf, ent) = (0.2, 0.5, 0.01);
    for seed in 0..20 {
        let mut policy = PpoPolicy::new(&spec, 8, -0.5, &mut Rng::seed_from(seed)).unwrap();
        policy.log_std = vec![rng.uniform(-1.0, 0.5), rng.uniform(-1.0, 0.5)];
        let value = Mlp::init(&MlpSpec::two_hidden(4, 8, 1), 500 + seed).unwrap();
        let n = 8;
        let states = random_matrix(&mut rng, n, 4, 1.0);
        let raws = random_matrix(&mut rng, n, 2, 1.5);
        // Ratios either well inside the clip band or well outside it, so
        // no finite-difference probe straddles a kink.
        let old_log_probs = (0..n)
            .map(|b| {
                let mean = policy.actor.forward(states.row(b)).unwrap();
                let lp = gaussian_log_prob(&mean, &policy.log_std, raws.row(b));
                let shift = match b % 3 {
                    0 => rng.uniform(-0.1, 0.1),
                    1 => 0.6,
                    _ => -0.6,
                };
                lp - shift
            })
            .collect();
        let batch = PpoBatch {
            states,
            raws,
            old_log_probs,
            advantages: (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            returns: (0..n).map(|_| rng.uniform(-3.0, 3.0)).collect(),
            weights: (0..n).map(|b| if b % 2 == 0 { 1.0 } else { 0.1 }).collect(),
        };
        let (_, grads) = ppo_loss_and_grads(&policy, &value, &batch, clip, vf, ent).unwrap();
        let mut params = policy.actor.params_flat();
        params.extend(&policy.log_std);
        params.extend(value.params_flat());
        let n_actor = policy.actor.num_params();
        let worst = fd_worst(&params, &grads.to_flat(), |p| {
            let mut moved = policy.clone();
            moved.actor.set_params_flat(&p[..n_actor]).unwrap();
            moved.log_std = p[n_actor..n_actor + 2].to_vec();
            let critic = with_params(&value, &p[n_actor + 2..]);
            ppo_loss_and_grads(&moved, &critic, &batch, clip, vf, ent).unwrap().0.total
        });
        assert!(worst < 1e-4, "seed {seed}: {worst}");
    }
}

/// Advantages as explicit discounted sums of TD errors up to the next cut.
fn gae_oracle(r: &[f64], v: &[f64], nv: &[f64], cuts: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    (0..r.len())
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..r.len() {
                acc += w * (r[l] + gamma * nv[l] - v[l]);
                if cuts[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

#[test]
fn gae_matches_explicit_sums() {
    let mut rng = Rng::seed_from(35);
    for _ in 0..200 {
        let n = 1 + rng.below(40);
        let r: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let nv: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let cuts: Vec<bool> = (0..n).map(|_| rng.below(6) == 0).collect();
        let (gamma, lambda) = (rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0));
        let got = gae(&r, &v, &nv, &cuts, gamma, lambda);
        for (a, b) in got.iter().zip(gae_oracle(&r, &v, &nv, &cuts, gamma, lambda)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // lambda = 1 without cuts is the discounted return minus the baseline.
    let r = [1.0, 2.0, 3.0];
    let adv = gae(&r, &[0.0; 3], &[0.0; 3], &[false; 3], 0.5, 1.0);
    assert_eq!(adv, vec![1.0 + 1.0 + 0.75, 2.0 + 1.5, 3.0]);
}

#[test]
fn advantage_normalization_standardizes() {
    let mut rng = Rng::seed_from(36);
    let mut adv: Vec<f64> = (0..100).map(|_| rng.uniform(-5.0, 9.0)).collect();
    normalize_advantages(&mut adv);
    let (m, s) = mean_std(&adv);
    assert!(m.abs() < 1e-12);
    assert!((s - 1.0).abs() < 1e-6);
    let mut flat = vec![2.0; 5];
    normalize_advantages(&mut flat);
    assert_eq!(flat, vec![0.0; 5]);
}

/// One-step bandit whose reward peaks at `a = 0.5`.
struct Bandit {
    spec: EnvSpec,
}

impl Bandit {
    fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "bandit".into(),
                state_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_steps: 1,
                hazard: "none".into(),
                constants: BTreeMap::new(),
            },
        }
    }
}

impl Env for Bandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }
    fn reset(&mut self) -> Vec<f64> {
        vec![0.0]
    }
    fn step(&mut self, action: &[f64]) -> fema_core::Result<StepResult> {
        let (a, clipped) = self.spec.clip_action(action);
        Ok(StepResult {
            state: vec![0.0],
            reward: -(a[0] - 0.5).powi(2),
            end: EndTag::Success,
            action_clipped: clipped,
        })
    }
    fn state(&self) -> Vec<f64> {
        vec![0.0]
    }
}

#[test]
fn sac_finds_the_bandit_optimum() {
    let env = Bandit::new();
    let cfg = SacConfig {
        hidden: 16,
        batch_size: 32,
        update_after: 100,
        actor_lr: 3e-3,
        critic_lr: 3e-3,
        alpha_lr: 3e-3,
        ..SacConfig::default()
    };
    let mut agent = SacAgent::new(env.spec(), cfg, &mut Rng::seed_from(1), Rng::seed_from(2)).unwrap();
    let mut workers = vec![Worker::new(Box::new(env), Rng::seed_from(3))];
    agent.begin(1).unwrap();
    vec_run(&mut workers, &mut agent, None, &mut RunOptions::default(), 3000, &mut ()).unwrap();
    let a = agent.policy().mean_action(&[0.0]).unwrap()[0];
    assert!((a - 0.5).abs() < 0.1, "mean action {a}");
    assert!(agent.updates() > 0);
}
