//! Training runs: one directory per seed holding the config echo, the
//! JSONL metric log, a final checkpoint and the memory snapshot.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fema_core::agents::{evaluate, FemaHook, Learner, LossReport, PpoAgent, SacAgent};
use fema_core::envs::{vec_run, EnvConfig, EpisodeRecord, RunObserver, RunOptions, Worker};
use fema_core::memory::UpdateReport;
use fema_core::numeric::Rng;
use fema_core::selection::Decision;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, AgentState};
use crate::config::{AgentKind, ConfigEcho, RunConfig};

/// Random stream ids under a run seed.
pub mod streams {
    pub const LEARNER: u64 = 1;
    pub const MEMORY_TRAIN: u64 = 2;
    pub const NET_INIT: u64 = 3;
    pub const STACK_INIT: u64 = 4;
    pub const WORKER_ACTIONS: u64 = 100;
    pub const WORKER_ENV: u64 = 200;
    pub const EVAL_ENV: u64 = 300;
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MEMORY_FILE: &str = "memory.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const INDEX_FILE: &str = "index.json";

/// Written last, so its presence marks a complete run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub steps: u64,
    pub episodes: usize,
    pub hazards: usize,
    pub mean_length: f64,
    pub memory_updates: usize,
    pub memory_records: usize,
}

/// Index of a multi-seed training directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub name: String,
    pub label: String,
    pub runs: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub seed: u64,
    pub dir: String,
}

struct Logger {
    out: BufWriter<File>,
    loss_every: u64,
    last_loss: Option<u64>,
    eval_every: u64,
    next_eval: u64,
    eval_episodes: usize,
    env: EnvConfig,
    seed: u64,
    trace: bool,
}

impl Logger {
    fn line(&mut self, value: &impl Serialize) -> fema_core::Result<()> {
        serde_json::to_writer(&mut self.out, value).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Episode(&'a EpisodeRecord),
}

impl<L: Learner> RunObserver<L> for Logger {
    fn on_episode(&mut self, record: &EpisodeRecord) -> fema_core::Result<()> {
        self.line(&LogLine::Episode(record))
    }

    fn on_decision(&mut self, step: u64, worker: usize, decision: &Decision) -> fema_core::Result<()> {
        if !self.trace {
            return Ok(());
        }
        let Some(trace) = &decision.trace else {
            return Ok(());
        };
        self.line(&json!({"type": "decision", "step": step, "worker": worker, "trace": trace}))
    }

    fn on_loss(&mut self, step: u64, report: &LossReport) -> fema_core::Result<()> {
        if self.last_loss.is_some_and(|l| step - l < self.loss_every) {
            return Ok(());
        }
        self.last_loss = Some(step);
        self.line(&json!({"type": "loss", "step": step, "updates": report.updates, "values": report.values}))
    }

    fn on_memory_update(&mut self, step: u64, report: &UpdateReport) -> fema_core::Result<()> {
        let training = report.training.as_ref();
        self.line(&json!({
            "type": "memory",
            "step": step,
            "records": report.records,
            "events": report.events,
            "evicted": report.evicted,
            "train_steps": training.map(|t| t.steps),
            "initial_loss": training.map(|t| t.initial_loss),
            "final_loss": training.map(|t| t.final_loss),
        }))
    }

    fn on_tick(&mut self, step: u64, learner: &L) -> fema_core::Result<()> {
        if self.eval_every == 0 || step < self.next_eval {
            return Ok(());
        }
        while self.next_eval <= step {
            self.next_eval += self.eval_every;
        }
        let mut env = self.env.build(Rng::derive(self.seed, streams::EVAL_ENV))?;
        let eps = evaluate(learner.policy(), env.as_mut(), self.eval_episodes)?;
        let n = eps.len() as f64;
        let mean_return = eps.iter().map(|e| e.ret).sum::<f64>() / n;
        let mean_length = eps.iter().map(|e| e.length as f64).sum::<f64>() / n;
        let hazards = eps.iter().filter(|e| e.end == fema_core::memory::EndTag::Hazard).count();
        self.line(&json!({
            "type": "eval",
            "step": step,
            "mean_return": mean_return,
            "mean_length": mean_length,
            "hazards": hazards,
            "returns": eps.iter().map(|e| e.ret).collect::<Vec<_>>(),
        }))
    }
}

fn make_workers(cfg: &RunConfig, seed: u64) -> Result<Vec<Worker>> {
    (0..cfg.run.workers as u64)
        .map(|i| {
            let env = cfg.env.build(Rng::derive(seed, streams::WORKER_ENV + i))?;
            Ok(Worker::new(env, Rng::derive(seed, streams::WORKER_ACTIONS + i)))
        })
        .collect()
}

fn make_hook(cfg: &RunConfig, seed: u64) -> Result<Option<FemaHook>> {
    if !cfg.agent.fema {
        return Ok(None);
    }
    let spec = cfg.env.spec();
    let init_seed = Rng::derive(seed, streams::STACK_INIT).next_u64();
    let mut hook = FemaHook::new(
        spec.state_dim,
        spec.action_dim,
        cfg.effective_fema(),
        cfg.embedding,
        init_seed,
        Rng::derive(seed, streams::MEMORY_TRAIN),
    )?;
    hook.trace = cfg.run.trace;
    Ok(Some(hook))
}

/// Builds a fresh, untrained agent for `seed`.
pub fn make_agent(cfg: &RunConfig, seed: u64) -> Result<AgentState> {
    let spec = cfg.env.spec();
    let mut init = Rng::derive(seed, streams::NET_INIT);
    let rng = Rng::derive(seed, streams::LEARNER);
    Ok(match cfg.agent.kind {
        AgentKind::Sac => AgentState::Sac(SacAgent::new(&spec, cfg.sac, &mut init, rng)?),
        AgentKind::Ppo => AgentState::Ppo(PpoAgent::new(&spec, cfg.ppo, &mut init, rng)?),
    })
}

fn drive<L: Learner>(
    learner: &mut L,
    cfg: &RunConfig,
    seed: u64,
    hook: Option<&mut FemaHook>,
    logger: &mut Logger,
) -> Result<fema_core::envs::RunSummary> {
    let mut workers = make_workers(cfg, seed)?;
    learner.begin(workers.len())?;
    let mut clock = RunOptions::default();
    let summary = vec_run(&mut workers, learner, hook, &mut clock, cfg.run.steps, logger)?;
    // Episodes cut off by the step budget, so every step appears in the log.
    for (worker, w) in workers.iter().enumerate() {
        if w.episode_len() > 0 {
            logger.line(&json!({
                "type": "unfinished",
                "worker": worker,
                "step": summary.steps,
                "length": w.episode_len(),
            }))?;
        }
    }
    Ok(summary)
}

/// Trains one seed into `dir`.
pub fn train_seed(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<SeedSummary> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let _ = fs::remove_file(dir.join(SUMMARY_FILE));
    let echo = ConfigEcho::new(cfg.clone(), seed);
    fs::write(dir.join(CONFIG_FILE), echo.to_toml()?)?;
    let file = File::create(dir.join(METRICS_FILE))?;
    let mut logger = Logger {
        out: BufWriter::new(file),
        loss_every: cfg.run.loss_every,
        last_loss: None,
        eval_every: cfg.run.eval_every,
        next_eval: cfg.run.eval_every,
        eval_episodes: cfg.run.eval_episodes,
        env: cfg.env.clone(),
        seed,
        trace: cfg.run.trace,
    };
    let mut hook = make_hook(cfg, seed)?;
    let mut agent = make_agent(cfg, seed)?;
    let summary = match &mut agent {
        AgentState::Sac(a) => drive(a, cfg, seed, hook.as_mut(), &mut logger),
        AgentState::Ppo(a) => drive(a, cfg, seed, hook.as_mut(), &mut logger),
    }
    .with_context(|| format!("training seed {seed}"))?;
    logger.out.flush()?;

    let bytes = checkpoint::encode(cfg, seed, summary.steps, &agent, hook.as_ref().map(|h| &h.stack))?;
    fs::write(dir.join(CHECKPOINT_FILE), bytes)?;
    if let Some(h) = &hook {
        h.memory.snapshot(dir.join(MEMORY_FILE))?;
    }
    let episodes = summary.episodes.len();
    let out = SeedSummary {
        seed,
        steps: summary.steps,
        episodes,
        hazards: summary
            .episodes
            .iter()
            .filter(|e| e.end == fema_core::memory::EndTag::Hazard)
            .count(),
        mean_length: if episodes == 0 {
            0.0
        } else {
            summary.episodes.iter().map(|e| e.length as f64).sum::<f64>() / episodes as f64
        },
        memory_updates: summary.memory_updates,
        memory_records: hook.as_ref().map_or(0, |h| h.memory.record_count()),
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&out)?)?;
    Ok(out)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

/// Runs every `(config, seed, dir)` cell with up to `jobs` at once.
pub fn run_cells(cells: &[(RunConfig, u64, PathBuf)], jobs: usize) -> Result<Vec<SeedSummary>> {
    let run = || {
        cells
            .par_iter()
            .map(|(cfg, seed, dir)| train_seed(cfg, *seed, dir))
            .collect::<Result<Vec<_>>>()
    };
    if jobs <= 1 {
        cells.iter().map(|(cfg, seed, dir)| train_seed(cfg, *seed, dir)).collect()
    } else {
        pool(jobs)?.install(run)
    }
}

fn write_index(out: &Path, cfg: &RunConfig, label: &str, seeds: &[u64]) -> Result<()> {
    let index = RunIndex {
        name: cfg.run.name.clone(),
        label: label.to_string(),
        runs: seeds
            .iter()
            .map(|&s| IndexEntry {
                seed: s,
                dir: format!("seed_{s}"),
            })
            .collect(),
    };
    fs::write(out.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// `train`: one run per configured seed (shifted by `seed_offset`).
pub fn cmd_train(cfg: &RunConfig, out: &Path, seed_offset: u64) -> Result<Vec<SeedSummary>> {
    fs::create_dir_all(out)?;
    let seeds: Vec<u64> = cfg.run.seeds.iter().map(|s| s + seed_offset).collect();
    write_index(out, cfg, &cfg.run.name, &seeds)?;
    let cells: Vec<_> = seeds.iter().map(|&s| (cfg.clone(), s, seed_dir(out, s))).collect();
    run_cells(&cells, cfg.run.jobs)
}

/// Sweepable settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Epsilon,
    NCandidates,
    UpdateM,
    TopO,
    LambdaRisk,
    /// Memory on or off.
    Fema,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "epsilon" => Axis::Epsilon,
            "n_candidates" => Axis::NCandidates,
            "update_m" => Axis::UpdateM,
            "top_o" => Axis::TopO,
            "lambda_risk" => Axis::LambdaRisk,
            "fema" => Axis::Fema,
            other => bail!(
                "unknown axis `{other}` (expected epsilon, n_candidates, update_m, top_o, lambda_risk or fema)"
            ),
        })
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Epsilon => "epsilon",
            Axis::NCandidates => "n_candidates",
            Axis::UpdateM => "update_m",
            Axis::TopO => "top_o",
            Axis::LambdaRisk => "lambda_risk",
            Axis::Fema => "fema",
        }
    }

    /// Returns `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = cfg.clone();
        let bad = || format!("bad value `{value}` for axis {}", self.name());
        match self {
            Axis::Epsilon => c.fema.epsilon = value.parse().with_context(bad)?,
            Axis::NCandidates => c.fema.n_candidates = value.parse().with_context(bad)?,
            Axis::UpdateM => {
                c.fema.m = value.parse().with_context(bad)?;
                c.fema.capacity = c.fema.capacity.max(c.fema.m);
            }
            Axis::TopO => c.fema.top_o = value.parse().with_context(bad)?,
            Axis::LambdaRisk => c.fema.lambda_risk = value.parse().with_context(bad)?,
            Axis::Fema => c.agent.fema = value.parse().with_context(bad)?,
        }
        c.validate().with_context(bad)?;
        Ok(c)
    }
}

/// Index of a sweep directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub axis: String,
    pub variants: Vec<SweepVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepVariant {
    pub label: String,
    pub value: String,
    pub dir: String,
}

pub const SWEEP_FILE: &str = "sweep.json";

/// `ablate`: every value of `axis` crossed with every seed.
pub fn cmd_ablate(cfg: &RunConfig, axis: Axis, values: &[String], out: &Path) -> Result<SweepIndex> {
    if values.is_empty() {
        bail!("ablate needs at least one value");
    }
    fs::create_dir_all(out)?;
    let mut cells = Vec::new();
    let mut variants = Vec::new();
    for v in values {
        let vcfg = axis.apply(cfg, v)?;
        let label = format!("{}={v}", axis.name());
        let dir = format!("{}_{v}", axis.name());
        let vdir = out.join(&dir);
        fs::create_dir_all(&vdir)?;
        write_index(&vdir, &vcfg, &label, &vcfg.run.seeds)?;
        for &s in &vcfg.run.seeds {
            cells.push((vcfg.clone(), s, seed_dir(&vdir, s)));
        }
        variants.push(SweepVariant {
            label,
            value: v.clone(),
            dir,
        });
    }
    let index = SweepIndex {
        axis: axis.name().to_string(),
        variants,
    };
    fs::write(out.join(SWEEP_FILE), serde_json::to_string_pretty(&index)?)?;
    run_cells(&cells, cfg.run.jobs)?;
    Ok(index)
}
