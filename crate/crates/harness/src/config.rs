//! Run configuration: a TOML file with one table per module.
//!
//! ```toml
//! [run]        # name, seeds, steps, workers, eval cadence, logging
//! [env]        # kind = "cliff_corridor" | "tilt_pole" | "grid_hazard", plus constants
//! [agent]      # kind = "sac" | "ppo", fema = true | false
//! [sac]        # SAC-lite settings
//! [ppo]        # PPO-lite settings
//! [fema]       # memory and selection settings
//! [embedding]  # encoder/risk-head settings
//! [report]     # smoothing window, threshold, length windows
//! ```
//!
//! Unknown keys are rejected. Any key can be overridden from the
//! environment as `FEMA__<table>__<key>=<toml value>`, e.g.
//! `FEMA__fema__epsilon=0.1` or `FEMA__run__seeds=[1,2]`.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fema_core::agents::{PpoConfig, SacConfig};
use fema_core::embedding::EmbeddingConfig;
use fema_core::envs::{EnvConfig, EnvSpec};
use fema_core::memory::FemaConfig;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "FEMA__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Sac,
    Ppo,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::Sac => "sac",
            AgentKind::Ppo => "ppo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Environment steps per seed.
    pub steps: u64,
    /// Parallel environment workers per run.
    pub workers: usize,
    /// Deterministic evaluation every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Minimum steps between logged loss records.
    pub loss_every: u64,
    /// Log a selection trace for every decision.
    pub trace: bool,
    /// Seeds (or sweep cells) run concurrently.
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seeds: vec![0],
            steps: 30_000,
            workers: 1,
            eval_every: 0,
            eval_episodes: 5,
            loss_every: 1_000,
            trace: false,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSection {
    pub kind: AgentKind,
    pub fema: bool,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self {
            kind: AgentKind::Sac,
            fema: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Trailing episode window for the learning curve.
    pub window: usize,
    /// Grid points per learning curve.
    pub points: usize,
    /// Return the efficiency table measures steps to.
    pub threshold: Option<f64>,
    /// Episode-length windows as step pairs; an episode counts when its
    /// final step lies in `(start, end]`. Thirds of the budget when empty.
    pub length_windows: Vec<[u64; 2]>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            window: 20,
            points: 60,
            threshold: None,
            length_windows: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvConfig,
    pub agent: AgentSection,
    pub sac: SacConfig,
    pub ppo: PpoConfig,
    pub fema: FemaConfig,
    pub embedding: EmbeddingConfig,
    pub report: ReportSection,
}

/// What gets written next to every run so its log is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEcho {
    pub seed: u64,
    pub config: RunConfig,
    pub env_spec: EnvSpec,
}

impl RunConfig {
    pub fn gamma(&self) -> f64 {
        match self.agent.kind {
            AgentKind::Sac => self.sac.gamma,
            AgentKind::Ppo => self.ppo.gamma,
        }
    }

    /// The memory settings actually used: the discount always follows the
    /// agent's.
    pub fn effective_fema(&self) -> FemaConfig {
        FemaConfig {
            gamma: self.gamma(),
            ..self.fema
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            bail!("run.seeds must list at least one seed");
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.run.seeds.len() {
            bail!("run.seeds must be distinct");
        }
        if self.run.workers == 0 {
            bail!("run.workers must be at least 1");
        }
        if self.run.jobs == 0 {
            bail!("run.jobs must be at least 1");
        }
        if self.report.window == 0 || self.report.points == 0 {
            bail!("report.window and report.points must be positive");
        }
        if self.run.eval_every > 0 && self.run.eval_episodes == 0 {
            bail!("run.eval_episodes must be positive when evaluation is enabled");
        }
        self.env.validate().context("invalid [env]")?;
        match self.agent.kind {
            AgentKind::Sac => self.sac.validate().context("invalid [sac]")?,
            AgentKind::Ppo => self.ppo.validate().context("invalid [ppo]")?,
        }
        self.effective_fema().validate().context("invalid [fema]")?;
        self.embedding.validate().context("invalid [embedding]")?;
        Ok(())
    }

    /// Non-fatal oddities worth telling the user about.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.agent.fema && self.fema.n_candidates != 1 {
            w.push(format!(
                "agent.fema is off, so fema.n_candidates = {} is unused",
                self.fema.n_candidates
            ));
        }
        if self.fema.gamma != self.gamma() {
            w.push(format!(
                "fema.gamma = {} is replaced by the agent discount {}",
                self.fema.gamma,
                self.gamma()
            ));
        }
        if self.agent.kind == AgentKind::Sac && self.ppo.importance_correction {
            w.push("ppo.importance_correction has no effect on SAC".into());
        }
        w
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Parses TOML text, applying `overrides` (`table.key` paths) first.
    pub fn parse_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for (path, raw) in overrides {
            apply_override(&mut table, path, raw)?;
        }
        let cfg: RunConfig = match table.try_into() {
            Ok(cfg) => cfg,
            Err(e) => {
                // Deserializing the text itself points at the offending line.
                if let Err(located) = toml::from_str::<RunConfig>(text) {
                    return Err(anyhow::Error::new(located).context("config does not match the schema"));
                }
                return Err(anyhow::Error::new(e).context("an override does not match the schema"));
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Reads a config file and applies `FEMA__*` environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse_with(&text, &env_overrides())
            .with_context(|| format!("in config {}", path.display()))
    }
}

/// `FEMA__table__key=value` pairs from the process environment, sorted.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

/// Parses an override value as TOML, falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        bail!("override `{path}` must name a table and a key");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override `{path}`: `{p}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl ConfigEcho {
    pub fn new(config: RunConfig, seed: u64) -> Self {
        let env_spec = config.env.spec();
        Self {
            seed,
            config,
            env_spec,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}
