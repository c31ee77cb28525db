//! Checkpoint container.
//!
//! ```text
//! magic        4 bytes "FCKP"
//! version      u32 1
//! config       u32 length + UTF-8 TOML of the run config
//! seed, steps  u64, u64
//! agent        u8 (0 sac, 1 ppo), then the agent's own block
//! stack        u8 (0 absent, 1 present), then the embedding stack block
//! ```
//!
//! The failure memory is saved next to it as a separate snapshot file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fema_core::agents::{PpoAgent, SacAgent};
use fema_core::embedding::EmbeddingStack;
use fema_core::numeric::codec::{Decoder, Encoder};

use crate::config::{AgentKind, RunConfig};

const MAGIC: &[u8; 4] = b"FCKP";
const VERSION: u32 = 1;

pub enum AgentState {
    Sac(SacAgent),
    Ppo(PpoAgent),
}

impl AgentState {
    pub fn kind(&self) -> AgentKind {
        match self {
            AgentState::Sac(_) => AgentKind::Sac,
            AgentState::Ppo(_) => AgentKind::Ppo,
        }
    }
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub steps: u64,
    pub agent: AgentState,
    pub stack: Option<EmbeddingStack>,
}

pub fn encode(
    config: &RunConfig,
    seed: u64,
    steps: u64,
    agent: &AgentState,
    stack: Option<&EmbeddingStack>,
) -> Result<Vec<u8>> {
    let mut enc = Encoder::new();
    enc.bytes(MAGIC).u32(VERSION).str(&config.to_toml()?).u64(seed).u64(steps);
    match agent {
        AgentState::Sac(a) => {
            enc.u8(0);
            a.encode(&mut enc);
        }
        AgentState::Ppo(a) => {
            enc.u8(1);
            a.encode(&mut enc);
        }
    }
    match stack {
        Some(s) => {
            enc.u8(1);
            s.encode(&mut enc);
        }
        None => {
            enc.u8(0);
        }
    }
    Ok(enc.finish())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut dec = Decoder::new(bytes);
    dec.expect_magic(MAGIC)?;
    let version = dec.u32()?;
    if version != VERSION {
        bail!("checkpoint format version {version}, expected {VERSION}");
    }
    let config = RunConfig::parse(&dec.str()?).context("checkpoint carries an invalid config")?;
    let seed = dec.u64()?;
    let steps = dec.u64()?;
    let agent = match dec.u8()? {
        0 => AgentState::Sac(SacAgent::decode(&mut dec, config.sac)?),
        1 => AgentState::Ppo(PpoAgent::decode(&mut dec, config.ppo)?),
        t => bail!("unknown agent tag {t} in checkpoint"),
    };
    let stack = match dec.u8()? {
        0 => None,
        1 => Some(EmbeddingStack::decode(&mut dec)?),
        t => bail!("bad stack flag {t} in checkpoint"),
    };
    dec.finish()?;
    Ok(Checkpoint {
        config,
        seed,
        steps,
        agent,
        stack,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}
