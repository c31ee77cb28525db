//! Snapshot file for a [`FailureMemory`].
//!
//! ```text
//! magic        4 bytes "FEMA"
//! version      u32     1
//! d_s d_a d_z d_phi    u32 x 4
//! gamma        f64
//! config hash  u64
//! published    u8 (0 cold, 1 published), then u64 embedding version
//! events       u32 count, then per event (see below)
//! pending      u32 count, then per event
//! records      u32 count, then per record:
//!              u64 event id, u32 step, u64 version, f64 return,
//!              d_z f64 state code, d_a f64 action, d_phi f64 joint code
//!
//! event:       u64 episode id, u64 capture step, u32 length T,
//!              T x (d_s state, d_a action, f64 reward, d_s next state, u8 end tag),
//!              T x f64 return
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use super::{EndTag, FailureEvent, FailureMemory, FemaConfig, Generation, MemoryDims, MemoryRecord, Transition};
use crate::error::{Error, Result};
use crate::numeric::codec::{Decoder, Encoder};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"FEMA";
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

fn put_event(enc: &mut Encoder, e: &FailureEvent) {
    enc.u64(e.episode_id).u64(e.capture_step).len_u32(e.transitions.len());
    for t in &e.transitions {
        enc.f64s(&t.state)
            .f64s(&t.action)
            .f64(t.reward)
            .f64s(&t.next_state)
            .u8(t.end.tag());
    }
    enc.f64s(&e.returns);
}

fn get_event(dec: &mut Decoder<'_>, d: &MemoryDims) -> Result<FailureEvent> {
    let episode_id = dec.u64()?;
    let capture_step = dec.u64()?;
    let n = dec.len_u32()?;
    let mut transitions = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        transitions.push(Transition {
            state: dec.f64s(d.d_s)?,
            action: dec.f64s(d.d_a)?,
            reward: dec.f64()?,
            next_state: dec.f64s(d.d_s)?,
            end: EndTag::from_tag(dec.u8()?)?,
        });
    }
    let returns = dec.f64s(n)?;
    Ok(FailureEvent {
        episode_id,
        capture_step,
        transitions,
        returns,
    })
}

impl FailureMemory {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims;
        let mut enc = Encoder::new();
        enc.bytes(SNAPSHOT_MAGIC).u32(SNAPSHOT_FORMAT_VERSION);
        for w in [d.d_s, d.d_a, d.d_z, d.d_phi] {
            enc.len_u32(w);
        }
        enc.f64(self.cfg.gamma).u64(self.cfg.hash());
        match &self.generation {
            Some(g) => enc.u8(1).u64(g.version),
            None => enc.u8(0).u64(0),
        };
        enc.len_u32(self.events.len());
        for e in &self.events {
            put_event(&mut enc, e);
        }
        let pending = self.pending_events();
        enc.len_u32(pending.len());
        for e in &pending {
            put_event(&mut enc, e);
        }
        let records: &[MemoryRecord] = self.generation.as_ref().map_or(&[], |g| &g.records);
        enc.len_u32(records.len());
        for r in records {
            enc.u64(r.event_id)
                .u32(r.step)
                .u64(r.version)
                .f64(r.ret)
                .f64s(&r.z_s)
                .f64s(&r.action)
                .f64s(&r.phi);
        }
        enc.finish()
    }

    /// Parses a snapshot, refusing any header that disagrees with `cfg`
    /// or `dims`. Nothing is returned unless the whole file is valid.
    pub fn from_bytes(bytes: &[u8], cfg: FemaConfig, dims: MemoryDims) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        dec.expect_magic(SNAPSHOT_MAGIC)?;
        let version = dec.u32()?;
        if version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "snapshot format version {version}, expected {SNAPSHOT_FORMAT_VERSION}"
            )));
        }
        let stored = MemoryDims {
            d_s: dec.len_u32()?,
            d_a: dec.len_u32()?,
            d_z: dec.len_u32()?,
            d_phi: dec.len_u32()?,
        };
        if stored != dims {
            return Err(Error::Format(format!(
                "snapshot dims {stored:?} do not match expected {dims:?}"
            )));
        }
        let gamma = dec.f64()?;
        let hash = dec.u64()?;
        if gamma.to_bits() != cfg.gamma.to_bits() || hash != cfg.hash() {
            return Err(Error::Format(format!(
                "snapshot was written under a different memory config (hash {hash:016x}, expected {:016x})",
                cfg.hash()
            )));
        }
        let published = dec.u8()?;
        let gen_version = dec.u64()?;
        let n_events = dec.len_u32()?;
        let events = (0..n_events)
            .map(|_| get_event(&mut dec, &dims))
            .collect::<Result<VecDeque<_>>>()?;
        let n_pending = dec.len_u32()?;
        let pending = (0..n_pending)
            .map(|_| get_event(&mut dec, &dims))
            .collect::<Result<VecDeque<_>>>()?;
        let n_records = dec.len_u32()?;
        let mut records = Vec::with_capacity(n_records.min(1 << 16));
        for _ in 0..n_records {
            let event_id = dec.u64()?;
            let step = dec.u32()?;
            let version = dec.u64()?;
            if version != gen_version {
                return Err(Error::Format(format!(
                    "record version {version} differs from generation {gen_version}"
                )));
            }
            records.push(MemoryRecord {
                event_id,
                step,
                version,
                ret: dec.f64()?,
                z_s: dec.f64s(dims.d_z)?,
                action: dec.f64s(dims.d_a)?,
                phi: dec.f64s(dims.d_phi)?,
            });
        }
        dec.finish()?;
        let generation = match published {
            0 if records.is_empty() => None,
            0 => return Err(Error::Format("cold snapshot carries records".into())),
            1 => Some(Arc::new(Generation {
                version: gen_version,
                records,
            })),
            f => return Err(Error::Format(format!("bad publication flag {f}"))),
        };
        cfg.validate()?;
        Ok(Self {
            cfg,
            dims,
            pending: Mutex::new(pending),
            events,
            generation,
        })
    }

    pub fn snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, cfg: FemaConfig, dims: MemoryDims) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, cfg, dims)
    }
}
