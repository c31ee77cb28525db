//! Little-endian binary encoding shared by parameter files, checkpoints and
//! memory snapshots.
//!
//! Network layout (`FMLP`, version 1):
//!
//! ```text
//! magic     4 bytes  "FMLP"
//! version   u32      1
//! layers    u32      L
//! L times:  u32 inputs, u32 outputs, u8 activation (0 tanh, 1 relu, 2 identity)
//! L times:  inputs*outputs f64 weights (row-major), outputs f64 biases
//! ```

use super::{Activation, Adam, AdamConfig, Layer, Mlp, RngState};
use crate::error::{Error, Result};

pub const MLP_MAGIC: &[u8; 4] = b"FMLP";
pub const MLP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn len_u32(&mut self, n: usize) -> &mut Self {
        self.u32(u32::try_from(n).expect("length fits in u32"))
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        for &v in vs {
            self.f64(v);
        }
        self
    }

    /// Length-prefixed f64 slice.
    pub fn vec(&mut self, vs: &[f64]) -> &mut Self {
        self.len_u32(vs.len()).f64s(vs)
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.len_u32(s.len()).bytes(s.as_bytes())
    }

    pub fn mlp(&mut self, net: &Mlp) -> &mut Self {
        self.bytes(MLP_MAGIC)
            .u32(MLP_FORMAT_VERSION)
            .len_u32(net.layers().len());
        for l in net.layers() {
            self.len_u32(l.inputs())
                .len_u32(l.outputs())
                .u8(l.activation().tag());
        }
        for l in net.layers() {
            self.f64s(l.weights()).f64s(l.bias());
        }
        self
    }

    pub fn adam(&mut self, adam: &Adam) -> &mut Self {
        let c = adam.config;
        self.f64(c.lr).f64(c.beta1).f64(c.beta2).f64(c.eps);
        self.u64(adam.steps());
        let (m, v) = adam.moments();
        self.vec(m).vec(v)
    }

    pub fn rng_state(&mut self, s: &RngState) -> &mut Self {
        self.bytes(&s.seed).u64(s.stream).u128(s.word_pos)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over an encoded buffer. Every read is bounds-checked.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.at
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated input: wanted {n} bytes at offset {}, {} left",
                self.at,
                self.remaining()
            )));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.bytes(N)?);
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.bytes(magic.len())?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn len_u32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.remaining() / 8 < n {
            return Err(Error::Format(format!("truncated input: wanted {n} floats")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len_u32()?;
        self.f64s(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len_u32()?;
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn mlp(&mut self) -> Result<Mlp> {
        self.expect_magic(MLP_MAGIC)?;
        let version = self.u32()?;
        if version != MLP_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported network format version {version}"
            )));
        }
        let n = self.len_u32()?;
        if n == 0 {
            return Err(Error::Format("network with zero layers".into()));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let inputs = self.len_u32()?;
            let outputs = self.len_u32()?;
            let act = Activation::from_tag(self.u8()?)?;
            shapes.push((inputs, outputs, act));
        }
        let mut layers = Vec::with_capacity(n);
        for (inputs, outputs, act) in shapes {
            let w = self.f64s(inputs.saturating_mul(outputs))?;
            let b = self.f64s(outputs)?;
            layers.push(Layer::new(inputs, outputs, w, b, act)?);
        }
        Mlp::from_layers(layers).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn adam(&mut self) -> Result<Adam> {
        let config = AdamConfig {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let t = self.u64()?;
        let m = self.vec()?;
        let v = self.vec()?;
        Adam::from_parts(config, m, v, t)
    }

    pub fn rng_state(&mut self) -> Result<RngState> {
        Ok(RngState {
            seed: self.array()?,
            stream: self.u64()?,
            word_pos: self.u128()?,
        })
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.remaining())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{MlpSpec, Rng};

    #[test]
    fn mlp_round_trips_bit_exactly() {
        let net = Mlp::init(&MlpSpec::two_hidden(3, 5, 2), 4).unwrap();
        let mut enc = Encoder::new();
        enc.mlp(&net);
        let bytes = enc.finish();
        assert_eq!(&bytes[..4], b"FMLP");
        let mut dec = Decoder::new(&bytes);
        let back = dec.mlp().unwrap();
        dec.finish().unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn corrupted_or_truncated_input_is_rejected() {
        let net = Mlp::init(&MlpSpec::two_hidden(2, 2, 1), 4).unwrap();
        let mut enc = Encoder::new();
        enc.mlp(&net);
        let mut bytes = enc.finish();
        assert!(Decoder::new(&bytes[..bytes.len() - 3]).mlp().is_err());
        bytes[0] = b'X';
        assert!(matches!(Decoder::new(&bytes).mlp(), Err(Error::Format(_))));
    }

    #[test]
    fn adam_and_rng_state_round_trip() {
        let mut adam = Adam::new(3, AdamConfig::default());
        adam.step_flat(&mut [0.0; 3], &[1.0, -2.0, 0.5]).unwrap();
        let mut rng = Rng::derive(5, 2);
        rng.normal();
        let mut enc = Encoder::new();
        enc.adam(&adam).rng_state(&rng.state());
        let bytes = enc.finish();
        let mut dec = Decoder::new(&bytes);
        assert_eq!(dec.adam().unwrap(), adam);
        assert_eq!(dec.rng_state().unwrap(), rng.state());
    }
}
