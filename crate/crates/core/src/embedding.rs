//! Joint state/action embedding with a risk head.
//!
//! Four networks compose as `h(j([f(s), g(a)]))`: a state encoder `f`, an
//! action encoder `g`, a joint embedder `j` over the concatenated codes, and
//! a scalar risk head `h`. The only way to obtain a joint embedding is
//! through `f` and `g`.
//!
//! The risk head regresses onto negated, batch-standardized Monte Carlo
//! returns, so a higher risk means a lower expected return. The loss is
//! backpropagated through all four networks, which share one Adam state.

use serde::{Deserialize, Serialize};

use crate::error::{check_width, Error, Result};
use crate::numeric::codec::{Decoder, Encoder};
use crate::numeric::{mean_std, Adam, AdamConfig, Gradients, Matrix, Mlp, MlpSpec, Rng};

/// Floor on the batch standard deviation before dividing.
pub const RETURN_NORM_EPS: f64 = 1e-6;

const STACK_MAGIC: &[u8; 4] = b"FEMB";
const STACK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// Width of the state code `z_s`.
    pub d_z: usize,
    /// Width of the action code `z_a`.
    pub d_z_a: usize,
    /// Width of the joint embedding.
    pub d_phi: usize,
    /// Hidden width of all four networks (two tanh layers each).
    pub hidden: usize,
    pub lr: f64,
    /// Passes over the stored samples per memory update.
    pub epochs: usize,
    pub batch_size: usize,
    /// Optional cap on gradient steps per memory update.
    pub max_steps: Option<usize>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            d_z: 16,
            d_z_a: 8,
            d_phi: 32,
            hidden: 64,
            lr: 3e-4,
            epochs: 50,
            batch_size: 64,
            max_steps: None,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.d_z_a == 0 || self.d_phi == 0 || self.hidden == 0 {
            return Err(Error::Config("embedding widths must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("embedding batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("embedding lr must be >= 0".into()));
        }
        Ok(())
    }
}

/// Widths of the raw inputs and the three codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDims {
    pub d_s: usize,
    pub d_a: usize,
    pub d_z: usize,
    pub d_z_a: usize,
    pub d_phi: usize,
}

/// One supervised example: a raw pair and its Monte Carlo return.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSample<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Trained,
    /// No samples were available; nothing changed.
    EmptyMemory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub status: TrainStatus,
    /// Mean batch loss over the first epoch, measured before each step.
    pub initial_loss: f64,
    /// Mean batch loss over the last epoch, measured before each step.
    pub final_loss: f64,
    pub steps: usize,
    /// Batches of size one, whose normalized target is always zero.
    pub singleton_batches: usize,
}

/// Gradients for each of the four networks.
#[derive(Debug, Clone)]
pub struct StackGradients {
    pub f: Gradients,
    pub g: Gradients,
    pub j: Gradients,
    pub h: Gradients,
}

impl StackGradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.f.to_flat();
        v.extend(self.g.to_flat());
        v.extend(self.j.to_flat());
        v.extend(self.h.to_flat());
        v
    }
}

/// Negated z-scores of a batch of returns, population standard deviation
/// floored at [`RETURN_NORM_EPS`].
pub fn normalize_returns(returns: &[f64]) -> Result<Vec<f64>> {
    if returns.is_empty() {
        return Err(Error::Usage("cannot normalize an empty batch".into()));
    }
    let (mu, sigma) = mean_std(returns);
    Ok(returns
        .iter()
        .map(|h| -(h - mu) / sigma.max(RETURN_NORM_EPS))
        .collect())
}

#[derive(Debug, Clone)]
pub struct EmbeddingStack {
    dims: StackDims,
    hidden: usize,
    f: Mlp,
    g: Mlp,
    j: Mlp,
    h: Mlp,
    adam: Adam,
    version: u64,
}

impl EmbeddingStack {
    pub fn new(d_s: usize, d_a: usize, cfg: &EmbeddingConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from(seed);
        let f = Mlp::init_with(&MlpSpec::two_hidden(d_s, cfg.hidden, cfg.d_z), &mut rng)?;
        let g = Mlp::init_with(&MlpSpec::two_hidden(d_a, cfg.hidden, cfg.d_z_a), &mut rng)?;
        let j = Mlp::init_with(
            &MlpSpec::two_hidden(cfg.d_z + cfg.d_z_a, cfg.hidden, cfg.d_phi),
            &mut rng,
        )?;
        let h = Mlp::init_with(&MlpSpec::two_hidden(cfg.d_phi, cfg.hidden, 1), &mut rng)?;
        Self::from_networks(f, g, j, h, AdamConfig::with_lr(cfg.lr))
    }

    /// Assembles a stack from explicit networks, checking the
    /// concatenation contract and the scalar risk output.
    pub fn from_networks(f: Mlp, g: Mlp, j: Mlp, h: Mlp, adam: AdamConfig) -> Result<Self> {
        check_width("joint embedder input", f.output_dim() + g.output_dim(), j.input_dim())?;
        check_width("risk head input", j.output_dim(), h.input_dim())?;
        check_width("risk head output", 1, h.output_dim())?;
        let dims = StackDims {
            d_s: f.input_dim(),
            d_a: g.input_dim(),
            d_z: f.output_dim(),
            d_z_a: g.output_dim(),
            d_phi: j.output_dim(),
        };
        let hidden = f.spec().widths.get(1).copied().unwrap_or(dims.d_z);
        let adam = Adam::for_nets(&[&f, &g, &j, &h], adam);
        Ok(Self {
            dims,
            hidden,
            f,
            g,
            j,
            h,
            adam,
            version: 0,
        })
    }

    /// A stack whose every parameter is zero; all encodings are zero.
    pub fn zeros(d_s: usize, d_a: usize, cfg: &EmbeddingConfig) -> Result<Self> {
        cfg.validate()?;
        Self::from_networks(
            Mlp::zeros(&MlpSpec::two_hidden(d_s, cfg.hidden, cfg.d_z))?,
            Mlp::zeros(&MlpSpec::two_hidden(d_a, cfg.hidden, cfg.d_z_a))?,
            Mlp::zeros(&MlpSpec::two_hidden(cfg.d_z + cfg.d_z_a, cfg.hidden, cfg.d_phi))?,
            Mlp::zeros(&MlpSpec::two_hidden(cfg.d_phi, cfg.hidden, 1))?,
            AdamConfig::with_lr(cfg.lr),
        )
    }

    pub fn dims(&self) -> StackDims {
        self.dims
    }

    /// Generation counter, bumped by every training call that steps.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn networks(&self) -> [&Mlp; 4] {
        [&self.f, &self.g, &self.j, &self.h]
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.adam.config.lr = lr;
    }

    pub fn encode_state(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.f.forward(s)
    }

    pub fn encode_action(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.g.forward(a)
    }

    pub fn joint_embed(&self, z_s: &[f64], z_a: &[f64]) -> Result<Vec<f64>> {
        check_width("state code", self.dims.d_z, z_s.len())?;
        check_width("action code", self.dims.d_z_a, z_a.len())?;
        let mut z = Vec::with_capacity(z_s.len() + z_a.len());
        z.extend_from_slice(z_s);
        z.extend_from_slice(z_a);
        self.j.forward(&z)
    }

    pub fn risk(&self, phi: &[f64]) -> Result<f64> {
        Ok(self.h.forward(phi)?[0])
    }

    /// `j(f(s), g(a))`.
    pub fn embed(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let z_s = self.encode_state(s)?;
        let z_a = self.encode_action(a)?;
        self.joint_embed(&z_s, &z_a)
    }

    pub fn encode_states(&self, states: &Matrix) -> Result<Matrix> {
        self.f.predict(states)
    }

    /// Joint embeddings for a batch of pairs.
    pub fn embed_batch(&self, states: &Matrix, actions: &Matrix) -> Result<Matrix> {
        let z_s = self.f.predict(states)?;
        let z_a = self.g.predict(actions)?;
        self.j.predict(&z_s.hcat(&z_a)?)
    }

    pub fn risk_batch(&self, phis: &Matrix) -> Result<Vec<f64>> {
        Ok(self.h.predict(phis)?.into_vec())
    }

    /// Mean squared error of the risk head against `targets`.
    pub fn risk_loss(&self, states: &Matrix, actions: &Matrix, targets: &[f64]) -> Result<f64> {
        check_width("risk targets", states.rows(), targets.len())?;
        let phi = self.embed_batch(states, actions)?;
        let out = self.h.predict(&phi)?;
        let n = targets.len() as f64;
        Ok(out
            .as_slice()
            .iter()
            .zip(targets)
            .map(|(o, y)| (o - y) * (o - y))
            .sum::<f64>()
            / n)
    }

    /// Loss and its gradient with respect to every parameter of f, g, j, h.
    pub fn risk_loss_and_grads(
        &self,
        states: &Matrix,
        actions: &Matrix,
        targets: &[f64],
    ) -> Result<(f64, StackGradients)> {
        check_width("risk targets", states.rows(), targets.len())?;
        check_width("risk actions", states.rows(), actions.rows())?;
        let n = targets.len() as f64;
        let cf = self.f.forward_batch(states)?;
        let cg = self.g.forward_batch(actions)?;
        let cj = self.j.forward_batch(&cf.output().hcat(cg.output())?)?;
        let ch = self.h.forward_batch(cj.output())?;
        let out = ch.output();
        let mut loss = 0.0;
        let mut d_out = Matrix::zeros(out.rows(), 1);
        for (i, y) in targets.iter().enumerate() {
            let e = out.get(i, 0) - y;
            loss += e * e;
            d_out.set(i, 0, 2.0 * e / n);
        }
        loss /= n;
        let (gh, d_phi) = self.h.backward(&ch, &d_out)?;
        let (gj, d_z) = self.j.backward(&cj, &d_phi)?;
        let (d_zs, d_za) = d_z.split_cols(self.dims.d_z)?;
        let (gf, _) = self.f.backward(&cf, &d_zs)?;
        let (gg, _) = self.g.backward(&cg, &d_za)?;
        Ok((
            loss,
            StackGradients {
                f: gf,
                g: gg,
                j: gj,
                h: gh,
            },
        ))
    }

    pub fn apply_gradients(&mut self, grads: &StackGradients) -> Result<()> {
        self.adam.step(
            &mut [&mut self.f, &mut self.g, &mut self.j, &mut self.h],
            &[&grads.f, &grads.g, &grads.j, &grads.h],
        )
    }

    /// Parameters of f, g, j, h concatenated in that order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.f.params_flat();
        v.extend(self.g.params_flat());
        v.extend(self.j.params_flat());
        v.extend(self.h.params_flat());
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.networks().iter().map(|n| n.num_params()).sum();
        check_width("stack parameters", total, flat.len())?;
        let mut at = 0;
        for net in [&mut self.f, &mut self.g, &mut self.j, &mut self.h] {
            let n = net.num_params();
            net.set_params_flat(&flat[at..at + n])?;
            at += n;
        }
        Ok(())
    }

    /// Mini-batch regression of the risk head onto `-z(H)`.
    ///
    /// Samples are shuffled each epoch with `rng`, cut into batches of
    /// `cfg.batch_size`, and every batch is standardized on its own.
    pub fn train_risk(
        &mut self,
        samples: &[RiskSample<'_>],
        cfg: &EmbeddingConfig,
        rng: &mut Rng,
    ) -> Result<TrainReport> {
        if samples.is_empty() {
            return Ok(TrainReport {
                status: TrainStatus::EmptyMemory,
                initial_loss: 0.0,
                final_loss: 0.0,
                steps: 0,
                singleton_batches: 0,
            });
        }
        cfg.validate()?;
        for s in samples {
            check_width("risk sample state", self.dims.d_s, s.state.len())?;
            check_width("risk sample action", self.dims.d_a, s.action.len())?;
            if !s.ret.is_finite() {
                return Err(Error::Training("non-finite return in risk sample".into()));
            }
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut report = TrainReport {
            status: TrainStatus::Trained,
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
            steps: 0,
            singleton_batches: 0,
        };
        let budget = cfg.max_steps.unwrap_or(usize::MAX);
        'epochs: for epoch in 0..cfg.epochs {
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                if report.steps >= budget {
                    if batches > 0 {
                        report.final_loss = epoch_loss / batches as f64;
                    }
                    break 'epochs;
                }
                if chunk.len() == 1 {
                    report.singleton_batches += 1;
                }
                let states =
                    Matrix::from_rows(self.dims.d_s, chunk.iter().map(|&i| samples[i].state))?;
                let actions =
                    Matrix::from_rows(self.dims.d_a, chunk.iter().map(|&i| samples[i].action))?;
                let returns: Vec<f64> = chunk.iter().map(|&i| samples[i].ret).collect();
                let targets = normalize_returns(&returns)?;
                let (loss, grads) = self.risk_loss_and_grads(&states, &actions, &targets)?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "risk loss is {loss} at epoch {epoch}, step {}",
                        report.steps
                    )));
                }
                self.apply_gradients(&grads)?;
                report.steps += 1;
                epoch_loss += loss;
                batches += 1;
            }
            let mean = epoch_loss / batches.max(1) as f64;
            if epoch == 0 {
                report.initial_loss = mean;
            }
            report.final_loss = mean;
        }
        if report.initial_loss.is_nan() {
            report.initial_loss = report.final_loss;
        }
        if report.steps > 0 {
            self.version += 1;
        }
        Ok(report)
    }

    pub fn encode(&self, enc: &mut Encoder) {
        let d = self.dims;
        enc.bytes(STACK_MAGIC).u32(STACK_FORMAT_VERSION);
        for w in [d.d_s, d.d_a, d.d_z, d.d_z_a, d.d_phi, self.hidden] {
            enc.len_u32(w);
        }
        enc.u64(self.version);
        for net in self.networks() {
            enc.mlp(net);
        }
        enc.adam(&self.adam);
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        dec.expect_magic(STACK_MAGIC)?;
        let version = dec.u32()?;
        if version != STACK_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported embedding stack format version {version}"
            )));
        }
        let mut w = [0usize; 6];
        for slot in &mut w {
            *slot = dec.len_u32()?;
        }
        let emb_version = dec.u64()?;
        let f = dec.mlp()?;
        let g = dec.mlp()?;
        let j = dec.mlp()?;
        let h = dec.mlp()?;
        let adam = dec.adam()?;
        let mut stack = Self::from_networks(f, g, j, h, adam.config)?;
        let expected = StackDims {
            d_s: w[0],
            d_a: w[1],
            d_z: w[2],
            d_z_a: w[3],
            d_phi: w[4],
        };
        if stack.dims != expected {
            return Err(Error::Format(format!(
                "embedding header {expected:?} disagrees with stored networks {:?}",
                stack.dims
            )));
        }
        check_width("adam moments", stack.adam.num_params(), adam.num_params())?;
        stack.adam = adam;
        stack.hidden = w[5];
        stack.version = emb_version;
        Ok(stack)
    }
}
