use serde::{Deserialize, Serialize};

use super::{Gradients, Mlp};
use crate::error::{check_width, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moments over a fixed, ordered parameter set. One state may cover
/// several networks; they are then always stepped together, in the order
/// given at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn for_nets(nets: &[&Mlp], config: AdamConfig) -> Self {
        Self::new(nets.iter().map(|n| n.num_params()).sum(), config)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }

    pub(crate) fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(config: AdamConfig, m: Vec<f64>, v: Vec<f64>, t: u64) -> Result<Self> {
        check_width("adam moments", m.len(), v.len())?;
        Ok(Self { config, m, v, t })
    }

    fn coefficients(&self) -> (f64, f64) {
        let t = self.t as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }

    #[inline]
    fn update_slice(&mut self, offset: usize, params: &mut [f64], grads: &[f64], bc: (f64, f64)) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc.0;
            let v_hat = v[i] / bc.1;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// One step over a flat parameter vector.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_width("adam parameters", self.m.len(), params.len())?;
        check_width("adam gradients", params.len(), grads.len())?;
        self.t += 1;
        let bc = self.coefficients();
        self.update_slice(0, params, grads, bc);
        Ok(())
    }

    /// One step over several networks sharing this state.
    pub fn step(&mut self, nets: &mut [&mut Mlp], grads: &[&Gradients]) -> Result<()> {
        check_width("adam networks", nets.len(), grads.len())?;
        let total: usize = nets.iter().map(|n| n.num_params()).sum();
        check_width("adam parameters", self.m.len(), total)?;
        for (net, g) in nets.iter().zip(grads) {
            check_width("gradient layers", net.layers().len(), g.layer_count())?;
            for (i, l) in net.layers().iter().enumerate() {
                check_width("weight gradient", l.weights().len(), g.weights[i].len())?;
                check_width("bias gradient", l.bias().len(), g.bias[i].len())?;
            }
        }
        self.t += 1;
        let bc = self.coefficients();
        let mut offset = 0;
        for (net, g) in nets.iter_mut().zip(grads) {
            for (i, layer) in net.layers_mut().iter_mut().enumerate() {
                let (w, b) = layer.params_mut();
                let nw = w.len();
                self.update_slice(offset, w, &g.weights[i], bc);
                offset += nw;
                let nb = b.len();
                self.update_slice(offset, b, &g.bias[i], bc);
                offset += nb;
            }
            net.bump_version();
        }
        Ok(())
    }

    pub fn step_one(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        self.step(&mut [net], &[grads])
    }
}
