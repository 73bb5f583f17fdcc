use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Bias-corrected Adam moments for one parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let (b1, b2) = (T::from_f64c(c.beta1), T::from_f64c(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let lr_t = T::from_f64c(c.lr * (1.0 - c.beta2.powf(t)).sqrt() / (1.0 - c.beta1.powf(t)));
        let eps_t = T::from_f64c(c.eps * (1.0 - c.beta2.powf(t)).sqrt());
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= lr_t * *mv / (vv.sqrt() + eps_t);
            }
        }
    }
}

const ADAM_MAGIC: &[u8; 4] = b"XQAD";

impl AdamState<f32> {
    /// Binary snapshot: magic, hyperparameters, step, then every moment tensor as f32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ADAM_MAGIC);
        for v in [self.config.lr, self.config.beta1, self.config.beta2, self.config.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for t in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], String> {
            let s = bytes.get(at..at + n).ok_or("truncated optimizer state")?;
            at += n;
            Ok(s)
        };
        if take(4)? != ADAM_MAGIC {
            return Err("bad optimizer state magic".into());
        }
        let mut f = [0.0f64; 4];
        for v in &mut f {
            *v = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let config = AdamConfig { lr: f[0], beta1: f[1], beta2: f[2], eps: f[3] };
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            let rank = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            if rank > 8 {
                return Err("implausible tensor rank".into());
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let len: usize = shape.iter().product();
            let raw = take(4 * len)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::new(&shape, data).map_err(|e| e.0)?);
        }
        if at != bytes.len() {
            return Err("trailing bytes after optimizer state".into());
        }
        let v = tensors.split_off(n);
        Ok(AdamState { config, step, m: tensors, v })
    }
}
