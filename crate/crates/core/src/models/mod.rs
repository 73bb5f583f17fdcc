//! Policy-value networks: a micro ResNet with the 1×1 entry convolution and no
//! pooling, the unmodified 7×7/stride-2/max-pool ResNet entry for ablations,
//! and a micro ViT that treats every board cell as one token.
//!
//! Every variant produces per-cell features; the flat policy head scores a
//! move as a scaled dot product between the origin cell's query and the
//! destination cell's key, giving the 90 × 90 = 8100 action logits. The value
//! head ends in `tanh`.

mod checkpoint;
mod sampling;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{init, Graph, LayerSpec, ParamSet, Real, Tensor, Var};
use crate::encoding::{FeatureVariant, LegalityMask, Observation, NUM_ACTIONS};
use crate::rules::{FILES, NUM_SQUARES, RANKS};

pub use checkpoint::{load, load_bytes, load_expecting, probe_hash, save, save_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sampling::{argmax_move, masked_distribution, move_logits, sample_index, sample_move, tempered_distribution};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("position is terminal")]
    TerminalPosition,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Architecture {
    ModResNetMicro { blocks: usize, channels: usize },
    ViTMicro { layers: usize, d_model: usize, heads: usize },
    ResNetUnmodified { blocks: usize, channels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PolicyHead {
    #[default]
    Flat8100,
    Factorized16x90,
}

fn default_head_dim() -> usize {
    32
}

fn default_value_hidden() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub arch: Architecture,
    #[serde(default)]
    pub feature_variant: FeatureVariant,
    #[serde(default)]
    pub policy_head: PolicyHead,
    /// Query/key width of the flat policy head.
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_value_hidden")]
    pub value_hidden: usize,
}

impl NetConfig {
    pub fn mod_resnet(blocks: usize, channels: usize) -> Self {
        NetConfig::new(Architecture::ModResNetMicro { blocks, channels })
    }

    pub fn vit(layers: usize, d_model: usize, heads: usize) -> Self {
        NetConfig::new(Architecture::ViTMicro { layers, d_model, heads })
    }

    pub fn resnet_unmodified(blocks: usize, channels: usize) -> Self {
        NetConfig::new(Architecture::ResNetUnmodified { blocks, channels })
    }

    fn new(arch: Architecture) -> Self {
        NetConfig {
            arch,
            feature_variant: FeatureVariant::default(),
            policy_head: PolicyHead::default(),
            head_dim: default_head_dim(),
            value_hidden: default_value_hidden(),
        }
    }

    pub fn with_features(mut self, v: FeatureVariant) -> Self {
        self.feature_variant = v;
        self
    }

    pub fn with_policy_head(mut self, h: PolicyHead) -> Self {
        self.policy_head = h;
        self
    }

    pub fn with_head_dim(mut self, d: usize) -> Self {
        self.head_dim = d;
        self
    }

    pub fn with_value_hidden(mut self, h: usize) -> Self {
        self.value_hidden = h;
        self
    }

    /// Width of the per-cell features fed to the heads.
    fn feature_width(&self) -> usize {
        match self.arch {
            Architecture::ModResNetMicro { channels, .. } | Architecture::ResNetUnmodified { channels, .. } => channels,
            Architecture::ViTMicro { d_model, .. } => d_model,
        }
    }

    /// Runs shape inference over the whole stack.
    pub fn validate(&self) -> Result<(), ModelError> {
        let cfg = |e: crate::autograd::ShapeError| ModelError::Config(e.0);
        if self.head_dim == 0 || self.value_hidden == 0 {
            return Err(ModelError::Config("head widths must be positive".into()));
        }
        let planes = self.feature_variant.planes();
        let input = vec![1, RANKS, FILES, planes];
        match self.arch {
            Architecture::ModResNetMicro { blocks, channels } | Architecture::ResNetUnmodified { blocks, channels } => {
                if channels == 0 {
                    return Err(ModelError::Config("channels must be positive".into()));
                }
                let (k, s) = self.entry_conv();
                let mut shape = LayerSpec::Conv2D { kernel: k, in_ch: planes, out_ch: channels, stride: s }
                    .output_shape(&input)
                    .map_err(cfg)?;
                if self.unmodified() {
                    shape = LayerSpec::MaxPool2D.output_shape(&shape).map_err(cfg)?;
                }
                for _ in 0..blocks {
                    shape = conv3(channels).output_shape(&shape).map_err(cfg)?;
                }
                Ok(())
            }
            Architecture::ViTMicro { d_model, heads, .. } => {
                LayerSpec::MultiHeadAttention { d_model, heads }
                    .output_shape(&[1, NUM_SQUARES + 1, d_model])
                    .map_err(cfg)?;
                Ok(())
            }
        }
    }

    fn unmodified(&self) -> bool {
        matches!(self.arch, Architecture::ResNetUnmodified { .. })
    }

    fn entry_conv(&self) -> (usize, usize) {
        if self.unmodified() {
            (7, 2)
        } else {
            (1, 1)
        }
    }

    /// Token count for the ViT variant: one per cell plus the readout token.
    pub fn token_count(&self) -> Option<usize> {
        matches!(self.arch, Architecture::ViTMicro { .. }).then_some(NUM_SQUARES + 1)
    }
}

fn conv3(channels: usize) -> LayerSpec {
    LayerSpec::Conv2D { kernel: 3, in_ch: channels, out_ch: channels, stride: 1 }
}

/// Policy logits and value for one position.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyValueOutput {
    /// 8100 flat logits in the observation's frame.
    pub logits: Vec<f32>,
    /// In `[-1, 1]`, from the mover's perspective.
    pub value: f32,
    /// Slot logits (mover pieces in ascending cell order, padded with -inf)
    /// and destination logits, when the factorized head is configured.
    pub factorized: Option<(Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub output: PolicyValueOutput,
    /// Masked softmax of the logits: exactly 0 off the mask.
    pub probs: Vec<f32>,
}

/// Graph handles for a batch forward pass.
pub struct Heads {
    /// `[B, 8100]`
    pub logits: Var,
    /// `[B]`
    pub value: Var,
    /// `[B, 90]` origin and destination scores (factorized head only).
    pub factor_scores: Option<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetConfig,
    params: ParamSet<f32>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [Var] {
        let s = &self.vars[self.next..self.next + n];
        self.next += n;
        s
    }
}

impl Network {
    pub fn build(config: NetConfig, seed: u64) -> Result<Network, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let add_layer = |params: &mut ParamSet<f32>, name: &str, spec: &LayerSpec, rng: &mut ChaCha8Rng| {
            let suffixes = match spec {
                LayerSpec::LayerNorm { .. } => &["gamma", "beta"][..],
                LayerSpec::MultiHeadAttention { .. } => &["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"][..],
                _ => &["w", "b"][..],
            };
            for (t, suffix) in spec.init_params::<f32, _>(rng).into_iter().zip(suffixes) {
                params.push(format!("{name}.{suffix}"), t);
            }
        };
        let planes = config.feature_variant.planes();
        let width = config.feature_width();
        match config.arch {
            Architecture::ModResNetMicro { blocks, channels } | Architecture::ResNetUnmodified { blocks, channels } => {
                let (k, s) = config.entry_conv();
                let entry = LayerSpec::Conv2D { kernel: k, in_ch: planes, out_ch: channels, stride: s };
                add_layer(&mut params, "entry.conv", &entry, &mut rng);
                add_layer(&mut params, "entry.norm", &LayerSpec::LayerNorm { dim: channels }, &mut rng);
                for b in 0..blocks {
                    add_layer(&mut params, &format!("block{b}.conv1"), &conv3(channels), &mut rng);
                    add_layer(&mut params, &format!("block{b}.norm1"), &LayerSpec::LayerNorm { dim: channels }, &mut rng);
                    add_layer(&mut params, &format!("block{b}.conv2"), &conv3(channels), &mut rng);
                    add_layer(&mut params, &format!("block{b}.norm2"), &LayerSpec::LayerNorm { dim: channels }, &mut rng);
                }
                if config.unmodified() {
                    let pooled = pooled_cells();
                    let proj = LayerSpec::Dense { input: pooled * channels, output: NUM_SQUARES * channels };
                    add_layer(&mut params, "unpool.proj", &proj, &mut rng);
                }
            }
            Architecture::ViTMicro { layers, d_model, .. } => {
                add_layer(&mut params, "embed", &LayerSpec::Dense { input: planes, output: d_model }, &mut rng);
                params.push("readout", init::normal(&mut rng, 0.02, &[1, d_model]));
                params.push("pos", init::normal(&mut rng, 0.02, &[NUM_SQUARES + 1, d_model]));
                let heads = match config.arch {
                    Architecture::ViTMicro { heads, .. } => heads,
                    _ => unreachable!(),
                };
                for l in 0..layers {
                    add_layer(&mut params, &format!("layer{l}.norm1"), &LayerSpec::LayerNorm { dim: d_model }, &mut rng);
                    add_layer(&mut params, &format!("layer{l}.attn"), &LayerSpec::MultiHeadAttention { d_model, heads }, &mut rng);
                    add_layer(&mut params, &format!("layer{l}.norm2"), &LayerSpec::LayerNorm { dim: d_model }, &mut rng);
                    add_layer(&mut params, &format!("layer{l}.mlp1"), &LayerSpec::Dense { input: d_model, output: 2 * d_model }, &mut rng);
                    add_layer(&mut params, &format!("layer{l}.mlp2"), &LayerSpec::Dense { input: 2 * d_model, output: d_model }, &mut rng);
                }
                add_layer(&mut params, "final.norm", &LayerSpec::LayerNorm { dim: d_model }, &mut rng);
            }
        }
        match config.policy_head {
            PolicyHead::Flat8100 => {
                let hd = config.head_dim;
                add_layer(&mut params, "policy.query", &LayerSpec::Dense { input: width, output: hd }, &mut rng);
                add_layer(&mut params, "policy.key", &LayerSpec::Dense { input: width, output: hd }, &mut rng);
            }
            PolicyHead::Factorized16x90 => {
                add_layer(&mut params, "policy.slot", &LayerSpec::Dense { input: width, output: 1 }, &mut rng);
                add_layer(&mut params, "policy.dest", &LayerSpec::Dense { input: width, output: 1 }, &mut rng);
            }
        }
        // start the policy near uniform
        for (name, t) in params.names().to_vec().iter().zip(params.tensors_mut()) {
            if name == "policy.query.w" || name == "policy.slot.w" || name == "policy.dest.w" {
                t.data_mut().iter_mut().for_each(|v| *v *= 0.1);
            }
        }
        let vh = config.value_hidden;
        add_layer(&mut params, "value.hidden", &LayerSpec::Dense { input: width, output: vh }, &mut rng);
        add_layer(&mut params, "value.out", &LayerSpec::Dense { input: vh, output: 1 }, &mut rng);
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn feature_variant(&self) -> FeatureVariant {
        self.config.feature_variant
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Stacks observations into a `[B, 10, 9, P]` leaf.
    pub fn input_tensor<T: Real>(&self, obs: &[&Observation]) -> Tensor<T> {
        let planes = self.config.feature_variant.planes();
        let mut data = Vec::with_capacity(obs.len() * NUM_SQUARES * planes);
        for o in obs {
            assert_eq!(o.planes(), planes, "observation plane count does not match the network");
            data.extend(o.data().iter().map(|&v| T::from_f64c(v as f64)));
        }
        Tensor::new(&[obs.len(), RANKS, FILES, planes], data).expect("sized from batch")
    }

    /// Builds the forward pass on `g` from parameter leaves `p` (see [`ParamSet::attach`]).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], input: Var) -> Heads {
        let batch = g.value(input).shape()[0];
        let mut cur = Cursor { vars: p, next: 0 };
        let cells = match self.config.arch {
            Architecture::ModResNetMicro { blocks, channels } | Architecture::ResNetUnmodified { blocks, channels } => {
                let (k, s) = self.config.entry_conv();
                let pe = cur.take(2);
                let mut x = crate::autograd::conv2d(g, input, pe[0], pe[1], k, s);
                let pn = cur.take(2);
                x = g.layer_norm(x, pn[0], pn[1]);
                x = g.relu(x);
                if self.config.unmodified() {
                    x = g.max_pool2(x);
                }
                for _ in 0..blocks {
                    let c1 = cur.take(2);
                    let n1 = cur.take(2);
                    let c2 = cur.take(2);
                    let n2 = cur.take(2);
                    let mut h = crate::autograd::conv2d(g, x, c1[0], c1[1], 3, 1);
                    h = g.layer_norm(h, n1[0], n1[1]);
                    h = g.relu(h);
                    h = crate::autograd::conv2d(g, h, c2[0], c2[1], 3, 1);
                    h = g.layer_norm(h, n2[0], n2[1]);
                    x = g.add(x, h);
                    x = g.relu(x);
                }
                if self.config.unmodified() {
                    let flat = g.reshape(x, &[batch, pooled_cells() * channels]);
                    let pp = cur.take(2);
                    let y = g.linear(flat, pp[0], Some(pp[1]));
                    let y = g.relu(y);
                    g.reshape(y, &[batch, NUM_SQUARES, channels])
                } else {
                    g.reshape(x, &[batch, NUM_SQUARES, channels])
                }
            }
            Architecture::ViTMicro { layers, d_model, heads } => {
                let tokens = g.reshape(input, &[batch, NUM_SQUARES, self.config.feature_variant.planes()]);
                let pe = cur.take(2);
                let tokens = g.linear(tokens, pe[0], Some(pe[1]));
                let readout = cur.take(1)[0];
                let pos = cur.take(1)[0];
                let readout = g.broadcast_batch(readout, batch);
                let mut x = g.concat_tokens(readout, tokens);
                x = g.add_broadcast(x, pos);
                for _ in 0..layers {
                    let n1 = cur.take(2);
                    let attn = cur.take(8);
                    let n2 = cur.take(2);
                    let m1 = cur.take(2);
                    let m2 = cur.take(2);
                    let h = g.layer_norm(x, n1[0], n1[1]);
                    let h = crate::autograd::attention(g, h, attn, heads);
                    x = g.add(x, h);
                    let h = g.layer_norm(x, n2[0], n2[1]);
                    let h = g.linear(h, m1[0], Some(m1[1]));
                    let h = g.gelu(h);
                    let h = g.linear(h, m2[0], Some(m2[1]));
                    x = g.add(x, h);
                }
                let nf = cur.take(2);
                x = g.layer_norm(x, nf[0], nf[1]);
                let _ = d_model;
                x
            }
        };

        let (cell_feats, pooled) = match self.config.arch {
            Architecture::ViTMicro { .. } => {
                let c = g.slice_tokens(cells, 1, NUM_SQUARES);
                let r = g.slice_tokens(cells, 0, 1);
                let w = g.value(r).shape()[2];
                let r = g.reshape(r, &[batch, w]);
                (c, r)
            }
            _ => {
                let pooled = g.mean_tokens(cells);
                (cells, pooled)
            }
        };

        let (logits, factor_scores) = match self.config.policy_head {
            PolicyHead::Flat8100 => {
                let pq = cur.take(2);
                let pk = cur.take(2);
                let q = g.linear(cell_feats, pq[0], Some(pq[1]));
                let k = g.linear(cell_feats, pk[0], Some(pk[1]));
                let scores = g.batch_matmul(q, k, true);
                let scale = T::one() / T::from_usize(self.config.head_dim).unwrap().sqrt();
                let scores = g.scale(scores, scale);
                (g.reshape(scores, &[batch, NUM_ACTIONS]), None)
            }
            PolicyHead::Factorized16x90 => {
                let ps = cur.take(2);
                let pd = cur.take(2);
                let s = g.linear(cell_feats, ps[0], Some(ps[1]));
                let s = g.reshape(s, &[batch, NUM_SQUARES]);
                let d = g.linear(cell_feats, pd[0], Some(pd[1]));
                let d = g.reshape(d, &[batch, NUM_SQUARES]);
                let joint = g.outer_sum(s, d);
                (g.reshape(joint, &[batch, NUM_ACTIONS]), Some((s, d)))
            }
        };

        let v1 = cur.take(2);
        let v2 = cur.take(2);
        let h = g.linear(pooled, v1[0], Some(v1[1]));
        let h = g.relu(h);
        let v = g.linear(h, v2[0], Some(v2[1]));
        let v = g.tanh(v);
        let value = g.reshape(v, &[batch]);
        debug_assert_eq!(cur.next, p.len(), "forward consumed a different parameter count");
        Heads { logits, value, factor_scores }
    }

    /// Batched evaluation without gradients.
    pub fn evaluate_batch(&self, obs: &[&Observation]) -> Vec<PolicyValueOutput> {
        if obs.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::<f32>::new();
        let p = self.params.attach(&mut g);
        let input = g.leaf(self.input_tensor(obs));
        let heads = self.forward(&mut g, &p, input);
        let logits = g.value(heads.logits).data();
        let values = g.value(heads.value).data();
        (0..obs.len())
            .map(|i| {
                let factorized = heads.factor_scores.map(|(s, d)| {
                    let s = &g.value(s).data()[i * NUM_SQUARES..(i + 1) * NUM_SQUARES];
                    let d = g.value(d).data()[i * NUM_SQUARES..(i + 1) * NUM_SQUARES].to_vec();
                    (slot_logits(obs[i], s), d)
                });
                PolicyValueOutput {
                    logits: logits[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS].to_vec(),
                    value: values[i],
                    factorized,
                }
            })
            .collect()
    }

    pub fn evaluate(&self, obs: &Observation) -> PolicyValueOutput {
        self.evaluate_batch(&[obs]).pop().expect("one output")
    }

    /// Forward pass plus the masked policy distribution.
    pub fn infer(&self, obs: &Observation, mask: &LegalityMask) -> Inference {
        let output = self.evaluate(obs);
        let probs = masked_distribution(&output.logits, mask, 1.0);
        Inference { output, probs }
    }
}

/// Slot logits: origin scores of the mover's pieces in ascending cell order.
fn slot_logits(obs: &Observation, origin: &[f32]) -> Vec<f32> {
    let mut out = vec![f32::NEG_INFINITY; crate::encoding::MAX_PIECE_SLOTS];
    let mut slot = 0;
    for cell in 0..NUM_SQUARES {
        let (r, f) = (cell / FILES, cell % FILES);
        let mine = (0..crate::rules::PieceKind::COUNT).any(|k| obs.get(r, f, k) > 0.5);
        if mine && slot < out.len() {
            out[slot] = origin[cell];
            slot += 1;
        }
    }
    out
}

/// Spatial cells left after the unmodified entry (5×5 conv output, 2×2 pooled).
fn pooled_cells() -> usize {
    let h = (RANKS + 6 - 7) / 2 + 1;
    let w = (FILES + 6 - 7) / 2 + 1;
    (h / 2) * (w / 2)
}

/// A mask as the shared row-major boolean buffer the graph's masked ops take.
pub fn stack_masks(masks: &[&LegalityMask]) -> Rc<[bool]> {
    let mut v = Vec::with_capacity(masks.len() * NUM_ACTIONS);
    for m in masks {
        v.extend_from_slice(m.bits());
    }
    Rc::from(v)
}
