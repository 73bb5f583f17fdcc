use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{init, Graph, Real, ShapeError, Tensor, Var};

/// A layer description with total shape inference.
///
/// Spatial layers take channels-last `[B, H, W, C]` input; token layers take `[B, T, D]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2D { kernel: usize, in_ch: usize, out_ch: usize, stride: usize },
    LayerNorm { dim: usize },
    MultiHeadAttention { d_model: usize, heads: usize },
    ReLU,
    GELU,
    /// Over the last axis.
    Softmax,
    Residual(Box<LayerSpec>),
    /// 2×2, stride 2.
    MaxPool2D,
}

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, ShapeError> {
        let err = |msg: &str| Err(ShapeError(format!("{self:?} on {input:?}: {msg}")));
        match self {
            LayerSpec::Dense { input: i, output: o } => match input.last() {
                Some(last) if last == i => {
                    let mut s = input.to_vec();
                    *s.last_mut().unwrap() = *o;
                    Ok(s)
                }
                _ => err("last axis must equal the input width"),
            },
            LayerSpec::Conv2D { kernel, in_ch, out_ch, stride } => {
                if ![1, 3, 7].contains(kernel) || ![1, 2].contains(stride) {
                    return err("kernel must be 1, 3 or 7 and stride 1 or 2");
                }
                if input.len() != 4 || input[3] != *in_ch {
                    return err("expected [B, H, W, in_ch]");
                }
                let pad = kernel / 2;
                if input[1] + 2 * pad < *kernel || input[2] + 2 * pad < *kernel {
                    return err("input smaller than kernel");
                }
                let ho = (input[1] + 2 * pad - kernel) / stride + 1;
                let wo = (input[2] + 2 * pad - kernel) / stride + 1;
                Ok(vec![input[0], ho, wo, *out_ch])
            }
            LayerSpec::LayerNorm { dim } => match input.last() {
                Some(d) if d == dim => Ok(input.to_vec()),
                _ => err("last axis must equal dim"),
            },
            LayerSpec::MultiHeadAttention { d_model, heads } => {
                if *heads == 0 || d_model % heads != 0 {
                    return err("d_model must be divisible by heads");
                }
                if input.len() != 3 || input[2] != *d_model {
                    return err("expected [B, T, d_model]");
                }
                Ok(input.to_vec())
            }
            LayerSpec::ReLU | LayerSpec::GELU => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.is_empty() {
                    return err("softmax needs at least one axis");
                }
                Ok(input.to_vec())
            }
            LayerSpec::Residual(inner) => {
                let out = inner.output_shape(input)?;
                if out != input {
                    return err("residual block must preserve shape");
                }
                Ok(out)
            }
            LayerSpec::MaxPool2D => {
                if input.len() != 4 || input[1] < 2 || input[2] < 2 {
                    return err("expected [B, H>=2, W>=2, C]");
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2, input[3]])
            }
        }
    }

    /// Freshly initialized parameters in the order [`LayerSpec::apply`] expects.
    pub fn init_params<T: Real, R: Rng>(&self, rng: &mut R) -> Vec<Tensor<T>> {
        match self {
            LayerSpec::Dense { input, output } => {
                vec![init::xavier_uniform(rng, *input, *output, &[*input, *output]), Tensor::zeros(&[*output])]
            }
            LayerSpec::Conv2D { kernel, in_ch, out_ch, .. } => {
                let fan_in = kernel * kernel * in_ch;
                let fan_out = kernel * kernel * out_ch;
                vec![init::xavier_uniform(rng, fan_in, fan_out, &[fan_in, *out_ch]), Tensor::zeros(&[*out_ch])]
            }
            LayerSpec::LayerNorm { dim } => vec![Tensor::filled(&[*dim], T::one()), Tensor::zeros(&[*dim])],
            LayerSpec::MultiHeadAttention { d_model, .. } => {
                let d = *d_model;
                (0..4)
                    .flat_map(|_| [init::xavier_uniform(rng, d, d, &[d, d]), Tensor::zeros(&[d])])
                    .collect()
            }
            LayerSpec::Residual(inner) => inner.init_params(rng),
            LayerSpec::ReLU | LayerSpec::GELU | LayerSpec::Softmax | LayerSpec::MaxPool2D => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. } | LayerSpec::LayerNorm { .. } => 2,
            LayerSpec::MultiHeadAttention { .. } => 8,
            LayerSpec::Residual(inner) => inner.param_count(),
            _ => 0,
        }
    }

    /// Panics on shape mismatch; run [`LayerSpec::output_shape`] first.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var, p: &[Var]) -> Var {
        debug_assert_eq!(p.len(), self.param_count());
        match self {
            LayerSpec::Dense { .. } => g.linear(x, p[0], Some(p[1])),
            LayerSpec::Conv2D { kernel, stride, .. } => conv2d(g, x, p[0], p[1], *kernel, *stride),
            LayerSpec::LayerNorm { .. } => g.layer_norm(x, p[0], p[1]),
            LayerSpec::MultiHeadAttention { heads, .. } => attention(g, x, p, *heads),
            LayerSpec::ReLU => g.relu(x),
            LayerSpec::GELU => g.gelu(x),
            LayerSpec::Softmax => g.softmax(x),
            LayerSpec::Residual(inner) => {
                let y = inner.apply(g, x, p);
                g.add(x, y)
            }
            LayerSpec::MaxPool2D => g.max_pool2(x),
        }
    }

    /// Input shape used by [`grad_check`]: a small instantiation of the layer.
    pub fn probe_shape(&self) -> Vec<usize> {
        match self {
            LayerSpec::Dense { input, .. } => vec![2, *input],
            LayerSpec::Conv2D { in_ch, .. } => vec![1, 5, 5, *in_ch],
            LayerSpec::LayerNorm { dim } => vec![3, *dim],
            LayerSpec::MultiHeadAttention { d_model, .. } => vec![1, 6, *d_model],
            LayerSpec::ReLU | LayerSpec::GELU | LayerSpec::Softmax => vec![3, 5],
            LayerSpec::Residual(inner) => inner.probe_shape(),
            LayerSpec::MaxPool2D => vec![1, 4, 5, 2],
        }
    }
}

/// `weight` is `[k·k·in, out]`; padding is `k / 2`, so stride 1 preserves size.
pub fn conv2d<T: Real>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var, kernel: usize, stride: usize) -> Var {
    if kernel == 1 && stride == 1 {
        return g.linear(x, weight, Some(bias));
    }
    let cols = g.im2col(x, kernel, stride, kernel / 2);
    g.linear(cols, weight, Some(bias))
}

/// Multi-head self-attention; `p` = [wq, bq, wk, bk, wv, bv, wo, bo].
pub fn attention<T: Real>(g: &mut Graph<T>, x: Var, p: &[Var], heads: usize) -> Var {
    let d_model = g.value(x).shape()[2];
    let q = g.linear(x, p[0], Some(p[1]));
    let k = g.linear(x, p[2], Some(p[3]));
    let v = g.linear(x, p[4], Some(p[5]));
    let (q, k, v) = (g.split_heads(q, heads), g.split_heads(k, heads), g.split_heads(v, heads));
    let scores = g.batch_matmul(q, k, true);
    let scale = T::one() / T::from_usize(d_model / heads).unwrap().sqrt();
    let scores = g.scale(scores, scale);
    let attn = g.softmax(scores);
    let ctx = g.batch_matmul(attn, v, false);
    let ctx = g.merge_heads(ctx, heads);
    g.linear(ctx, p[6], Some(p[7]))
}

/// Denominator floor for relative errors, so entries whose true gradient is
/// ~0 are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;
pub const GRAD_CHECK_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares analytic gradients against central differences for every parameter
/// and input entry of a small 64-bit instantiation; returns the max relative error.
pub fn grad_check(spec: &LayerSpec, seed: u64) -> Result<f64, ShapeError> {
    let shape = spec.probe_shape();
    let out_shape = spec.output_shape(&shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor<f64>> = spec
        .init_params::<f64, _>(&mut rng)
        .into_iter()
        .map(|t| jitter(t, &mut rng))
        .collect();
    let input = init::uniform::<f64, _>(&mut rng, -1.5, 1.5, &shape);
    let probe = init::uniform::<f64, _>(&mut rng, -1.0, 1.0, &out_shape);

    let loss_of = |input: &Tensor<f64>, params: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(input.clone());
        let ps: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
        let y = spec.apply(&mut g, x, &ps);
        g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::<f64>::new();
    let x = g.leaf(input.clone());
    let ps: Vec<Var> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let y = spec.apply(&mut g, x, &ps);
    let r = g.leaf(probe.clone());
    let prod = g.mul(y, r);
    let loss = g.sum(prod);
    let grads = g.backward(loss);

    let mut worst = 0.0f64;
    let h = GRAD_CHECK_STEP;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss_of(&plus, &params) - loss_of(&minus, &params)) / (2.0 * h);
        let analytic = grads.get(x).map_or(0.0, |d| d[i]);
        worst = worst.max(relative_error(analytic, numeric));
    }
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let mut trial = params.clone();
            trial[pi].data_mut()[i] += h;
            let lp = loss_of(&input, &trial);
            trial[pi].data_mut()[i] -= 2.0 * h;
            let lm = loss_of(&input, &trial);
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.get(ps[pi]).map_or(0.0, |d| d[i]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Zero biases and unit LayerNorm gains would leave parts of the backward
/// rules unexercised; perturb every parameter slightly.
fn jitter<R: Rng>(mut t: Tensor<f64>, rng: &mut R) -> Tensor<f64> {
    for v in t.data_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    t
}

/// The layer set the networks are built from.
pub fn standard_layer_set() -> Vec<(String, LayerSpec)> {
    let specs = vec![
        LayerSpec::Dense { input: 4, output: 3 },
        LayerSpec::Conv2D { kernel: 1, in_ch: 3, out_ch: 2, stride: 1 },
        LayerSpec::Conv2D { kernel: 3, in_ch: 2, out_ch: 2, stride: 1 },
        LayerSpec::Conv2D { kernel: 7, in_ch: 2, out_ch: 2, stride: 2 },
        LayerSpec::LayerNorm { dim: 6 },
        LayerSpec::MultiHeadAttention { d_model: 8, heads: 2 },
        LayerSpec::ReLU,
        LayerSpec::GELU,
        LayerSpec::Softmax,
        LayerSpec::Residual(Box::new(LayerSpec::Dense { input: 5, output: 5 })),
        LayerSpec::MaxPool2D,
    ];
    specs.into_iter().map(|s| (layer_name(&s), s)).collect()
}

pub fn layer_name(spec: &LayerSpec) -> String {
    match spec {
        LayerSpec::Dense { input, output } => format!("Dense({input},{output})"),
        LayerSpec::Conv2D { kernel, in_ch, out_ch, stride } => {
            format!("Conv2D(k={kernel},{in_ch}->{out_ch},s={stride})")
        }
        LayerSpec::LayerNorm { dim } => format!("LayerNorm({dim})"),
        LayerSpec::MultiHeadAttention { d_model, heads } => format!("MultiHeadAttention(d={d_model},h={heads})"),
        LayerSpec::ReLU => "ReLU".into(),
        LayerSpec::GELU => "GELU".into(),
        LayerSpec::Softmax => "Softmax".into(),
        LayerSpec::Residual(inner) => format!("Residual({})", layer_name(inner)),
        LayerSpec::MaxPool2D => "MaxPool2D(2)".into(),
    }
}
