use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor};

/// Test fixture: flips the sign of the GELU backward rule so gradient checks
/// can be shown to catch a broken derivative.
#[doc(hidden)]
pub static FLIP_GELU_BACKWARD: AtomicBool = AtomicBool::new(false);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Clamp { x: Var, lo: T, hi: T },
    Minimum(Var, Var),
    Softmax(Var),
    MaskedLogProb { x: Var, mask: Rc<[bool]>, targets: Vec<usize>, probs: Vec<T> },
    MaskedEntropy { x: Var, mask: Rc<[bool]>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    MeanTokens(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Im2Col { x: Var, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    ConcatTokens(Var, Var),
    BroadcastBatch(Var),
    SliceTokens { x: Var, start: usize },
    OuterSum(Var, Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(batch: usize, h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom { batch, h, w, c, k, stride, pad, ho, wo })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Define-by-run tape. Nodes are appended after their inputs, so index order
/// is a topological order and the reverse pass walks it backwards once.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` shaped like its value; zeros if `v` did not reach the loss.
    pub fn tensor(&self, g: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = g.value(v).shape();
        match &self.grads[v.0] {
            Some(d) => Tensor::from_slice(shape, d),
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) {
    assert_eq!(a, b, "{what}: shape mismatch {a:?} vs {b:?}");
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    #[inline]
    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Inputs, constants and parameters are all leaves.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Var {
        same_shape(self.shape(a), self.shape(b), what);
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x.min(y), Op::Minimum(a, b), "minimum")
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias and positional embeddings).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "add_broadcast: {sb:?} is not a suffix of {sa:?}"
        );
        let n = self.value(b).len();
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % n]).collect();
        let out = Tensor::new(sa, data).expect("same shape");
        self.push(out, Op::AddBroadcast(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64c(GELU_C);
        let k = T::from_f64c(0.044_715);
        let half = T::from_f64c(0.5);
        self.map(x, |v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()), Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    /// Gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.map(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape).unwrap_or_else(|e| panic!("reshape: {e}"));
        self.push(out, Op::Reshape(x))
    }

    /// `x[..., in] · w[in, out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert_eq!(ws.len(), 2, "linear: weight must be 2-d, got {ws:?}");
        let (inp, out) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("linear on scalar"), inp, "linear: input {xs:?} vs weight {ws:?}");
        if let Some(b) = b {
            same_shape(self.shape(b), &[out], "linear bias");
        }
        let rows = self.value(x).len() / inp;
        let mut data = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in data.chunks_mut(out) {
                row.copy_from_slice(bd);
            }
        }
        gemm_nn(self.data(x), self.data(w), &mut data, rows, inp, out);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = out;
        self.push(Tensor::new(&shape, data).unwrap(), Op::Linear { x, w, b })
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `a · b[B, n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "batch_matmul: {sa:?} x {sb:?}");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        assert_eq!(k, kb, "batch_matmul: inner dims {sa:?} x {sb:?} (trans_b={trans_b})");
        let mut data = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            let a_i = &ad[i * m * k..(i + 1) * m * k];
            let b_i = &bd[i * k * n..(i + 1) * k * n];
            let c_i = &mut data[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(a_i, b_i, c_i, m, k, n);
            } else {
                gemm_nn(a_i, b_i, c_i, m, k, n);
            }
        }
        self.push(Tensor::new(&[batch, m, n], data).unwrap(), Op::BatchMatMul { a, b, trans_b })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("softmax on scalar");
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.push(Tensor::new(&shape, data).unwrap(), Op::Softmax(x))
    }

    fn masked_probs(&self, x: Var, mask: &[bool]) -> (usize, usize, Vec<T>) {
        let shape = self.shape(x);
        assert_eq!(shape.len(), 2, "masked op expects [B, N] logits, got {shape:?}");
        let (rows, n) = (shape[0], shape[1]);
        assert_eq!(mask.len(), rows * n, "mask length");
        let mut probs = vec![T::zero(); rows * n];
        for r in 0..rows {
            let xs = &self.data(x)[r * n..(r + 1) * n];
            let ms = &mask[r * n..(r + 1) * n];
            let max = xs
                .iter()
                .zip(ms)
                .filter(|(_, &m)| m)
                .fold(T::neg_infinity(), |a, (&v, _)| a.max(v));
            assert!(max > T::neg_infinity(), "masked op: row {r} has no legal entries");
            let ps = &mut probs[r * n..(r + 1) * n];
            let mut total = T::zero();
            for i in 0..n {
                if ms[i] {
                    ps[i] = (xs[i] - max).exp();
                    total += ps[i];
                }
            }
            for p in ps.iter_mut() {
                *p = *p / total;
            }
        }
        (rows, n, probs)
    }

    /// Per-row `log softmax(x)[target]` with the softmax restricted to `mask`.
    pub fn masked_log_prob(&mut self, x: Var, mask: Rc<[bool]>, targets: &[usize]) -> Var {
        let (rows, n, probs) = self.masked_probs(x, &mask);
        assert_eq!(targets.len(), rows, "one target per row");
        let out: Vec<T> = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                assert!(mask[r * n + t], "target {t} of row {r} is masked out");
                probs[r * n + t].ln()
            })
            .collect();
        let op = Op::MaskedLogProb { x, mask, targets: targets.to_vec(), probs };
        self.push(Tensor::new(&[rows], out).unwrap(), op)
    }

    /// Per-row entropy of the masked softmax.
    pub fn masked_entropy(&mut self, x: Var, mask: Rc<[bool]>) -> Var {
        let (rows, n, probs) = self.masked_probs(x, &mask);
        let out: Vec<T> = (0..rows)
            .map(|r| {
                probs[r * n..(r + 1) * n]
                    .iter()
                    .filter(|&&p| p > T::zero())
                    .fold(T::zero(), |h, &p| h - p * p.ln())
            })
            .collect();
        self.push(Tensor::new(&[rows], out).unwrap(), Op::MaskedEntropy { x, mask, probs })
    }

    /// `[B, T, C] → [B, C]`, averaging over tokens/cells.
    pub fn mean_tokens(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "mean_tokens expects [B, T, C], got {s:?}");
        let (b, t, c) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); b * c];
        let inv = T::one() / T::from_usize(t).unwrap();
        let xd = self.data(x);
        for bi in 0..b {
            for ti in 0..t {
                let row = &xd[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                for (o, &v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v * inv;
                }
            }
        }
        self.push(Tensor::new(&[b, c], out).unwrap(), Op::MeanTokens(x))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm on scalar");
        same_shape(self.shape(gamma), &[d], "layer_norm gamma");
        same_shape(self.shape(beta), &[d], "layer_norm beta");
        let rows = self.value(x).len() / d;
        let eps = T::from_f64c(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = gd[i] * h + bd[i];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, inv_std };
        self.push(Tensor::new(&shape, out).unwrap(), op)
    }

    /// `[B, H, W, C] → [B, Ho, Wo, k·k·C]` patches with zero padding.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "im2col expects [B, H, W, C], got {s:?}");
        let geom = ConvGeom::new(s[0], s[1], s[2], s[3], k, stride, pad)
            .unwrap_or_else(|| panic!("im2col: kernel {k} does not fit {s:?}"));
        let kc = k * k * geom.c;
        let mut out = vec![T::zero(); geom.batch * geom.ho * geom.wo * kc];
        let xd = self.data(x);
        for_each_tap(&geom, |src, dst| out[dst..dst + geom.c].copy_from_slice(&xd[src..src + geom.c]));
        let shape = [geom.batch, geom.ho, geom.wo, kc];
        self.push(Tensor::new(&shape, out).unwrap(), Op::Im2Col { x, geom })
    }

    /// 2×2 max pooling, stride 2, floor semantics. `[B, H, W, C] → [B, H/2, W/2, C]`.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "max_pool2 expects [B, H, W, C], got {s:?}");
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "max_pool2: input {s:?} too small");
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * ho * wo * c];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                        let o = ((bi * ho + oy) * wo + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        self.push(Tensor::new(&[b, ho, wo, c], out).unwrap(), Op::MaxPool2 { x, argmax })
    }

    /// `[B, T, H·D] → [B·H, T, D]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[2] % heads == 0, "split_heads: {s:?} by {heads}");
        let (b, t, dm) = (s[0], s[1], s[2]);
        let d = dm / heads;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * dm + h * d;
                    let dst = ((bi * heads + h) * t + ti) * d;
                    out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
        self.push(Tensor::new(&[b * heads, t, d], out).unwrap(), Op::SplitHeads { x, heads })
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[0] % heads == 0, "merge_heads: {s:?} by {heads}");
        let (bh, t, d) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = ((bi * heads + h) * t + ti) * d;
                    let dst = (bi * t + ti) * heads * d + h * d;
                    out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
        self.push(Tensor::new(&[b, t, heads * d], out).unwrap(), Op::MergeHeads { x, heads })
    }

    /// Concatenates `[B, T1, C]` and `[B, T2, C]` along the token axis.
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2], "concat_tokens: {sa:?} {sb:?}");
        let (bn, t1, t2, c) = (sa[0], sa[1], sb[1], sa[2]);
        let mut out = Vec::with_capacity(bn * (t1 + t2) * c);
        for bi in 0..bn {
            out.extend_from_slice(&self.data(a)[bi * t1 * c..(bi + 1) * t1 * c]);
            out.extend_from_slice(&self.data(b)[bi * t2 * c..(bi + 1) * t2 * c]);
        }
        self.push(Tensor::new(&[bn, t1 + t2, c], out).unwrap(), Op::ConcatTokens(a, b))
    }

    /// Repeats `x` along a new leading batch axis.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Var {
        let s = self.shape(x).to_vec();
        let mut data = Vec::with_capacity(batch * self.value(x).len());
        for _ in 0..batch {
            data.extend_from_slice(self.data(x));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&s);
        self.push(Tensor::new(&shape, data).unwrap(), Op::BroadcastBatch(x))
    }

    /// Tokens `start..start + len` of a `[B, T, C]` tensor.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && start + len <= s[1], "slice_tokens: {start}+{len} of {s:?}");
        let (b, t, c) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * len * c);
        for bi in 0..b {
            out.extend_from_slice(&self.data(x)[(bi * t + start) * c..(bi * t + start + len) * c]);
        }
        self.push(Tensor::new(&[b, len, c], out).unwrap(), Op::SliceTokens { x, start })
    }

    /// `out[b, i, j] = a[b, i] + c[b, j]`.
    pub fn outer_sum(&mut self, a: Var, c: Var) -> Var {
        let (sa, sc) = (self.shape(a).to_vec(), self.shape(c).to_vec());
        assert!(sa.len() == 2 && sc.len() == 2 && sa[0] == sc[0], "outer_sum: {sa:?} {sc:?}");
        let (b, n, m) = (sa[0], sa[1], sc[1]);
        let (ad, cd) = (self.data(a), self.data(c));
        let mut out = Vec::with_capacity(b * n * m);
        for bi in 0..b {
            for i in 0..n {
                let av = ad[bi * n + i];
                out.extend(cd[bi * m..(bi + 1) * m].iter().map(|&cv| av + cv));
            }
        }
        self.push(Tensor::new(&[b, n, m], out).unwrap(), Op::OuterSum(a, c))
    }

    /// Reverse pass from a scalar `loss`. Every node that reaches the loss gets a gradient.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            self.backward_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    fn backward_node(&self, id: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        // Lazily allocates the input's gradient buffer.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (g, &d) in acc!(*a).iter_mut().zip(gy) {
                    *g += d;
                }
                for (g, &d) in acc!(*b).iter_mut().zip(gy) {
                    *g += d;
                }
            }
            Op::Sub(a, b) => {
                for (g, &d) in acc!(*a).iter_mut().zip(gy) {
                    *g += d;
                }
                for (g, &d) in acc!(*b).iter_mut().zip(gy) {
                    *g -= d;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                for ((g, &d), &bv) in acc!(*a).iter_mut().zip(gy).zip(bd) {
                    *g += d * bv;
                }
                for ((g, &d), &av) in acc!(*b).iter_mut().zip(gy).zip(ad) {
                    *g += d * av;
                }
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                // Ties send the gradient to `a`.
                for (i, &d) in gy.iter().enumerate() {
                    if ad[i] <= bd[i] {
                        acc!(*a)[i] += d;
                    } else {
                        acc!(*b)[i] += d;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                for (g, &d) in acc!(*a).iter_mut().zip(gy) {
                    *g += d;
                }
                let gb = acc!(*b);
                let n = gb.len();
                for (i, &d) in gy.iter().enumerate() {
                    gb[i % n] += d;
                }
            }
            Op::Scale(x, s) => {
                for (g, &d) in acc!(*x).iter_mut().zip(gy) {
                    *g += d * *s;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                for (g, &d) in acc!(*x).iter_mut().zip(gy) {
                    *g += d;
                }
            }
            Op::Relu(x) => {
                for ((g, &d), &v) in acc!(*x).iter_mut().zip(gy).zip(y) {
                    if v > T::zero() {
                        *g += d;
                    }
                }
            }
            Op::Gelu(x) => {
                let c = T::from_f64c(GELU_C);
                let k = T::from_f64c(0.044_715);
                let half = T::from_f64c(0.5);
                let three = T::from_f64c(3.0);
                let sign = if FLIP_GELU_BACKWARD.load(Ordering::Relaxed) { -T::one() } else { T::one() };
                let xd = self.data(*x);
                for ((g, &d), &v) in acc!(*x).iter_mut().zip(gy).zip(xd) {
                    let u = c * (v + k * v * v * v);
                    let t = u.tanh();
                    let du = c * (T::one() + three * k * v * v);
                    let dy = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                    *g += sign * d * dy;
                }
            }
            Op::Tanh(x) => {
                for ((g, &d), &v) in acc!(*x).iter_mut().zip(gy).zip(y) {
                    *g += d * (T::one() - v * v);
                }
            }
            Op::Exp(x) => {
                for ((g, &d), &v) in acc!(*x).iter_mut().zip(gy).zip(y) {
                    *g += d * v;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                for ((g, &d), &v) in acc!(*x).iter_mut().zip(gy).zip(xd) {
                    if v > *lo && v < *hi {
                        *g += d;
                    }
                }
            }
            Op::Sum(x) => {
                for g in acc!(*x).iter_mut() {
                    *g += gy[0];
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                for g in acc!(*x).iter_mut() {
                    *g += gy[0] / n;
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (inp, out) = (ws[0], ws[1]);
                let rows = self.value(*x).len() / inp;
                gemm_nt(gy, self.data(*w), acc!(*x), rows, out, inp);
                gemm_tn(self.data(*x), gy, acc!(*w), rows, inp, out);
                if let Some(b) = b {
                    let gb = acc!(*b);
                    for row in gy.chunks(out) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.data(*a), self.data(*b));
                {
                    let ga = acc!(*a);
                    for i in 0..batch {
                        let g_i = &gy[i * m * n..(i + 1) * m * n];
                        let b_i = &bd[i * k * n..(i + 1) * k * n];
                        let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // C = A Bᵀ, B is [n, k]: dA = dC · B
                            gemm_nn(g_i, b_i, ga_i, m, n, k);
                        } else {
                            gemm_nt(g_i, b_i, ga_i, m, n, k);
                        }
                    }
                }
                let gb = acc!(*b);
                for i in 0..batch {
                    let g_i = &gy[i * m * n..(i + 1) * m * n];
                    let a_i = &ad[i * m * k..(i + 1) * m * k];
                    let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // dB[n, k] = dCᵀ · A
                        gemm_tn(g_i, a_i, gb_i, m, n, k);
                    } else {
                        gemm_tn(a_i, g_i, gb_i, m, k, n);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *self.shape(*x).last().unwrap();
                let gx = acc!(*x);
                for ((gr, dr), yr) in gx.chunks_mut(n).zip(gy.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = dr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                    for i in 0..n {
                        gr[i] += yr[i] * (dr[i] - dot);
                    }
                }
            }
            Op::MaskedLogProb { x, mask, targets, probs } => {
                let n = self.shape(*x)[1];
                let gx = acc!(*x);
                for (r, &t) in targets.iter().enumerate() {
                    let d = gy[r];
                    for i in 0..n {
                        let j = r * n + i;
                        if mask[j] {
                            let ind = if i == t { T::one() } else { T::zero() };
                            gx[j] += d * (ind - probs[j]);
                        }
                    }
                }
            }
            Op::MaskedEntropy { x, mask, probs } => {
                let n = self.shape(*x)[1];
                let gx = acc!(*x);
                for (r, &h) in y.iter().enumerate() {
                    let d = gy[r];
                    for i in 0..n {
                        let j = r * n + i;
                        if mask[j] && probs[j] > T::zero() {
                            gx[j] -= d * probs[j] * (probs[j].ln() + h);
                        }
                    }
                }
            }
            Op::MeanTokens(x) => {
                let s = self.shape(*x);
                let (b, t, c) = (s[0], s[1], s[2]);
                let inv = T::one() / T::from_usize(t).unwrap();
                let gx = acc!(*x);
                for bi in 0..b {
                    for ti in 0..t {
                        for ci in 0..c {
                            gx[(bi * t + ti) * c + ci] += gy[bi * c + ci] * inv;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*gamma).len();
                let dn = T::from_usize(d).unwrap();
                let gd = self.data(*gamma);
                {
                    let gg = acc!(*gamma);
                    for (r, row) in gy.chunks(d).enumerate() {
                        for i in 0..d {
                            gg[i] += row[i] * xhat[r * d + i];
                        }
                    }
                }
                {
                    let gb = acc!(*beta);
                    for row in gy.chunks(d) {
                        for i in 0..d {
                            gb[i] += row[i];
                        }
                    }
                }
                let gx = acc!(*x);
                let mut dxhat = vec![T::zero(); d];
                for (r, row) in gy.chunks(d).enumerate() {
                    let h = &xhat[r * d..(r + 1) * d];
                    for i in 0..d {
                        dxhat[i] = row[i] * gd[i];
                    }
                    let s1: T = dxhat.iter().copied().sum();
                    let s2: T = dxhat.iter().zip(h).map(|(&a, &b)| a * b).sum();
                    for i in 0..d {
                        gx[r * d + i] += inv_std[r] / dn * (dn * dxhat[i] - s1 - h[i] * s2);
                    }
                }
            }
            Op::Im2Col { x, geom } => {
                let c = geom.c;
                let gx = acc!(*x);
                for_each_tap(geom, |src, dst| {
                    for i in 0..c {
                        gx[src + i] += gy[dst + i];
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                let gx = acc!(*x);
                for (&src, &d) in argmax.iter().zip(gy) {
                    gx[src] += d;
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let (b, t, dm) = (s[0], s[1], s[2]);
                let d = dm / heads;
                let gx = acc!(*x);
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let dst = (bi * t + ti) * dm + h * d;
                            let src = ((bi * heads + h) * t + ti) * d;
                            for i in 0..d {
                                gx[dst + i] += gy[src + i];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (bh, t, d) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let gx = acc!(*x);
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let dst = ((bi * heads + h) * t + ti) * d;
                            let src = (bi * t + ti) * heads * d + h * d;
                            for i in 0..d {
                                gx[dst + i] += gy[src + i];
                            }
                        }
                    }
                }
            }
            Op::ConcatTokens(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bn, t1, t2, c) = (sa[0], sa[1], sb[1], sa[2]);
                {
                    let ga = acc!(*a);
                    for bi in 0..bn {
                        let src = bi * (t1 + t2) * c;
                        for i in 0..t1 * c {
                            ga[bi * t1 * c + i] += gy[src + i];
                        }
                    }
                }
                let gb = acc!(*b);
                for bi in 0..bn {
                    let src = bi * (t1 + t2) * c + t1 * c;
                    for i in 0..t2 * c {
                        gb[bi * t2 * c + i] += gy[src + i];
                    }
                }
            }
            Op::BroadcastBatch(x) => {
                let gx = acc!(*x);
                let n = gx.len();
                for (i, &d) in gy.iter().enumerate() {
                    gx[i % n] += d;
                }
            }
            Op::OuterSum(a, c) => {
                let (b, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*c)[1];
                {
                    let ga = acc!(*a);
                    for bi in 0..b {
                        for i in 0..n {
                            let row = &gy[(bi * n + i) * m..(bi * n + i + 1) * m];
                            ga[bi * n + i] += row.iter().copied().sum::<T>();
                        }
                    }
                }
                let gc = acc!(*c);
                for bi in 0..b {
                    for i in 0..n {
                        let row = &gy[(bi * n + i) * m..(bi * n + i + 1) * m];
                        for (g, &d) in gc[bi * m..(bi + 1) * m].iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::SliceTokens { x, start } => {
                let s = self.shape(*x);
                let (b, t, c) = (s[0], s[1], s[2]);
                let len = node.value.shape()[1];
                let gx = acc!(*x);
                for bi in 0..b {
                    let dst = (bi * t + start) * c;
                    let src = bi * len * c;
                    for i in 0..len * c {
                        gx[dst + i] += gy[src + i];
                    }
                }
            }
        }
    }
}

/// Calls `f(src, dst)` for each in-bounds (input cell, patch slot) pair; both
/// are offsets of a `c`-long channel run.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize)) {
    let kc = g.k * g.k * g.c;
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let base = ((b * g.ho + oy) * g.wo + ox) * kc;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = base + (ky * g.k + kx) * g.c;
                        f(src, dst);
                    }
                }
            }
        }
    }
}
