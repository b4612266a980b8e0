//! Reverse-mode differentiation over a flat tape of array operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read
//! from a borrowed [`ParamStore`]; [`Graph::backward`] returns a
//! [`Gradients`] table that can be folded back into the store once the
//! graph is dropped.
//!
//! Shape conventions: sequences are `[batch, length, features]`, channel
//! layouts for convolutions are `[batch, channels, length]`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Silu(Var),
    Exp(Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    SwapLast2(Var),
    SelectStep { x: Var, t: usize },
    Stack(Vec<Var>),
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    Reshape(Var),
    Conv1d { x: Var, w: Var, b: Var, stride: usize },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    PadReplicate { x: Var, left: usize, right: usize },
    TakeTime { x: Var, start: usize, step: usize },
    Interleave(Var, Var),
    MulConst { x: Var, factor: Tensor },
    L2NormalizeRows(Var),
    HuberMean { pred: Var, target: Var, beta: f64 },
    MCosineMean { latents: Vec<Var>, eps: f64 },
    Sum(Var),
    Mean(Var),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// Norms below this are treated as exact zeros by [`Graph::l2_normalize_rows`].
const ZERO_NORM: f64 = 1e-12;

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, training: bool, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Inference-mode graph; dropout is the identity.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::new(store, false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ----- linear algebra -------------------------------------------------

    /// `[.., K] x [K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(av.last_dim(), k, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out), Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = bv.len();
        assert_eq!(xv.last_dim(), n, "bias length");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    /// Batched matrix product `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dims");
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                1.0,
                &av.data()[i * m * k..],
                false,
                &bv.data()[i * k * n..],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::new(vec![batch, m, n], out), Op::Bmm { a, b, trans_b })
    }

    // ----- elementwise -----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so divergence stays visible.
        let t = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        self.push(t, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a, slope))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(silu);
        self.push(t, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    /// Multiplies by a constant array of the same shape (masks, dropout).
    pub fn mul_const(&mut self, x: Var, factor: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), factor.shape(), "mul_const shapes");
        let data = xv.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(xv.shape().to_vec(), data);
        self.push(t, Op::MulConst { x, factor })
    }

    /// Inverted dropout. Identity in inference mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        if !self.training || p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, Tensor::new(shape, mask))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        self.push(out, Op::Softmax(a))
    }

    // ----- layout ------------------------------------------------------------

    /// `[.., L, D] -> [.., D, L]`.
    pub fn swap_last2(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.shape();
        assert!(s.len() >= 2);
        let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = av.len() / (l * d);
        let mut out = vec![0.0; av.len()];
        for p in 0..planes {
            let src = &av.data()[p * l * d..(p + 1) * l * d];
            let dst = &mut out[p * l * d..(p + 1) * l * d];
            for i in 0..l {
                for j in 0..d {
                    dst[j * l + i] = src[i * d + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        self.push(Tensor::new(shape, out), Op::SwapLast2(a))
    }

    /// `[B, L, D] -> [B, D]` at position `t`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert!(s.len() == 3 && t < s[1]);
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            let off = (i * l + t) * d;
            out.extend_from_slice(&xv.data()[off..off + d]);
        }
        self.push(Tensor::new(vec![b, d], out), Op::SelectStep { x, t })
    }

    /// `n x [B, D] -> [B, n, D]`.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]).to_vec();
        assert_eq!(s0.len(), 2);
        let (b, d) = (s0[0], s0[1]);
        let n = parts.len();
        let mut out = vec![0.0; b * n * d];
        for (t, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            assert_eq!(pv.shape(), &s0[..], "stack shapes");
            for i in 0..b {
                out[(i * n + t) * d..(i * n + t + 1) * d]
                    .copy_from_slice(&pv.data()[i * d..(i + 1) * d]);
            }
        }
        self.push(Tensor::new(vec![b, n, d], out), Op::Stack(parts.to_vec()))
    }

    /// Concatenate along the trailing axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let dims: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = dims.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &d) in parts.iter().zip(&dims) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat rows");
            for r in 0..rows {
                out[r * total + off..r * total + off + d]
                    .copy_from_slice(&pv.data()[r * d..(r + 1) * d]);
            }
            off += d;
        }
        let mut shape = self.shape(parts[0]).to_vec();
        *shape.last_mut().unwrap() = total;
        self.push(Tensor::new(shape, out), Op::ConcatLast(parts.to_vec()))
    }

    /// `[.., D] -> [.., len]` starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        assert!(start + len <= d);
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::new(shape, out), Op::SliceLast { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape.to_vec());
        self.push(t, Op::Reshape(x))
    }

    // ----- convolution ---------------------------------------------------------

    /// Valid cross-correlation: `x [B, Cin, L]`, `w [Cout, Cin, K]`, `b [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        assert!(stride >= 1);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (xv.shape(), wv.shape());
        assert!(sx.len() == 3 && sw.len() == 3 && sx[1] == sw[1], "conv1d shapes {sx:?} {sw:?}");
        let (batch, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        assert!(len >= k, "conv1d: length {len} shorter than kernel {k}");
        let lout = (len - k) / stride + 1;
        let mut out = vec![0.0; batch * cout * lout];
        let mut col = vec![0.0; cin * k * lout];
        for bi in 0..batch {
            im2col(&xv.data()[bi * cin * len..], cin, len, k, stride, lout, &mut col);
            let y = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
            for o in 0..cout {
                y[o * lout..(o + 1) * lout].fill(bv.data()[o]);
            }
            gemm(cout, cin * k, lout, 1.0, wv.data(), false, &col, false, 1.0, y);
        }
        self.push(
            Tensor::new(vec![batch, cout, lout], out),
            Op::Conv1d { x, w, b, stride },
        )
    }

    /// Max pooling over the trailing (time) axis of `[B, C, L]`.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        assert!(kernel >= 1 && stride >= 1);
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3);
        let (planes, len) = (s[0] * s[1], s[2]);
        assert!(len >= kernel, "maxpool1d: length {len} shorter than kernel {kernel}");
        let lout = (len - kernel) / stride + 1;
        let mut out = Vec::with_capacity(planes * lout);
        let mut argmax = Vec::with_capacity(planes * lout);
        for p in 0..planes {
            let row = &xv.data()[p * len..(p + 1) * len];
            for t in 0..lout {
                let mut best = t * stride;
                for j in t * stride + 1..t * stride + kernel {
                    if row[j] > row[best] || (row[j].is_nan() && !row[best].is_nan()) {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push(p * len + best);
            }
        }
        self.push(
            Tensor::new(vec![s[0], s[1], lout], out),
            Op::MaxPool1d { x, argmax },
        )
    }

    /// Replication padding on the trailing axis of `[B, C, L]`.
    pub fn pad_replicate(&mut self, x: Var, left: usize, right: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert!(s.len() == 3 && s[2] >= 1);
        let (planes, len) = (s[0] * s[1], s[2]);
        let nl = len + left + right;
        let mut out = Vec::with_capacity(planes * nl);
        for p in 0..planes {
            let row = &xv.data()[p * len..(p + 1) * len];
            out.extend(std::iter::repeat_n(row[0], left));
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[len - 1], right));
        }
        self.push(
            Tensor::new(vec![s[0], s[1], nl], out),
            Op::PadReplicate { x, left, right },
        )
    }

    /// Strided selection on the trailing axis: positions `start, start+step, ..`.
    pub fn take_time(&mut self, x: Var, start: usize, step: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let len = *s.last().unwrap();
        assert!(start < len && step >= 1);
        let n = (len - start).div_ceil(step);
        let planes = xv.rows();
        let mut out = Vec::with_capacity(planes * n);
        for p in 0..planes {
            let row = &xv.data()[p * len..(p + 1) * len];
            out.extend((0..n).map(|i| row[start + i * step]));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out), Op::TakeTime { x, start, step })
    }

    /// Inverse of even/odd splitting on the trailing axis.
    pub fn interleave(&mut self, even: Var, odd: Var) -> Var {
        let (ev, ov) = (self.value(even), self.value(odd));
        let (le, lo) = (ev.last_dim(), ov.last_dim());
        assert!(le == lo || le == lo + 1, "interleave lengths {le} / {lo}");
        assert_eq!(ev.rows(), ov.rows());
        let planes = ev.rows();
        let n = le + lo;
        let mut out = vec![0.0; planes * n];
        for p in 0..planes {
            for i in 0..le {
                out[p * n + 2 * i] = ev.data()[p * le + i];
            }
            for i in 0..lo {
                out[p * n + 2 * i + 1] = ov.data()[p * lo + i];
            }
        }
        let mut shape = ev.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out), Op::Interleave(even, odd))
    }

    // ----- normalisation and losses ----------------------------------------------

    /// Scales each trailing-axis row to unit L2 norm. Exact-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > ZERO_NORM {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.fill(0.0);
            }
        }
        self.push(out, Op::L2NormalizeRows(x))
    }

    /// Mean Huber loss between equally sized `pred` and `target`.
    pub fn huber_mean(&mut self, pred: Var, target: Var, beta: f64) -> Var {
        let (pv, tv) = (self.value(pred), self.value(target));
        assert_eq!(pv.len(), tv.len(), "huber lengths");
        let n = pv.len().max(1) as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| crate::losses::huber(*p, *t, beta))
            .sum();
        self.push(
            Tensor::scalar(total / n),
            Op::HuberMean { pred, target, beta },
        )
    }

    /// Batch-mean of the clamped pairwise cosine loss over `latents`, each `[B, D]`.
    pub fn mcosine_mean(&mut self, latents: &[Var], eps: f64) -> Var {
        assert!(!latents.is_empty());
        let s0 = self.shape(latents[0]).to_vec();
        let (b, d) = (s0[0], s0[1]);
        let mut total = 0.0;
        for i in 0..b {
            let rows: Vec<&[f64]> = latents
                .iter()
                .map(|&z| {
                    let zv = self.value(z);
                    assert_eq!(zv.shape(), &s0[..], "mcosine latent shapes");
                    &zv.data()[i * d..(i + 1) * d]
                })
                .collect();
            total += crate::losses::mcosine_slices(&rows, eps);
        }
        self.push(
            Tensor::scalar(total / b.max(1) as f64),
            Op::MCosineMean {
                latents: latents.to_vec(),
                eps,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        self.push(t, Op::Mean(x))
    }

    // ----- backward -------------------------------------------------------------------

    /// Gradients of the scalar `root` with respect to every node it depends on.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self.param_vars.iter().map(|(id, v)| (*id, *v)).collect();
        Gradients { grads, params }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.rows();
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut db);
                acc(grads, *a, Tensor::new(av.shape().to_vec(), da));
                acc(grads, *b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), db));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, zip_map(g, bv, |g, b| g * b));
                acc(grads, *b, zip_map(g, av, |g, a| g * a));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|v| v * s)),
            Op::Sigmoid(a) => acc(grads, *a, zip_map(g, y, |g, y| g * y * (1.0 - y))),
            Op::Tanh(a) => acc(grads, *a, zip_map(g, y, |g, y| g * (1.0 - y * y))),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(grads, *a, zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                acc(grads, *a, zip_map(g, x, |g, x| if x > 0.0 { g } else { g * slope }));
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                acc(
                    grads,
                    *a,
                    zip_map(g, x, |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    }),
                );
            }
            Op::Exp(a) => acc(grads, *a, zip_map(g, y, |g, y| g * y)),
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..batch {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // y = a b^T with b stored [n, k]
                        gemm(m, n, k, 1.0, gi, false, bi, false, 0.0, dai);
                        gemm(n, m, k, 1.0, gi, true, ai, false, 0.0, dbi);
                    } else {
                        gemm(m, n, k, 1.0, gi, false, bi, true, 0.0, dai);
                        gemm(k, m, n, 1.0, ai, true, gi, false, 0.0, dbi);
                    }
                }
                acc(grads, *a, Tensor::new(av.shape().to_vec(), da));
                acc(grads, *b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::Softmax(a) => {
                let d = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::SwapLast2(a) => {
                let s = g.shape();
                let r = s.len();
                let (d, l) = (s[r - 2], s[r - 1]);
                let planes = g.len() / (l * d);
                let mut dx = vec![0.0; g.len()];
                for p in 0..planes {
                    let src = &g.data()[p * l * d..(p + 1) * l * d];
                    let dst = &mut dx[p * l * d..(p + 1) * l * d];
                    for j in 0..d {
                        for i in 0..l {
                            dst[i * d + j] = src[j * l + i];
                        }
                    }
                }
                acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), dx));
            }
            Op::SelectStep { x, t } => {
                let s = self.shape(*x).to_vec();
                let (b, l, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; b * l * d];
                for i in 0..b {
                    let off = (i * l + t) * d;
                    dx[off..off + d].copy_from_slice(&g.data()[i * d..(i + 1) * d]);
                }
                acc(grads, *x, Tensor::new(s, dx));
            }
            Op::Stack(parts) => {
                let (b, n, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (t, &p) in parts.iter().enumerate() {
                    let mut dp = vec![0.0; b * d];
                    for i in 0..b {
                        dp[i * d..(i + 1) * d]
                            .copy_from_slice(&g.data()[(i * n + t) * d..(i * n + t + 1) * d]);
                    }
                    acc(grads, p, Tensor::new(vec![b, d], dp));
                }
            }
            Op::ConcatLast(parts) => {
                let total = g.last_dim();
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let d = *ps.last().unwrap();
                    let mut dp = Vec::with_capacity(rows * d);
                    for r in 0..rows {
                        dp.extend_from_slice(&g.data()[r * total + off..r * total + off + d]);
                    }
                    acc(grads, p, Tensor::new(ps, dp));
                    off += d;
                }
            }
            Op::SliceLast { x, start } => {
                let xs = self.shape(*x).to_vec();
                let d = *xs.last().unwrap();
                let len = g.last_dim();
                let mut dx = vec![0.0; xs.iter().product()];
                for r in 0..g.rows() {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *x, Tensor::new(xs, dx));
            }
            Op::Reshape(x) => {
                acc(grads, *x, g.clone().reshaped(self.shape(*x).to_vec()));
            }
            Op::Conv1d { x, w, b, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let lout = g.shape()[2];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                let mut col = vec![0.0; cin * k * lout];
                let mut dcol = vec![0.0; cin * k * lout];
                for bi in 0..batch {
                    let gi = &g.data()[bi * cout * lout..(bi + 1) * cout * lout];
                    for o in 0..cout {
                        db[o] += gi[o * lout..(o + 1) * lout].iter().sum::<f64>();
                    }
                    im2col(&xv.data()[bi * cin * len..], cin, len, k, *stride, lout, &mut col);
                    gemm(cout, lout, cin * k, 1.0, gi, false, &col, true, 1.0, &mut dw);
                    gemm(cin * k, cout, lout, 1.0, wv.data(), true, gi, false, 0.0, &mut dcol);
                    col2im_add(&dcol, cin, len, k, *stride, lout, &mut dx[bi * cin * len..]);
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
                acc(grads, *w, Tensor::new(wv.shape().to_vec(), dw));
                acc(grads, *b, Tensor::new(vec![cout], db));
            }
            Op::MaxPool1d { x, argmax } => {
                let xs = self.shape(*x).to_vec();
                let mut dx = vec![0.0; xs.iter().product()];
                for (gv, &src) in g.data().iter().zip(argmax) {
                    dx[src] += gv;
                }
                acc(grads, *x, Tensor::new(xs, dx));
            }
            Op::PadReplicate { x, left, right } => {
                let xs = self.shape(*x).to_vec();
                let len = xs[2];
                let nl = len + left + right;
                let planes = xs[0] * xs[1];
                let mut dx = vec![0.0; planes * len];
                for p in 0..planes {
                    let gr = &g.data()[p * nl..(p + 1) * nl];
                    let dr = &mut dx[p * len..(p + 1) * len];
                    for (j, gv) in gr.iter().enumerate() {
                        let src = j.saturating_sub(*left).min(len - 1);
                        dr[src] += gv;
                    }
                }
                acc(grads, *x, Tensor::new(xs, dx));
            }
            Op::TakeTime { x, start, step } => {
                let xs = self.shape(*x).to_vec();
                let len = *xs.last().unwrap();
                let n = g.last_dim();
                let mut dx = vec![0.0; xs.iter().product()];
                for p in 0..g.rows() {
                    for i in 0..n {
                        dx[p * len + start + i * step] += g.data()[p * n + i];
                    }
                }
                acc(grads, *x, Tensor::new(xs, dx));
            }
            Op::Interleave(even, odd) => {
                let (es, os) = (self.shape(*even).to_vec(), self.shape(*odd).to_vec());
                let (le, lo) = (*es.last().unwrap(), *os.last().unwrap());
                let n = le + lo;
                let planes = g.rows();
                let mut de = vec![0.0; planes * le];
                let mut dodd = vec![0.0; planes * lo];
                for p in 0..planes {
                    for i in 0..le {
                        de[p * le + i] = g.data()[p * n + 2 * i];
                    }
                    for i in 0..lo {
                        dodd[p * lo + i] = g.data()[p * n + 2 * i + 1];
                    }
                }
                acc(grads, *even, Tensor::new(es, de));
                acc(grads, *odd, Tensor::new(os, dodd));
            }
            Op::MulConst { x, factor } => acc(grads, *x, zip_map(g, factor, |g, f| g * f)),
            Op::L2NormalizeRows(x) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for ((dxr, xr), (yr, gr)) in dx
                    .chunks_mut(d)
                    .zip(xv.data().chunks(d))
                    .zip(y.data().chunks(d).zip(g.data().chunks(d)))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n <= ZERO_NORM {
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dxr[j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::HuberMean { pred, target, beta } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let scale = g.item() / pv.len().max(1) as f64;
                let dp: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(p, t)| scale * (p - t).clamp(-beta, *beta))
                    .collect();
                let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                acc(grads, *pred, Tensor::new(pv.shape().to_vec(), dp));
                acc(grads, *target, Tensor::new(tv.shape().to_vec(), dt));
            }
            Op::MCosineMean { latents, eps } => {
                let s0 = self.shape(latents[0]).to_vec();
                let (b, d) = (s0[0], s0[1]);
                let scale = g.item() / b.max(1) as f64;
                let mut dz: Vec<Vec<f64>> = latents.iter().map(|_| vec![0.0; b * d]).collect();
                for i in 0..b {
                    let rows: Vec<&[f64]> = latents
                        .iter()
                        .map(|&z| &self.value(z).data()[i * d..(i + 1) * d])
                        .collect();
                    let mut row_grads: Vec<&mut [f64]> =
                        dz.iter_mut().map(|v| &mut v[i * d..(i + 1) * d]).collect();
                    crate::losses::mcosine_slices_grad(&rows, *eps, scale, &mut row_grads);
                }
                for (&z, dzi) in latents.iter().zip(dz) {
                    acc(grads, z, Tensor::new(s0.clone(), dzi));
                }
            }
            Op::Sum(x) => {
                let xs = self.shape(*x).to_vec();
                acc(grads, *x, Tensor::full(&xs, g.item()));
            }
            Op::Mean(x) => {
                let xs = self.shape(*x).to_vec();
                let n: usize = xs.iter().product();
                acc(grads, *x, Tensor::full(&xs, g.item() / n.max(1) as f64));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.accumulate(id, g);
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `col[(c*k + j), t] = x[c, t*stride + j]`.
fn im2col(x: &[f64], cin: usize, len: usize, k: usize, stride: usize, lout: usize, col: &mut [f64]) {
    for c in 0..cin {
        let row = &x[c * len..(c + 1) * len];
        for j in 0..k {
            let dst = &mut col[(c * k + j) * lout..(c * k + j + 1) * lout];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = row[t * stride + j];
            }
        }
    }
}

fn col2im_add(
    dcol: &[f64],
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    lout: usize,
    dx: &mut [f64],
) {
    for c in 0..cin {
        for j in 0..k {
            let src = &dcol[(c * k + j) * lout..(c * k + j + 1) * lout];
            for (t, s) in src.iter().enumerate() {
                dx[c * len + t * stride + j] += s;
            }
        }
    }
}
