//! Parameterised building blocks on top of [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine map on the trailing axis, `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[out_dim], bound, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// One recurrent layer; gate order in the packed weights is input, forget, cell, output.
#[derive(Clone, Debug)]
struct LstmLayer {
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
}

/// Stacked LSTM with zero initial state and dropout between layers.
#[derive(Clone, Debug)]
pub struct LstmStack {
    layers: Vec<LstmLayer>,
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(num_layers >= 1);
        let bound = 1.0 / (hidden as f64).sqrt();
        let layers = (0..num_layers)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { hidden };
                let w_input = store.add_uniform(
                    format!("{name}.l{l}.w_input"),
                    &[in_dim, 4 * hidden],
                    bound,
                    rng,
                );
                let w_hidden = store.add_uniform(
                    format!("{name}.l{l}.w_hidden"),
                    &[hidden, 4 * hidden],
                    bound,
                    rng,
                );
                let mut b: Vec<f64> = (0..4 * hidden).map(|_| rng.random_range(-bound..=bound)).collect();
                b[hidden..2 * hidden].fill(1.0);
                let bias = store.add(format!("{name}.l{l}.bias"), Tensor::new(vec![4 * hidden], b));
                LstmLayer {
                    w_input,
                    w_hidden,
                    bias,
                }
            })
            .collect();
        Self {
            layers,
            input_dim,
            hidden,
            dropout,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `x: [B, L, input_dim] -> [B, L, hidden]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        assert!(s.len() == 3 && s[1] >= 1 && s[2] == self.input_dim, "lstm input {s:?}");
        let steps = s[1];
        let h = self.hidden;
        let mut input = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let w_in = g.param(layer.w_input);
            let w_hid = g.param(layer.w_hidden);
            let bias = g.param(layer.bias);
            let projected = g.matmul(input, w_in);
            let projected = g.add_bias(projected, bias);
            let mut state: Option<(Var, Var)> = None;
            let mut outputs = Vec::with_capacity(steps);
            for t in 0..steps {
                let mut gates = g.select_step(projected, t);
                if let Some((hp, _)) = state {
                    let rec = g.matmul(hp, w_hid);
                    gates = g.add(gates, rec);
                }
                let i = g.slice_last(gates, 0, h);
                let i = g.sigmoid(i);
                let f = g.slice_last(gates, h, h);
                let f = g.sigmoid(f);
                let cand = g.slice_last(gates, 2 * h, h);
                let cand = g.tanh(cand);
                let o = g.slice_last(gates, 3 * h, h);
                let o = g.sigmoid(o);
                let ic = g.mul(i, cand);
                let c = match state {
                    Some((_, cp)) => {
                        let fc = g.mul(f, cp);
                        g.add(fc, ic)
                    }
                    None => ic,
                };
                let tc = g.tanh(c);
                let hn = g.mul(o, tc);
                outputs.push(hn);
                state = Some((hn, c));
            }
            let mut out = g.stack(&outputs);
            if li + 1 < self.layers.len() {
                out = g.dropout(out, self.dropout);
            }
            input = out;
        }
        input
    }
}

/// Single-head scaled dot-product self-attention with `d_k = d`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            dim,
        }
    }

    /// `x: [B, L, d] -> [B, L, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.forward_with_weights(g, x).0
    }

    /// Also returns the `[B, L, L]` attention matrix.
    pub fn forward_with_weights(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let weights = g.softmax(scores);
        (g.bmm(weights, v, false), weights)
    }
}

/// 1-D convolution over `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        Self {
            weight: store.add_uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel],
                bound,
                rng,
            ),
            bias: store.add_uniform(format!("{name}.bias"), &[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv1d(x, w, b, self.stride)
    }
}

/// Output length of a valid (unpadded) sliding operation.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if len < kernel {
        return Err(Error::shape(format!("length {len} shorter than kernel {kernel}")));
    }
    Ok((len - kernel) / stride + 1)
}

/// Inverted dropout on a plain array.
pub fn dropout(x: &Tensor, p: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let data = x
        .data()
        .iter()
        .map(|&v| if rng.random::<f64>() < p { 0.0 } else { v * keep })
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = LstmStack::new(&mut store, "lstm", 3, 4, 2, 0.0, &mut rng);
        let b = store.value(lstm.layers[1].bias).data();
        assert!(b[4..8].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn output_len_formula() {
        assert_eq!(conv_output_len(26, 3, 2).unwrap(), 12);
        assert_eq!(conv_output_len(32, 7, 1).unwrap(), 26);
        assert!(conv_output_len(2, 3, 1).is_err());
    }

    #[test]
    fn dropout_rejects_p_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout(&Tensor::zeros(&[2]), 1.0, true, &mut rng).is_err());
    }
}
