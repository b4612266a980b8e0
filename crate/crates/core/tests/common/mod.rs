#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rul_core::losses::{composite_loss_graph, LossWeights};
use rul_core::models::{Architecture, Model, ModelConfig};
use rul_core::nn::{Graph, ParamStore, Tensor, Var};

pub type GraphFn = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

pub const STEP: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / (|a| + |b|)` over whole vectors; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = norm(a.iter().zip(b).map(|(x, y)| x - y));
    let den = norm(a.iter().copied()) + norm(b.iter().copied());
    if den < 1e-300 {
        0.0
    } else {
        num / den
    }
}

/// Reduces any output to a scalar through a fixed random projection so the
/// whole Jacobian is exercised.
fn project(g: &mut Graph, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return g.sum(v);
    }
    let w = random_tensor(&shape, -1.0, 1.0, &mut rng(shape.iter().sum::<usize>() as u64 + 17));
    let p = g.mul_const(v, w);
    g.sum(p)
}

fn eval_scalar(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let s = project(&mut g, out);
    g.value(s).item()
}

/// Relative error between tape gradients and central differences for
/// every element of every input.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let s = project(&mut g, out);
    let grads = g.backward(s);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let ga = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        analytic.extend_from_slice(ga.data());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            numeric.push((eval_scalar(&plus, &f) - eval_scalar(&minus, &f)) / (2.0 * STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Composite training loss of `model` on one batch. Dropout masks are fixed
/// by `seed`, so repeated evaluations see the same function.
pub fn model_loss(model: &Model, x: &Tensor, y: &Tensor, weights: &LossWeights, seed: u64) -> f64 {
    let mut g = Graph::new(&model.store, true, seed);
    let xv = g.input(x.clone());
    let yv = g.input(y.clone());
    let out = model.forward(&mut g, xv, None).unwrap();
    let l = composite_loss_graph(
        &mut g,
        out.prediction,
        &out.block_predictions,
        &out.aux_predictions,
        &out.latents,
        yv,
        weights,
    );
    g.value(l).item()
}

/// Relative error of parameter gradients on a sample of coordinates: every
/// tensor contributes at least one, plus `extra` random ones.
pub fn check_model_params(model: &Model, x: &Tensor, y: &Tensor, weights: &LossWeights, extra: usize, seed: u64) -> f64 {
    let analytic: HashMap<usize, Tensor> = {
        let mut g = Graph::new(&model.store, true, seed);
        let xv = g.input(x.clone());
        let yv = g.input(y.clone());
        let out = model.forward(&mut g, xv, None).unwrap();
        let l = composite_loss_graph(
            &mut g,
            out.prediction,
            &out.block_predictions,
            &out.aux_predictions,
            &out.latents,
            yv,
            weights,
        );
        let grads = g.backward(l);
        grads.param_grads().map(|(id, t)| (id.index(), t.clone())).collect()
    };
    let sizes: Vec<usize> = model.store.iter().map(|(_, p)| p.value.len()).collect();
    let mut r = rng(seed ^ 0xabc);
    let mut coords: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &n)| (i, r.random_range(0..n))).collect();
    let total: usize = sizes.iter().sum();
    for _ in 0..extra {
        let mut k = r.random_range(0..total);
        let mut t = 0;
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        coords.push((t, k));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let mut a = Vec::new();
    let mut n = Vec::new();
    for (t, k) in coords {
        a.push(analytic.get(&t).map_or(0.0, |g| g.data()[k]));
        let mut plus = model.clone();
        plus.store.get_mut(ids[t]).value.data_mut()[k] += STEP;
        let mut minus = model.clone();
        minus.store.get_mut(ids[t]).value.data_mut()[k] -= STEP;
        n.push((model_loss(&plus, x, y, weights, seed) - model_loss(&minus, x, y, weights, seed)) / (2.0 * STEP));
    }
    rel_err(&a, &n)
}

/// Small configuration for gradient checks: `W = 8`, three sensors, no dropout.
pub fn tiny_config(architecture: Architecture) -> ModelConfig {
    let mut cfg = ModelConfig::new(architecture, 8);
    cfg.sensors = 3;
    cfg.dropout = 0.0;
    cfg.lstm_layers = 2;
    cfg.baseline_hidden = 4;
    cfg.baseline_fc = 6;
    cfg.head_hidden = 5;
    cfg.scinet.hidden = 2;
    cfg.scinet.dropout = 0.0;
    cfg.cnn.kernels = [3, 2];
    cfg.cnn.pool_kernels = [2, 2];
    cfg.cnn.pool_strides = [1, 1];
    cfg.cnn.hidden = [4, 4];
    cfg
}

/// Model gradient check on a random batch of 3 windows.
pub fn model_grad_error(architecture: Architecture, seed: u64) -> f64 {
    let cfg = tiny_config(architecture);
    let model = Model::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed + 1);
    let x = random_tensor(&[3, cfg.window, cfg.sensors], -1.0, 1.0, &mut r);
    // Targets near the untrained output keep some residuals inside the
    // quadratic Huber branch.
    let y = Tensor::new(vec![3, 1], vec![0.3, -0.4, 2.5]);
    check_model_params(&model, &x, &y, &LossWeights::default(), 150, seed)
}

/// Independent PHM score.
pub fn brute_score(pred: &[f64], truth: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        let d = pred[i] - truth[i];
        s += if d < 0.0 { (-d / 13.0).exp() - 1.0 } else { (d / 10.0).exp() - 1.0 };
    }
    s
}

pub fn brute_rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - truth[i]).powi(2);
    }
    (s / pred.len() as f64).sqrt()
}

/// Number of kept training windows, by explicit enumeration.
pub fn brute_window_count(t: usize, w: usize, stride: usize) -> usize {
    let mut kept = 0;
    let mut capped = 0;
    for end in w..=t {
        let rul = (t - end).min(125);
        if rul < 125 {
            kept += 1;
        } else {
            if capped % stride == 0 {
                kept += 1;
            }
            capped += 1;
        }
    }
    kept
}

fn arg(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, -1.5, 1.5, &mut rng(seed))
}

/// One named gradient check per tape primitive. Inputs avoid the kinks of
/// ReLU, max pooling and Huber with probability one.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, GraphFn)> {
    let t = arg;
    let mut huber_target = t(&[6, 1], 61);
    // Spread residuals over both Huber branches.
    huber_target.data_mut()[0] += 3.0;
    huber_target.data_mut()[1] -= 4.0;
    vec![
        ("matmul", vec![t(&[2, 3, 4], 1), t(&[4, 5], 2)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("add_bias", vec![t(&[3, 4], 3), t(&[4], 4)], Box::new(|g, v| g.add_bias(v[0], v[1]))),
        ("bmm", vec![t(&[2, 3, 4], 5), t(&[2, 4, 2], 6)], Box::new(|g, v| g.bmm(v[0], v[1], false))),
        ("bmm_t", vec![t(&[2, 3, 4], 7), t(&[2, 5, 4], 8)], Box::new(|g, v| g.bmm(v[0], v[1], true))),
        ("add", vec![t(&[3, 4], 9), t(&[3, 4], 10)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![t(&[3, 4], 11), t(&[3, 4], 12)], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![t(&[3, 4], 13), t(&[3, 4], 14)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![t(&[3, 4], 15)], Box::new(|g, v| g.scale(v[0], -0.7))),
        ("sigmoid", vec![t(&[3, 4], 16)], Box::new(|g, v| g.sigmoid(v[0]))),
        ("tanh", vec![t(&[3, 4], 17)], Box::new(|g, v| g.tanh(v[0]))),
        ("relu", vec![t(&[3, 4], 18)], Box::new(|g, v| g.relu(v[0]))),
        ("leaky_relu", vec![t(&[3, 4], 19)], Box::new(|g, v| g.leaky_relu(v[0], 0.01))),
        ("silu", vec![t(&[3, 4], 20)], Box::new(|g, v| g.silu(v[0]))),
        ("exp", vec![t(&[3, 4], 21)], Box::new(|g, v| g.exp(v[0]))),
        ("mul_const", vec![t(&[3, 4], 22)], Box::new(|g, v| g.mul_const(v[0], arg(&[3, 4], 99)))),
        ("softmax", vec![t(&[2, 3, 5], 23)], Box::new(|g, v| g.softmax(v[0]))),
        ("sum", vec![t(&[3, 4], 24)], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![t(&[3, 4], 25)], Box::new(|g, v| g.mean(v[0]))),
        ("swap_last2", vec![t(&[2, 3, 4], 30)], Box::new(|g, v| g.swap_last2(v[0]))),
        ("select_step", vec![t(&[2, 5, 3], 31)], Box::new(|g, v| g.select_step(v[0], 2))),
        ("stack", vec![t(&[2, 3], 32), t(&[2, 3], 33)], Box::new(|g, v| g.stack(&[v[0], v[1]]))),
        ("concat_last", vec![t(&[2, 3], 34), t(&[2, 2], 35)], Box::new(|g, v| g.concat_last(&[v[0], v[1]]))),
        ("slice_last", vec![t(&[2, 6], 36)], Box::new(|g, v| g.slice_last(v[0], 1, 3))),
        ("reshape", vec![t(&[2, 3, 4], 37)], Box::new(|g, v| g.reshape(v[0], &[2, 12]))),
        ("pad_replicate", vec![t(&[2, 3, 4], 38)], Box::new(|g, v| g.pad_replicate(v[0], 2, 1))),
        ("take_time_even", vec![t(&[2, 3, 8], 39)], Box::new(|g, v| g.take_time(v[0], 0, 2))),
        ("take_time_odd", vec![t(&[2, 3, 8], 40)], Box::new(|g, v| g.take_time(v[0], 1, 2))),
        ("interleave", vec![t(&[2, 3, 4], 41), t(&[2, 3, 4], 42)], Box::new(|g, v| g.interleave(v[0], v[1]))),
        ("l2_normalize_rows", vec![t(&[3, 5], 43)], Box::new(|g, v| g.l2_normalize_rows(v[0]))),
        (
            "conv1d",
            vec![t(&[2, 3, 9], 50), t(&[4, 3, 3], 51), t(&[4], 52)],
            Box::new(|g, v| g.conv1d(v[0], v[1], v[2], 1)),
        ),
        (
            "conv1d_strided",
            vec![t(&[2, 3, 9], 54), t(&[4, 3, 3], 55), t(&[4], 56)],
            Box::new(|g, v| g.conv1d(v[0], v[1], v[2], 2)),
        ),
        ("maxpool1d", vec![t(&[2, 3, 9], 53)], Box::new(|g, v| g.maxpool1d(v[0], 3, 2))),
        ("maxpool1d_overlap", vec![t(&[2, 3, 9], 57)], Box::new(|g, v| g.maxpool1d(v[0], 2, 1))),
        ("huber_mean", vec![t(&[6, 1], 60), huber_target], Box::new(|g, v| g.huber_mean(v[0], v[1], 1.0))),
        (
            "mcosine_mean",
            vec![t(&[4, 6], 62), t(&[4, 6], 63), t(&[4, 6], 64)],
            Box::new(|g, v| g.mcosine_mean(v, 1e-7)),
        ),
    ]
}
