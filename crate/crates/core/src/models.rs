//! The five networks: LSTM and CNN baselines, the single-block time-feature
//! model (TFM), its two-block variant (DTFM), and the interaction model (TFIM)
//! that adds a SCINet-style block.
//!
//! Every network reads a batch of windows `[B, W, C]` and returns a `[B, 1]`
//! prediction. The multi-block models also expose per-block predictions and
//! unit-norm latents so the composite loss and the ablation can use them.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::NUM_SENSORS;
use crate::nn::{conv_output_len, Conv1d, Graph, Linear, LstmStack, ParamStore, SelfAttention, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lstm,
    Cnn,
    Tfm,
    Dtfm,
    Tfim,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [Self::Lstm, Self::Cnn, Self::Tfm, Self::Dtfm, Self::Tfim];

    /// Number of feature-extractor blocks; zero for the baselines.
    pub fn num_blocks(self) -> usize {
        match self {
            Self::Lstm | Self::Cnn => 0,
            Self::Tfm => 1,
            Self::Dtfm => 2,
            Self::Tfim => 3,
        }
    }

    pub fn is_baseline(self) -> bool {
        self.num_blocks() == 0
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lstm => "lstm",
            Self::Cnn => "cnn",
            Self::Tfm => "tfm",
            Self::Dtfm => "dtfm",
            Self::Tfim => "tfim",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown model {s:?} (expected lstm, cnn, tfm, dtfm or tfim)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub channels: [usize; 2],
    pub kernels: [usize; 2],
    pub pool_kernels: [usize; 2],
    pub pool_strides: [usize; 2],
    pub hidden: [usize; 2],
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            channels: [5, 10],
            kernels: [7, 3],
            pool_kernels: [3, 3],
            pool_strides: [2, 1],
            hidden: [60, 120],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScinetConfig {
    /// Depth of the even/odd tree.
    pub levels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub dropout: f64,
    /// Stacked trees; an auxiliary RUL head sits between consecutive stacks.
    pub stacks: usize,
}

impl Default for ScinetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            hidden: 16,
            kernel: 3,
            dropout: 0.65,
            stacks: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub window: usize,
    pub sensors: usize,
    pub dropout: f64,
    pub lstm_layers: usize,
    /// Hidden size of the LSTM baseline.
    pub baseline_hidden: usize,
    /// Width of the LSTM baseline's fully connected layer.
    pub baseline_fc: usize,
    /// Width of the prediction head of the block models.
    pub head_hidden: usize,
    pub cnn: CnnConfig,
    pub scinet: ScinetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Tfim,
            window: 32,
            sensors: NUM_SENSORS,
            dropout: 0.5,
            lstm_layers: 3,
            baseline_hidden: 21,
            baseline_fc: 126,
            head_hidden: 256,
            cnn: CnnConfig::default(),
            scinet: ScinetConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn new(architecture: Architecture, window: usize) -> Self {
        Self {
            architecture,
            window,
            ..Self::default()
        }
    }

    /// Flattened latent size of one block.
    pub fn latent_dim(&self) -> usize {
        self.window * self.sensors
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.window == 0 || self.sensors == 0 {
            return bad("window and sensor count must be positive".into());
        }
        for p in [self.dropout, self.scinet.dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout {p} outside [0, 1)"));
            }
        }
        if self.lstm_layers == 0 || self.head_hidden == 0 {
            return bad("lstm_layers and head_hidden must be positive".into());
        }
        match self.architecture {
            Architecture::Cnn => {
                cnn_flatten_len(self)?;
            }
            Architecture::Tfim => {
                let s = &self.scinet;
                let div = 1usize << s.levels;
                if s.levels == 0 || self.window % div != 0 {
                    return bad(format!(
                        "window {} must be divisible by 2^{} for the SCINet tree",
                        self.window, s.levels
                    ));
                }
                if s.stacks == 0 || s.kernel == 0 || s.hidden == 0 {
                    return bad("scinet stacks, kernel and hidden must be positive".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Short content hash tying checkpoints to the graph they were built for.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Length after the two conv/pool stages, times the last channel count.
pub fn cnn_flatten_len(cfg: &ModelConfig) -> Result<usize> {
    let c = &cfg.cnn;
    let mut len = cfg.window;
    for i in 0..2 {
        len = conv_output_len(len, c.kernels[i], 1)?;
        len = conv_output_len(len, c.pool_kernels[i], c.pool_strides[i])?;
    }
    Ok(len * c.channels[1])
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[B, 1]`.
    pub prediction: Var,
    /// One `[B, 1]` per block.
    pub block_predictions: Vec<Var>,
    /// Intermediate heads inside blocks (SCINet between stacks), `[B, 1]` each.
    pub aux_predictions: Vec<Var>,
    /// One unit-norm `[B, D]` per block.
    pub latents: Vec<Var>,
}

/// Plain values for a single window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardOutput {
    pub prediction: f64,
    pub block_predictions: Vec<f64>,
    pub block_latents: Vec<Vec<f64>>,
}

// ----- baselines ---------------------------------------------------------------

#[derive(Clone, Debug)]
struct LstmBaseline {
    lstm: LstmStack,
    fc: Linear,
    out: Linear,
    dropout: f64,
}

impl LstmBaseline {
    fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let lstm = LstmStack::new(
            store,
            "lstm",
            cfg.sensors,
            cfg.baseline_hidden,
            cfg.lstm_layers,
            cfg.dropout,
            rng,
        );
        let flat = cfg.window * cfg.baseline_hidden;
        Self {
            lstm,
            fc: Linear::new(store, "head.fc", flat, cfg.baseline_fc, rng),
            out: Linear::new(store, "head.out", cfg.baseline_fc, 1, rng),
            dropout: cfg.dropout,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let b = g.shape(x)[0];
        let h = self.lstm.forward(g, x);
        let flat = g.reshape(h, &[b, self.fc.in_dim]);
        let h = self.fc.forward(g, flat);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        self.out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct CnnBaseline {
    convs: [Conv1d; 2],
    pools: [(usize, usize); 2],
    fc: [Linear; 3],
    dropout: f64,
}

impl CnnBaseline {
    fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = &cfg.cnn;
        let flat = cnn_flatten_len(cfg)?;
        let convs = [
            Conv1d::new(store, "conv1", cfg.sensors, c.channels[0], c.kernels[0], 1, rng),
            Conv1d::new(store, "conv2", c.channels[0], c.channels[1], c.kernels[1], 1, rng),
        ];
        let fc = [
            Linear::new(store, "head.fc1", flat, c.hidden[0], rng),
            Linear::new(store, "head.fc2", c.hidden[0], c.hidden[1], rng),
            Linear::new(store, "head.out", c.hidden[1], 1, rng),
        ];
        Ok(Self {
            convs,
            pools: [
                (c.pool_kernels[0], c.pool_strides[0]),
                (c.pool_kernels[1], c.pool_strides[1]),
            ],
            fc,
            dropout: cfg.dropout,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let b = g.shape(x)[0];
        let mut h = g.swap_last2(x);
        for (conv, &(k, s)) in self.convs.iter().zip(&self.pools) {
            h = conv.forward(g, h);
            h = g.relu(h);
            h = g.maxpool1d(h, k, s);
        }
        let mut h = g.reshape(h, &[b, self.fc[0].in_dim]);
        for fc in &self.fc[..2] {
            h = fc.forward(g, h);
            h = g.relu(h);
            h = g.dropout(h, self.dropout);
        }
        self.fc[2].forward(g, h)
    }
}

// ----- extractor blocks --------------------------------------------------------

/// Sensors become tokens: `[B, W, C] -> [B, C, W]`, a residual LSTM stack with
/// hidden size `W`, self-attention across sensors, then a flat unit-norm latent.
#[derive(Clone, Debug)]
struct TfmBlock {
    lstm: LstmStack,
    attention: SelfAttention,
}

impl TfmBlock {
    fn new(cfg: &ModelConfig, name: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.window;
        Self {
            lstm: LstmStack::new(store, &format!("{name}.lstm"), w, w, cfg.lstm_layers, cfg.dropout, rng),
            attention: SelfAttention::new(store, &format!("{name}.attention"), w, rng),
        }
    }

    /// Returns the flat latent before normalization.
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let tokens = g.swap_last2(x);
        let h = self.lstm.forward(g, tokens);
        let h = g.add(h, tokens);
        let h = self.attention.forward(g, h);
        g.reshape(h, &[s[0], s[1] * s[2]])
    }
}

/// `ReplicationPad -> Conv(C->H) -> LeakyReLU -> Dropout -> Conv(H->C) -> Tanh`.
#[derive(Clone, Debug)]
struct Interaction {
    conv1: Conv1d,
    conv2: Conv1d,
    pad: usize,
    dropout: f64,
}

impl Interaction {
    fn new(cfg: &ModelConfig, name: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let s = &cfg.scinet;
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), cfg.sensors, s.hidden, s.kernel, 1, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), s.hidden, cfg.sensors, s.kernel, 1, rng),
            pad: s.kernel - 1,
            dropout: s.dropout,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.pad_replicate(x, self.pad, self.pad);
        let h = self.conv1.forward(g, h);
        let h = g.leaky_relu(h, 0.01);
        let h = g.dropout(h, self.dropout);
        let h = self.conv2.forward(g, h);
        g.tanh(h)
    }
}

/// One tree node: splits even/odd time steps and lets them exchange information
/// through scaling (`phi`, `psi`) and additive (`rho`, `eta`) interactions.
#[derive(Clone, Debug)]
struct ScinetNode {
    phi: Interaction,
    psi: Interaction,
    rho: Interaction,
    eta: Interaction,
    children: Option<Box<[ScinetNode; 2]>>,
}

impl ScinetNode {
    fn new(cfg: &ModelConfig, name: &str, level: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let phi = Interaction::new(cfg, &format!("{name}.phi"), store, rng);
        let psi = Interaction::new(cfg, &format!("{name}.psi"), store, rng);
        let rho = Interaction::new(cfg, &format!("{name}.rho"), store, rng);
        let eta = Interaction::new(cfg, &format!("{name}.eta"), store, rng);
        let children = (level > 1).then(|| {
            Box::new([
                Self::new(cfg, &format!("{name}.even"), level - 1, store, rng),
                Self::new(cfg, &format!("{name}.odd"), level - 1, store, rng),
            ])
        });
        Self {
            phi,
            psi,
            rho,
            eta,
            children,
        }
    }

    /// `x: [B, C, L] -> [B, C, L]`.
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let even = g.take_time(x, 0, 2);
        let odd = g.take_time(x, 1, 2);
        let a = self.phi.forward(g, even);
        let a = g.exp(a);
        let odd_s = g.mul(odd, a);
        let b = self.psi.forward(g, odd);
        let b = g.exp(b);
        let even_s = g.mul(even, b);
        let u = self.eta.forward(g, odd_s);
        let mut even = g.add(even_s, u);
        let p = self.rho.forward(g, even_s);
        let mut odd = g.sub(odd_s, p);
        if let Some(children) = &self.children {
            even = children[0].forward(g, even);
            odd = children[1].forward(g, odd);
        }
        g.interleave(even, odd)
    }
}

#[derive(Clone, Debug)]
struct ScinetBlock {
    stacks: Vec<ScinetNode>,
    /// Heads between consecutive stacks.
    aux_heads: Vec<Linear>,
    dropout: f64,
}

impl ScinetBlock {
    fn new(cfg: &ModelConfig, name: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let s = &cfg.scinet;
        let stacks = (0..s.stacks)
            .map(|i| ScinetNode::new(cfg, &format!("{name}.stack{i}"), s.levels, store, rng))
            .collect();
        let aux_heads = (1..s.stacks)
            .map(|i| Linear::new(store, &format!("{name}.aux{i}"), cfg.latent_dim(), 1, rng))
            .collect();
        Self {
            stacks,
            aux_heads,
            dropout: cfg.dropout,
        }
    }

    /// Returns the flat latent before normalization and the auxiliary predictions.
    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Vec<Var>) {
        let s = g.shape(x).to_vec();
        let flat = [s[0], s[1] * s[2]];
        let mut h = g.swap_last2(x);
        let mut aux = Vec::new();
        for (i, stack) in self.stacks.iter().enumerate() {
            if i > 0 {
                let f = g.reshape(h, &flat);
                aux.push(block_head(g, &self.aux_heads[i - 1], f, self.dropout));
            }
            let y = stack.forward(g, h);
            h = g.add(y, h);
        }
        (g.reshape(h, &flat), aux)
    }
}

/// `Dropout -> Linear(D -> 1) -> SiLU`.
fn block_head(g: &mut Graph, head: &Linear, latent: Var, dropout: f64) -> Var {
    let h = g.dropout(latent, dropout);
    let h = head.forward(g, h);
    g.silu(h)
}

#[derive(Clone, Debug)]
enum Extractor {
    Tfm(TfmBlock),
    Scinet(ScinetBlock),
}

#[derive(Clone, Debug)]
struct BlockNet {
    blocks: Vec<Extractor>,
    block_heads: Vec<Linear>,
    /// Attention across block tokens; absent for a single block.
    fusion: Option<SelfAttention>,
    head: Linear,
    out: Linear,
    dropout: f64,
}

impl BlockNet {
    fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.architecture.num_blocks();
        let d = cfg.latent_dim();
        let blocks: Vec<Extractor> = (0..n)
            .map(|i| {
                let name = format!("block{i}");
                if cfg.architecture == Architecture::Tfim && i == 2 {
                    Extractor::Scinet(ScinetBlock::new(cfg, &name, store, rng))
                } else {
                    Extractor::Tfm(TfmBlock::new(cfg, &name, store, rng))
                }
            })
            .collect();
        let block_heads = (0..n)
            .map(|i| Linear::new(store, &format!("block{i}.head"), d, 1, rng))
            .collect();
        let fusion = (n > 1).then(|| SelfAttention::new(store, "fusion", d, rng));
        Self {
            blocks,
            block_heads,
            fusion,
            head: Linear::new(store, "head.fc", n * d, cfg.head_hidden, rng),
            out: Linear::new(store, "head.out", cfg.head_hidden, 1, rng),
            dropout: cfg.dropout,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>) -> ForwardVars {
        let b = g.shape(x)[0];
        let mut latents = Vec::with_capacity(self.blocks.len());
        let mut aux_predictions = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let raw = match block {
                Extractor::Tfm(t) => t.forward(g, x),
                Extractor::Scinet(s) => {
                    let (z, aux) = s.forward(g, x);
                    aux_predictions.extend(aux);
                    z
                }
            };
            let mut z = g.l2_normalize_rows(raw);
            if mask.is_some_and(|m| m[i]) {
                let zeros = Tensor::zeros(g.shape(z));
                z = g.mul_const(z, zeros);
            }
            latents.push(z);
        }
        let block_predictions = latents
            .iter()
            .zip(&self.block_heads)
            .map(|(&z, head)| block_head(g, head, z, self.dropout))
            .collect();
        let fused = match &self.fusion {
            Some(att) => {
                let tokens = g.stack(&latents);
                let h = att.forward(g, tokens);
                g.reshape(h, &[b, self.head.in_dim])
            }
            None => latents[0],
        };
        let h = self.head.forward(g, fused);
        let h = g.silu(h);
        let h = g.dropout(h, self.dropout);
        ForwardVars {
            prediction: self.out.forward(g, h),
            block_predictions,
            aux_predictions,
            latents,
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Lstm(LstmBaseline),
    Cnn(CnnBaseline),
    Blocks(BlockNet),
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    net: Net,
}

impl Model {
    /// Builds the network with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match config.architecture {
            Architecture::Lstm => Net::Lstm(LstmBaseline::new(&config, &mut store, &mut rng)),
            Architecture::Cnn => Net::Cnn(CnnBaseline::new(&config, &mut store, &mut rng)?),
            _ => Net::Blocks(BlockNet::new(&config, &mut store, &mut rng)),
        };
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.config.architecture.num_blocks()
    }

    /// Records the forward pass of `x: [B, W, C]` on `g`.
    ///
    /// `mask[i] == true` replaces block `i`'s normalized latent with zeros.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<ForwardVars> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.config.window || s[2] != self.config.sensors || s[0] == 0 {
            return Err(Error::shape(format!(
                "expected input [B, {}, {}], got {s:?}",
                self.config.window, self.config.sensors
            )));
        }
        if let Some(m) = mask {
            if m.len() != self.num_blocks() {
                return Err(Error::invalid(format!(
                    "mask has {} entries for {} blocks",
                    m.len(),
                    self.num_blocks()
                )));
            }
        }
        Ok(match &self.net {
            Net::Lstm(n) => ForwardVars {
                prediction: n.forward(g, x),
                block_predictions: Vec::new(),
                aux_predictions: Vec::new(),
                latents: Vec::new(),
            },
            Net::Cnn(n) => ForwardVars {
                prediction: n.forward(g, x),
                block_predictions: Vec::new(),
                aux_predictions: Vec::new(),
                latents: Vec::new(),
            },
            Net::Blocks(n) => n.forward(g, x, mask),
        })
    }

    /// Inference-mode predictions for `n` windows stored back to back.
    pub fn predict(&self, windows: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
        let per = self.config.window * self.config.sensors;
        if windows.is_empty() || windows.len() % per != 0 {
            return Err(Error::shape(format!(
                "window buffer of {} values is not a multiple of {per}",
                windows.len()
            )));
        }
        let n = windows.len() / per;
        let mut g = Graph::inference(&self.store);
        let x = g.input(Tensor::new(
            vec![n, self.config.window, self.config.sensors],
            windows.to_vec(),
        ));
        let out = self.forward(&mut g, x, mask)?;
        Ok(g.value(out.prediction).data().to_vec())
    }

    /// Full inference output for one window.
    pub fn forward_output(&self, window: &[f64], mask: Option<&[bool]>) -> Result<ForwardOutput> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(Tensor::new(
            vec![1, self.config.window, self.config.sensors],
            window.to_vec(),
        ));
        let out = self.forward(&mut g, x, mask)?;
        Ok(ForwardOutput {
            prediction: g.value(out.prediction).item(),
            block_predictions: out.block_predictions.iter().map(|&v| g.value(v).item()).collect(),
            block_latents: out.latents.iter().map(|&v| g.value(v).data().to_vec()).collect(),
        })
    }

    /// Hash of the current parameter values.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.window * cfg.sensors).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn cnn_sizes_follow_the_formula() {
        let cfg = ModelConfig::new(Architecture::Cnn, 32);
        assert_eq!(cnn_flatten_len(&cfg).unwrap(), 80);
    }

    #[test]
    fn head_dims_scale_with_window() {
        for (arch, w, d) in [
            (Architecture::Tfm, 32, 672),
            (Architecture::Dtfm, 32, 1344),
            (Architecture::Tfim, 32, 2016),
            (Architecture::Tfim, 40, 2520),
        ] {
            let m = Model::new(ModelConfig::new(arch, w), 0).unwrap();
            let Net::Blocks(n) = &m.net else { panic!() };
            assert_eq!(n.head.in_dim, d, "{arch} W={w}");
        }
    }

    #[test]
    fn block_lists_have_block_count() {
        for arch in [Architecture::Tfm, Architecture::Dtfm, Architecture::Tfim] {
            let cfg = ModelConfig::new(arch, 32);
            let m = Model::new(cfg.clone(), 3).unwrap();
            let out = m.forward_output(&input(&cfg, 1), None).unwrap();
            assert_eq!(out.block_predictions.len(), arch.num_blocks());
            assert_eq!(out.block_latents.len(), arch.num_blocks());
            for z in &out.block_latents {
                let n: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
            assert!(out.prediction.is_finite());
        }
    }

    #[test]
    fn scinet_tree_with_zero_interactions_is_identity() {
        let cfg = ModelConfig::new(Architecture::Tfim, 32);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let node = ScinetNode::new(&cfg, "s", 3, &mut store, &mut rng);
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let x = Tensor::new(vec![2, 21, 32], (0..2 * 21 * 32).map(|i| (i as f64).sin()).collect());
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let y = node.forward(&mut g, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn rejects_bad_shapes_and_masks() {
        let cfg = ModelConfig::new(Architecture::Dtfm, 32);
        let m = Model::new(cfg.clone(), 0).unwrap();
        assert!(m.predict(&[0.0; 10], None).is_err());
        assert!(m.forward_output(&input(&cfg, 0), Some(&[true])).is_err());
        let mut bad = ModelConfig::new(Architecture::Tfim, 36);
        assert!(Model::new(bad.clone(), 0).is_err());
        bad.window = 40;
        bad.dropout = 1.0;
        assert!(Model::new(bad, 0).is_err());
    }

    #[test]
    fn config_hash_tracks_contents() {
        let a = ModelConfig::new(Architecture::Tfm, 32);
        let b = ModelConfig::new(Architecture::Tfm, 40);
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
