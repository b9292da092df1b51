//! End-to-end forecaster, its configuration, training loop and ablations.
//!
//! Forward pass on a window of `T` steps for `N` nodes:
//!
//! ```text
//! [z ; covariate embeddings] -> OBS over S¹ -> affine -> spike encode (ts frames/step)
//!   -> MSSA (two hops) -> { LSTM | SSA | LSTM -> SSA | gate(LSTM, SSA) } -> head
//! ```
//!
//! The head maps the final step's fused features to `L` values per node.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::data::{metric_r2, metric_rse, time_features, NormStats, SeriesDataset, WindowBatch, WindowSplits};
use crate::dsf::{gate_fuse, group_frames, lstm_steps, ssa_frames, GateParams, LstmParams, Queries, SsaParams};
use crate::error::{Error, Result};
use crate::graph::{node_importance, prune_neighbors, sample_two_level, AdaptiveGraph, NodeEmbeddings, TwoLevelSamples};
use crate::mssa::{mssa_frames, HopSets, HopWeights};
use crate::obs::{obs_forward, ObsParams};
use crate::opcount;
use crate::spiking::{spike_encode_frames, LifParams};

/// Width of each covariate lookup table.
pub const COVARIATE_WIDTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    /// LSTM only.
    W1,
    /// SSA directly on aggregated spikes.
    W2,
    /// LSTM, re-encoded, then SSA; no gate.
    W3,
    /// Gated LSTM and SSA branches.
    W4,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::W1, Ablation::W2, Ablation::W3, Ablation::W4];

    pub fn has_lstm(self) -> bool {
        self != Ablation::W2
    }

    pub fn has_ssa(self) -> bool {
        self != Ablation::W1
    }

    pub fn has_gate(self) -> bool {
        self == Ablation::W4
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::W1 => "W1",
            Ablation::W2 => "W2",
            Ablation::W3 => "W3",
            Ablation::W4 => "W4",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "W1" => Ok(Ablation::W1),
            "W2" => Ok(Ablation::W2),
            "W3" => Ok(Ablation::W3),
            "W4" => Ok(Ablation::W4),
            other => Err(Error::Config(format!("ablation must be one of W1..W4, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub emb_dim: usize,
    pub k1: usize,
    pub k2: usize,
    pub d1: usize,
    pub d2: usize,
    pub h_dim: usize,
    pub d_k: usize,
    pub ts: usize,
    pub lif: LifParams,
    /// Self-loop weight; `None` picks `nodes − 1.5`.
    pub lambda: Option<f32>,
    /// Add each node's own row to its aggregation sets.
    pub self_loop: bool,
    /// Include the minute-of-hour table (sub-hourly data).
    pub minutes: bool,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_stride: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nodes: 8,
            input_len: 64,
            horizon: 3,
            emb_dim: 16,
            k1: 4,
            k2: 4,
            d1: 16,
            d2: 16,
            h_dim: 32,
            d_k: 16,
            ts: 4,
            lif: LifParams::default(),
            lambda: None,
            self_loop: true,
            minutes: false,
            lr: 3e-3,
            epochs: 10,
            batch_size: 8,
            train_stride: 2,
            seed: 1,
            ablation: Ablation::W4,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl ModelConfig {
    /// Keys accepted by [`set`](Self::set), in printing order.
    pub const KEYS: [&'static str; 26] = [
        "nodes",
        "input_len",
        "horizon",
        "emb_dim",
        "k1",
        "k2",
        "d1",
        "d2",
        "h_dim",
        "d_k",
        "ts",
        "beta",
        "u_th",
        "u_reset",
        "alpha",
        "lambda",
        "self_loop",
        "minutes",
        "lr",
        "epochs",
        "batch_size",
        "train_stride",
        "seed",
        "ablation",
        "clip",
        "optimizer",
    ];

    /// Sets one field from text. Dashes in keys are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "nodes" => self.nodes = parse(k, value)?,
            "input_len" => self.input_len = parse(k, value)?,
            "horizon" => self.horizon = parse(k, value)?,
            "emb_dim" => self.emb_dim = parse(k, value)?,
            "k1" => self.k1 = parse(k, value)?,
            "k2" => self.k2 = parse(k, value)?,
            "d1" => self.d1 = parse(k, value)?,
            "d2" => self.d2 = parse(k, value)?,
            "h_dim" => self.h_dim = parse(k, value)?,
            "d_k" => self.d_k = parse(k, value)?,
            "ts" => self.ts = parse(k, value)?,
            "beta" => self.lif.beta = parse(k, value)?,
            "u_th" => self.lif.u_th = parse(k, value)?,
            "u_reset" => self.lif.u_reset = parse(k, value)?,
            "alpha" => self.lif.alpha = parse(k, value)?,
            "lambda" => {
                self.lambda = match value.trim() {
                    "auto" => None,
                    v => Some(parse(k, v)?),
                }
            }
            "self_loop" => self.self_loop = parse(k, value)?,
            "minutes" => self.minutes = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "train_stride" => self.train_stride = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "ablation" => self.ablation = value.parse()?,
            // Fixed by the training procedure; accepted for echoing only.
            "clip" => {
                if parse::<f32>(k, value)? != CLIP_NORM {
                    return Err(Error::Config(format!("clip is fixed at {CLIP_NORM}")));
                }
            }
            "optimizer" => {
                if value.trim() != "adam" {
                    return Err(Error::Config("optimizer is fixed at adam".into()));
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs that [`set`](Self::set) reads back to `self`.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let lambda = self.lambda.map_or("auto".to_string(), |l| l.to_string());
        vec![
            ("nodes", self.nodes.to_string()),
            ("input_len", self.input_len.to_string()),
            ("horizon", self.horizon.to_string()),
            ("emb_dim", self.emb_dim.to_string()),
            ("k1", self.k1.to_string()),
            ("k2", self.k2.to_string()),
            ("d1", self.d1.to_string()),
            ("d2", self.d2.to_string()),
            ("h_dim", self.h_dim.to_string()),
            ("d_k", self.d_k.to_string()),
            ("ts", self.ts.to_string()),
            ("beta", self.lif.beta.to_string()),
            ("u_th", self.lif.u_th.to_string()),
            ("u_reset", self.lif.u_reset.to_string()),
            ("alpha", self.lif.alpha.to_string()),
            ("lambda", lambda),
            ("self_loop", self.self_loop.to_string()),
            ("minutes", self.minutes.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("train_stride", self.train_stride.to_string()),
            ("seed", self.seed.to_string()),
            ("ablation", self.ablation.to_string()),
            ("clip", CLIP_NORM.to_string()),
            ("optimizer", "adam".to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("emb_dim", self.emb_dim),
            ("d1", self.d1),
            ("d2", self.d2),
            ("h_dim", self.h_dim),
            ("d_k", self.d_k),
            ("ts", self.ts),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("train_stride", self.train_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be >= 0, got {l}")));
            }
        }
        self.lif.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn lambda_value(&self) -> f32 {
        self.lambda.unwrap_or((self.nodes as f32 - 1.5).max(0.0))
    }

    /// Per-node feature width after embedding.
    pub fn feature_width(&self) -> usize {
        1 + COVARIATE_WIDTH * if self.minutes { 3 } else { 2 }
    }
}

pub const CLIP_NORM: f32 = 1.0;

/// A named parameter's shape and values.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    fn tensor(&self, requires_grad: bool) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.shape, &self.data)?;
        Ok(if requires_grad { t.with_requires_grad(true) } else { t })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Param>,
    pub stats: Option<NormStats>,
}

/// Leaf tensors for one forward pass.
type Leaves = BTreeMap<String, Tensor>;

fn leaf<'a>(leaves: &'a Leaves, name: &str) -> Result<&'a Tensor> {
    leaves
        .get(name)
        .ok_or_else(|| Error::contract(format!("model has no parameter `{name}` for its ablation")))
}

/// Intermediate results of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B, L, N)` normalized forecast.
    pub pred: Tensor,
    pub samples: TwoLevelSamples,
}

impl ForecastModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let c = &config;
        let f = c.feature_width();
        let mut add = |name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a)).collect(),
                Init::Xavier => {
                    let (fan_in, fan_out) = (shape[0] as f32, shape[shape.len() - 1] as f32);
                    let a = (6.0 / (fan_in + fan_out)).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Const(v) => vec![v; n],
            };
            params.insert(name.to_string(), Param {
                shape: shape.to_vec(),
                data,
            });
        };
        add("graph.e", &[c.nodes, c.emb_dim], Init::Uniform(0.5), &mut rng);
        if c.minutes {
            add("embed.minute", &[60, COVARIATE_WIDTH], Init::Uniform(1.0), &mut rng);
        }
        add("embed.hour", &[24, COVARIATE_WIDTH], Init::Uniform(1.0), &mut rng);
        add("embed.dow", &[7, COVARIATE_WIDTH], Init::Uniform(1.0), &mut rng);
        for w in ["obs.w_q", "obs.w_k", "obs.w_v"] {
            add(w, &[f, f], Init::Xavier, &mut rng);
        }
        add("encode.gain", &[f], Init::Const(0.5), &mut rng);
        add("encode.bias", &[f], Init::Const(0.75), &mut rng);
        add("mssa.w1", &[f, c.d1], Init::Xavier, &mut rng);
        add("mssa.w2", &[c.d1, c.d2], Init::Xavier, &mut rng);
        let h = c.h_dim;
        if c.ablation.has_lstm() {
            add("lstm.w_x", &[c.ts * c.d2, 4 * h], Init::Xavier, &mut rng);
            add("lstm.w_h", &[h, 4 * h], Init::Xavier, &mut rng);
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].fill(1.0);
            params.insert("lstm.b".into(), Param {
                shape: vec![4 * h],
                data: b,
            });
        }
        if c.ablation.has_ssa() {
            let d_in = if c.ablation.has_lstm() {
                params.insert("ssa_enc.gain".into(), Param {
                    shape: vec![h],
                    data: vec![2.0; h],
                });
                params.insert("ssa_enc.bias".into(), Param {
                    shape: vec![h],
                    data: vec![0.5; h],
                });
                h
            } else {
                c.d2
            };
            let mut add = |name: &str, shape: &[usize]| {
                let a = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-a..a)).collect();
                params.insert(name.to_string(), Param {
                    shape: shape.to_vec(),
                    data,
                });
            };
            add("ssa.w_q", &[d_in, c.d_k]);
            add("ssa.w_k", &[d_in, c.d_k]);
            add("ssa.w_v", &[d_in, c.d_k]);
            add("ssa.w_o", &[c.d_k, h]);
        }
        if c.ablation.has_gate() {
            let a = (6.0 / (3 * h) as f32).sqrt();
            let data = (0..2 * h * h).map(|_| rng.random_range(-a..a)).collect();
            params.insert("gate.w_g".into(), Param {
                shape: vec![2 * h, h],
                data,
            });
            params.insert("gate.b".into(), Param {
                shape: vec![h],
                data: vec![0.0; h],
            });
        }
        let a = (6.0 / (h + c.horizon) as f32).sqrt();
        let data = (0..h * c.horizon).map(|_| rng.random_range(-a..a)).collect();
        params.insert("head.w".into(), Param {
            shape: vec![h, c.horizon],
            data,
        });
        params.insert("head.b".into(), Param {
            shape: vec![c.horizon],
            data: vec![0.0; c.horizon],
        });
        Ok(ForecastModel {
            config,
            params,
            stats: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    fn leaves(&self, requires_grad: bool) -> Result<Leaves> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.tensor(requires_grad)?)))
            .collect()
    }

    /// Adjacency and sampled neighborhoods for the current embeddings.
    pub fn graph(&self) -> Result<AdaptiveGraph> {
        let e = self.params["graph.e"].tensor(false)?;
        AdaptiveGraph::build(&NodeEmbeddings::new(e)?, self.config.lambda_value(), self.config.k1, self.config.k2)
    }

    /// Normalized forecast `(B, L, N)` for normalized inputs `(B, T, N)`.
    /// No gradient graph is recorded.
    pub fn forward(&self, inputs: &Tensor, times: &[Vec<DateTime<Utc>>]) -> Result<Tensor> {
        Ok(self.forward_with(&self.leaves(false)?, inputs, times)?.pred)
    }

    /// Forward pass without gradients, returning intermediates too.
    pub fn forward_detailed(&self, inputs: &Tensor, times: &[Vec<DateTime<Utc>>]) -> Result<ForwardOutput> {
        self.forward_with(&self.leaves(false)?, inputs, times)
    }

    /// `[z ; tables]` per entry, laid out `(T·B, N, f)` (step-major).
    fn embed(&self, leaves: &Leaves, inputs: &Tensor, times: &[Vec<DateTime<Utc>>]) -> Result<Tensor> {
        let _s = opcount::scope("embed");
        let (b, t, n) = (inputs.shape()[0], inputs.shape()[1], inputs.shape()[2]);
        let x = inputs.data();
        let mut z = Vec::with_capacity(t * b * n);
        let mut feats = [Vec::new(), Vec::new(), Vec::new()];
        for ti in 0..t {
            for (bi, row) in times.iter().enumerate() {
                let tf = time_features(&row[ti]);
                for ni in 0..n {
                    z.push(x[(bi * t + ti) * n + ni]);
                    for (k, v) in feats.iter_mut().enumerate() {
                        v.push(tf[k]);
                    }
                }
            }
        }
        let z = Tensor::new(&[t * b * n, 1], z)?;
        let mut parts = vec![z];
        if self.config.minutes {
            parts.push(leaf(leaves, "embed.minute")?.gather_rows(&feats[0])?);
        }
        parts.push(leaf(leaves, "embed.hour")?.gather_rows(&feats[1])?);
        parts.push(leaf(leaves, "embed.dow")?.gather_rows(&feats[2])?);
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs)?.reshape(&[t * b, n, self.config.feature_width()])
    }

    fn forward_with(&self, leaves: &Leaves, inputs: &Tensor, times: &[Vec<DateTime<Utc>>]) -> Result<ForwardOutput> {
        let c = &self.config;
        if inputs.rank() != 3 || inputs.shape()[1] != c.input_len || inputs.shape()[2] != c.nodes {
            return Err(Error::contract(format!(
                "model expects inputs (B, {}, {}), got {:?}",
                c.input_len,
                c.nodes,
                inputs.shape()
            )));
        }
        let b = inputs.shape()[0];
        if times.len() != b || times.iter().any(|r| r.len() != c.input_len) {
            return Err(Error::contract("one timestamp per input step is required"));
        }
        let (t, n, f, ts) = (c.input_len, c.nodes, c.feature_width(), c.ts);
        let rows = b * n;

        let x = self.embed(leaves, inputs, times)?;

        let (a, samples) = {
            let _s = opcount::scope("graph");
            let emb = NodeEmbeddings::new(leaf(leaves, "graph.e")?.clone())?;
            let a = crate::graph::build_adjacency(&emb, c.lambda_value())?;
            let samples = if n >= 2 {
                let cand = prune_neighbors(&a)?;
                let imp = node_importance(&a)?;
                sample_two_level(&a, &cand, &imp, c.k1, c.k2)?
            } else {
                TwoLevelSamples {
                    level1: vec![Vec::new()],
                    level2: vec![Vec::new()],
                }
            };
            (a, samples)
        };

        let x_obs = {
            let _s = opcount::scope("obs");
            let p = ObsParams::new(
                leaf(leaves, "obs.w_q")?.clone(),
                leaf(leaves, "obs.w_k")?.clone(),
                leaf(leaves, "obs.w_v")?.clone(),
            )?;
            obs_forward(&x, &samples.level1, &p, Some(&a))?
        };

        let frames = {
            let _s = opcount::scope("encode");
            let drive = x_obs
                .reshape(&[t * rows, f])?
                .mul_broadcast(leaf(leaves, "encode.gain")?)?
                .add_broadcast(leaf(leaves, "encode.bias")?)?
                .reshape(&[t, rows, f])?;
            let mut frames = Vec::with_capacity(t * ts);
            for ti in 0..t {
                frames.extend(spike_encode_frames(&drive.select(0, ti)?, ts, &c.lif)?);
            }
            frames
        };

        let spikes = {
            let _s = opcount::scope("mssa");
            let w = HopWeights::new(leaf(leaves, "mssa.w1")?.clone(), leaf(leaves, "mssa.w2")?.clone())?;
            let sets = HopSets::from_samples(&samples, c.self_loop);
            mssa_frames(&frames, &sets, &w, &c.lif)?.spikes2
        };

        let lstm_out = if c.ablation.has_lstm() {
            let _s = opcount::scope("lstm");
            let p = LstmParams::new(
                leaf(leaves, "lstm.w_x")?.clone(),
                leaf(leaves, "lstm.w_h")?.clone(),
                leaf(leaves, "lstm.b")?.clone(),
            )?;
            Some(lstm_steps(&group_frames(&spikes, ts)?, &p)?)
        } else {
            None
        };

        let ssa_out = if c.ablation.has_ssa() {
            let source = match &lstm_out {
                Some(hidden) => {
                    let _s = opcount::scope("ssa_encode");
                    let gain = leaf(leaves, "ssa_enc.gain")?;
                    let bias = leaf(leaves, "ssa_enc.bias")?;
                    let mut frames = Vec::with_capacity(t * ts);
                    for h in hidden {
                        let drive = h.mul_broadcast(gain)?.add_broadcast(bias)?;
                        frames.extend(spike_encode_frames(&drive, ts, &c.lif)?);
                    }
                    frames
                }
                None => spikes,
            };
            let _s = opcount::scope("ssa");
            let p = SsaParams::new(
                leaf(leaves, "ssa.w_q")?.clone(),
                leaf(leaves, "ssa.w_k")?.clone(),
                leaf(leaves, "ssa.w_v")?.clone(),
                Some(leaf(leaves, "ssa.w_o")?.clone()),
            )?;
            Some(ssa_frames(&source, ts, &p, &c.lif, Queries::Last)?.h.reshape(&[rows, c.h_dim])?)
        } else {
            None
        };

        let fused = match (c.ablation, lstm_out, ssa_out) {
            (Ablation::W1, Some(h), None) => h.last().cloned().ok_or_else(|| Error::contract("empty window"))?,
            (Ablation::W2 | Ablation::W3, _, Some(s)) => s,
            (Ablation::W4, Some(h), Some(s)) => {
                let _s = opcount::scope("gate");
                let p = GateParams::new(leaf(leaves, "gate.w_g")?.clone(), leaf(leaves, "gate.b")?.clone())?;
                let last = h.last().ok_or_else(|| Error::contract("empty window"))?;
                gate_fuse(last, &s, &p)?
            }
            _ => return Err(Error::contract("branch outputs do not match the ablation")),
        };

        let pred = {
            let _s = opcount::scope("head");
            fused
                .matmul(leaf(leaves, "head.w")?)?
                .add_broadcast(leaf(leaves, "head.b")?)?
                .reshape(&[b, n, c.horizon])?
                .transpose()?
        };
        Ok(ForwardOutput { pred, samples })
    }

    /// De-normalized forecasts `(B, L, N)` flattened, for raw-scale windows
    /// taken from `ds` at `starts`.
    pub fn predict(&self, ds: &SeriesDataset, starts: &[usize]) -> Result<Vec<f32>> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::contract("model has no normalization statistics"))?;
        let mut out = Vec::with_capacity(starts.len() * self.config.horizon * self.config.nodes);
        for chunk in starts.chunks(EVAL_BATCH) {
            let batch = WindowBatch::gather(ds, stats, chunk, self.config.input_len, self.config.horizon)?;
            let pred = self.forward(&batch.inputs, &batch.input_times)?;
            out.extend(stats.denormalize(pred.data()));
        }
        Ok(out)
    }

    /// Forecast for the `L` steps after `start + T − 1`, which may lie past
    /// the end of `ds`. Returns target timestamps and `(L, N)` raw values.
    pub fn forecast_from(&self, ds: &SeriesDataset, start: usize) -> Result<(Vec<DateTime<Utc>>, Vec<f32>)> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::contract("model has no normalization statistics"))?;
        let (t, n) = (self.config.input_len, self.config.nodes);
        if ds.nodes() != n {
            return Err(Error::contract(format!("dataset has {} nodes, model expects {n}", ds.nodes())));
        }
        if start + t > ds.steps() {
            return Err(Error::contract(format!(
                "window {start}..{} runs past {} steps",
                start + t,
                ds.steps()
            )));
        }
        let inputs = Tensor::new(&[1, t, n], stats.normalize(&ds.values[start * n..(start + t) * n]))?;
        let times = vec![ds.timestamps[start..start + t].to_vec()];
        let pred = self.forward(&inputs, &times)?;
        let last = ds.timestamps[start + t - 1];
        let out_times = (1..=self.config.horizon as i32).map(|k| last + ds.interval * k).collect();
        Ok((out_times, stats.denormalize(pred.data())))
    }

    /// R² and RSE of de-normalized forecasts against the raw targets.
    pub fn evaluate(&self, ds: &SeriesDataset, starts: &[usize]) -> Result<Metrics> {
        if starts.is_empty() {
            return Err(Error::UndefinedMetric("no evaluation windows"));
        }
        let pred = self.predict(ds, starts)?;
        let n = self.config.nodes;
        let (t, l) = (self.config.input_len, self.config.horizon);
        let mut target = Vec::with_capacity(pred.len());
        for &s in starts {
            target.extend(ds.values[(s + t) * n..(s + t + l) * n].iter().map(|&v| v as f64));
        }
        let pred: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
        Ok(Metrics {
            r2: metric_r2(&pred, &target)?,
            rse: metric_rse(&pred, &target)?,
        })
    }

    fn first_non_finite(&self) -> Option<String> {
        self.params
            .iter()
            .find(|(_, p)| p.data.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.clone())
    }
}

const EVAL_BATCH: usize = 64;

enum Init {
    Uniform(f32),
    Xavier,
    Const(f32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub r2: f64,
    pub rse: f64,
}

/// Mean squared error over all entries.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = pred.sub(target)?;
    Ok(d.mul(&d)?.mean())
}

/// Adam state, one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut BTreeMap<String, Param>, grads: &BTreeMap<String, Vec<f32>>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p.data[i] -= step;
            }
        }
    }
}

/// Cosine decay from `base` at step 0 towards 0 at `total`.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f32) -> f32 {
    let norm = grads
        .values()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub r2: f64,
    pub rse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (best validation R²).
    pub best_epoch: usize,
}

impl ForecastModel {
    /// One optimizer step on a batch; returns the loss before the update.
    pub fn train_step(&mut self, batch: &WindowBatch, adam: &mut Adam) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
        let leaves = self.leaves(true)?;
        let out = self.forward_with(&leaves, &batch.inputs, &batch.input_times)?;
        let loss = mse(&out.pred, &batch.targets)?;
        loss.backward()?;
        let mut grads: BTreeMap<String, Vec<f32>> = leaves
            .iter()
            .map(|(k, t)| (k.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect();
        let value = loss.item()? as f64;
        let raw = grads.clone();
        clip_grad_norm(&mut grads, CLIP_NORM);
        adam.update(&mut self.params, &grads);
        Ok((value, raw))
    }

    /// Trains on `splits.train`, selecting the epoch with the best validation
    /// R². Normalization statistics are fitted on the training range.
    pub fn train(&mut self, ds: &SeriesDataset, splits: &WindowSplits) -> Result<TrainReport> {
        self.train_with(ds, splits, |_| {})
    }

    /// [`train`](Self::train) with a per-epoch callback.
    pub fn train_with(
        &mut self,
        ds: &SeriesDataset,
        splits: &WindowSplits,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<TrainReport> {
        let c = self.config.clone();
        if ds.nodes() != c.nodes || splits.input_len != c.input_len || splits.horizon != c.horizon {
            return Err(Error::contract(format!(
                "data ({} nodes, T={}, L={}) does not match the model ({} nodes, T={}, L={})",
                ds.nodes(),
                splits.input_len,
                splits.horizon,
                c.nodes,
                c.input_len,
                c.horizon
            )));
        }
        if splits.train.is_empty() || splits.val.is_empty() {
            return Err(Error::contract("training needs non-empty train and validation splits"));
        }
        let stats = NormStats::fit(ds, splits.bounds[0])?;
        self.stats = Some(stats.clone());
        let mut adam = Adam::new(c.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed.wrapping_add(0x5eed));
        let mut order: Vec<usize> = splits.train.iter().copied().step_by(c.train_stride).collect();
        let mut logs = Vec::with_capacity(c.epochs);
        let mut best: Option<(f64, usize, BTreeMap<String, Param>)> = None;
        let total_steps = c.epochs * order.len().div_ceil(c.batch_size);
        let mut step = 0;
        for epoch in 1..=c.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(c.batch_size) {
                adam.lr = cosine_lr(c.lr, step, total_steps);
                step += 1;
                let batch = WindowBatch::gather(ds, &stats, chunk, c.input_len, c.horizon)?;
                let (loss, _) = self.train_step(&batch, &mut adam)?;
                if !loss.is_finite() {
                    let param = self.first_non_finite().unwrap_or_else(|| "loss".to_string());
                    return Err(Error::Divergence { param, epoch });
                }
                if let Some(param) = self.first_non_finite() {
                    return Err(Error::Divergence { param, epoch });
                }
                total += loss * chunk.len() as f64;
            }
            let m = self.evaluate(ds, &splits.val)?;
            let log = EpochLog {
                epoch,
                loss: total / order.len() as f64,
                r2: m.r2,
                rse: m.rse,
            };
            on_epoch(&log);
            if best.as_ref().is_none_or(|(r2, _, _)| m.r2 > *r2) {
                best = Some((m.r2, epoch, self.params.clone()));
            }
            logs.push(log);
        }
        let (_, best_epoch, params) = best.expect("at least one epoch");
        self.params = params;
        Ok(TrainReport {
            epochs: logs,
            best_epoch,
        })
    }
}
