//! Two-hop spike aggregation over sampled neighborhoods.
//!
//! Each hop sums the binary feature rows of the sampled neighbors by index,
//! projects the count vector, and fires an LIF population whose membrane state
//! persists across spike frames.

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::graph::{AdaptiveGraph, TwoLevelSamples};
use crate::opcount;
use crate::spiking::{is_binary, spike_encode_frames, LifLayer, LifParams, SpikeTrain};

/// `w1: (F, d1)` for hop 1, `w2: (d1, d2)` for hop 2.
#[derive(Debug, Clone)]
pub struct HopWeights<T: Real = f32> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Real> HopWeights<T> {
    pub fn new(w1: Tensor<T>, w2: Tensor<T>) -> Result<Self> {
        if w1.rank() != 2 || w2.rank() != 2 || w1.shape()[1] != w2.shape()[0] {
            return Err(Error::Dimension {
                op: "hop_weights",
                lhs: w1.shape().to_vec(),
                rhs: w2.shape().to_vec(),
            });
        }
        if w1.numel() == 0 || w2.numel() == 0 {
            return Err(Error::contract("hop widths must be >= 1"));
        }
        if w1.data().iter().chain(w2.data()).any(|v| !v.is_finite()) {
            return Err(Error::contract("hop weights must be finite"));
        }
        Ok(HopWeights { w1, w2 })
    }

    pub fn in_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.w2.shape()[1]
    }
}

/// Index sets used by each hop, for `nodes` nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopSets {
    pub nodes: usize,
    pub hop1: Vec<Vec<usize>>,
    pub hop2: Vec<Vec<usize>>,
}

impl HopSets {
    /// With `self_loop`, each node's own row joins both of its hop sets.
    pub fn from_samples(samples: &TwoLevelSamples, self_loop: bool) -> Self {
        let with_self = |sets: &[Vec<usize>]| -> Vec<Vec<usize>> {
            sets.iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut s = s.clone();
                    if self_loop {
                        s.insert(0, i);
                    }
                    s
                })
                .collect()
        };
        HopSets {
            nodes: samples.level1.len(),
            hop1: with_self(&samples.level1),
            hop2: with_self(&samples.level2),
        }
    }

    /// Repeats the sets for `batch` stacked graphs (rows `b·N + i`).
    pub fn batched(&self, batch: usize) -> HopSets {
        let rep = |sets: &[Vec<usize>]| -> Vec<Vec<usize>> {
            (0..batch)
                .flat_map(|b| sets.iter().map(move |s| s.iter().map(|&j| b * self.nodes + j).collect()))
                .collect()
        };
        HopSets {
            nodes: self.nodes * batch,
            hop1: rep(&self.hop1),
            hop2: rep(&self.hop2),
        }
    }

    pub fn edges(&self) -> usize {
        self.hop1.iter().chain(&self.hop2).map(Vec::len).sum()
    }
}

fn check_binary<T: Real>(x: &Tensor<T>, op: &str) -> Result<()> {
    if !is_binary(x.data()) {
        return Err(Error::contract(format!("{op}: input must be binary")));
    }
    Ok(())
}

/// `(Σ_{j∈set} x_j)·w` for one node by gathering rows; no `N×N` product.
pub fn index_mask_aggregate<T: Real>(x_bin: &Tensor<T>, set: &[usize], w: &Tensor<T>) -> Result<Tensor<T>> {
    check_binary(x_bin, "index_mask_aggregate")?;
    let d = w.shape().get(1).copied().unwrap_or(0);
    x_bin.neighbor_sum(&[set.to_vec()])?.matmul(w)?.reshape(&[d])
}

/// `(M·x)·w` with dense products. Reference only; it records matrix products
/// like any other op, so keep it out of counted passes.
pub fn dense_oracle_aggregate<T: Real>(x_bin: &Tensor<T>, mask: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    check_binary(mask, "dense_oracle_aggregate")?;
    mask.matmul(x_bin)?.matmul(w)
}

/// 0/1 matrix with ones at `(i, j)` for `j ∈ sets[i]`.
pub fn mask_matrix<T: Real>(sets: &[Vec<usize>], n: usize) -> Result<Tensor<T>> {
    let mut m = vec![T::zero(); sets.len() * n];
    for (i, set) in sets.iter().enumerate() {
        for &j in set {
            if j >= n {
                return Err(Error::contract(format!("mask_matrix: index {j} out of {n}")));
            }
            m[i * n + j] = T::one();
        }
    }
    Tensor::new(&[sets.len(), n], m)
}

/// Gather-sum of `x` rows over `sets`, billed as accumulate-only work.
/// `block` is the node count of one graph, used to price the dense
/// equivalent `A·X` per stacked graph.
fn aggregate<T: Real>(x: &Tensor<T>, sets: &[Vec<usize>], block: usize) -> Result<Tensor<T>> {
    let out = x.neighbor_sum(sets)?;
    if opcount::is_active() {
        let width = x.shape()[1];
        let active: Vec<u64> = x
            .data()
            .chunks(width.max(1))
            .map(|row| row.iter().filter(|&&v| v != T::zero()).count() as u64)
            .collect();
        let adds = sets.iter().flatten().map(|&j| active[j]).sum();
        let dense = (sets.len() * block * width) as u64;
        opcount::record_aggregate(adds, dense);
    }
    Ok(out)
}

/// Per-frame record of both hops.
#[derive(Debug, Clone)]
pub struct MssaTrace<T: Real = f32> {
    /// Pre-synaptic potentials `m` entering each LIF population.
    pub potential1: Vec<Tensor<T>>,
    pub potential2: Vec<Tensor<T>>,
    pub spikes1: Vec<Tensor<T>>,
    pub spikes2: Vec<Tensor<T>>,
}

/// Runs both hops over binary frames of shape `(R, F)`; `R` must be a multiple
/// of `sets.nodes` and the sets are repeated across the stacked graphs.
pub fn mssa_frames<T: Real>(
    frames: &[Tensor<T>],
    sets: &HopSets,
    weights: &HopWeights<T>,
    lif: &LifParams,
) -> Result<MssaTrace<T>> {
    lif.validate()?;
    let mut trace = MssaTrace {
        potential1: Vec::with_capacity(frames.len()),
        potential2: Vec::with_capacity(frames.len()),
        spikes1: Vec::with_capacity(frames.len()),
        spikes2: Vec::with_capacity(frames.len()),
    };
    let Some(first) = frames.first() else {
        return Ok(trace);
    };
    let n = sets.nodes;
    if first.rank() != 2 || n == 0 || first.shape()[0] % n != 0 || first.shape()[1] != weights.in_width() {
        return Err(Error::Dimension {
            op: "mssa_forward",
            lhs: first.shape().to_vec(),
            rhs: weights.w1.shape().to_vec(),
        });
    }
    let batch = first.shape()[0] / n;
    let stacked = if batch == 1 { sets.clone() } else { sets.batched(batch) };
    let mut lif1 = LifLayer::new(*lif);
    let mut lif2 = LifLayer::new(*lif);
    for frame in frames {
        check_binary(frame, "mssa_forward")?;
        let m1 = aggregate(frame, &stacked.hop1, n)?.matmul(&weights.w1)?;
        let s1 = lif1.fire(&m1)?;
        let m2 = aggregate(&s1, &stacked.hop2, n)?.matmul(&weights.w2)?;
        let s2 = lif2.fire(&m2)?;
        trace.potential1.push(m1);
        trace.potential2.push(m2);
        trace.spikes1.push(s1);
        trace.spikes2.push(s2);
    }
    Ok(trace)
}

/// `x_obs: (T, N, f)`. Each series step is spike-encoded into `ts` frames,
/// then aggregated; the result has shape `(T·ts, N, d2)`.
pub fn mssa_forward<T: Real>(
    x_obs: &Tensor<T>,
    graph: &AdaptiveGraph<T>,
    weights: &HopWeights<T>,
    lif: &LifParams,
    ts: usize,
    self_loop: bool,
) -> Result<SpikeTrain<T>> {
    if x_obs.rank() != 3 || x_obs.shape()[1] != graph.nodes() {
        return Err(Error::contract(format!(
            "mssa_forward: input {:?} for a {}-node graph",
            x_obs.shape(),
            graph.nodes()
        )));
    }
    let mut frames = Vec::with_capacity(x_obs.shape()[0] * ts);
    for t in 0..x_obs.shape()[0] {
        frames.extend(spike_encode_frames(&x_obs.select(0, t)?, ts, lif)?);
    }
    let sets = HopSets::from_samples(&graph.samples, self_loop);
    let trace = mssa_frames(&frames, &sets, weights, lif)?;
    if trace.spikes2.is_empty() {
        return Err(Error::contract("mssa_forward: empty input window"));
    }
    SpikeTrain::from_frames(&trace.spikes2)
}
