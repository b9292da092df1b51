//! Temporal fusion: an LSTM over aggregated spikes, spiking self-attention,
//! and a learned gate between the two.
//!
//! Spike frames arrive as `T·ts` tensors of shape `(R, d)`, `ts` consecutive
//! frames per series step. Both branches work at series-step resolution: the
//! LSTM consumes the `ts` frames of a step concatenated, and attention tokens
//! are the concatenated `ts` query/key/value frames of a step.

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::spiking::{LifLayer, LifParams, SpikeTrain};

/// Gate order along the `4h` axis: input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmParams<T: Real = f32> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> LstmParams<T> {
    pub fn new(w_x: Tensor<T>, w_h: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let h = w_h.shape().first().copied().unwrap_or(0);
        let ok = h > 0
            && w_x.rank() == 2
            && w_x.shape()[1] == 4 * h
            && w_h.shape() == [h, 4 * h]
            && b.shape() == [4 * h];
        if !ok {
            return Err(Error::contract(format!(
                "lstm params: w_x {:?}, w_h {:?}, b {:?} are not (in, 4h), (h, 4h), (4h)",
                w_x.shape(),
                w_h.shape(),
                b.shape()
            )));
        }
        Ok(LstmParams { w_x, w_h, b })
    }

    pub fn hidden(&self) -> usize {
        self.w_h.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_x.shape()[0]
    }
}

/// Concatenates each run of `ts` frames along the feature axis.
pub fn group_frames<T: Real>(frames: &[Tensor<T>], ts: usize) -> Result<Vec<Tensor<T>>> {
    if ts == 0 || frames.len() % ts != 0 {
        return Err(Error::contract(format!(
            "{} frames do not split into groups of {ts}",
            frames.len()
        )));
    }
    frames
        .chunks(ts)
        .map(|c| {
            if ts == 1 {
                Ok(c[0].clone())
            } else {
                Tensor::concat(&c.iter().collect::<Vec<_>>())
            }
        })
        .collect()
}

/// LSTM over `inputs[t]: (R, in)` from zero state; returns `h_t: (R, h)` per step.
pub fn lstm_steps<T: Real>(inputs: &[Tensor<T>], p: &LstmParams<T>) -> Result<Vec<Tensor<T>>> {
    let Some(first) = inputs.first() else {
        return Ok(Vec::new());
    };
    if first.rank() != 2 || first.shape()[1] != p.input() {
        return Err(Error::Dimension {
            op: "lstm_forward",
            lhs: first.shape().to_vec(),
            rhs: p.w_x.shape().to_vec(),
        });
    }
    let (rows, h) = (first.shape()[0], p.hidden());
    let mut hidden = Tensor::zeros(&[rows, h]);
    let mut cell = Tensor::zeros(&[rows, h]);
    let mut out = Vec::with_capacity(inputs.len());
    for (t, x) in inputs.iter().enumerate() {
        let mut z = x.matmul(&p.w_x)?;
        if t > 0 {
            z = z.add(&hidden.matmul(&p.w_h)?)?;
        }
        let z = z.add_broadcast(&p.b)?;
        let i = z.narrow(1, 0, h)?.sigmoid();
        let f = z.narrow(1, h, h)?.sigmoid();
        let g = z.narrow(1, 2 * h, h)?.tanh();
        let o = z.narrow(1, 3 * h, h)?.sigmoid();
        cell = if t > 0 { f.mul(&cell)?.add(&i.mul(&g)?)? } else { i.mul(&g)? };
        hidden = o.mul(&cell.tanh())?;
        out.push(hidden.clone());
    }
    Ok(out)
}

/// Spike train `(T·ts, N, d)` to hidden states `(T, N, h)`.
pub fn lstm_forward<T: Real>(s: &SpikeTrain<T>, ts: usize, p: &LstmParams<T>) -> Result<Tensor<T>> {
    let steps = lstm_steps(&group_frames(&s.frames()?, ts)?, p)?;
    Tensor::stack(&steps.iter().collect::<Vec<_>>(), 0)
}

/// Spike projections `(d_in, d_k)` and an optional real-valued readout
/// `w_o: (d_k, d_out)`.
#[derive(Debug, Clone)]
pub struct SsaParams<T: Real = f32> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Option<Tensor<T>>,
}

impl<T: Real> SsaParams<T> {
    pub fn new(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>, w_o: Option<Tensor<T>>) -> Result<Self> {
        let shape = w_q.shape().to_vec();
        if shape.len() != 2 || shape[1] == 0 || w_k.shape() != shape || w_v.shape() != shape {
            return Err(Error::contract(format!(
                "ssa projections must share a (d_in, d_k) shape: {:?} {:?} {:?}",
                w_q.shape(),
                w_k.shape(),
                w_v.shape()
            )));
        }
        if let Some(o) = &w_o {
            if o.rank() != 2 || o.shape()[0] != shape[1] {
                return Err(Error::Dimension {
                    op: "ssa readout",
                    lhs: shape,
                    rhs: o.shape().to_vec(),
                });
            }
        }
        Ok(SsaParams { w_q, w_k, w_v, w_o })
    }

    pub fn d_k(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_q.shape()[0]
    }
}

/// `softmax(q·kᵀ·scale)·v` over `(R, T, w)` token tensors. Returns the output
/// and the attention weights.
pub fn attend<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, scale: T) -> Result<(Tensor<T>, Tensor<T>)> {
    let alpha = q.bmm(&k.transpose()?)?.scale(scale).softmax()?;
    Ok((alpha.bmm(v)?, alpha))
}

#[derive(Debug, Clone)]
pub struct SsaOutput<T: Real = f32> {
    /// `(R, tokens, d_out)` continuous features.
    pub h: Tensor<T>,
    /// `(R, tokens, T)` attention weights.
    pub attention: Tensor<T>,
    /// Binary `(R, T, ts·d_k)` tokens.
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// Which query tokens [`ssa_frames`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Queries {
    All,
    /// Only the final series step; the output then has one token.
    Last,
}

/// Binary frames `(R, d_in)`, `ts` per series step. Q, K and V are LIF spikes
/// of the projected frames, with membrane state carried across frames. Scores
/// are scaled by `1/√(ts·d_k)`; the attended values are averaged over the `ts`
/// sub-steps and passed through `w_o` when present.
pub fn ssa_frames<T: Real>(
    frames: &[Tensor<T>],
    ts: usize,
    p: &SsaParams<T>,
    lif: &LifParams,
    queries: Queries,
) -> Result<SsaOutput<T>> {
    lif.validate()?;
    if frames.is_empty() || ts == 0 || frames.len() % ts != 0 {
        return Err(Error::contract(format!(
            "ssa: {} frames for {ts} sub-steps per token",
            frames.len()
        )));
    }
    let (rows, dk) = (frames[0].shape()[0], p.d_k());
    let steps = frames.len() / ts;
    let spikes = |w: &Tensor<T>| -> Result<Tensor<T>> {
        let mut layer = LifLayer::new(*lif);
        let mut out = Vec::with_capacity(frames.len());
        for x in frames {
            out.push(layer.fire(&x.matmul(w)?)?);
        }
        Tensor::stack(&out.iter().collect::<Vec<_>>(), 1)?.reshape(&[rows, steps, ts * dk])
    };
    let (q, k, v) = (spikes(&p.w_q)?, spikes(&p.w_k)?, spikes(&p.w_v)?);
    let scale = T::one() / T::lit((ts * dk) as f64).sqrt();
    let (q_used, tokens) = match queries {
        Queries::All => (q.clone(), steps),
        Queries::Last => (q.narrow(1, steps - 1, 1)?, 1),
    };
    let (mixed, attention) = attend(&q_used, &k, &v, scale)?;
    let mut h = mixed.reshape(&[rows, tokens, ts, dk])?.mean_axis(2)?;
    if let Some(w_o) = &p.w_o {
        let d_out = w_o.shape()[1];
        h = h.reshape(&[rows * tokens, dk])?.matmul(w_o)?.reshape(&[rows, tokens, d_out])?;
    }
    Ok(SsaOutput { h, attention, q, k, v })
}

/// Spike train `(T·ts, N, d_in)` to features `(N, T, d_out)`.
pub fn ssa_forward<T: Real>(s: &SpikeTrain<T>, ts: usize, p: &SsaParams<T>, lif: &LifParams) -> Result<Tensor<T>> {
    Ok(ssa_frames(&s.frames()?, ts, p, lif, Queries::All)?.h)
}

/// `w_g: (2h, h)`, `b: (h)`.
#[derive(Debug, Clone)]
pub struct GateParams<T: Real = f32> {
    pub w_g: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> GateParams<T> {
    pub fn new(w_g: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let h = b.shape().first().copied().unwrap_or(0);
        if b.rank() != 1 || h == 0 || w_g.shape() != [2 * h, h] {
            return Err(Error::contract(format!(
                "gate params: w_g {:?} and b {:?} are not (2h, h), (h)",
                w_g.shape(),
                b.shape()
            )));
        }
        Ok(GateParams { w_g, b })
    }
}

/// Gate values `σ([h_lstm ; h_ssa]·W + b)` over the last axis.
pub fn gate_values<T: Real>(h_lstm: &Tensor<T>, h_ssa: &Tensor<T>, p: &GateParams<T>) -> Result<Tensor<T>> {
    if h_lstm.shape() != h_ssa.shape() {
        return Err(Error::Dimension {
            op: "gate_fuse",
            lhs: h_lstm.shape().to_vec(),
            rhs: h_ssa.shape().to_vec(),
        });
    }
    let h = p.b.shape()[0];
    if h_lstm.shape().last() != Some(&h) {
        return Err(Error::Dimension {
            op: "gate_fuse",
            lhs: h_lstm.shape().to_vec(),
            rhs: p.w_g.shape().to_vec(),
        });
    }
    let rows = h_lstm.numel() / h;
    let joint = Tensor::concat(&[&h_lstm.reshape(&[rows, h])?, &h_ssa.reshape(&[rows, h])?])?;
    joint.matmul(&p.w_g)?.add_broadcast(&p.b)?.sigmoid().reshape(h_lstm.shape())
}

/// `G⊙h_lstm + (1−G)⊙h_ssa`.
pub fn gate_fuse<T: Real>(h_lstm: &Tensor<T>, h_ssa: &Tensor<T>, p: &GateParams<T>) -> Result<Tensor<T>> {
    let g = gate_values(h_lstm, h_ssa, p)?;
    Tensor::lerp(h_ssa, h_lstm, &g)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::grad_check;
    use crate::spiking::is_binary;

    fn random<T: Real>(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::lit(rng.random_range(-scale..scale))).collect()).unwrap()
    }

    fn binary<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| if rng.random_bool(0.4) { T::one() } else { T::zero() }).collect()).unwrap()
    }

    fn lstm<T: Real>(input: usize, h: usize, rng: &mut ChaCha8Rng) -> LstmParams<T> {
        LstmParams::new(random(&[input, 4 * h], 0.5, rng), random(&[h, 4 * h], 0.5, rng), random(&[4 * h], 0.5, rng)).unwrap()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_spikes_and_bias_stay_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::new(random(&[6, 12], 1.0, &mut rng), random(&[3, 12], 1.0, &mut rng), Tensor::zeros(&[12])).unwrap();
        let s = SpikeTrain::new(Tensor::<f32>::zeros(&[8, 4, 3])).unwrap();
        let h = lstm_forward(&s, 2, &p).unwrap();
        assert_eq!(h.shape(), &[4, 4, 3]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_cell_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (d, h) = (3, 2);
        let p: LstmParams<f64> = lstm(d, h, &mut rng);
        let x: Tensor<f64> = binary(&[1, d], &mut rng);
        let out = lstm_steps(&[x.clone()], &p).unwrap();
        let (wx, b) = (p.w_x.data(), p.b.data());
        let z: Vec<f64> = (0..4 * h).map(|c| b[c] + (0..d).map(|r| x.data()[r] * wx[r * 4 * h + c]).sum::<f64>()).collect();
        for u in 0..h {
            let (i, g, o) = (sig(z[u]), z[2 * h + u].tanh(), sig(z[3 * h + u]));
            let c = i * g;
            assert!((out[0].data()[u] - o * c.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_steps_match_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, h) = (2, 3);
        let p: LstmParams<f64> = lstm(d, h, &mut rng);
        let xs: Vec<Tensor<f64>> = (0..2).map(|_| random(&[1, d], 1.0, &mut rng)).collect();
        let out = lstm_steps(&xs, &p).unwrap();
        let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
        for x in &xs {
            let z: Vec<f64> = (0..4 * h)
                .map(|c| {
                    p.b.data()[c]
                        + (0..d).map(|r| x.data()[r] * p.w_x.data()[r * 4 * h + c]).sum::<f64>()
                        + (0..h).map(|r| hs[r] * p.w_h.data()[r * 4 * h + c]).sum::<f64>()
                })
                .collect();
            for u in 0..h {
                cs[u] = sig(z[h + u]) * cs[u] + sig(z[u]) * z[2 * h + u].tanh();
            }
            hs = (0..h).map(|u| sig(z[3 * h + u]) * cs[u].tanh()).collect();
        }
        for (a, b) in out[1].data().iter().zip(&hs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, h, rows) = (4, 3, 2);
        let p: LstmParams<f64> = lstm(d, h, &mut rng);
        let xs: Vec<Tensor<f64>> = (0..4).map(|_| binary(&[rows, d], &mut rng)).collect();
        let probe: Tensor<f64> = random(&[rows, h], 1.0, &mut rng);
        let loss = |p: &LstmParams<f64>| -> Result<Tensor<f64>> {
            let hs = lstm_steps(&xs, p)?;
            Ok(hs.last().unwrap().mul(&probe)?.sum())
        };
        let r = grad_check(|w| loss(&LstmParams::new(w.clone(), p.w_h.clone(), p.b.clone())?), &p.w_x, 1e-4, 1e-4).unwrap();
        assert!(r.passed(), "w_x {r:?}");
        let r = grad_check(|w| loss(&LstmParams::new(p.w_x.clone(), w.clone(), p.b.clone())?), &p.w_h, 1e-4, 1e-4).unwrap();
        assert!(r.passed(), "w_h {r:?}");
        let r = grad_check(|b| loss(&LstmParams::new(p.w_x.clone(), p.w_h.clone(), b.clone())?), &p.b, 1e-4, 1e-4).unwrap();
        assert!(r.passed(), "b {r:?}");
    }

    fn ssa<T: Real>(d_in: usize, dk: usize, out: Option<usize>, rng: &mut ChaCha8Rng) -> SsaParams<T> {
        SsaParams::new(
            random(&[d_in, dk], 1.5, rng),
            random(&[d_in, dk], 1.5, rng),
            random(&[d_in, dk], 1.5, rng),
            out.map(|o| random(&[dk, o], 1.0, rng)),
        )
        .unwrap()
    }

    #[test]
    fn zero_spikes_give_zero_attention_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = vec![Tensor::<f32>::zeros(&[3, 5]); 8];
        let out = ssa_frames(&frames, 2, &ssa(5, 4, Some(6), &mut rng), &LifParams::default(), Queries::All).unwrap();
        assert_eq!(out.h.shape(), &[3, 4, 6]);
        assert!(out.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_returns_its_value() {
        let v = Tensor::from_slice(&[1, 1, 3], &[0.0f32, 1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&[1, 1, 3], 3.0, &mut rng);
        let k = random(&[1, 1, 3], 3.0, &mut rng);
        let (out, alpha) = attend(&q, &k, &v, 0.5).unwrap();
        assert_eq!(alpha.data(), &[1.0]);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn three_step_train_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (rows, d_in, dk) = (2, 4, 3);
        let p: SsaParams<f64> = ssa(d_in, dk, None, &mut rng);
        let frames: Vec<Tensor<f64>> = (0..3).map(|_| binary(&[rows, d_in], &mut rng)).collect();
        let lif = LifParams::default();
        let out = ssa_frames(&frames, 1, &p, &lif, Queries::All).unwrap();
        let (q, k, v) = (out.q.data(), out.k.data(), out.v.data());
        for r in 0..rows {
            for i in 0..3 {
                let s: Vec<f64> = (0..3)
                    .map(|j| (0..dk).map(|c| q[(r * 3 + i) * dk + c] * k[(r * 3 + j) * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for c in 0..dk {
                    let want: f64 = (0..3).map(|j| (s[j] - m).exp() / z * v[(r * 3 + j) * dk + c]).sum();
                    assert!((out.h.data()[(r * 3 + i) * dk + c] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn qkv_are_binary_and_rows_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<Tensor> = (0..12).map(|_| binary(&[5, 6], &mut rng)).collect();
        let out = ssa_frames(&frames, 3, &ssa(6, 4, Some(2), &mut rng), &LifParams::default(), Queries::All).unwrap();
        for t in [&out.q, &out.k, &out.v] {
            assert!(is_binary(t.data()));
        }
        assert!(out.q.data().iter().any(|&v| v == 1.0));
        for row in out.attention.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn last_query_matches_final_row_of_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames: Vec<Tensor> = (0..10).map(|_| binary(&[3, 4], &mut rng)).collect();
        let p = ssa(4, 3, Some(5), &mut rng);
        let lif = LifParams::default();
        let all = ssa_frames(&frames, 2, &p, &lif, Queries::All).unwrap();
        let last = ssa_frames(&frames, 2, &p, &lif, Queries::Last).unwrap();
        assert_eq!(last.h.shape(), &[3, 1, 5]);
        for r in 0..3 {
            for c in 0..5 {
                let full = all.h.data()[(r * 5 + 4) * 5 + c];
                assert!((last.h.data()[r * 5 + c] - full).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn score_path_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q: Tensor<f64> = binary(&[2, 4, 6], &mut rng);
        let k: Tensor<f64> = binary(&[2, 4, 6], &mut rng);
        let v: Tensor<f64> = binary(&[2, 4, 6], &mut rng);
        let probe: Tensor<f64> = random(&[2, 4, 6], 1.0, &mut rng);
        let scale = 1.0 / 6f64.sqrt();
        for which in 0..3 {
            let f = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
                let (a, b, c) = match which {
                    0 => (x, &k, &v),
                    1 => (&q, x, &v),
                    _ => (&q, &k, x),
                };
                Ok(attend(a, b, c, scale)?.0.mul(&probe)?.sum())
            };
            let x = [&q, &k, &v][which];
            let r = grad_check(f, x, 1e-4, 1e-4).unwrap();
            assert!(r.passed(), "operand {which}: {r:?}");
        }
    }

    fn gate<T: Real>(h: usize, w: f64, b: f64) -> GateParams<T> {
        GateParams::new(Tensor::full(&[2 * h, h], T::lit(w)), Tensor::full(&[h], T::lit(b))).unwrap()
    }

    #[test]
    fn saturated_and_neutral_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hl: Tensor = random(&[3, 4], 1.0, &mut rng);
        let hs: Tensor = random(&[3, 4], 1.0, &mut rng);
        let up = gate_fuse(&hl, &hs, &gate(4, 0.0, 50.0)).unwrap();
        let down = gate_fuse(&hl, &hs, &gate(4, 0.0, -50.0)).unwrap();
        let mid = gate_fuse(&hl, &hs, &gate(4, 0.0, 0.0)).unwrap();
        for i in 0..12 {
            assert!((up.data()[i] - hl.data()[i]).abs() < 1e-6);
            assert!((down.data()[i] - hs.data()[i]).abs() < 1e-6);
            assert!((mid.data()[i] - (hl.data()[i] + hs.data()[i]) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_branches_are_a_dimension_error() {
        let g = gate::<f32>(4, 0.0, 0.0);
        let r = gate_fuse(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[3, 4]), &g);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 3;
        let hl: Tensor<f64> = random(&[2, 2, h], 1.0, &mut rng);
        let hs: Tensor<f64> = random(&[2, 2, h], 1.0, &mut rng);
        let p = GateParams::new(random(&[2 * h, h], 1.0, &mut rng), random(&[h], 1.0, &mut rng)).unwrap();
        let probe: Tensor<f64> = random(&[2, 2, h], 1.0, &mut rng);
        let r = grad_check(
            |w| gate_fuse(&hl, &hs, &GateParams::new(w.clone(), p.b.clone())?)?.mul(&probe).map(|t| t.sum()),
            &p.w_g,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "w_g {r:?}");
        let r = grad_check(|x| gate_fuse(x, &hs, &p)?.mul(&probe).map(|t| t.sum()), &hl, 1e-4, 1e-4).unwrap();
        assert!(r.passed(), "h_lstm {r:?}");
    }

    proptest! {
        #[test]
        fn fusion_is_convex_and_gate_open(
            seed in any::<u64>(), w in -20.0f64..20.0, b in -20.0f64..20.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hl: Tensor = random(&[4, 5], 10.0, &mut rng);
            let hs: Tensor = random(&[4, 5], 10.0, &mut rng);
            let p = GateParams::new(random(&[10, 5], w.abs() + 1e-3, &mut rng), Tensor::full(&[5], b as f32)).unwrap();
            let g = gate_values(&hl, &hs, &p).unwrap();
            let small = gate::<f32>(5, 0.01, b.clamp(-5.0, 5.0));
            for &v in gate_values(&hl, &hs, &small).unwrap().data() {
                prop_assert!(v > 0.0 && v < 1.0);
            }
            prop_assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let out = gate_fuse(&hl, &hs, &p).unwrap();
            for i in 0..20 {
                let (a, c) = (hl.data()[i], hs.data()[i]);
                prop_assert!(out.data()[i] >= a.min(c) && out.data()[i] <= a.max(c));
            }
            let same = gate_fuse(&hl, &hl, &p).unwrap();
            prop_assert_eq!(same.data(), hl.data());
        }
    }
}
