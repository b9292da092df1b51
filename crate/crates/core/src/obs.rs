//! Residual neighborhood attention applied independently at each series step.

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};

/// Square `(f, f)` projections.
#[derive(Debug, Clone)]
pub struct ObsParams<T: Real = f32> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

impl<T: Real> ObsParams<T> {
    pub fn new(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>) -> Result<Self> {
        let p = ObsParams { w_q, w_k, w_v };
        p.validate()?;
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.w_q.shape().first().copied().unwrap_or(0);
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.shape() != [f, f] || f == 0 {
                return Err(Error::contract(format!("obs {name} must be ({f}, {f}), got {:?}", w.shape())));
            }
            if w.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("obs {name} is not finite")));
            }
        }
        Ok(())
    }
}

/// `x: (G, N, f)` where `G` indexes independent graphs (series steps, possibly
/// over a batch). For node `i`, attention runs over `neighborhoods[i]` with
/// scores `qᵢ·kⱼ/√f`; when `adjacency` is given, `ln aᵢⱼ` is added to each
/// score. Output is `xᵢ + Σⱼ αᵢⱼ vⱼ`; nodes without neighbors pass through.
pub fn obs_forward<T: Real>(
    x: &Tensor<T>,
    neighborhoods: &[Vec<usize>],
    params: &ObsParams<T>,
    adjacency: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let f = params.width();
    if x.rank() != 3 || x.shape()[2] != f {
        return Err(Error::Dimension {
            op: "obs_forward",
            lhs: x.shape().to_vec(),
            rhs: params.w_q.shape().to_vec(),
        });
    }
    let (g, n) = (x.shape()[0], x.shape()[1]);
    if neighborhoods.len() != n {
        return Err(Error::contract(format!(
            "obs_forward: {} neighborhoods for {n} nodes",
            neighborhoods.len()
        )));
    }
    let keep = neighbor_mask(neighborhoods, n)?;
    if keep.iter().all(|k| !k) {
        return Ok(x.clone());
    }
    let flat = x.reshape(&[g * n, f])?;
    let v = flat.matmul(&params.w_v)?.reshape(&[g, n, f])?;
    let alpha = attention(&flat, g, n, &keep, params, adjacency)?;
    x.add(&alpha.bmm(&v)?)
}

fn attention<T: Real>(
    flat: &Tensor<T>,
    g: usize,
    n: usize,
    keep: &[bool],
    params: &ObsParams<T>,
    adjacency: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let f = params.width();
    let q = flat.matmul(&params.w_q)?.reshape(&[g, n, f])?;
    let k = flat.matmul(&params.w_k)?.reshape(&[g, n, f])?;
    let mut scores = q.bmm(&k.transpose()?)?.scale(T::one() / T::lit(f as f64).sqrt());
    if let Some(a) = adjacency {
        if a.shape() != [n, n] {
            return Err(Error::Dimension {
                op: "obs_forward",
                lhs: a.shape().to_vec(),
                rhs: vec![n, n],
            });
        }
        scores = scores.add_broadcast(&a.ln())?;
    }
    let keep: Vec<bool> = keep.iter().copied().cycle().take(g * n * n).collect();
    scores.masked_softmax(&keep)
}

/// Attention weights `(G, N, N)` as used by [`obs_forward`].
pub fn obs_attention<T: Real>(
    x: &Tensor<T>,
    neighborhoods: &[Vec<usize>],
    params: &ObsParams<T>,
    adjacency: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let f = params.width();
    if x.rank() != 3 || x.shape()[2] != f || neighborhoods.len() != x.shape()[1] {
        return Err(Error::contract(format!("obs_attention: input {:?}", x.shape())));
    }
    let (g, n) = (x.shape()[0], x.shape()[1]);
    let keep = neighbor_mask(neighborhoods, n)?;
    attention(&x.reshape(&[g * n, f])?, g, n, &keep, params, adjacency)
}

fn neighbor_mask(neighborhoods: &[Vec<usize>], n: usize) -> Result<Vec<bool>> {
    let mut keep = vec![false; n * n];
    for (i, set) in neighborhoods.iter().enumerate() {
        for &j in set {
            if j >= n {
                return Err(Error::contract(format!("obs: neighbor {j} out of {n} nodes")));
            }
            keep[i * n + j] = true;
        }
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::grad_check;

    fn eye<T: Real>(f: usize) -> Tensor<T> {
        let mut d = vec![T::zero(); f * f];
        for i in 0..f {
            d[i * f + i] = T::one();
        }
        Tensor::new(&[f, f], d).unwrap()
    }

    fn random<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect()).unwrap()
    }

    fn random_params<T: Real>(f: usize, rng: &mut ChaCha8Rng) -> ObsParams<T> {
        ObsParams::new(random(&[f, f], rng), random(&[f, f], rng), random(&[f, f], rng)).unwrap()
    }

    #[test]
    fn empty_neighborhoods_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Tensor = random(&[2, 3, 4], &mut rng);
        let y = obs_forward(&x, &[vec![], vec![], vec![]], &random_params(4, &mut rng), None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn single_neighbor_adds_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = random(&[1, 2, 3], &mut rng);
        let p = random_params(3, &mut rng);
        let y = obs_forward(&x, &[vec![1], vec![]], &p, None).unwrap();
        let (xd, wv) = (x.data(), p.w_v.data());
        for c in 0..3 {
            let v: f64 = (0..3).map(|r| xd[3 + r] * wv[r * 3 + c]).sum();
            assert!((y.data()[c] - (xd[c] + v)).abs() < 1e-12);
            assert_eq!(y.data()[3 + c], xd[3 + c]);
        }
    }

    /// Hand double loop over nodes and neighbors.
    fn brute_obs(x: &[f64], n: usize, f: usize, sets: &[Vec<usize>], p: &ObsParams<f64>, a: Option<&[f64]>) -> Vec<f64> {
        let proj = |row: usize, w: &[f64]| -> Vec<f64> {
            (0..f).map(|c| (0..f).map(|r| x[row * f + r] * w[r * f + c]).sum()).collect()
        };
        let mut out = x.to_vec();
        for i in 0..n {
            if sets[i].is_empty() {
                continue;
            }
            let q = proj(i, p.w_q.data());
            let s: Vec<f64> = sets[i]
                .iter()
                .map(|&j| {
                    let k = proj(j, p.w_k.data());
                    let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                    dot / (f as f64).sqrt() + a.map_or(0.0, |a| a[i * n + j].ln())
                })
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for (idx, &j) in sets[i].iter().enumerate() {
                let alpha = (s[idx] - m).exp() / z;
                let v = proj(j, p.w_v.data());
                for c in 0..f {
                    out[i * f + c] += alpha * v[c];
                }
            }
        }
        out
    }

    #[test]
    fn identity_weights_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f32> = random(&[1, 3, 4], &mut rng);
        let sets = vec![vec![1, 2], vec![0], vec![0, 1]];
        let p = ObsParams::new(eye(4), eye(4), eye(4)).unwrap();
        let y = obs_forward(&x, &sets, &p, None).unwrap();
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let p64 = ObsParams::new(eye(4), eye(4), eye(4)).unwrap();
        let oracle = brute_obs(&x64, 3, 4, &sets, &p64, None);
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn biased_random_instance_matches_double_loop_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, n, f) = (3, 5, 4);
        let x: Tensor<f64> = random(&[g, n, f], &mut rng);
        let p = random_params(f, &mut rng);
        let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.05..1.0)).collect();
        let at = Tensor::new(&[n, n], a.clone()).unwrap();
        let sets = vec![vec![1, 3], vec![], vec![0, 1, 4], vec![2], vec![0, 1, 2, 3]];
        let y = obs_forward(&x, &sets, &p, Some(&at)).unwrap();
        for t in 0..g {
            let step = &x.data()[t * n * f..(t + 1) * n * f];
            let oracle = brute_obs(step, n, f, &sets, &p, Some(&a));
            for (u, v) in y.data()[t * n * f..(t + 1) * n * f].iter().zip(&oracle) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor = random(&[4, 6, 5], &mut rng);
        let sets = vec![vec![1, 2, 3], vec![0], vec![], vec![5, 4], vec![0, 1, 2, 3, 5], vec![2]];
        let alpha = obs_attention(&x, &sets, &random_params(5, &mut rng), None).unwrap();
        for (r, row) in alpha.data().chunks(6).enumerate() {
            let s: f32 = row.iter().sum();
            let expected = if sets[r % 6].is_empty() { 0.0 } else { 1.0 };
            assert!((s - expected).abs() < 1e-6, "row {r}: {s}");
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor = random(&[2, 4, 3], &mut rng);
        let p = ObsParams::new(random(&[3, 3], &mut rng), random(&[3, 3], &mut rng), Tensor::zeros(&[3, 3])).unwrap();
        let y = obs_forward(&x, &[vec![1, 2], vec![0, 3], vec![3], vec![0]], &p, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, n, f) = (2, 4, 3);
        let x: Tensor<f64> = random(&[g, n, f], &mut rng);
        let p: ObsParams<f64> = random_params(f, &mut rng);
        let sets = vec![vec![1, 2], vec![0], vec![0, 1, 3], vec![]];
        let a = Tensor::new(&[n, n], (0..n * n).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
        let probe: Tensor<f64> = random(&[g, n, f], &mut rng);

        let wrt_x = |x: &Tensor<f64>| obs_forward(x, &sets, &p, Some(&a))?.mul(&probe).map(|t| t.sum());
        let r = grad_check(wrt_x, &x, 1e-4, 1e-4).unwrap();
        assert!(r.passed(), "x: {r:?}");

        let wrt_q = |w: &Tensor<f64>| {
            let p = ObsParams::new(w.clone(), p.w_k.clone(), p.w_v.clone())?;
            obs_forward(&x, &sets, &p, Some(&a))?.mul(&probe).map(|t| t.sum())
        };
        let r = grad_check(wrt_q, &p.w_q, 1e-4, 1e-4).unwrap();
        assert!(r.passed(), "w_q: {r:?}");

        let wrt_a = |a: &Tensor<f64>| obs_forward(&x, &sets, &p, Some(a))?.mul(&probe).map(|t| t.sum());
        let r = grad_check(wrt_a, &a, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "adjacency: {r:?}");
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let x: Tensor = Tensor::zeros(&[1, 2, 5]);
        let p = ObsParams::new(eye(4), eye(4), eye(4)).unwrap();
        assert!(matches!(obs_forward(&x, &[vec![], vec![]], &p, None), Err(Error::Dimension { .. })));
    }
}
