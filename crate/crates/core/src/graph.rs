//! Adaptive adjacency and the neighbor selection that feeds aggregation.
//!
//! `A = σ(E·Eᵀ) + λ·I` is built from learnable node embeddings. Candidate
//! neighbors are pruned against a per-node threshold, then truncated to a
//! local level ranked by edge weight and a semi-global level ranked by node
//! importance over the two-hop pool.

use std::cmp::Ordering;

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};

/// Learnable `(N, d)` node embeddings.
#[derive(Debug, Clone)]
pub struct NodeEmbeddings<T: Real = f32> {
    pub e: Tensor<T>,
}

impl<T: Real> NodeEmbeddings<T> {
    pub fn new(e: Tensor<T>) -> Result<Self> {
        if e.rank() != 2 || e.shape()[0] == 0 || e.shape()[1] == 0 {
            return Err(Error::contract(format!(
                "node embeddings must be (N>=1, d>=1), got {:?}",
                e.shape()
            )));
        }
        if e.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("node embeddings must be finite"));
        }
        Ok(NodeEmbeddings { e })
    }

    pub fn nodes(&self) -> usize {
        self.e.shape()[0]
    }
}

/// `σ(E·Eᵀ) + λ·I`, differentiable with respect to `E`.
pub fn build_adjacency<T: Real>(emb: &NodeEmbeddings<T>, lambda: f32) -> Result<Tensor<T>> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("self-loop weight must be >= 0, got {lambda}")));
    }
    let n = emb.nodes();
    let links = emb.e.gram()?.sigmoid();
    let mut eye = vec![T::zero(); n * n];
    for i in 0..n {
        eye[i * n + i] = T::lit(lambda as f64);
    }
    links.add(&Tensor::new(&[n, n], eye)?)
}

fn square_rows<T: Real>(a: &Tensor<T>) -> Result<usize> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::contract(format!("adjacency must be square, got {:?}", a.shape())));
    }
    Ok(a.shape()[0])
}

/// Per-node threshold `Tᵢ = (Σ_{j≠i} aᵢⱼ) / aᵢᵢ`.
pub fn prune_thresholds<T: Real>(a: &Tensor<T>) -> Result<Vec<f64>> {
    let n = square_rows(a)?;
    let d = a.data();
    (0..n)
        .map(|i| {
            let diag = d[i * n + i].to_f64_lossy();
            if diag == 0.0 {
                return Err(Error::contract(format!(
                    "node {i}: zero self-loop weight makes the pruning threshold singular"
                )));
            }
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| d[i * n + j].to_f64_lossy()).sum();
            Ok(off / diag)
        })
        .collect()
}

/// `Cᵢ = { j ≠ i : aᵢⱼ > Tᵢ }`, each set in ascending node order.
pub fn prune_neighbors<T: Real>(a: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
    let n = square_rows(a)?;
    if n < 2 {
        return Err(Error::contract("pruning needs at least two nodes"));
    }
    let thresholds = prune_thresholds(a)?;
    let d = a.data();
    Ok((0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && d[i * n + j].to_f64_lossy() > thresholds[i])
                .collect()
        })
        .collect())
}

/// `Impᵢ = Σⱼ aᵢⱼ`, diagonal included.
pub fn node_importance<T: Real>(a: &Tensor<T>) -> Result<Vec<f64>> {
    let n = square_rows(a)?;
    Ok(a.data()
        .chunks(n.max(1))
        .take(n)
        .map(|row| row.iter().map(|v| v.to_f64_lossy()).sum())
        .collect())
}

/// Per-node local (`level1`) and semi-global (`level2`) neighbor sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoLevelSamples {
    pub level1: Vec<Vec<usize>>,
    pub level2: Vec<Vec<usize>>,
}

/// Descending by score, ties to the lower index; keeps at most `k`.
fn top_k(mut pool: Vec<usize>, k: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    pool.sort_by(|&x, &y| {
        score(y)
            .partial_cmp(&score(x))
            .unwrap_or(Ordering::Equal)
            .then(x.cmp(&y))
    });
    pool.truncate(k);
    pool
}

/// Level 1 keeps the `k1` strongest candidates of `Cᵢ` by `aᵢⱼ`. Level 2 keeps
/// the `k2` most important nodes of `∪_{j∈Sᵢ⁽¹⁾} Cⱼ`, excluding `i` and level 1.
/// Sets are listed in rank order.
pub fn sample_two_level<T: Real>(
    a: &Tensor<T>,
    candidates: &[Vec<usize>],
    importance: &[f64],
    k1: usize,
    k2: usize,
) -> Result<TwoLevelSamples> {
    let n = square_rows(a)?;
    if candidates.len() != n || importance.len() != n {
        return Err(Error::contract(format!(
            "sampling: {n} nodes but {} candidate sets and {} importances",
            candidates.len(),
            importance.len()
        )));
    }
    let d = a.data();
    let level1: Vec<Vec<usize>> = (0..n)
        .map(|i| top_k(candidates[i].clone(), k1, |j| d[i * n + j].to_f64_lossy()))
        .collect();
    let level2 = (0..n)
        .map(|i| {
            let mut in_pool = vec![false; n];
            for &j in &level1[i] {
                for &k in &candidates[j] {
                    in_pool[k] = true;
                }
            }
            in_pool[i] = false;
            for &j in &level1[i] {
                in_pool[j] = false;
            }
            let pool = (0..n).filter(|&k| in_pool[k]).collect();
            top_k(pool, k2, |k| importance[k])
        })
        .collect();
    Ok(TwoLevelSamples { level1, level2 })
}

/// Adjacency together with the discrete structure derived from it.
#[derive(Debug, Clone)]
pub struct AdaptiveGraph<T: Real = f32> {
    pub a: Tensor<T>,
    pub lambda: f32,
    pub candidates: Vec<Vec<usize>>,
    pub importance: Vec<f64>,
    pub samples: TwoLevelSamples,
}

impl<T: Real> AdaptiveGraph<T> {
    pub fn build(emb: &NodeEmbeddings<T>, lambda: f32, k1: usize, k2: usize) -> Result<Self> {
        let a = build_adjacency(emb, lambda)?;
        let (candidates, importance, samples) = if emb.nodes() < 2 {
            let empty = vec![Vec::new(); emb.nodes()];
            (
                empty.clone(),
                node_importance(&a)?,
                TwoLevelSamples {
                    level1: empty.clone(),
                    level2: empty,
                },
            )
        } else {
            let candidates = prune_neighbors(&a)?;
            let importance = node_importance(&a)?;
            let samples = sample_two_level(&a, &candidates, &importance, k1, k2)?;
            (candidates, importance, samples)
        };
        Ok(AdaptiveGraph {
            a,
            lambda,
            candidates,
            importance,
            samples,
        })
    }

    pub fn nodes(&self) -> usize {
        self.candidates.len()
    }

    /// Total number of sampled edges over both levels.
    pub fn sampled_edges(&self) -> usize {
        self.samples.level1.iter().chain(&self.samples.level2).map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::grad_check;

    fn mat(n: usize, data: &[f32]) -> Tensor {
        Tensor::from_slice(&[n, n], data).unwrap()
    }

    fn random_emb(n: usize, d: usize, seed: u64) -> NodeEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        NodeEmbeddings::new(Tensor::new(&[n, d], data).unwrap()).unwrap()
    }

    #[test]
    fn zero_embeddings_give_half_links() {
        let emb = NodeEmbeddings::new(Tensor::<f32>::zeros(&[3, 2])).unwrap();
        let a = build_adjacency(&emb, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.5 };
                assert_eq!(a.data()[i * 3 + j], expected);
            }
        }
    }

    #[test]
    fn adjacency_matches_brute_force() {
        let emb = random_emb(4, 3, 1);
        let a = build_adjacency(&emb, 1.0).unwrap();
        let e = emb.e.data();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..3).map(|k| e[i * 3 + k] as f64 * e[j * 3 + k] as f64).sum();
                let expected = 1.0 / (1.0 + (-dot).exp()) + if i == j { 1.0 } else { 0.0 };
                assert!((a.data()[i * 4 + j] as f64 - expected).abs() < 1e-6);
                assert_eq!(a.data()[i * 4 + j], a.data()[j * 4 + i]);
            }
        }
    }

    #[test]
    fn adjacency_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let w: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::new(&[n, n], w).unwrap();
        let x = Tensor::new(&[n, 3], (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let f = |e: &Tensor<f64>| -> Result<Tensor<f64>> {
            let emb = NodeEmbeddings { e: e.clone() };
            Ok(build_adjacency(&emb, 1.0)?.mul(&w)?.sum())
        };
        let r = grad_check(f, &x, 1e-3, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn negative_lambda_is_rejected() {
        assert!(build_adjacency(&random_emb(2, 2, 0), -0.1).is_err());
    }

    #[test]
    fn prune_example_three_nodes() {
        let a = mat(3, &[1.5, 0.9, 0.1, 0.9, 1.5, 0.2, 0.1, 0.2, 1.5]);
        let t = prune_thresholds(&a).unwrap();
        assert!((t[0] - 1.0 / 1.5).abs() < 1e-6);
        assert_eq!(prune_neighbors(&a).unwrap()[0], vec![1]);
    }

    #[test]
    fn prune_example_two_nodes() {
        let a = mat(2, &[2.0, 0.8, 0.8, 2.0]);
        assert!((prune_thresholds(&a).unwrap()[0] - 0.4).abs() < 1e-7);
        assert_eq!(prune_neighbors(&a).unwrap(), vec![vec![1], vec![0]]);
    }

    #[test]
    fn uniform_rows_prune_to_nothing() {
        // w = 0.5 on 3 neighbors, diagonal 1.5: T = 1.5 / 1.5 = 1 > 0.5.
        let mut d = vec![0.5f32; 16];
        for i in 0..4 {
            d[i * 4 + i] = 1.5;
        }
        assert!(prune_neighbors(&mat(4, &d)).unwrap().iter().all(Vec::is_empty));
    }

    #[test]
    fn zero_diagonal_is_singular() {
        let a = mat(2, &[0.0, 0.5, 0.5, 1.0]);
        assert!(matches!(prune_neighbors(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn importance_examples() {
        let mut eye = vec![0.0f32; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        assert_eq!(node_importance(&mat(3, &eye)).unwrap(), vec![1.0; 3]);
        let a = mat(3, &[1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0]);
        assert_eq!(node_importance(&a).unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn empty_candidates_sample_nothing() {
        let a = mat(2, &[1.0, 0.1, 0.1, 1.0]);
        let s = sample_two_level(&a, &[vec![], vec![]], &[1.0, 1.0], 3, 3).unwrap();
        assert!(s.level1.iter().chain(&s.level2).all(Vec::is_empty));
    }

    /// Exhaustive oracle: score every subset of size `min(k, |pool|)` and keep
    /// the best, comparing descending score vectors then ascending indices.
    fn brute_top_k(pool: &[usize], k: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
        let size = k.min(pool.len());
        let mut best: Option<Vec<usize>> = None;
        for mask in 0u32..(1 << pool.len()) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let mut pick: Vec<usize> = (0..pool.len()).filter(|b| mask >> b & 1 == 1).map(|b| pool[b]).collect();
            pick.sort_by(|&x, &y| score(y).partial_cmp(&score(x)).unwrap().then(x.cmp(&y)));
            let better = match &best {
                None => true,
                Some(b) => {
                    let key = |v: &Vec<usize>| v.iter().map(|&i| (-score(i), i)).collect::<Vec<_>>();
                    key(&pick).partial_cmp(&key(b)) == Some(Ordering::Less)
                }
            };
            if better {
                best = Some(pick);
            }
        }
        best.unwrap_or_default()
    }

    #[test]
    fn line_graph_matches_exhaustive_ranking() {
        // 5-node line 0-1-2-3-4 with hand-set weights; weak non-edges.
        let mut d = vec![0.05f32; 25];
        let edges = [(0, 1, 0.9), (1, 2, 0.7), (2, 3, 0.8), (3, 4, 0.6)];
        for &(i, j, w) in &edges {
            d[i * 5 + j] = w;
            d[j * 5 + i] = w;
        }
        for i in 0..5 {
            d[i * 5 + i] = 1.0;
        }
        let a = mat(5, &d);
        let c = prune_neighbors(&a).unwrap();
        let imp = node_importance(&a).unwrap();
        for (k1, k2) in [(1, 1), (1, 2), (2, 1), (2, 3)] {
            let s = sample_two_level(&a, &c, &imp, k1, k2).unwrap();
            for i in 0..5 {
                let l1 = brute_top_k(&c[i], k1, |j| d[i * 5 + j] as f64);
                assert_eq!(s.level1[i], l1, "level1 node {i} k1={k1}");
                let mut pool: Vec<usize> = l1.iter().flat_map(|&j| c[j].clone()).collect();
                pool.sort_unstable();
                pool.dedup();
                pool.retain(|&k| k != i && !l1.contains(&k));
                assert_eq!(s.level2[i], brute_top_k(&pool, k2, |k| imp[k]), "level2 node {i}");
            }
        }
    }

    #[test]
    fn truncation_inactive_when_budget_is_large() {
        let emb = random_emb(6, 4, 9);
        let g = AdaptiveGraph::build(&emb, 1.0, 10, 10).unwrap();
        assert_eq!(g.samples.level1, g.candidates);
    }

    fn random_adjacency(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut d = vec![0.0f32; n * n];
        for i in 0..n {
            for j in i..n {
                let v = if i == j { rng.random_range(0.5..2.0) } else { rng.random_range(0.01..0.99) };
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        d
    }

    proptest! {
        #[test]
        fn pruning_matches_definition(n in 2usize..=16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_adjacency(n, &mut rng);
            let c = prune_neighbors(&mat(n, &d)).unwrap();
            for i in 0..n {
                let off: f64 = (0..n).filter(|&j| j != i).map(|j| d[i * n + j] as f64).sum();
                let t = off / d[i * n + i] as f64;
                for j in 0..n {
                    let expected = j != i && (d[i * n + j] as f64) > t;
                    prop_assert_eq!(c[i].contains(&j), expected);
                }
            }
        }

        #[test]
        fn sampling_is_relabeling_equivariant(
            n in 2usize..=12, seed in any::<u64>(), k1 in 0usize..5, k2 in 0usize..5
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_adjacency(n, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // Relabeled matrix: node i becomes perm[i].
            let mut pd = vec![0.0f32; n * n];
            for i in 0..n {
                for j in 0..n {
                    pd[perm[i] * n + perm[j]] = d[i * n + j];
                }
            }
            let sample = |m: &[f32]| {
                let a = mat(n, m);
                let c = prune_neighbors(&a).unwrap();
                let imp = node_importance(&a).unwrap();
                sample_two_level(&a, &c, &imp, k1, k2).unwrap()
            };
            let s = sample(&d);
            let ps = sample(&pd);
            prop_assert_eq!(&s, &sample(&d));
            for i in 0..n {
                prop_assert!(s.level1[i].len() <= k1 && s.level2[i].len() <= k2);
                let mut relabeled: Vec<usize> = s.level1[i].iter().map(|&j| perm[j]).collect();
                let mut got = ps.level1[perm[i]].clone();
                relabeled.sort_unstable();
                got.sort_unstable();
                // Ties may rank differently after relabeling; compare as sets
                // only when all scores in the row are distinct.
                let row: Vec<f32> = (0..n).filter(|&j| j != i).map(|j| d[i * n + j]).collect();
                let distinct = row.iter().enumerate().all(|(a, x)| row.iter().skip(a + 1).all(|y| x != y));
                if distinct {
                    prop_assert_eq!(relabeled, got);
                }
                for &j in &s.level1[i] {
                    prop_assert!(j != i);
                }
            }
        }
    }
}
