//! Seeded k-means (k-means++ initialization, Lloyd iterations) and
//! silhouette-based choice of K.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k_min: 2,
            k_max: 10,
            max_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    pub inertia: T,
    pub iterations: usize,
}

pub fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub fn distinct_count<T: Real>(vectors: &[Vec<T>]) -> usize {
    let mut seen: Vec<&Vec<T>> = Vec::new();
    for v in vectors {
        if !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen.len()
}

fn nearest<T: Real>(v: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(v, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<T: Real>(vectors: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let mut centroids = vec![vectors[rng.gen_range(0..vectors.len())].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = vectors
            .iter()
            .map(|v| nearest(v, &centroids).1.as_f64())
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a centroid already
            Err(_) => break,
        };
        centroids.push(vectors[next].clone());
    }
    centroids
}

pub fn kmeans<T: Real>(vectors: &[Vec<T>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult<T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let distinct = distinct_count(vectors);
    if k > distinct {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {distinct} distinct vectors")));
    }
    let dim = vectors[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(vectors, k, &mut rng);
    let mut assignments = vec![usize::MAX; vectors.len()];
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, v) in vectors.iter().enumerate() {
            let (c, _) = nearest(v, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![T::zero(); dim]; centroids.len()];
        let mut sizes = vec![0usize; centroids.len()];
        for (v, &c) in vectors.iter().zip(&assignments) {
            sizes[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(v) {
                *s += x;
            }
        }
        for (c, sum) in sums.into_iter().enumerate() {
            // an emptied cluster keeps its previous centroid
            if sizes[c] > 0 {
                let n = T::from_usize_lossy(sizes[c]);
                centroids[c] = sum.into_iter().map(|s| s / n).collect();
            }
        }
    }
    let inertia = vectors
        .iter()
        .zip(&assignments)
        .map(|(v, &c)| squared_distance(v, &centroids[c]))
        .sum();
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

/// Mean silhouette over all points using Euclidean distance. Points in
/// singleton clusters contribute 0.
pub fn silhouette<T: Real>(vectors: &[Vec<T>], assignments: &[usize]) -> T {
    let n = vectors.len();
    if n == 0 {
        return T::zero();
    }
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &c in assignments {
        sizes[c] += 1;
    }
    let mut total = T::zero();
    for i in 0..n {
        let own = assignments[i];
        if sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![T::zero(); k];
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += squared_distance(&vectors[i], &vectors[j]).sqrt();
            }
        }
        let a = sums[own] / T::from_usize_lossy(sizes[own] - 1);
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / T::from_usize_lossy(sizes[c]))
            .fold(T::infinity(), T::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > T::zero() {
            total += (b - a) / denom;
        }
    }
    total / T::from_usize_lossy(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering<T> {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub score: Option<T>,
}

/// Picks K in `[k_min, k_max]` maximizing the mean silhouette; ties go to
/// the smallest K. Fewer than three vectors, or fewer than two distinct
/// ones, yield a single cluster.
pub fn select_k<T: Real>(vectors: &[Vec<T>], cfg: &ClusterConfig) -> Result<Clustering<T>> {
    let single = Clustering {
        k: 1,
        assignments: vec![0; vectors.len()],
        score: None,
    };
    if vectors.len() < 3 {
        return Ok(single);
    }
    let distinct = distinct_count(vectors);
    let mut best: Option<Clustering<T>> = None;
    for k in cfg.k_min.max(2)..=cfg.k_max {
        if k > distinct {
            break;
        }
        let run = kmeans(vectors, k, cfg.seed, cfg.max_iters)?;
        let s = silhouette(vectors, &run.assignments);
        if best.as_ref().is_none_or(|b| s > b.score.expect("scored")) {
            best = Some(Clustering {
                k,
                assignments: run.assignments,
                score: Some(s),
            });
        }
    }
    Ok(best.unwrap_or(single))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(cx: f64, cy: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 1.3;
                vec![cx + 0.05 * a.cos(), cy + 0.05 * a.sin()]
            })
            .collect()
    }

    /// Exhaustive minimum-inertia 2-partition.
    fn brute_force_two(vectors: &[Vec<f64>]) -> (Vec<usize>, f64) {
        let n = vectors.len();
        let mut best = (vec![], f64::INFINITY);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut inertia = 0.0;
            for c in 0..2 {
                let members: Vec<&Vec<f64>> = vectors.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(v, _)| v).collect();
                let m = members.len() as f64;
                let centroid: Vec<f64> = (0..2).map(|d| members.iter().map(|v| v[d]).sum::<f64>() / m).collect();
                inertia += members.iter().map(|v| squared_distance(v, &centroid)).sum::<f64>();
            }
            if inertia < best.1 {
                best = (labels, inertia);
            }
        }
        best
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn recovers_two_groups() {
        let mut pts = blob(0.0, 0.0, 4);
        pts.extend(blob(5.0, 5.0, 4));
        let (oracle, oracle_inertia) = brute_force_two(&pts);
        for seed in 0..5 {
            let run = kmeans(&pts, 2, seed, 100).unwrap();
            assert!(same_partition(&run.assignments, &oracle));
            assert!((run.inertia - oracle_inertia).abs() < 1e-9);
        }
    }

    #[test]
    fn k_equals_n_and_identical_points() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let run = kmeans(&pts, 3, 1, 100).unwrap();
        assert_eq!(run.inertia, 0.0);
        let mut labels = run.assignments.clone();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 3);

        let same = vec![vec![2.0, 2.0]; 5];
        let run = kmeans(&same, 1, 0, 100).unwrap();
        assert_eq!(run.inertia, 0.0);
        assert!(kmeans(&same, 2, 0, 100).is_err());
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let mut pts = blob(0.0, 0.0, 6);
        pts.extend(blob(1.0, 0.0, 6));
        pts.extend(blob(0.5, 1.0, 6));
        assert_eq!(kmeans(&pts, 3, 42, 100).unwrap(), kmeans(&pts, 3, 42, 100).unwrap());
    }

    #[test]
    fn select_k_on_blobs() {
        let cfg = ClusterConfig::default();
        let mut two = blob(0.0, 0.0, 5);
        two.extend(blob(10.0, 0.0, 5));
        assert_eq!(select_k(&two, &cfg).unwrap().k, 2);

        let h = 3f64.sqrt() / 2.0 * 10.0;
        let mut three = blob(0.0, 0.0, 5);
        three.extend(blob(10.0, 0.0, 5));
        three.extend(blob(5.0, h, 5));
        assert_eq!(select_k(&three, &cfg).unwrap().k, 3);

        let same = vec![vec![1.0, 1.0]; 3];
        assert_eq!(select_k(&same, &cfg).unwrap().k, 1);
        assert_eq!(select_k(&two[..2], &cfg).unwrap().k, 1);
    }

    #[test]
    fn silhouette_bounds_and_singletons() {
        let pts = vec![vec![0.0], vec![0.1], vec![5.0]];
        let s = silhouette(&pts, &[0, 0, 1]);
        assert!(s > 0.0 && s <= 1.0);
        assert_eq!(silhouette(&pts, &[0, 1, 2]), 0.0);
    }
}
