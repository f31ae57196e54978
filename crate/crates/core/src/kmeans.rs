//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Independent k-means++ initializations; the lowest final inertia wins.
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 300,
            tol: 1e-10,
            restarts: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    /// 0-based cluster of each input point.
    pub labels: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment")
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest<C: AsRef<[f64]>>(point: &[f64], centroids: &[C]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c.as_ref());
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn distinct_count<P: AsRef<[f64]>>(points: &[P]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.as_ref().iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn plus_plus_seed<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Guard against rounding landing on an already-chosen point.
            if d2[pick] == 0.0 {
                pick = d2.iter().enumerate().fold(0, |b, (i, &d)| if d > d2[b] { i } else { b });
            }
            pick
        } else {
            0
        };
        let c = points[next].as_ref().to_vec();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(squared_distance(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters `points` into `config.k` groups, keeping the best of
/// `config.restarts` runs.
pub fn fit_kmeans<P: AsRef<[f64]>>(points: &[P], config: &KMeansConfig) -> Result<KMeansFit> {
    let k = config.k;
    if k == 0 {
        return Err(Error::Clustering("k must be at least 1".into()));
    }
    let distinct = distinct_count(points);
    if distinct < k {
        return Err(Error::Clustering(format!(
            "{distinct} distinct points cannot form {k} clusters"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..config.restarts.max(1) {
        let fit = lloyd(points, config, &mut rng);
        if best.as_ref().is_none_or(|b| fit.inertia() < b.inertia()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one run"))
}

fn lloyd<P: AsRef<[f64]>>(points: &[P], config: &KMeansConfig, rng: &mut ChaCha8Rng) -> KMeansFit {
    let k = config.k;
    let dim = points[0].as_ref().len();
    let mut centroids = plus_plus_seed(points, k, rng);
    let mut labels = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let mut inertia = 0.0;
        for (label, p) in labels.iter_mut().zip(points) {
            let (c, d) = nearest(p.as_ref(), &centroids);
            *label = c;
            inertia += d;
        }
        history.push(inertia);
        if iterations == config.max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&label, p) in labels.iter().zip(points) {
            counts[label] += 1;
            for (s, v) in sums[label].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        let mut updated: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|v| v / n.max(1) as f64).collect())
            .collect();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Re-seed an empty cluster at the point worst served by its centroid.
            let far = points
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(i, (p, &l))| (i, squared_distance(p.as_ref(), &updated[l])))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            updated[c] = points[far].as_ref().to_vec();
            labels[far] = c;
        }
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < config.tol {
            let mut inertia = 0.0;
            for (label, p) in labels.iter_mut().zip(points) {
                let (c, d) = nearest(p.as_ref(), &centroids);
                *label = c;
                inertia += d;
            }
            history.push(inertia);
            break;
        }
    }

    KMeansFit {
        centroids,
        labels,
        inertia_history: history,
        iterations,
    }
}
