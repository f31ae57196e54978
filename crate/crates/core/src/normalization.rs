//! Unified and operating-condition clustered min-max normalization.
//!
//! Clustered mode groups every cycle by the k-means cluster of its operating
//! settings and min-max scales each channel with the statistics of that
//! cluster only. Unified mode is the single-cluster case.
//!
//! Statistics are fitted on training data and then applied unchanged to test
//! data, so test values may fall outside `[0, 1]`; they are not clipped.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{EngineTrajectory, CHANNELS, OP_SETTINGS};
use crate::error::{Error, Result};
use crate::kmeans::{self, KMeansConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Unified,
    Clustered,
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(Self::Unified),
            "clustered" => Ok(Self::Clustered),
            _ => Err(Error::Config(format!("unknown normalization mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<[f64; OP_SETTINGS]>,
    /// `min[c][i]`: minimum of channel `i` over training cycles in cluster `c`.
    pub min: Vec<Vec<f64>>,
    pub max: Vec<Vec<f64>>,
}

/// Per-cycle cluster index (0-based) of one trajectory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
}

impl NormStats {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stats: Self = serde_json::from_str(text)?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn validate(&self) -> Result<()> {
        let k = self.k;
        let ok = k >= 1
            && self.centroids.len() == k
            && self.min.len() == k
            && self.max.len() == k
            && self
                .min
                .iter()
                .zip(&self.max)
                .all(|(lo, hi)| {
                    lo.len() == CHANNELS
                        && hi.len() == CHANNELS
                        && lo.iter().zip(hi).all(|(a, b)| a <= b)
                });
        if ok {
            Ok(())
        } else {
            Err(Error::Config("inconsistent normalization statistics".into()))
        }
    }
}

/// Nearest centroid by Euclidean distance, ties to the lowest index.
pub fn assign(op_vector: &[f64; OP_SETTINGS], stats: &NormStats) -> usize {
    if stats.k == 1 {
        return 0;
    }
    kmeans::nearest(op_vector, &stats.centroids).0
}

pub fn cluster_assignment(traj: &EngineTrajectory, stats: &NormStats) -> ClusterAssignment {
    ClusterAssignment {
        labels: traj.op_settings.iter().map(|o| assign(o, stats)).collect(),
    }
}

/// Fits normalization statistics on training trajectories.
///
/// `k` and `seed` only matter in clustered mode.
pub fn fit_norm(train: &[EngineTrajectory], mode: NormMode, k: usize, seed: u64) -> Result<NormStats> {
    let ops: Vec<[f64; OP_SETTINGS]> = train
        .iter()
        .flat_map(|t| t.op_settings.iter().copied())
        .collect();
    if ops.is_empty() {
        return Err(Error::Usage("cannot fit normalization on empty training data".into()));
    }
    let (k, centroids) = match mode {
        NormMode::Unified => {
            let mut mean = [0.0; OP_SETTINGS];
            for o in &ops {
                for (m, v) in mean.iter_mut().zip(o) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= ops.len() as f64);
            (1, vec![mean])
        }
        NormMode::Clustered => {
            let fit = kmeans::fit_kmeans(&ops, &KMeansConfig::new(k, seed))?;
            let centroids = fit
                .centroids
                .iter()
                .map(|c| {
                    let mut a = [0.0; OP_SETTINGS];
                    a.copy_from_slice(c);
                    a
                })
                .collect();
            (k, centroids)
        }
    };
    let mut stats = NormStats {
        mode,
        k,
        seed,
        centroids,
        min: vec![vec![f64::INFINITY; CHANNELS]; k],
        max: vec![vec![f64::NEG_INFINITY; CHANNELS]; k],
    };
    let mut counts = vec![0usize; k];
    for traj in train {
        for i in 0..traj.len() {
            let c = assign(&traj.op_settings[i], &stats);
            counts[c] += 1;
            for (ch, v) in traj.channels(i).into_iter().enumerate() {
                stats.min[c][ch] = stats.min[c][ch].min(v);
                stats.max[c][ch] = stats.max[c][ch].max(v);
            }
        }
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Clustering(format!("cluster {empty} has no training cycles")));
    }
    Ok(stats)
}

fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Min-max scales every channel of every cycle with its cluster's statistics.
pub fn apply_norm(traj: &EngineTrajectory, stats: &NormStats) -> EngineTrajectory {
    let mut out = traj.clone();
    for i in 0..traj.len() {
        let c = assign(&traj.op_settings[i], stats);
        let raw = traj.channels(i);
        let mut row = [0.0; CHANNELS];
        for ch in 0..CHANNELS {
            row[ch] = scale(raw[ch], stats.min[c][ch], stats.max[c][ch]);
        }
        out.set_channels(i, &row);
    }
    out
}

pub fn apply_norm_all(trajs: &[EngineTrajectory], stats: &NormStats) -> Vec<EngineTrajectory> {
    trajs.iter().map(|t| apply_norm(t, stats)).collect()
}
