//! C-MAPSS parsing, piecewise-linear RUL labelling and sliding windows.
//!
//! Each input row holds 26 whitespace-separated numbers: unit id, cycle,
//! three operating settings and 21 sensors. Model inputs use all 24 numeric
//! channels (settings first, then sensors).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const OP_SETTINGS: usize = 3;
pub const SENSORS: usize = 21;
pub const CHANNELS: usize = OP_SETTINGS + SENSORS;
const COLUMNS: usize = 2 + CHANNELS;

/// Default cap of the piecewise-linear RUL target.
pub const DEFAULT_R_MAX: u32 = 125;

/// One engine unit's run (to failure for training files, truncated for test
/// files).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineTrajectory {
    pub unit_id: u32,
    pub cycles: Vec<u32>,
    pub op_settings: Vec<[f64; OP_SETTINGS]>,
    pub sensors: Vec<[f64; SENSORS]>,
    /// Ground-truth RUL after the last observed cycle; 0 for run-to-failure
    /// units.
    pub true_final_rul: u32,
}

impl EngineTrajectory {
    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    /// The 24 model channels of cycle row `i`.
    pub fn channels(&self, i: usize) -> [f64; CHANNELS] {
        let mut row = [0.0; CHANNELS];
        row[..OP_SETTINGS].copy_from_slice(&self.op_settings[i]);
        row[OP_SETTINGS..].copy_from_slice(&self.sensors[i]);
        row
    }

    pub fn set_channels(&mut self, i: usize, row: &[f64; CHANNELS]) {
        self.op_settings[i].copy_from_slice(&row[..OP_SETTINGS]);
        self.sensors[i].copy_from_slice(&row[OP_SETTINGS..]);
    }
}

/// The four benchmark sub-datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubDataset {
    FD001,
    FD002,
    FD003,
    FD004,
}

impl SubDataset {
    pub fn name(self) -> &'static str {
        match self {
            Self::FD001 => "FD001",
            Self::FD002 => "FD002",
            Self::FD003 => "FD003",
            Self::FD004 => "FD004",
        }
    }

    /// Number of distinct operating conditions.
    pub fn operating_conditions(self) -> usize {
        match self {
            Self::FD001 | Self::FD003 => 1,
            Self::FD002 | Self::FD004 => 6,
        }
    }

    /// `(train, test, rul)` file paths under `dir` using the standard names.
    pub fn paths(self, dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
        let n = self.name();
        (
            dir.join(format!("train_{n}.txt")),
            dir.join(format!("test_{n}.txt")),
            dir.join(format!("RUL_{n}.txt")),
        )
    }
}

impl FromStr for SubDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FD001" => Ok(Self::FD001),
            "FD002" => Ok(Self::FD002),
            "FD003" => Ok(Self::FD003),
            "FD004" => Ok(Self::FD004),
            _ => Err(Error::Config(format!(
                "unknown sub-dataset {s:?}; expected FD001..FD004"
            ))),
        }
    }
}

impl std::fmt::Display for SubDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses one trajectory file. Units are returned sorted by id.
pub fn parse_trajectories(text: &str, file: &str) -> Result<Vec<EngineTrajectory>> {
    let mut units: BTreeMap<u32, EngineTrajectory> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::format(file, line_no, format!("not a number: {tok:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != COLUMNS {
            return Err(Error::format(
                file,
                line_no,
                format!("expected {COLUMNS} columns, found {}", values.len()),
            ));
        }
        let as_index = |v: f64, what: &str| -> Result<u32> {
            if v.fract() == 0.0 && v >= 1.0 && v <= f64::from(u32::MAX) {
                Ok(v as u32)
            } else {
                Err(Error::format(file, line_no, format!("invalid {what} {v}")))
            }
        };
        let unit_id = as_index(values[0], "unit id")?;
        let cycle = as_index(values[1], "cycle")?;
        let traj = units.entry(unit_id).or_insert_with(|| EngineTrajectory {
            unit_id,
            cycles: Vec::new(),
            op_settings: Vec::new(),
            sensors: Vec::new(),
            true_final_rul: 0,
        });
        let expected = traj.cycles.len() as u32 + 1;
        if cycle != expected {
            return Err(Error::format(
                file,
                line_no,
                format!("unit {unit_id}: cycle {cycle} follows {}", expected - 1),
            ));
        }
        traj.cycles.push(cycle);
        let mut ops = [0.0; OP_SETTINGS];
        ops.copy_from_slice(&values[2..2 + OP_SETTINGS]);
        let mut sensors = [0.0; SENSORS];
        sensors.copy_from_slice(&values[2 + OP_SETTINGS..]);
        traj.op_settings.push(ops);
        traj.sensors.push(sensors);
    }
    Ok(units.into_values().collect())
}

/// Parses a ground-truth RUL file: one non-negative integer per line.
pub fn parse_rul(text: &str, file: &str) -> Result<Vec<u32>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let tok = l.trim();
            tok.parse::<u32>()
                .map_err(|_| Error::format(file, i + 1, format!("not a non-negative integer: {tok:?}")))
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads a train/test/RUL triple. Test units receive their ground-truth
/// final RUL in unit order.
pub fn parse_cmapss(
    train_path: &Path,
    test_path: &Path,
    rul_path: &Path,
) -> Result<(Vec<EngineTrajectory>, Vec<EngineTrajectory>)> {
    let train = parse_trajectories(&read(train_path)?, &train_path.display().to_string())?;
    let mut test = parse_trajectories(&read(test_path)?, &test_path.display().to_string())?;
    let rul = parse_rul(&read(rul_path)?, &rul_path.display().to_string())?;
    if rul.len() != test.len() {
        return Err(Error::format(
            rul_path.display().to_string(),
            rul.len(),
            format!("{} RUL values for {} test units", rul.len(), test.len()),
        ));
    }
    for (traj, r) in test.iter_mut().zip(rul) {
        traj.true_final_rul = r;
    }
    Ok((train, test))
}

/// Serializes trajectories back into the 26-column text format.
pub fn write_trajectories(trajs: &[EngineTrajectory]) -> String {
    let mut out = String::new();
    for t in trajs {
        for i in 0..t.len() {
            write!(out, "{} {}", t.unit_id, t.cycles[i]).expect("write to string");
            for v in t.channels(i) {
                write!(out, " {v}").expect("write to string");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_rul(trajs: &[EngineTrajectory]) -> String {
    trajs.iter().map(|t| format!("{}\n", t.true_final_rul)).collect()
}

/// Piecewise-linear labels for every full window of a trajectory, as
/// `(window_end_cycle, label)` pairs ordered by window index `m = 1, 2, ...`.
///
/// `label_m = min(T - w - (m - 1) k + true_final_rul, r_max)`. Returns an
/// empty list when the trajectory is shorter than `w`.
pub fn label_rul(traj: &EngineTrajectory, w: usize, k: usize, r_max: u32) -> Result<Vec<(u32, f64)>> {
    check_window_params(w, k)?;
    let t = traj.len();
    if t < w {
        return Ok(Vec::new());
    }
    let count = (t - w) / k + 1;
    Ok((0..count)
        .map(|j| {
            let end = w + j * k;
            let raw = (t - end) as u64 + u64::from(traj.true_final_rul);
            (end as u32, raw.min(u64::from(r_max)) as f64)
        })
        .collect())
}

fn check_window_params(w: usize, k: usize) -> Result<()> {
    if w == 0 || k == 0 {
        return Err(Error::Parameter(format!(
            "window length ({w}) and stride ({k}) must be positive"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Every window of every unit.
    Train,
    /// Only the final window per unit, left-padded when the unit is short.
    Test,
}

/// A `w × 24` window of consecutive cycles and its capped RUL label.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Row-major `[w, CHANNELS]`.
    pub features: Vec<f64>,
    pub window_len: usize,
    pub label: f64,
    pub unit_id: u32,
    /// 1-based window index within the unit.
    pub window_index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct WindowSet {
    pub samples: Vec<WindowSample>,
    /// Training units shorter than the window.
    pub skipped_units: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn window_rows(traj: &EngineTrajectory, end: usize, w: usize) -> Vec<f64> {
    let mut features = Vec::with_capacity(w * CHANNELS);
    // Rows before the first cycle repeat cycle 1.
    for pos in 0..w {
        let row = (end + pos).saturating_sub(w);
        features.extend_from_slice(&traj.channels(row));
    }
    features
}

/// Segments (already normalized) trajectories into windows.
pub fn make_windows(
    trajs: &[EngineTrajectory],
    w: usize,
    k: usize,
    r_max: u32,
    mode: WindowMode,
) -> Result<WindowSet> {
    check_window_params(w, k)?;
    let mut set = WindowSet::default();
    for traj in trajs.iter().filter(|t| !t.is_empty()) {
        match mode {
            WindowMode::Train => {
                let labels = label_rul(traj, w, k, r_max)?;
                if labels.is_empty() {
                    log::warn!(
                        "unit {} has {} cycles, shorter than window {w}; skipped",
                        traj.unit_id,
                        traj.len()
                    );
                    set.skipped_units += 1;
                }
                for (m, (end, label)) in labels.into_iter().enumerate() {
                    set.samples.push(WindowSample {
                        features: window_rows(traj, end as usize, w),
                        window_len: w,
                        label,
                        unit_id: traj.unit_id,
                        window_index: m + 1,
                    });
                }
            }
            WindowMode::Test => {
                let t = traj.len();
                let window_index = if t >= w { (t - w) / k + 1 } else { 1 };
                set.samples.push(WindowSample {
                    features: window_rows(traj, t, w),
                    window_len: w,
                    label: f64::from(traj.true_final_rul.min(r_max)),
                    unit_id: traj.unit_id,
                    window_index,
                });
            }
        }
    }
    Ok(set)
}

/// Stacks windows into a `[B, w, CHANNELS]` tensor plus a `[B]` label vector.
pub fn batch_tensors(samples: &[&WindowSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("empty batch".into()))?;
    let w = first.window_len;
    if samples.iter().any(|s| s.window_len != w) {
        return Err(Error::Dimension("windows of different lengths in one batch".into()));
    }
    let mut x = Vec::with_capacity(samples.len() * w * CHANNELS);
    for s in samples {
        x.extend_from_slice(&s.features);
    }
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((
        Tensor::new(vec![samples.len(), w, CHANNELS], x)?,
        Tensor::vector(labels),
    ))
}
