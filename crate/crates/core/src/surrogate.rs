//! Synthetic run-to-failure data in the C-MAPSS file format.
//!
//! Each unit has a random lifetime and a smooth exponential wear curve that
//! drives 14 informative sensors; the other 7 sensors only depend on the
//! operating regime, as in the benchmark. Operating settings sit at a small
//! jitter around a fixed set of regime points, and each regime shifts every
//! sensor by a few percent, which is large next to the wear signal. Test
//! units are truncated at a random cycle and their true remaining life is
//! written to the RUL file.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{write_rul, write_trajectories, EngineTrajectory, SubDataset, OP_SETTINGS, SENSORS};
use crate::error::{Error, Result};
use crate::seeding;

/// Baseline value, change at failure and noise scale per sensor.
const SENSOR_MODEL: [(f64, f64, f64); SENSORS] = [
    (518.67, 0.0, 0.0),
    (642.0, 1.5, 0.5),
    (1590.0, 25.0, 6.0),
    (1408.0, 35.0, 9.0),
    (14.62, 0.0, 0.0),
    (21.61, 0.0, 0.0),
    (553.9, -3.0, 0.9),
    (2388.0, 0.15, 0.07),
    (9050.0, 40.0, 20.0),
    (1.3, 0.0, 0.0),
    (47.5, 1.2, 0.27),
    (521.7, -3.0, 0.7),
    (2388.0, 0.15, 0.07),
    (8140.0, 30.0, 19.0),
    (8.42, 0.1, 0.037),
    (0.03, 0.0, 0.0),
    (393.0, 5.0, 1.5),
    (2388.0, 0.0, 0.0),
    (100.0, 0.0, 0.0),
    (38.8, -0.8, 0.18),
    (23.3, -0.5, 0.1),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateConfig {
    /// Operating regime points.
    pub regimes: Vec<[f64; OP_SETTINGS]>,
    /// Half-width of the uniform jitter on each setting.
    pub setting_jitter: [f64; OP_SETTINGS],
    pub train_units: usize,
    pub test_units: usize,
    /// Inclusive lifetime range in cycles.
    pub life: (u32, u32),
    pub seed: u64,
}

impl SurrogateConfig {
    /// One regime, 100 training and 100 test units.
    pub fn fd001(seed: u64) -> Self {
        Self {
            regimes: vec![[0.0, 0.0, 100.0]],
            setting_jitter: [0.0087, 0.0006, 0.0],
            train_units: 100,
            test_units: 100,
            life: (128, 362),
            seed,
        }
    }

    /// Six point-mass regimes, 260 training and 259 test units.
    pub fn fd002(seed: u64) -> Self {
        Self {
            regimes: vec![
                [0.0, 0.0, 100.0],
                [10.0, 0.25, 100.0],
                [20.0, 0.7, 100.0],
                [25.0, 0.62, 60.0],
                [35.0, 0.84, 100.0],
                [42.0, 0.84, 100.0],
            ],
            setting_jitter: [0.008, 0.0008, 0.0],
            train_units: 260,
            test_units: 259,
            life: (128, 378),
            seed,
        }
    }

    pub fn for_subset(sub: SubDataset, seed: u64) -> Self {
        if sub.operating_conditions() == 1 {
            Self::fd001(seed)
        } else {
            Self::fd002(seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateData {
    pub train: Vec<EngineTrajectory>,
    /// Truncated units with `true_final_rul` set.
    pub test: Vec<EngineTrajectory>,
}

/// Multiplicative sensor shift of regime `r`, fixed by the seed.
fn regime_factors(cfg: &SurrogateConfig) -> Vec<[f64; SENSORS]> {
    let mut rng = seeding::rng_for(cfg.seed, "surrogate/regimes");
    (0..cfg.regimes.len())
        .map(|r| {
            let mut f = [1.0; SENSORS];
            if r > 0 {
                for v in &mut f {
                    *v = 1.0 + rng.gen_range(-0.15..0.15);
                }
            }
            f
        })
        .collect()
}

fn unit(
    cfg: &SurrogateConfig,
    factors: &[[f64; SENSORS]],
    unit_id: u32,
    life: u32,
    keep: u32,
    rng: &mut ChaCha8Rng,
) -> EngineTrajectory {
    let rate = rng.gen_range(3.0..5.0);
    let offsets: Vec<f64> = SENSOR_MODEL.iter().map(|&(_, _, sd)| rng.gen_range(-sd..=sd)).collect();
    let mut traj = EngineTrajectory {
        unit_id,
        cycles: (1..=keep).collect(),
        op_settings: Vec::with_capacity(keep as usize),
        sensors: Vec::with_capacity(keep as usize),
        true_final_rul: life - keep,
    };
    for c in 1..=keep {
        let r = rng.gen_range(0..cfg.regimes.len());
        let mut ops = cfg.regimes[r];
        for (o, &j) in ops.iter_mut().zip(&cfg.setting_jitter) {
            if j > 0.0 {
                *o += rng.gen_range(-j..=j);
            }
        }
        let wear = (rate * (f64::from(c) / f64::from(life) - 1.0)).exp();
        let mut row = [0.0; SENSORS];
        for (s, &(base, delta, sd)) in SENSOR_MODEL.iter().enumerate() {
            let noise = if sd > 0.0 { rng.gen_range(-sd..=sd) } else { 0.0 };
            row[s] = base * factors[r][s] + delta * wear + offsets[s] * 0.5 + noise;
        }
        traj.op_settings.push(ops);
        traj.sensors.push(row);
    }
    traj
}

pub fn generate(cfg: &SurrogateConfig) -> Result<SurrogateData> {
    let (lo, hi) = cfg.life;
    if cfg.regimes.is_empty() || lo < 2 || lo > hi {
        return Err(Error::Config("surrogate needs regimes and a valid life range".into()));
    }
    let factors = regime_factors(cfg);
    let mut rng = seeding::rng_for(cfg.seed, "surrogate/units");
    let train = (1..=cfg.train_units as u32)
        .map(|id| {
            let life = rng.gen_range(lo..=hi);
            unit(cfg, &factors, id, life, life, &mut rng)
        })
        .collect();
    let test = (1..=cfg.test_units as u32)
        .map(|id| {
            let life = rng.gen_range(lo..=hi);
            let frac = rng.gen_range(0.3..0.95);
            let keep = ((f64::from(life) * frac) as u32).clamp(1, life);
            unit(cfg, &factors, id, life, keep, &mut rng)
        })
        .collect();
    Ok(SurrogateData { train, test })
}

/// Writes `train_X.txt`, `test_X.txt` and `RUL_X.txt` into `dir`.
pub fn write_dir(data: &SurrogateData, sub: SubDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (train, test, rul) = sub.paths(dir);
    for (path, text) in [
        (train, write_trajectories(&data.train)),
        (test, write_trajectories(&data.test)),
        (rul, write_rul(&data.test)),
    ] {
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
