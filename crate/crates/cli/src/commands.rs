//! The experiment commands. Each one reads a [`RunConfig`] and writes its
//! artifacts under `output_dir`.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stagnn::dataset::{
    make_windows, parse_cmapss, EngineTrajectory, SubDataset, WindowMode, WindowSample, WindowSet,
};
use stagnn::evaluation::{evaluate, Evaluation};
use stagnn::graph::{build_adjacency, AdjacencyMatrix, DependenceMeasure};
use stagnn::model::{Checkpoint, Model, ModelConfig, Variant};
use stagnn::normalization::{apply_norm_all, fit_norm, NormMode, NormStats};
use stagnn::surrogate::{self, SurrogateConfig};
use stagnn::training::{run_trials, DataBundle, TrainReport};

use crate::config::RunConfig;
use crate::error::CliError;

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            dir: cfg.output_dir.clone(),
        }
    }

    pub fn norm_stats(&self) -> PathBuf {
        self.dir.join("norm_stats.json")
    }
    pub fn adjacency(&self) -> PathBuf {
        self.dir.join("adjacency.csv")
    }
    pub fn propagation(&self) -> PathBuf {
        self.dir.join("propagation.csv")
    }
    pub fn prep_summary(&self) -> PathBuf {
        self.dir.join("prep_summary.csv")
    }
    pub fn prep_manifest(&self) -> PathBuf {
        self.dir.join("prep.json")
    }
    pub fn run_config(&self) -> PathBuf {
        self.dir.join("run_config.toml")
    }
    pub fn checkpoint(&self, trial: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("trial_{trial}.ckpt"))
    }
    pub fn train_report(&self) -> PathBuf {
        self.dir.join("train_report.csv")
    }
    pub fn run_log(&self) -> PathBuf {
        self.dir.join("run.log")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.dir.join("predictions.csv")
    }
    pub fn ablation(&self) -> PathBuf {
        self.dir.join("ablation.csv")
    }
    pub fn export(&self) -> PathBuf {
        self.dir.join("export.json")
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Input(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn read(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| {
        CliError::Input(format!("missing {what} at {} ({e}); run `prep` first", path.display()))
    })
}

/// Appends a timestamped line to `run.log`. Wall-clock data lives only here.
fn log_line(art: &Artifacts, line: &str) -> Result<(), CliError> {
    fs::create_dir_all(&art.dir)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", art.dir.display())))?;
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let path = art.run_log();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    writeln!(f, "[{ts}] {line}").map_err(|e| CliError::Input(format!("cannot write run log: {e}")))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Input(format!("csv serialization: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| CliError::Input(format!("csv serialization: {e}")))
}

/// SHA-256 of the canonical JSON form of the statistics.
pub fn norm_digest(stats: &NormStats) -> Result<String, CliError> {
    let json = stats.to_json()?;
    Ok(format!("{:x}", Sha256::digest(json.as_bytes())))
}

fn take_units(mut trajs: Vec<EngineTrajectory>, units: Option<usize>) -> Vec<EngineTrajectory> {
    if let Some(n) = units {
        trajs.truncate(n);
    }
    trajs
}

/// Raw train and test trajectories, limited to the configured units.
pub fn load_raw(cfg: &RunConfig) -> Result<(Vec<EngineTrajectory>, Vec<EngineTrajectory>), CliError> {
    let (train, test, rul) = cfg.dataset.paths(&cfg.data_dir);
    let (tr, te) = parse_cmapss(&train, &test, &rul)?;
    Ok((take_units(tr, cfg.units), take_units(te, cfg.units)))
}

/// Settings that tie later commands to a prep run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepManifest {
    pub dataset: SubDataset,
    pub units: Option<usize>,
    pub norm_mode: NormMode,
    pub k: usize,
    pub lambda: f64,
    pub measure: DependenceMeasure,
    pub norm_digest: String,
}

impl PrepManifest {
    fn expected(cfg: &RunConfig, norm_digest: String) -> Self {
        Self {
            dataset: cfg.dataset,
            units: cfg.units,
            norm_mode: cfg.norm.mode,
            k: cfg.cluster_count(),
            lambda: cfg.graph.lambda,
            measure: cfg.graph.measure,
            norm_digest,
        }
    }
}

/// Normalized, windowed data ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub stats: NormStats,
    pub digest: String,
    pub adjacency: AdjacencyMatrix,
    pub train: WindowSet,
    pub test: WindowSet,
    pub train_units: usize,
    pub test_units: usize,
}

impl Prepared {
    pub fn bundle(&self, cfg: &RunConfig) -> DataBundle<'_> {
        DataBundle {
            train: &self.train.samples,
            test: &self.test.samples,
            r_max: f64::from(cfg.r_max),
        }
    }
}

fn windows(
    cfg: &RunConfig,
    stats: &NormStats,
    train: &[EngineTrajectory],
    test: &[EngineTrajectory],
) -> Result<(Vec<EngineTrajectory>, WindowSet, WindowSet), CliError> {
    let w = cfg.model.window;
    let train_n = apply_norm_all(train, stats);
    let test_n = apply_norm_all(test, stats);
    let tr = make_windows(&train_n, w, cfg.stride, cfg.r_max, WindowMode::Train)?;
    let te = make_windows(&test_n, w, cfg.stride, cfg.r_max, WindowMode::Test)?;
    Ok((train_n, tr, te))
}

/// Fits normalization and the sensor graph from raw data, in memory.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let (train, test) = load_raw(cfg)?;
    let stats = fit_norm(&train, cfg.norm.mode, cfg.cluster_count(), cfg.norm.seed)?;
    let (train_n, tr, te) = windows(cfg, &stats, &train, &test)?;
    let adjacency = build_adjacency(&train_n, cfg.graph.lambda, cfg.graph.measure)?;
    Ok(Prepared {
        digest: norm_digest(&stats)?,
        stats,
        adjacency,
        train: tr,
        test: te,
        train_units: train.len(),
        test_units: test.len(),
    })
}

/// Reloads prep artifacts and rebuilds the windows.
pub fn load_prepared(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let art = Artifacts::new(cfg);
    let stats = NormStats::from_json(&read(&art.norm_stats(), "normalization statistics")?)?;
    let digest = norm_digest(&stats)?;
    let manifest: PrepManifest = serde_json::from_str(&read(&art.prep_manifest(), "prep manifest")?)
        .map_err(|e| CliError::Input(format!("prep manifest: {e}")))?;
    let expected = PrepManifest::expected(cfg, digest.clone());
    if manifest != expected {
        return Err(CliError::Mismatch(format!(
            "prep artifacts in {} were made with different settings ({manifest:?} vs {expected:?})",
            art.dir.display()
        )));
    }
    let adjacency = AdjacencyMatrix::from_csv(&read(&art.adjacency(), "adjacency")?, cfg.graph.lambda)?;
    let (train, test) = load_raw(cfg)?;
    let (_, tr, te) = windows(cfg, &stats, &train, &test)?;
    Ok(Prepared {
        stats,
        digest,
        adjacency,
        train: tr,
        test: te,
        train_units: train.len(),
        test_units: test.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepSummaryRow {
    pub dataset: String,
    pub split: String,
    pub units: usize,
    pub windows: usize,
    pub skipped_units: usize,
}

pub fn prep(cfg: &RunConfig) -> Result<Vec<PrepSummaryRow>, CliError> {
    let art = Artifacts::new(cfg);
    let p = prepare(cfg)?;
    let rows = vec![
        PrepSummaryRow {
            dataset: cfg.dataset.to_string(),
            split: "train".into(),
            units: p.train_units,
            windows: p.train.len(),
            skipped_units: p.train.skipped_units,
        },
        PrepSummaryRow {
            dataset: cfg.dataset.to_string(),
            split: "test".into(),
            units: p.test_units,
            windows: p.test.len(),
            skipped_units: 0,
        },
    ];
    write(&art.norm_stats(), p.stats.to_json()?)?;
    write(&art.adjacency(), p.adjacency.to_csv())?;
    write(&art.propagation(), p.adjacency.propagation_csv())?;
    write(&art.prep_summary(), csv_bytes(&rows)?)?;
    let manifest = PrepManifest::expected(cfg, p.digest.clone());
    write(
        &art.prep_manifest(),
        serde_json::to_string_pretty(&manifest).map_err(stagnn::Error::from)?,
    )?;
    write(&art.run_config(), cfg.to_toml())?;
    log_line(
        &art,
        &format!(
            "prep {}: {} train units, {} windows, {} edges",
            cfg.dataset,
            p.train_units,
            p.train.len(),
            p.adjacency.edge_count()
        ),
    )?;
    Ok(rows)
}

fn graph_for(model: &ModelConfig, p: &Prepared) -> Option<AdjacencyMatrix> {
    model.variant.uses_graph().then(|| p.adjacency.clone())
}

fn trials(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    p: &Prepared,
) -> Result<(TrainReport, Vec<Model>), CliError> {
    let graph = graph_for(model_cfg, p);
    Ok(run_trials(p.bundle(cfg), model_cfg, graph.as_ref(), &cfg.train, cfg.parallel())?)
}

/// Trains every trial and writes checkpoints and the report.
pub fn train(cfg: &RunConfig) -> Result<TrainReport, CliError> {
    let art = Artifacts::new(cfg);
    let p = load_prepared(cfg)?;
    let start = Instant::now();
    let (report, models) = match trials(cfg, &cfg.model, &p) {
        Ok(r) => r,
        Err(e) => {
            log_line(&art, &format!("train failed: {e}"))?;
            return Err(e);
        }
    };
    let training = serde_json::to_value(&cfg.train).map_err(stagnn::Error::from)?;
    for (t, model) in models.into_iter().enumerate() {
        let ck = Checkpoint {
            model,
            norm_digest: Some(p.digest.clone()),
            training: training.clone(),
        };
        write(&art.checkpoint(t), ck.to_bytes()?)?;
    }
    write(&art.train_report(), report.to_csv())?;
    for t in &report.trials {
        log_line(
            &art,
            &format!(
                "train trial {} (seed {}): rmse {} score {} in {:.3}s",
                t.trial,
                t.seed,
                t.rmse,
                t.score,
                t.wall_clock.as_secs_f64()
            ),
        )?;
    }
    let (rm, _) = report.rmse();
    let (sm, _) = report.score();
    log_line(
        &art,
        &format!(
            "train {} {}: mean rmse {rm} mean score {sm}, total {:.3}s",
            cfg.dataset,
            cfg.model.variant,
            start.elapsed().as_secs_f64()
        ),
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub checkpoint: String,
    pub units: usize,
    pub rmse: f64,
    pub score: f64,
}

fn without_seed(m: &ModelConfig) -> ModelConfig {
    ModelConfig { seed: 0, ..m.clone() }
}

/// Loads a checkpoint and checks it against the configuration and prep
/// artifacts.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path, p: &Prepared) -> Result<Checkpoint, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Input(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ck = Checkpoint::from_bytes(&bytes)
        .map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))?;
    if without_seed(ck.model.config()) != without_seed(&cfg.model) {
        return Err(CliError::Mismatch(format!(
            "{} was trained with a different model configuration",
            path.display()
        )));
    }
    if ck.norm_digest.as_deref() != Some(p.digest.as_str()) {
        return Err(CliError::Mismatch(format!(
            "{} was trained with different normalization statistics",
            path.display()
        )));
    }
    if let Some(a) = ck.model.adjacency() {
        if a.edges() != p.adjacency.edges() {
            return Err(CliError::Mismatch(format!(
                "{} was trained on a different sensor graph",
                path.display()
            )));
        }
    }
    Ok(ck)
}

/// Evaluates one checkpoint (trial 0 by default) on the test windows.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Evaluation, CliError> {
    let art = Artifacts::new(cfg);
    let p = load_prepared(cfg)?;
    let path = checkpoint.map_or_else(|| art.checkpoint(0), Path::to_path_buf);
    let ck = load_checkpoint(cfg, &path, &p)?;
    let ev = evaluate(&ck.model, &p.test.samples, f64::from(cfg.r_max))?;
    let row = MetricsRow {
        checkpoint: path.display().to_string(),
        units: ev.predictions.len(),
        rmse: ev.rmse,
        score: ev.score,
    };
    write(&art.metrics(), csv_bytes(&[row])?)?;
    write(&art.predictions(), ev.predictions.to_csv())?;
    log_line(&art, &format!("eval {}: rmse {} score {}", path.display(), ev.rmse, ev.score))?;
    Ok(ev)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub heads_spatial: usize,
    pub heads_temporal: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub score_mean: f64,
    pub score_std: f64,
}

impl AblationRow {
    pub fn from_report(model: &ModelConfig, report: &TrainReport) -> Self {
        let (rmse_mean, rmse_std) = report.rmse();
        let (score_mean, score_std) = report.score();
        Self {
            variant: model.variant.to_string(),
            heads_spatial: if model.spatial_attention_active() { model.heads_spatial } else { 0 },
            heads_temporal: if model.temporal_attention_active() { model.heads_temporal } else { 0 },
            rmse_mean,
            rmse_std,
            score_mean,
            score_std,
        }
    }
}

/// Trains all six variants with the same seeds and writes one table.
pub fn ablation(cfg: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    let art = Artifacts::new(cfg);
    let p = load_prepared(cfg)?;
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let model_cfg = ModelConfig {
            variant,
            ..cfg.model.clone()
        };
        let start = Instant::now();
        let (report, _) = trials(cfg, &model_cfg, &p)?;
        let row = AblationRow::from_report(&model_cfg, &report);
        log_line(
            &art,
            &format!(
                "ablation {variant}: rmse {} score {} in {:.3}s",
                row.rmse_mean,
                row.score_mean,
                start.elapsed().as_secs_f64()
            ),
        )?;
        rows.push(row);
    }
    write(&art.ablation(), csv_bytes(&rows)?)?;
    Ok(rows)
}

/// Which windows to export.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Selector {
    /// Train windows instead of the last test window per unit.
    pub train_split: bool,
    /// Unit ids; empty selects every unit.
    pub units: Vec<u32>,
    /// 1-based window index within a unit.
    pub window: Option<usize>,
}

impl Selector {
    fn matches(&self, s: &WindowSample) -> bool {
        (self.units.is_empty() || self.units.contains(&s.unit_id))
            && self.window.is_none_or(|w| s.window_index == w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub unit_id: u32,
    pub window_index: usize,
    pub prediction: f64,
    /// `[layer][head]` → `S × S` row-stochastic matrix.
    pub spatial: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[layer][head]` → weights over the sequence positions.
    pub temporal: Vec<Vec<Vec<f64>>>,
    /// Flattened input to the prediction head.
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub checkpoint: String,
    pub variant: Variant,
    pub records: Vec<ExportRecord>,
}

/// Writes attention coefficients and head features for the selected windows.
pub fn export(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    selector: &Selector,
    output: Option<&Path>,
) -> Result<Export, CliError> {
    let art = Artifacts::new(cfg);
    let p = load_prepared(cfg)?;
    let path = checkpoint.map_or_else(|| art.checkpoint(0), Path::to_path_buf);
    let ck = load_checkpoint(cfg, &path, &p)?;
    let pool = if selector.train_split { &p.train } else { &p.test };
    let chosen: Vec<&WindowSample> = pool.samples.iter().filter(|s| selector.matches(s)).collect();
    if chosen.is_empty() {
        return Err(CliError::EmptySelection(format!("{selector:?} matches no window")));
    }
    let mut records = Vec::with_capacity(chosen.len());
    for s in chosen {
        let (x, _) = stagnn::dataset::batch_tensors(&[s])?;
        let ins = ck.model.inspect(&x)?;
        records.push(ExportRecord {
            unit_id: s.unit_id,
            window_index: s.window_index,
            prediction: ins.prediction[0],
            spatial: ins
                .spatial
                .iter()
                .map(|heads| heads.iter().map(|a| a.rows().map(<[f64]>::to_vec).collect()).collect())
                .collect(),
            temporal: ins
                .temporal
                .iter()
                .map(|heads| heads.iter().map(|b| b.data().to_vec()).collect())
                .collect(),
            features: ins.features.data().to_vec(),
        });
    }
    let out = Export {
        checkpoint: path.display().to_string(),
        variant: ck.model.config().variant,
        records,
    };
    let dest = output.map_or_else(|| art.export(), Path::to_path_buf);
    write(&dest, serde_json::to_string(&out).map_err(stagnn::Error::from)?)?;
    log_line(&art, &format!("export {} records to {}", out.records.len(), dest.display()))?;
    Ok(out)
}

/// Writes surrogate C-MAPSS-format files for `dataset` into `dir`.
pub fn synth(
    dataset: SubDataset,
    dir: &Path,
    seed: u64,
    train_units: Option<usize>,
    test_units: Option<usize>,
) -> Result<(), CliError> {
    let mut sc = SurrogateConfig::for_subset(dataset, seed);
    if let Some(n) = train_units {
        sc.train_units = n;
    }
    if let Some(n) = test_units {
        sc.test_units = n;
    }
    let data = surrogate::generate(&sc)?;
    surrogate::write_dir(&data, dataset, dir)?;
    Ok(())
}
