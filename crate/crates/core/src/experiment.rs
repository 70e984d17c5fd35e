//! Config-driven experiment runner: leave-one-subject-out folds x seeds x
//! grid points, three supervision modes per run, and aggregate tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibrate::{calibration_set_from_features, fit_downstream, synthetic_combos, Algorithm, CalibrateError, DownstreamSpec, SupervisionMode};
use crate::data::{generate_synth_cohort, load_dataset, split_loso, DataError, Dataset, SynthCohortSpec, Window};
use crate::losses::{LossWeights, TripletVariant};
use crate::metrics::{balanced_accuracy, similarity_matrix, ConfusionMatrix, MetricsError, SimilaritySummary, Subset, DEFAULT_DELTA};
use crate::model::{HeadsSize, ModelError, OperatorKind};
use crate::pretrain::{pretrain, PretrainConfig, PretrainError, TrainedBundle};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Calibrate(#[from] CalibrateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("report error in {path}: {message}")]
    Report { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic {
        #[serde(default)]
        spec: SynthCohortSpec,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset, ExperimentError> {
        Ok(match self {
            DatasetSource::Path(p) => load_dataset(p)?,
            DatasetSource::Synthetic { spec, seed } => generate_synth_cohort(spec, *seed)?,
        })
    }
}

/// Axes of the pretraining grid; every combination is one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub heads: Vec<HeadsSize>,
    pub operator: Vec<OperatorKind>,
    pub triplet: Vec<TripletVariant>,
    pub loss_weights: Vec<LossWeights>,
    pub snr_db: Vec<Option<f64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            heads: vec![HeadsSize::Small],
            operator: vec![OperatorKind::Mlp],
            triplet: vec![TripletVariant::Basic],
            loss_weights: vec![LossWeights::default()],
            snr_db: vec![Some(20.0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub heads: HeadsSize,
    pub operator: OperatorKind,
    pub triplet: TripletVariant,
    pub loss_weights: LossWeights,
    pub snr_db: Option<f64>,
}

impl GridPoint {
    /// Short stable identifier used as the output directory name.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("grid point serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }

    fn apply(&self, base: &PretrainConfig) -> PretrainConfig {
        let mut c = base.clone();
        c.heads = self.heads;
        c.operator = self.operator;
        c.triplet.variant = self.triplet;
        c.loss_weights = self.loss_weights.clone();
        c.snr_db = self.snr_db;
        c
    }
}

impl GridConfig {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &heads in &self.heads {
            for &operator in &self.operator {
                for &triplet in &self.triplet {
                    for w in &self.loss_weights {
                        for &snr_db in &self.snr_db {
                            out.push(GridPoint { heads, operator, triplet, loss_weights: w.clone(), snr_db });
                        }
                    }
                }
            }
        }
        out
    }
}

fn default_modes() -> Vec<SupervisionMode> {
    SupervisionMode::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Evaluation subject ids.
    pub folds: Vec<u32>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub grid: GridConfig,
    /// Base pretraining settings; grid axes override their fields and the
    /// seed is derived per run.
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    /// Base downstream settings; the algorithm and seed are set per fit.
    #[serde(default)]
    pub downstream: DownstreamSpec,
    #[serde(default = "default_modes")]
    pub modes: Vec<SupervisionMode>,
    #[serde(default = "default_synth_per_class")]
    pub n_synth_per_class: usize,
    #[serde(default = "default_calib_fraction")]
    pub calib_fraction: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub save_bundles: bool,
    pub output: PathBuf,
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::RandomForest]
}

fn default_synth_per_class() -> usize {
    crate::calibrate::DEFAULT_SYNTH_PER_CLASS
}

fn default_calib_fraction() -> f64 {
    crate::data::DEFAULT_CALIB_FRACTION
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.folds.is_empty() || self.seeds.is_empty() || self.algorithms.is_empty() || self.modes.is_empty() {
            return bad("folds, seeds, algorithms and modes must be non-empty");
        }
        let g = &self.grid;
        if g.heads.is_empty() || g.operator.is_empty() || g.triplet.is_empty() || g.loss_weights.is_empty() || g.snr_db.is_empty() {
            return bad("every grid axis must be non-empty");
        }
        for w in &g.loss_weights {
            w.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.pretrain.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if !(self.delta > 0.0) || !(0.0..=1.0).contains(&self.calib_fraction) || self.n_synth_per_class == 0 {
            return bad("delta must be positive, calib_fraction in [0, 1], n_synth_per_class >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub operator: usize,
    pub heads: usize,
}

/// Outcome of one (fold, seed, grid point, algorithm, mode) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fold: u32,
    pub seed: u64,
    pub grid_hash: String,
    pub grid: GridPoint,
    pub algorithm: Algorithm,
    pub mode: SupervisionMode,
    pub acc_single: f64,
    pub acc_comb: f64,
    pub acc_all: f64,
    pub confusion: ConfusionMatrix,
    pub similarity: SimilaritySummary,
    pub param_counts: ParamCounts,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub calib_size: usize,
    /// Digest of the test windows, identical across modes of one run.
    pub test_digest: String,
    pub wall_time_s: f64,
}

impl RunReport {
    /// The report without its timing field, for reproducibility checks.
    pub fn without_timing(&self) -> RunReport {
        RunReport { wall_time_s: 0.0, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub fold: u32,
    pub seed: u64,
    pub grid_hash: String,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    pub reports: Vec<RunReport>,
    pub failures: Vec<RunFailure>,
    pub pretraining_runs: usize,
}

fn digest(windows: &[Window]) -> String {
    let mut h = Sha256::new();
    for w in windows {
        h.update(w.subject.to_le_bytes());
        h.update(w.label.to_string().as_bytes());
        w.samples.iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    hex::encode(&h.finalize()[..16])
}

fn derived_seed(seed: u64, purpose: &str, path: &[u64]) -> u64 {
    stream(seed, purpose, path).next_u64()
}

/// Write `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub const REPORTS_FILE: &str = "reports.json";

/// One pretraining run followed by every (algorithm, mode) evaluation on
/// the shared test split.
pub fn run_single(
    config: &ExperimentConfig,
    dataset: &Dataset,
    fold: u32,
    seed: u64,
    grid: &GridPoint,
) -> Result<(Vec<RunReport>, TrainedBundle), ExperimentError> {
    let start = Instant::now();
    let roster = dataset.subjects();
    let fold_index = roster
        .iter()
        .position(|&s| s == fold)
        .ok_or_else(|| ExperimentError::Config(format!("fold subject {fold} not in dataset roster {roster:?}")))?;
    let split = split_loso(dataset, fold_index, config.calib_fraction, derived_seed(seed, "split", &[fold as u64]))?;
    let mut pcfg = grid.apply(&config.pretrain);
    pcfg.seed = derived_seed(seed, "pretrain", &[fold as u64]);
    let bundle = pretrain(&split.pre, &split.val, &pcfg)?;

    let calib_refs: Vec<&Window> = split.calib.windows.iter().collect();
    let test_refs: Vec<&Window> = split.test.windows.iter().collect();
    let calib_z = bundle.encode(&calib_refs)?;
    let test_z = bundle.encode(&test_refs)?;
    let test_digest = digest(&split.test.windows);

    let synth = synthetic_combos(
        &bundle.model.operator,
        &bundle.params,
        &calib_z,
        config.n_synth_per_class,
        &mut stream(seed, "similarity-synth", &[fold as u64]),
    )?;
    let eval_combos = calib_z
        .select(&calib_z.indices_where(|l| l.is_combination()))
        .concat(&test_z.select(&test_z.indices_where(|l| l.is_combination())))?;
    let (_, similarity) = similarity_matrix(&eval_combos, &synth, config.delta)?;

    let (e, o, h) = bundle.param_counts();
    let param_counts = ParamCounts { encoder: e, operator: o, heads: h };
    let mut reports = Vec::new();
    for &algorithm in &config.algorithms {
        for &mode in &config.modes {
            let mut rng = stream(seed, "calibration-set", &[fold as u64, mode as u64]);
            let set = calibration_set_from_features(mode, &bundle.model.operator, &bundle.params, &calib_z, config.n_synth_per_class, &mut rng)?;
            let spec = DownstreamSpec {
                algorithm,
                seed: derived_seed(seed, "downstream", &[fold as u64, mode as u64, algorithm as u64]),
                ..config.downstream.clone()
            };
            let model = fit_downstream(&spec, &set)?;
            let pred = model.predict(&test_z);
            let truth = &test_z.labels;
            reports.push(RunReport {
                fold,
                seed,
                grid_hash: grid.hash(),
                grid: grid.clone(),
                algorithm,
                mode,
                acc_single: balanced_accuracy(truth, &pred, Subset::Single)?,
                acc_comb: balanced_accuracy(truth, &pred, Subset::Combo)?,
                acc_all: balanced_accuracy(truth, &pred, Subset::All)?,
                confusion: ConfusionMatrix::new(truth, &pred)?,
                similarity,
                param_counts,
                best_epoch: bundle.best_epoch,
                epochs_run: bundle.trace.len(),
                calib_size: set.len(),
                test_digest: test_digest.clone(),
                wall_time_s: 0.0,
            });
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    reports.iter_mut().for_each(|r| r.wall_time_s = elapsed);
    Ok((reports, bundle))
}

fn run_dir(config: &ExperimentConfig, grid: &GridPoint, fold: u32, seed: u64) -> PathBuf {
    config.output.join(grid.hash()).join(format!("{fold}-{seed}"))
}

fn persist_run(config: &ExperimentConfig, dir: &Path, reports: &[RunReport], bundle: &TrainedBundle) -> Result<(), ExperimentError> {
    if config.save_bundles {
        bundle.save(&dir.join("bundle"))?;
    }
    write_atomic(&dir.join("trace.csv"), bundle.trace_csv().as_bytes())?;
    for r in reports {
        let name = format!("confusion_{}_{}.csv", r.algorithm.name(), r.mode.name());
        write_atomic(&dir.join(name), r.confusion.counts_csv().as_bytes())?;
    }
    let json = serde_json::to_vec_pretty(reports).expect("reports serialize");
    write_atomic(&dir.join(REPORTS_FILE), &json)
}

/// Run every (fold, seed, grid point) on a pool of `jobs` threads, persist
/// per-run outputs and the aggregate tables, and return all reports in a
/// deterministic order.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    let dataset = config.dataset.load()?;
    let roster = dataset.subjects();
    if let Some(f) = config.folds.iter().find(|f| !roster.contains(f)) {
        return Err(ExperimentError::Config(format!("fold subject {f} not in dataset roster {roster:?}")));
    }
    let grid = config.grid.points();
    for g in &grid {
        write_atomic(&config.output.join(g.hash()).join("grid.json"), &serde_json::to_vec_pretty(g).expect("grid serializes"))?;
    }
    let tasks: Vec<(GridPoint, u32, u64)> = grid
        .iter()
        .flat_map(|g| config.folds.iter().flat_map(move |&f| config.seeds.iter().map(move |&s| (g.clone(), f, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<RunReport>, RunFailure>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(g, fold, seed)| {
                log::info!("run fold {fold} seed {seed} grid {}", g.hash());
                let fail = |e: ExperimentError| RunFailure { fold: *fold, seed: *seed, grid_hash: g.hash(), error: e.to_string() };
                let (reports, bundle) = run_single(config, &dataset, *fold, *seed, g).map_err(fail)?;
                persist_run(config, &run_dir(config, g, *fold, *seed), &reports, &bundle).map_err(fail)?;
                Ok(reports)
            })
            .collect()
    });
    let mut outcome = ExperimentOutcome { pretraining_runs: tasks.len(), ..Default::default() };
    for r in results {
        match r {
            Ok(reports) => outcome.reports.extend(reports),
            Err(f) => {
                log::error!("run fold {} seed {} grid {} failed: {}", f.fold, f.seed, f.grid_hash, f.error);
                outcome.failures.push(f);
            }
        }
    }
    write_aggregates(&config.output, &outcome.reports, outcome.failures.len())?;
    Ok(outcome)
}

/// Load every per-run `reports.json` below `dir`, sorted by path.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>, ExperimentError> {
    let mut files = Vec::new();
    for grid in fs::read_dir(dir).map_err(io_err(dir))? {
        let grid = grid.map_err(io_err(dir))?.path();
        if !grid.is_dir() {
            continue;
        }
        for run in fs::read_dir(&grid).map_err(io_err(&grid))? {
            let file = run.map_err(io_err(&grid))?.path().join(REPORTS_FILE);
            if file.is_file() {
                files.push(file);
            }
        }
    }
    files.sort();
    let mut reports = Vec::new();
    for f in files {
        let text = fs::read(&f).map_err(io_err(&f))?;
        let batch: Vec<RunReport> =
            serde_json::from_slice(&text).map_err(|e| ExperimentError::Report { path: f.clone(), message: e.to_string() })?;
        reports.extend(batch);
    }
    Ok(reports)
}

/// `m ± s` with population standard deviation, two decimals.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn format_cell(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.2} ± {s:.2}")
}

/// One aggregate row: a grid point, algorithm and mode.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub grid_hash: String,
    pub grid: GridPoint,
    pub algorithm: Algorithm,
    pub mode: SupervisionMode,
    pub runs: usize,
    pub acc_single: (f64, f64),
    pub acc_comb: (f64, f64),
    pub acc_all: (f64, f64),
    pub similarity: [(f64, f64); 4],
    cells: [String; 7],
}

/// Group reports by (grid point, algorithm, mode), in first-seen order.
pub fn aggregate(reports: &[RunReport]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, Algorithm, SupervisionMode)> = Vec::new();
    for r in reports {
        let k = (r.grid_hash.clone(), r.algorithm, r.mode);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(hash, algorithm, mode)| {
            let group: Vec<&RunReport> =
                reports.iter().filter(|r| r.grid_hash == hash && r.algorithm == algorithm && r.mode == mode).collect();
            let col = |f: fn(&RunReport) -> f64| group.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let cols = [
                col(|r| r.acc_single),
                col(|r| r.acc_comb),
                col(|r| r.acc_all),
                col(|r| r.similarity.real_within),
                col(|r| r.similarity.synth_within),
                col(|r| r.similarity.matching),
                col(|r| r.similarity.non_matching),
            ];
            AggregateRow {
                grid_hash: hash,
                grid: group[0].grid.clone(),
                algorithm,
                mode,
                runs: group.len(),
                acc_single: mean_std(&cols[0]),
                acc_comb: mean_std(&cols[1]),
                acc_all: mean_std(&cols[2]),
                similarity: [mean_std(&cols[3]), mean_std(&cols[4]), mean_std(&cols[5]), mean_std(&cols[6])],
                cells: cols.map(|c| format_cell(&c)),
            }
        })
        .collect()
}

fn grid_columns(g: &GridPoint) -> String {
    let on = |w: f64| if w > 0.0 { "1" } else { "0" };
    let snr = g.snr_db.map(|s| s.to_string()).unwrap_or_else(|| "inf".into());
    format!(
        "{:?},{:?},{:?},{},{},{},{snr}",
        g.heads,
        g.operator,
        g.triplet,
        on(g.loss_weights.triplet),
        on(g.loss_weights.ce_real),
        on(g.loss_weights.ce_synth)
    )
    .to_lowercase()
}

/// Accuracy and similarity tables as CSV text.
pub fn aggregate_csv(rows: &[AggregateRow]) -> (String, String) {
    let mut acc = String::from("grid,heads,operator,triplet,l_triplet,l_ce,l_ce_synth,snr_db,algorithm,mode,runs,acc_single,acc_comb,acc_all\n");
    let mut sim = String::from("grid,heads,operator,triplet,l_triplet,l_ce,l_ce_synth,snr_db,runs,real_within,synth_within,matching,non_matching\n");
    let mut sim_seen = Vec::new();
    for r in rows {
        let g = grid_columns(&r.grid);
        let _ = writeln!(
            acc,
            "{},{g},{},{},{},{},{},{}",
            r.grid_hash,
            r.algorithm.name(),
            r.mode.name(),
            r.runs,
            r.cells[0],
            r.cells[1],
            r.cells[2]
        );
        if !sim_seen.contains(&r.grid_hash) {
            sim_seen.push(r.grid_hash.clone());
            let _ = writeln!(sim, "{},{g},{},{},{},{},{}", r.grid_hash, r.runs, r.cells[3], r.cells[4], r.cells[5], r.cells[6]);
        }
    }
    (acc, sim)
}

/// Write `aggregate/accuracy.csv`, `aggregate/similarity.csv` and
/// `aggregate/summary.txt` under `out`.
pub fn write_aggregates(out: &Path, reports: &[RunReport], failures: usize) -> Result<(), ExperimentError> {
    let dir = out.join("aggregate");
    let rows = aggregate(reports);
    let (acc, sim) = aggregate_csv(&rows);
    write_atomic(&dir.join("accuracy.csv"), acc.as_bytes())?;
    write_atomic(&dir.join("similarity.csv"), sim.as_bytes())?;
    let mut runs: Vec<(u32, u64, &str)> = reports.iter().map(|r| (r.fold, r.seed, r.grid_hash.as_str())).collect();
    runs.sort_unstable();
    runs.dedup();
    let summary = format!("completed_runs={}\nfailed_runs={failures}\nreports={}\n", runs.len(), reports.len());
    write_atomic(&dir.join("summary.txt"), summary.as_bytes())
}
