//! Pretraining: stratified batches with per-class noise, the joint
//! encoder/operator/heads objective, AdamW, and best-checkpoint early stopping.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{inject_noise, DataError, Dataset, GestureLabel, Window};
use crate::losses::{mine_triplets, total_loss, CentroidBank, LossBreakdown, LossError, LossWeights, ObjectiveInputs, Side, Triplet, TripletConfig};
use crate::model::{
    windows_to_tensor, CombinationOperator, Encoder, EncoderConfig, HeadsSize, LabeledFeatures, ModelError, OperatorKind,
    PretrainHeads,
};
use crate::nncore::{load_checkpoint, save_checkpoint, AdamW, AdamWConfig, NnError, Objective, ParameterSet, Scalar, Tape, Tensor, Var};
use crate::rng::{stream, Stream};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("pretraining configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {terms:?}")]
    NonFinite { epoch: usize, step: usize, terms: LossBreakdown },
    #[error("bundle error: {0}")]
    Bundle(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: AdamWConfig,
    pub triplet: TripletConfig,
    pub loss_weights: LossWeights,
    /// Training-batch SNR in dB; `None` disables noise injection.
    pub snr_db: Option<f64>,
    /// Windows drawn per class per batch.
    pub per_class: usize,
    /// Optional cap on optimizer steps per epoch.
    pub max_steps_per_epoch: Option<usize>,
    pub encoder: EncoderConfig,
    pub operator: OperatorKind,
    pub heads: HeadsSize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_epochs: 300,
            patience: 30,
            optimizer: AdamWConfig::default(),
            triplet: TripletConfig::default(),
            loss_weights: LossWeights::default(),
            snr_db: Some(20.0),
            per_class: 2,
            max_steps_per_epoch: None,
            encoder: EncoderConfig::default(),
            operator: OperatorKind::Mlp,
            heads: HeadsSize::Small,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: String| Err(PretrainError::Config(m));
        if self.max_epochs == 0 || self.patience == 0 || self.per_class == 0 {
            return bad("max_epochs, patience and per_class must be at least 1".into());
        }
        if self.max_steps_per_epoch == Some(0) {
            return bad("max_steps_per_epoch must be at least 1".into());
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.optimizer.learning_rate));
        }
        self.triplet.validate()?;
        self.loss_weights.validate()?;
        Ok(())
    }
}

/// Encoder, combination operator and pretraining heads sharing one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainModel {
    pub encoder: Encoder,
    pub operator: CombinationOperator,
    pub heads: PretrainHeads,
}

impl PretrainModel {
    pub fn new(encoder: &EncoderConfig, operator: OperatorKind, heads: HeadsSize) -> Self {
        let dim = encoder.feature_dim;
        PretrainModel {
            encoder: Encoder::new(encoder.clone()),
            operator: CombinationOperator::new(operator, dim),
            heads: PretrainHeads::new(heads, dim),
        }
    }

    pub fn from_config(config: &PretrainConfig) -> Self {
        PretrainModel::new(&config.encoder, config.operator, config.heads)
    }

    pub fn init_params(&self, seed: u64) -> ParameterSet<f32> {
        let mut rng = stream(seed, "init", &[]);
        let mut p = self.encoder.init_params(&mut rng);
        p.extend(self.operator.init_params(&mut rng));
        p.extend(self.heads.init_params(&mut rng));
        p
    }

    /// `(encoder, operator, heads)` scalar parameter counts.
    pub fn param_counts(&self) -> (usize, usize, usize) {
        (self.encoder.param_count(), self.operator.param_count(), self.heads.param_count())
    }
}

/// Where the triplets of one evaluation come from.
pub enum TripletSource<'a, R: Rng + ?Sized> {
    /// Mine from the current features; the bank is updated first for the
    /// centroid variant.
    Mine { config: &'a TripletConfig, bank: &'a mut CentroidBank, rng: &'a mut R },
    /// Use a fixed list, e.g. to make the objective a smooth function of the
    /// parameters for gradient checking.
    Fixed { triplets: &'a [Triplet], bank: &'a CentroidBank, margin: f64 },
}

fn to_features<T: Scalar>(tape: &Tape<T>, v: Var, labels: Vec<GestureLabel>) -> Result<LabeledFeatures, ModelError> {
    LabeledFeatures::new(tape.value(v).cast(), labels)
}

/// Record the objective for one batch on `tape`: encode, combine all
/// direction/modifier single pairs, mine triplets and sum the loss terms.
pub fn batch_objective<T: Scalar, R: Rng + ?Sized>(
    model: &PretrainModel,
    tape: &mut Tape<T>,
    params: &ParameterSet<T>,
    x: Var,
    labels: &[GestureLabel],
    weights: &LossWeights,
    source: TripletSource<'_, R>,
) -> Result<(Var, LossBreakdown, Vec<Triplet>), PretrainError> {
    let z = model.encoder.forward(tape, params, x)?;
    let idx = |keep: fn(GestureLabel) -> bool| (0..labels.len()).filter(|&i| keep(labels[i])).collect::<Vec<_>>();
    let dirs = idx(|l| l.is_single() && l.direction.is_active());
    let mods = idx(|l| l.is_single() && l.modifier.is_active());
    let combos = idx(|l| l.is_combination());
    if dirs.is_empty() || mods.is_empty() || combos.is_empty() {
        return Err(PretrainError::Config("batch needs direction singles, modifier singles and combinations".into()));
    }
    let pairs: Vec<(usize, usize)> = dirs.iter().flat_map(|&i| mods.iter().map(move |&j| (i, j))).collect();
    let a = tape.gather_rows(z, &pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let b = tape.gather_rows(z, &pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    let dc: Vec<usize> = pairs.iter().map(|p| labels[p.0].direction.index()).collect();
    let mc: Vec<usize> = pairs.iter().map(|p| labels[p.1].modifier.index()).collect();
    let synth = model.operator.forward(tape, params, a, &dc, b, &mc)?;
    let synth_labels: Vec<GestureLabel> = pairs.iter().map(|p| GestureLabel::new(labels[p.0].direction, labels[p.1].modifier)).collect();
    let real_combos = tape.gather_rows(z, &combos)?;
    let combo_labels: Vec<GestureLabel> = combos.iter().map(|&i| labels[i]).collect();

    let (triplets, bank, margin) = match source {
        TripletSource::Fixed { triplets, bank, margin } => (triplets.to_vec(), bank, margin),
        TripletSource::Mine { config, bank, rng } => {
            let real_f = to_features(tape, real_combos, combo_labels)?;
            let synth_f = to_features(tape, synth, synth_labels.clone())?;
            if config.variant == crate::losses::TripletVariant::Centroids {
                bank.update(Side::Real, &real_f, config.momentum)?;
                bank.update(Side::Synthetic, &synth_f, config.momentum)?;
            }
            let (t, diag) = mine_triplets(config, &real_f, &synth_f, bank, rng)?;
            if diag.skipped > 0 {
                log::trace!("triplet mining skipped {} of {} anchors", diag.skipped, diag.anchors);
            }
            (t, &*bank, config.margin)
        }
    };
    let inputs = ObjectiveInputs { real: z, real_labels: labels, real_combos, synth, synth_labels: &synth_labels, triplets: &triplets };
    let (loss, breakdown) = total_loss(tape, &model.heads, params, &inputs, bank, margin, weights)?;
    Ok((loss, breakdown, triplets))
}

/// One batch with frozen triplets as an [`Objective`] for gradient checking.
pub struct FixedBatchObjective<'a> {
    pub model: &'a PretrainModel,
    pub input: &'a Tensor<f32>,
    pub labels: &'a [GestureLabel],
    pub triplets: &'a [Triplet],
    pub bank: &'a CentroidBank,
    pub margin: f64,
    pub weights: &'a LossWeights,
}

impl Objective for FixedBatchObjective<'_> {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParameterSet<T>) -> Result<Var, NnError> {
        let x = tape.leaf(self.input.cast());
        let source = TripletSource::<Stream>::Fixed { triplets: self.triplets, bank: self.bank, margin: self.margin };
        batch_objective(self.model, tape, params, x, self.labels, self.weights, source).map(|r| r.0).map_err(|e| match e {
            PretrainError::Nn(e) | PretrainError::Model(ModelError::Nn(e)) | PretrainError::Loss(LossError::Nn(e)) => e,
            other => NnError::Shape(other.to_string()),
        })
    }
}

fn check_classes(dataset: &Dataset, per_class: usize) -> Result<Vec<Vec<usize>>, PretrainError> {
    let by_class = dataset.indices_by_class();
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < per_class {
            let label = GestureLabel::from_class_index(c).expect("class index in range");
            return Err(PretrainError::Config(format!("class {label} has {} windows, batches need {per_class}", idx.len())));
        }
    }
    Ok(by_class)
}

/// Add noise class by class; windows are grouped by class in the output.
fn noisy_batch<R: Rng + ?Sized>(dataset: &Dataset, groups: &[Vec<usize>], snr_db: Option<f64>, rng: &mut R) -> Result<Vec<Window>, PretrainError> {
    let mut out = Vec::new();
    for g in groups.iter().filter(|g| !g.is_empty()) {
        let windows: Vec<Window> = g.iter().map(|&i| dataset.windows[i].clone()).collect();
        out.extend(inject_noise(&windows, snr_db, rng)?);
    }
    Ok(out)
}

/// Draw `per_class` windows of every class without replacement and add
/// per-class noise at `snr_db`.
pub fn make_batch<R: Rng + ?Sized>(dataset: &Dataset, per_class: usize, snr_db: Option<f64>, rng: &mut R) -> Result<Vec<Window>, PretrainError> {
    let by_class = check_classes(dataset, per_class)?;
    let groups: Vec<Vec<usize>> =
        by_class.iter().map(|idx| sample(rng, idx.len(), per_class).into_iter().map(|k| idx[k]).collect()).collect();
    noisy_batch(dataset, &groups, snr_db, rng)
}

/// Per-class index groups of every batch in one epoch. Each class is
/// shuffled; the epoch has `ceil(min class count / per_class)` batches and a
/// class short of `per_class` items contributes what remains.
pub fn epoch_batches(dataset: &Dataset, per_class: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<Vec<usize>>>, PretrainError> {
    let mut by_class = check_classes(dataset, per_class)?;
    let mut rng = stream(seed, "pretrain-epoch", &[epoch as u64]);
    by_class.iter_mut().for_each(|idx| idx.shuffle(&mut rng));
    let smallest = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let batches = smallest.div_ceil(per_class);
    Ok((0..batches)
        .map(|b| by_class.iter().map(|idx| idx[(b * per_class).min(idx.len())..((b + 1) * per_class).min(idx.len())].to_vec()).collect())
        .collect())
}

/// Tracks the best validation value and signals when `patience` epochs pass
/// without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(value < b) => {
                if epoch - self.best_epoch().unwrap_or(0) >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, value));
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.map(|b| b.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_total: f64,
    pub train_triplet: f64,
    pub train_ce_real: f64,
    pub train_ce_synth: f64,
    pub val_loss: f64,
}

/// Frozen result of one pretraining run: parameters from the best
/// validation epoch plus the trace and configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedBundle {
    pub model: PretrainModel,
    pub params: ParameterSet<f32>,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
    pub config: PretrainConfig,
}

pub const TRACE_FILE: &str = "trace.csv";

impl TrainedBundle {
    pub fn param_counts(&self) -> (usize, usize, usize) {
        self.model.param_counts()
    }

    /// Encode windows with the frozen encoder.
    pub fn encode(&self, windows: &[&Window]) -> Result<LabeledFeatures, ModelError> {
        self.model.encoder.encode(&self.params, windows)
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,steps,train_total,train_triplet,train_ce_real,train_ce_synth,val_loss\n");
        for r in &self.trace {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch, r.steps, r.train_total, r.train_triplet, r.train_ce_real, r.train_ce_synth, r.val_loss
            );
        }
        s
    }

    /// Checkpoint plus metadata and the epoch trace in `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PretrainError> {
        let (e, o, h) = self.param_counts();
        let mut meta = BTreeMap::new();
        meta.insert("config".to_string(), to_json(&self.config)?);
        meta.insert("trace".to_string(), to_json(&self.trace)?);
        meta.insert("best_epoch".to_string(), self.best_epoch.to_string());
        meta.insert("param_counts".to_string(), format!("encoder={e};operator={o};heads={h}"));
        save_checkpoint(dir, &self.params, &meta)?;
        std::fs::write(dir.join(TRACE_FILE), self.trace_csv()).map_err(|e| PretrainError::Bundle(format!("{}: {e}", dir.display())))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PretrainError> {
        let (params, meta) = load_checkpoint(dir)?;
        let field = |k: &str| meta.get(k).ok_or_else(|| PretrainError::Bundle(format!("checkpoint lacks `{k}`")));
        let config: PretrainConfig = serde_json::from_str(field("config")?).map_err(|e| PretrainError::Bundle(e.to_string()))?;
        let trace: Vec<EpochRecord> = serde_json::from_str(field("trace")?).map_err(|e| PretrainError::Bundle(e.to_string()))?;
        let best_epoch = field("best_epoch")?.parse().map_err(|_| PretrainError::Bundle("bad best_epoch".into()))?;
        Ok(TrainedBundle { model: PretrainModel::from_config(&config), params, best_epoch, trace, config })
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, PretrainError> {
    serde_json::to_string(value).map_err(|e| PretrainError::Bundle(e.to_string()))
}

fn class_labels(dataset: &Dataset, idx: &[usize]) -> Vec<GestureLabel> {
    idx.iter().map(|&i| dataset.windows[i].label).collect()
}

/// Mean total loss over clean, fixed validation batches.
fn validation_loss(
    model: &PretrainModel,
    params: &ParameterSet<f32>,
    val: &Dataset,
    config: &PretrainConfig,
    bank: &CentroidBank,
) -> Result<f64, PretrainError> {
    let batches = epoch_batches(val, config.per_class, config.seed, usize::MAX)?;
    let mut bank = bank.clone();
    let mut rng = stream(config.seed, "pretrain-val-mining", &[]);
    let mut total = 0.0;
    for groups in &batches {
        let idx: Vec<usize> = groups.concat();
        let windows: Vec<&Window> = idx.iter().map(|&i| &val.windows[i]).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(windows_to_tensor(&windows, model.encoder.config.in_channels)?);
        let source = TripletSource::Mine { config: &config.triplet, bank: &mut bank, rng: &mut rng };
        let (_, b, _) = batch_objective(model, &mut tape, params, x, &class_labels(val, &idx), &config.loss_weights, source)?;
        total += b.total;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Pretrain on `pre`, early-stopping on the clean total loss of `val`.
pub fn pretrain(pre: &Dataset, val: &Dataset, config: &PretrainConfig) -> Result<TrainedBundle, PretrainError> {
    config.validate()?;
    check_classes(val, config.per_class)?;
    let model = PretrainModel::from_config(config);
    let mut params = model.init_params(config.seed);
    let mut opt = AdamW::new(config.optimizer, &params);
    let mut bank = CentroidBank::new(config.encoder.feature_dim);
    let mut mining_rng = stream(config.seed, "pretrain-mining", &[]);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut trace = Vec::new();

    for epoch in 0..config.max_epochs {
        let mut batches = epoch_batches(pre, config.per_class, config.seed, epoch)?;
        if let Some(cap) = config.max_steps_per_epoch {
            batches.truncate(cap);
        }
        let mut sums = LossBreakdown::default();
        for (step, groups) in batches.iter().enumerate() {
            let mut noise_rng = stream(config.seed, "pretrain-noise", &[epoch as u64, step as u64]);
            let windows = noisy_batch(pre, groups, config.snr_db, &mut noise_rng)?;
            let labels: Vec<GestureLabel> = windows.iter().map(|w| w.label).collect();
            params.zero_grad();
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(windows_to_tensor(&windows.iter().collect::<Vec<_>>(), config.encoder.in_channels)?);
            let source = TripletSource::Mine { config: &config.triplet, bank: &mut bank, rng: &mut mining_rng };
            let (loss, terms, _) = match batch_objective(&model, &mut tape, &params, x, &labels, &config.loss_weights, source) {
                Err(PretrainError::Loss(LossError::Nn(NnError::NonFinite { .. }))) | Err(PretrainError::Nn(NnError::NonFinite { .. })) => {
                    return Err(PretrainError::NonFinite { epoch, step, terms: LossBreakdown::default() })
                }
                other => other?,
            };
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, &mut params)?;
            opt.step(&mut params)?;
            if params.iter().any(|(_, p)| !p.value.all_finite()) {
                return Err(PretrainError::NonFinite { epoch, step, terms });
            }
            sums.total += terms.total;
            sums.triplet += terms.triplet;
            sums.ce_real += terms.ce_real;
            sums.ce_synth += terms.ce_synth;
        }
        let n = batches.len().max(1) as f64;
        let val_loss = validation_loss(&model, &params, val, config, &bank)?;
        if !val_loss.is_finite() {
            return Err(PretrainError::NonFinite { epoch, step: batches.len(), terms: sums });
        }
        trace.push(EpochRecord {
            epoch,
            steps: batches.len(),
            train_total: sums.total / n,
            train_triplet: sums.triplet / n,
            train_ce_real: sums.ce_real / n,
            train_ce_synth: sums.ce_synth / n,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {:.4} val {val_loss:.4}", sums.total / n);
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    best.zero_grad();
    Ok(TrainedBundle { model, params: best, best_epoch: stopper.best_epoch().unwrap_or(0), trace, config: config.clone() })
}
