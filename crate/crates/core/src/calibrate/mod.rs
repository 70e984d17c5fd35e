//! Calibration sets for a new subject (partial, augmented, full supervision)
//! and the downstream two-head classifiers trained on them.

mod knn;
mod lda;
mod logistic;
mod tree;

pub use knn::Knn;
pub use lda::Lda;
pub use logistic::Logistic;
pub use tree::{Forest, Tree};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Direction, GestureLabel, Modifier, Window};
use crate::model::{combine_all_pairs, CombinationOperator, LabeledFeatures, ModelError};
use crate::nncore::ParameterSet;
use crate::pretrain::TrainedBundle;
use crate::rng::stream;

/// Outputs per head: four active values plus the "none" value.
pub const N_OUT: usize = 5;

pub const DEFAULT_SYNTH_PER_CLASS: usize = 500;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("calibration set error: {0}")]
    Set(String),
    #[error("downstream fit error: {0}")]
    Fit(String),
    #[error("model serialization error: {0}")]
    Serialize(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionMode {
    Partial,
    Augmented,
    Full,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 3] = [SupervisionMode::Partial, SupervisionMode::Augmented, SupervisionMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            SupervisionMode::Partial => "partial",
            SupervisionMode::Augmented => "augmented",
            SupervisionMode::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    RealSingle,
    RealCombo,
    SyntheticCombo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub mode: SupervisionMode,
    pub features: LabeledFeatures,
    pub provenance: Vec<Provenance>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Synthetic combination pool of the calibration singles, capped at
/// `per_class` items per combination class (sampled without replacement).
pub fn synthetic_combos<R: Rng + ?Sized>(
    operator: &CombinationOperator,
    params: &ParameterSet<f32>,
    encoded: &LabeledFeatures,
    per_class: usize,
    rng: &mut R,
) -> Result<LabeledFeatures, CalibrateError> {
    let dirs = encoded.select(&encoded.indices_where(|l| l.is_single() && l.direction.is_active()));
    let mods = encoded.select(&encoded.indices_where(|l| l.is_single() && l.modifier.is_active()));
    for d in Direction::ACTIVE {
        if !dirs.labels.iter().any(|l| l.direction == d) {
            return Err(CalibrateError::Set(format!("no calibration data for direction {}", d.name())));
        }
    }
    for m in Modifier::ACTIVE {
        if !mods.labels.iter().any(|l| l.modifier == m) {
            return Err(CalibrateError::Set(format!("no calibration data for modifier {}", m.name())));
        }
    }
    let pool = combine_all_pairs(operator, params, &dirs, &mods)?;
    let mut by_combo = vec![Vec::new(); 16];
    for (i, l) in pool.labels.iter().enumerate() {
        by_combo[l.combo_index().expect("combination label")].push(i);
    }
    let mut keep = Vec::with_capacity(16 * per_class);
    for (c, idx) in by_combo.iter().enumerate() {
        if idx.len() <= per_class {
            if idx.len() < per_class {
                log::info!("synthetic pool for combination {c} has {} items (< {per_class}); using all", idx.len());
            }
            keep.extend_from_slice(idx);
        } else {
            let mut chosen: Vec<usize> = sample(rng, idx.len(), per_class).into_iter().map(|k| idx[k]).collect();
            chosen.sort_unstable();
            keep.extend(chosen);
        }
    }
    Ok(pool.select(&keep))
}

/// Assemble the calibration set for `mode` from already-encoded calibration
/// windows. Real combinations enter only in full supervision.
pub fn calibration_set_from_features<R: Rng + ?Sized>(
    mode: SupervisionMode,
    operator: &CombinationOperator,
    params: &ParameterSet<f32>,
    encoded: &LabeledFeatures,
    synth_per_class: usize,
    rng: &mut R,
) -> Result<CalibrationSet, CalibrateError> {
    let singles = encoded.select(&encoded.indices_where(GestureLabel::is_single));
    if singles.is_empty() {
        return Err(CalibrateError::Set("calibration data has no single gestures".into()));
    }
    let extra = match mode {
        SupervisionMode::Partial => None,
        SupervisionMode::Full => Some((encoded.select(&encoded.indices_where(GestureLabel::is_combination)), Provenance::RealCombo)),
        SupervisionMode::Augmented => {
            Some((synthetic_combos(operator, params, encoded, synth_per_class, rng)?, Provenance::SyntheticCombo))
        }
    };
    let mut provenance = vec![Provenance::RealSingle; singles.len()];
    let features = match extra {
        None => singles,
        Some((rows, tag)) => {
            provenance.extend(std::iter::repeat_n(tag, rows.len()));
            singles.concat(&rows)?
        }
    };
    Ok(CalibrationSet { mode, features, provenance })
}

/// Encode `calib` with the frozen bundle and build the set for `mode`.
pub fn build_calibration_set<R: Rng + ?Sized>(
    mode: SupervisionMode,
    bundle: &TrainedBundle,
    calib: &Dataset,
    synth_per_class: usize,
    rng: &mut R,
) -> Result<CalibrationSet, CalibrateError> {
    let windows: Vec<&Window> = calib.windows.iter().collect();
    let encoded = bundle.encode(&windows)?;
    calibration_set_from_features(mode, &bundle.model.operator, &bundle.params, &encoded, synth_per_class, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    RandomForest,
    Knn,
    DecisionTree,
    Lda,
    LogisticRegression,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::RandomForest => "random_forest",
            Algorithm::Knn => "knn",
            Algorithm::DecisionTree => "decision_tree",
            Algorithm::Lda => "lda",
            Algorithm::LogisticRegression => "logistic_regression",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSpec {
    pub algorithm: Algorithm,
    pub n_trees: usize,
    /// Candidate features per split; `None` means `floor(sqrt(dim))`.
    pub max_features: Option<usize>,
    pub k: usize,
    pub l2: f64,
    pub max_iter: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for DownstreamSpec {
    fn default() -> Self {
        DownstreamSpec {
            algorithm: Algorithm::RandomForest,
            n_trees: 100,
            max_features: None,
            k: 5,
            l2: 1e-4,
            max_iter: 1000,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

/// Row-major feature view.
pub struct Rows<'a> {
    pub data: &'a [f32],
    pub n: usize,
    pub dim: usize,
}

impl<'a> Rows<'a> {
    pub fn of(f: &'a LabeledFeatures) -> Self {
        Rows { data: f.z.data(), n: f.len(), dim: f.dim() }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.dim + j]
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    (0..values.len()).fold(0, |best, i| if values[i] > values[best] { i } else { best })
}

/// One fitted 5-way classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeadModel {
    Forest(Forest),
    Knn(Knn),
    Tree(Tree),
    Lda(Lda),
    Logistic(Logistic),
}

impl HeadModel {
    fn fit(spec: &DownstreamSpec, x: &Rows, y: &[usize], head: u64) -> Result<HeadModel, CalibrateError> {
        let max_features = spec.max_features.unwrap_or((x.dim as f64).sqrt().floor() as usize).clamp(1, x.dim.max(1));
        Ok(match spec.algorithm {
            Algorithm::RandomForest => HeadModel::Forest(Forest::fit(x, y, spec.n_trees.max(1), max_features, |t| {
                stream(spec.seed, "forest-tree", &[head, t as u64])
            })),
            Algorithm::DecisionTree => {
                HeadModel::Tree(Tree::fit(x, y, (0..x.n).collect(), x.dim, &mut stream(spec.seed, "decision-tree", &[head])))
            }
            Algorithm::Knn => HeadModel::Knn(Knn::fit(x, y, spec.k)),
            Algorithm::Lda => HeadModel::Lda(Lda::fit(x, y)?),
            Algorithm::LogisticRegression => HeadModel::Logistic(Logistic::fit(x, y, spec.l2, spec.max_iter, spec.tolerance)),
        })
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        match self {
            HeadModel::Forest(m) => m.predict(row),
            HeadModel::Knn(m) => m.predict(row),
            HeadModel::Tree(m) => m.predict(row),
            HeadModel::Lda(m) => m.predict(row),
            HeadModel::Logistic(m) => m.predict(row),
        }
    }
}

/// Independent direction and modifier classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamModel {
    pub algorithm: Algorithm,
    pub dim: usize,
    pub direction: HeadModel,
    pub modifier: HeadModel,
}

fn check_targets(y: &[usize], head: &str) -> Result<(), CalibrateError> {
    if y.iter().all(|&v| v == y[0]) {
        return Err(CalibrateError::Fit(format!("{head} targets contain a single class")));
    }
    Ok(())
}

pub fn fit_downstream(spec: &DownstreamSpec, calib: &CalibrationSet) -> Result<DownstreamModel, CalibrateError> {
    if calib.is_empty() {
        return Err(CalibrateError::Fit("empty calibration set".into()));
    }
    let x = Rows::of(&calib.features);
    let yd: Vec<usize> = calib.features.labels.iter().map(|l| l.direction.index()).collect();
    let ym: Vec<usize> = calib.features.labels.iter().map(|l| l.modifier.index()).collect();
    check_targets(&yd, "direction")?;
    check_targets(&ym, "modifier")?;
    Ok(DownstreamModel {
        algorithm: spec.algorithm,
        dim: x.dim,
        direction: HeadModel::fit(spec, &x, &yd, 0)?,
        modifier: HeadModel::fit(spec, &x, &ym, 1)?,
    })
}

impl DownstreamModel {
    pub fn predict_one(&self, z: &[f32]) -> GestureLabel {
        GestureLabel::new(
            Direction::from_index(self.direction.predict(z)).expect("head output in range"),
            Modifier::from_index(self.modifier.predict(z)).expect("head output in range"),
        )
    }

    /// Predicted label per row; `(NoDir, NoMod)` is a legal outcome.
    pub fn predict(&self, features: &LabeledFeatures) -> Vec<GestureLabel> {
        (0..features.len()).map(|i| self.predict_one(features.row(i))).collect()
    }

    const MAGIC: &'static [u8; 8] = b"CHDSMOD1";

    /// Magic header, algorithm tag, then the bincode-encoded model.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CalibrateError> {
        let mut out = Self::MAGIC.to_vec();
        out.push(self.algorithm.tag());
        out.extend(bincode::serialize(self).map_err(|e| CalibrateError::Serialize(e.to_string()))?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CalibrateError> {
        let header = Self::MAGIC.len();
        if bytes.len() <= header || &bytes[..header] != Self::MAGIC {
            return Err(CalibrateError::Serialize("missing model header".into()));
        }
        let model: DownstreamModel = bincode::deserialize(&bytes[header + 1..]).map_err(|e| CalibrateError::Serialize(e.to_string()))?;
        if model.algorithm.tag() != bytes[header] {
            return Err(CalibrateError::Serialize("algorithm tag does not match payload".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OperatorKind;
    use crate::nncore::Tensor;

    fn lab(d: Direction, m: Modifier) -> GestureLabel {
        GestureLabel::new(d, m)
    }

    /// Eight single classes as tight blobs at distinct corners, `per` items each.
    fn blobs(per: usize, dim: usize) -> LabeledFeatures {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..8 {
            let label = GestureLabel::from_class_index(c).unwrap();
            for k in 0..per {
                data.extend((0..dim).map(|j| if j % 8 == c { 10.0 } else { 0.0 } + ((k * 7 + j) % 5) as f32 * 0.01));
                labels.push(label);
            }
        }
        LabeledFeatures::new(Tensor::new(vec![labels.len(), dim], data).unwrap(), labels).unwrap()
    }

    fn singles_set(f: LabeledFeatures) -> CalibrationSet {
        CalibrationSet { mode: SupervisionMode::Partial, provenance: vec![Provenance::RealSingle; f.len()], features: f }
    }

    #[test]
    fn every_algorithm_separates_blobs() {
        let set = singles_set(blobs(6, 16));
        for algorithm in [Algorithm::RandomForest, Algorithm::Knn, Algorithm::DecisionTree, Algorithm::Lda, Algorithm::LogisticRegression] {
            let spec = DownstreamSpec { algorithm, n_trees: 15, ..Default::default() };
            let m = fit_downstream(&spec, &set).unwrap();
            assert_eq!(m.predict(&set.features), set.features.labels, "{algorithm:?}");
        }
    }

    #[test]
    fn fits_are_deterministic_and_serialize() {
        let set = singles_set(blobs(5, 8));
        for algorithm in [Algorithm::RandomForest, Algorithm::DecisionTree, Algorithm::LogisticRegression, Algorithm::Lda, Algorithm::Knn] {
            let spec = DownstreamSpec { algorithm, n_trees: 10, seed: 9, ..Default::default() };
            let a = fit_downstream(&spec, &set).unwrap();
            let b = fit_downstream(&spec, &set).unwrap();
            assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
            assert_eq!(DownstreamModel::from_bytes(&a.to_bytes().unwrap()).unwrap(), a);
        }
        assert!(DownstreamModel::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn one_nn_recovers_training_labels() {
        let set = singles_set(blobs(4, 8));
        let m = fit_downstream(&DownstreamSpec { algorithm: Algorithm::Knn, k: 1, ..Default::default() }, &set).unwrap();
        assert_eq!(m.predict(&set.features), set.features.labels);
    }

    #[test]
    fn single_class_head_is_degenerate() {
        let f = blobs(3, 8);
        let ups = f.select(&f.indices_where(|l| l.direction == Direction::Up));
        assert!(matches!(fit_downstream(&DownstreamSpec::default(), &singles_set(ups)), Err(CalibrateError::Fit(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax_lowest(&[0.0; 5]), 0);
    }

    fn reference_calib() -> LabeledFeatures {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for label in GestureLabel::all_classes() {
            let n = if label.is_single() { 58 } else { 32 };
            for k in 0..n {
                data.extend([label.class_index().unwrap() as f32, k as f32]);
                labels.push(label);
            }
        }
        LabeledFeatures::new(Tensor::new(vec![labels.len(), 2], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn set_sizes_per_mode() {
        let enc = reference_calib();
        let op = CombinationOperator::new(OperatorKind::Avg, 2);
        let p = ParameterSet::new();
        let mut rng = stream(0, "t", &[]);
        let size = |mode, rng: &mut _| calibration_set_from_features(mode, &op, &p, &enc, 500, rng).unwrap();
        let partial = size(SupervisionMode::Partial, &mut rng);
        assert_eq!(partial.len(), 464);
        assert!(partial.features.labels.iter().all(|l| l.is_single()));
        assert!(partial.provenance.iter().all(|&p| p == Provenance::RealSingle));
        let aug = size(SupervisionMode::Augmented, &mut rng);
        assert_eq!(aug.len(), 464 + 16 * 500);
        assert_eq!(aug.provenance.iter().filter(|&&p| p == Provenance::SyntheticCombo).count(), 8000);
        assert!(!aug.provenance.contains(&Provenance::RealCombo));
        let full = size(SupervisionMode::Full, &mut rng);
        assert_eq!(full.len(), 464 + 16 * 32);
    }

    #[test]
    fn small_pool_is_taken_whole() {
        let enc = reference_calib();
        let keep: Vec<usize> = enc.indices_where(|_| true).into_iter().filter(|&i| i % 29 == 0).collect();
        let small = enc.select(&keep);
        let op = CombinationOperator::new(OperatorKind::Avg, 2);
        let s = synthetic_combos(&op, &ParameterSet::new(), &small, 500, &mut stream(0, "t", &[])).unwrap();
        let dirs = small.indices_where(|l| l.is_single() && l.direction.is_active()).len();
        let mods = small.indices_where(|l| l.is_single() && l.modifier.is_active()).len();
        assert_eq!(s.len(), dirs * mods);
    }

    #[test]
    fn augmented_requires_every_single_class() {
        let enc = reference_calib();
        let no_left = enc.select(&enc.indices_where(|l| l != lab(Direction::Left, Modifier::NoMod)));
        let op = CombinationOperator::new(OperatorKind::Avg, 2);
        let r = calibration_set_from_features(SupervisionMode::Augmented, &op, &ParameterSet::new(), &no_left, 500, &mut stream(0, "t", &[]));
        assert!(matches!(r, Err(CalibrateError::Set(_))));
    }
}
