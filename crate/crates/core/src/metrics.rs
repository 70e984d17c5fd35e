//! Balanced accuracy, confusion matrices and RBF feature-space similarity.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{GestureLabel, NUM_CLASSES, OUTLIER_INDEX};
use crate::model::LabeledFeatures;

pub const DEFAULT_DELTA: f64 = 1.0 / 128.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Single,
    Combo,
    All,
}

impl Subset {
    pub fn classes(self) -> std::ops::Range<usize> {
        match self {
            Subset::Single => 0..8,
            Subset::Combo => 8..NUM_CLASSES,
            Subset::All => 0..NUM_CLASSES,
        }
    }
}

fn class_of(label: GestureLabel) -> Result<usize, MetricsError> {
    label.class_index().ok_or_else(|| MetricsError::Input(format!("{label} is not a valid true label")))
}

/// Mean per-class recall over the classes of `subset`. A prediction of any
/// other class, including the outlier, is an error for its true class.
pub fn balanced_accuracy(truth: &[GestureLabel], pred: &[GestureLabel], subset: Subset) -> Result<f64, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::Input(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    let mut total = [0usize; NUM_CLASSES];
    let mut hit = [0usize; NUM_CLASSES];
    for (&t, &p) in truth.iter().zip(pred) {
        let c = class_of(t)?;
        total[c] += 1;
        hit[c] += usize::from(t == p);
    }
    let mut sum = 0.0;
    for c in subset.classes() {
        if total[c] == 0 {
            let label = GestureLabel::from_class_index(c).expect("class index in range");
            return Err(MetricsError::Input(format!("class {label} absent from true labels")));
        }
        sum += hit[c] as f64 / total[c] as f64;
    }
    Ok(sum / subset.classes().len() as f64)
}

/// Counts with 24 true-class rows and 25 predicted columns (the last one is
/// the `(NoDir, NoMod)` outlier).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

fn column_names() -> Vec<String> {
    let mut names: Vec<String> = GestureLabel::all_classes().iter().map(ToString::to_string).collect();
    names.push(GestureLabel::OUTLIER.to_string());
    names
}

impl ConfusionMatrix {
    pub fn new(truth: &[GestureLabel], pred: &[GestureLabel]) -> Result<Self, MetricsError> {
        if truth.len() != pred.len() {
            return Err(MetricsError::Input(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        let mut counts = vec![vec![0u64; OUTLIER_INDEX + 1]; NUM_CLASSES];
        for (&t, &p) in truth.iter().zip(pred) {
            counts[class_of(t)?][p.column_index()] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        if counts.len() != NUM_CLASSES || counts.iter().any(|r| r.len() != OUTLIER_INDEX + 1) {
            return Err(MetricsError::Input("confusion counts must be 24 x 25".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    /// Row-normalized fractions; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let n: u64 = r.iter().sum();
                r.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
            })
            .collect()
    }

    pub fn recall(&self, class: usize) -> f64 {
        let n: u64 = self.counts[class].iter().sum();
        self.counts[class][class] as f64 / n.max(1) as f64
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn csv_with(&self, cell: impl Fn(usize, usize) -> String) -> String {
        let mut s = String::from("true\\pred");
        for name in column_names() {
            let _ = write!(s, ",{name}");
        }
        s.push('\n');
        for (r, label) in GestureLabel::all_classes().iter().enumerate() {
            let _ = write!(s, "{label}");
            for c in 0..=OUTLIER_INDEX {
                let _ = write!(s, ",{}", cell(r, c));
            }
            s.push('\n');
        }
        s
    }

    pub fn counts_csv(&self) -> String {
        self.csv_with(|r, c| self.counts[r][c].to_string())
    }

    pub fn normalized_csv(&self) -> String {
        let n = self.normalized();
        self.csv_with(|r, c| format!("{:.4}", n[r][c]))
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// `exp(-delta * |z1 - z2|^2)`.
pub fn rbf_similarity(z1: &[f32], z2: &[f32], delta: f64) -> f64 {
    (-delta * sq_dist(z1, z2)).exp()
}

/// Mean kernel value over all pairs of two distinct sets.
pub fn set_sim(a: &[&[f32]], b: &[&[f32]], delta: f64) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Input("set_sim needs non-empty sets".into()));
    }
    let total: f64 = a.iter().map(|x| b.iter().map(|y| rbf_similarity(x, y, delta)).sum::<f64>()).sum();
    Ok(total / (a.len() * b.len()) as f64)
}

/// Mean kernel value over pairs of distinct items of one set.
pub fn set_sim_self(a: &[&[f32]], delta: f64) -> Result<f64, MetricsError> {
    if a.len() < 2 {
        return Err(MetricsError::Input("same-set similarity needs at least 2 items".into()));
    }
    let mut total = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            total += rbf_similarity(a[i], a[j], delta);
        }
    }
    Ok(2.0 * total / (a.len() * (a.len() - 1)) as f64)
}

/// 32 x 32 set similarities: real combination classes (0..16) then
/// synthetic ones (16..32), direction-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub real_within: f64,
    pub synth_within: f64,
    pub matching: f64,
    pub non_matching: f64,
}

impl SimilarityMatrix {
    pub fn summary(&self) -> SimilaritySummary {
        let m = &self.values;
        let real_within = (0..16).map(|i| m[i][i]).sum::<f64>() / 16.0;
        let synth_within = (16..32).map(|i| m[i][i]).sum::<f64>() / 16.0;
        let matching = (0..16).map(|i| m[i + 16][i]).sum::<f64>() / 16.0;
        let mut other = 0.0;
        let mut n = 0usize;
        for i in 0..32 {
            for j in 0..i {
                if i != j + 16 {
                    other += m[i][j];
                    n += 1;
                }
            }
        }
        SimilaritySummary { real_within, synth_within, matching, non_matching: other / n as f64 }
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<String> = GestureLabel::all_classes()
            .into_iter()
            .filter(|l| l.is_combination())
            .flat_map(|l| [format!("real:{l}"), format!("synth:{l}")])
            .collect();
        let ordered: Vec<&String> = names.iter().step_by(2).chain(names.iter().skip(1).step_by(2)).collect();
        let mut s = String::from("class");
        ordered.iter().for_each(|n| {
            let _ = write!(s, ",{n}");
        });
        s.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            let _ = write!(s, "{}", ordered[i]);
            row.iter().for_each(|v| {
                let _ = write!(s, ",{v:.6}");
            });
            s.push('\n');
        }
        s
    }
}

fn rows_by_combo<'a>(f: &'a LabeledFeatures, side: &str) -> Result<Vec<Vec<&'a [f32]>>, MetricsError> {
    let mut groups = vec![Vec::new(); 16];
    for (i, l) in f.labels.iter().enumerate() {
        let c = l.combo_index().ok_or_else(|| MetricsError::Input(format!("{side} set holds non-combination {l}")))?;
        groups[c].push(f.row(i));
    }
    if let Some(c) = groups.iter().position(|g| g.len() < 2) {
        return Err(MetricsError::Input(format!("{side} combination class {c} has fewer than 2 items")));
    }
    Ok(groups)
}

/// Pairwise set similarities between all real and synthetic combination
/// classes; each unordered pair is computed once and mirrored.
pub fn similarity_matrix(
    real: &LabeledFeatures,
    synth: &LabeledFeatures,
    delta: f64,
) -> Result<(SimilarityMatrix, SimilaritySummary), MetricsError> {
    let mut groups = rows_by_combo(real, "real")?;
    groups.extend(rows_by_combo(synth, "synthetic")?);
    let pairs: Vec<(usize, usize)> = (0..32).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let cells: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| if i == j { set_sim_self(&groups[i], delta) } else { set_sim(&groups[i], &groups[j], delta) })
        .collect::<Result<_, _>>()?;
    let mut values = vec![vec![0.0; 32]; 32];
    for (&(i, j), v) in pairs.iter().zip(cells) {
        values[i][j] = v;
        values[j][i] = v;
    }
    let m = SimilarityMatrix { values };
    let s = m.summary();
    Ok((m, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Direction, Modifier};
    use crate::nncore::Tensor;

    #[test]
    fn rbf_values() {
        let z = [0.3f32, -1.0, 2.0];
        assert_eq!(rbf_similarity(&z, &z, DEFAULT_DELTA), 1.0);
        let a = [0.0f32; 2];
        let b = [8.0f32, 8.0];
        assert!((rbf_similarity(&a, &b, DEFAULT_DELTA) - (-1f64).exp()).abs() < 1e-12);
        assert_eq!(rbf_similarity(&a, &[1e30, 0.0], DEFAULT_DELTA), 0.0);
    }

    #[test]
    fn set_sim_cases() {
        let z: &[f32] = &[1.0, 2.0];
        assert_eq!(set_sim(&[z], &[z], DEFAULT_DELTA).unwrap(), 1.0);
        let (p, q): (&[f32], &[f32]) = (&[0.0, 0.0], &[8.0, 8.0]);
        assert!((set_sim_self(&[p, q], DEFAULT_DELTA).unwrap() - (-1f64).exp()).abs() < 1e-12);
        assert!(set_sim_self(&[p], DEFAULT_DELTA).is_err());
        let far: &[f32] = &[1e20, 1e20];
        assert_eq!(set_sim(&[p, q], &[far], DEFAULT_DELTA).unwrap(), 0.0);
    }

    #[test]
    fn balanced_accuracy_cases() {
        let up = GestureLabel::new(Direction::Up, Modifier::NoMod);
        let down = GestureLabel::new(Direction::Down, Modifier::NoMod);
        let truth = GestureLabel::all_classes();
        assert_eq!(balanced_accuracy(&truth, &truth, Subset::All).unwrap(), 1.0);
        let mut pred = truth.clone();
        pred[0] = down;
        pred[1] = up;
        assert_eq!(balanced_accuracy(&truth, &pred, Subset::Single).unwrap(), 6.0 / 8.0);
        let two = [up, down];
        assert!(balanced_accuracy(&two, &[up, GestureLabel::OUTLIER], Subset::All).is_err());
        assert!(balanced_accuracy(&two, &two, Subset::Combo).is_err());
    }

    #[test]
    fn confusion_patterns() {
        let truth = GestureLabel::all_classes();
        let cm = ConfusionMatrix::new(&truth, &truth).unwrap();
        for (r, row) in cm.normalized().iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(v, if r == c { 1.0 } else { 0.0 });
            }
        }
        let out = ConfusionMatrix::new(&truth, &vec![GestureLabel::OUTLIER; truth.len()]).unwrap();
        assert!(out.counts().iter().all(|r| r[OUTLIER_INDEX] == 1 && r.iter().sum::<u64>() == 1));
        let csv = out.counts_csv();
        assert_eq!(csv.lines().count(), 25);
        assert!(csv.lines().next().unwrap().ends_with(",NoDir&NoMod"));
    }

    fn combos_at(offsets: impl Fn(usize) -> f32, per: usize) -> LabeledFeatures {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for l in GestureLabel::all_classes().into_iter().filter(|l| l.is_combination()) {
            for _ in 0..per {
                data.extend([offsets(l.combo_index().unwrap()), 0.0]);
                labels.push(l);
            }
        }
        LabeledFeatures::new(Tensor::new(vec![labels.len(), 2], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn identical_features_give_all_ones() {
        let f = combos_at(|_| 0.5, 3);
        let (m, s) = similarity_matrix(&f, &f, DEFAULT_DELTA).unwrap();
        assert!(m.values.iter().flatten().all(|&v| v == 1.0));
        assert_eq!((s.real_within, s.synth_within, s.matching, s.non_matching), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn separated_classes_give_identity() {
        let real = combos_at(|c| c as f32 * 1e3, 2);
        let synth = combos_at(|c| 5e5 + c as f32 * 1e3, 2);
        let (m, s) = similarity_matrix(&real, &synth, DEFAULT_DELTA).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(m.values[i][j], if i == j { 1.0 } else { 0.0 });
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
        }
        assert_eq!(s.matching, 0.0);
        assert_eq!(m.to_csv().lines().count(), 33);
    }

    #[test]
    fn missing_class_is_an_error() {
        let f = combos_at(|_| 0.0, 2);
        let partial = f.select(&(2..f.len()).collect::<Vec<_>>());
        assert!(similarity_matrix(&partial, &f, DEFAULT_DELTA).is_err());
    }
}
