//! Triplet mining (basic, hard, centroids), the centroid moving-average bank
//! and the pretraining objective.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::GestureLabel;
use crate::model::{LabeledFeatures, PretrainHeads};
use crate::nncore::{NnError, ParameterSet, Scalar, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("loss configuration error: {0}")]
    Config(String),
    #[error("triplet mining error: {0}")]
    Mining(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletVariant {
    Basic,
    Hard,
    Centroids,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub variant: TripletVariant,
    pub margin: f64,
    /// Triplets per anchor for the basic variant.
    pub per_anchor: usize,
    /// Centroid moving-average momentum.
    pub momentum: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { variant: TripletVariant::Basic, margin: 1.0, per_anchor: 3, momentum: 0.9 }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin > 0.0) {
            return Err(LossError::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.per_anchor == 0 {
            return Err(LossError::Config("per_anchor must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(LossError::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Real,
    Synthetic,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Real => Side::Synthetic,
            Side::Synthetic => Side::Real,
        }
    }

    fn offset(self) -> usize {
        match self {
            Side::Real => 0,
            Side::Synthetic => 16,
        }
    }
}

/// A feature referenced by a triplet: a row of the real or synthetic
/// combination set, or a bank centroid `(side, combo index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Item {
    Real(usize),
    Synthetic(usize),
    Centroid(Side, usize),
}

impl Item {
    fn at(side: Side, i: usize) -> Item {
        match side {
            Side::Real => Item::Real(i),
            Side::Synthetic => Item::Synthetic(i),
        }
    }

    pub fn side(self) -> Side {
        match self {
            Item::Real(_) => Side::Real,
            Item::Synthetic(_) => Side::Synthetic,
            Item::Centroid(s, _) => s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: Item,
    pub positive: Item,
    pub negative: Item,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MiningDiagnostics {
    pub anchors: usize,
    /// Anchors without a positive or negative candidate.
    pub skipped: usize,
}

/// Moving-average centroids per combination class, kept separately for the
/// real and the synthetic side.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank {
    dim: usize,
    centroids: Vec<Option<Vec<f64>>>,
}

impl CentroidBank {
    pub fn new(dim: usize) -> Self {
        CentroidBank { dim, centroids: vec![None; 32] }
    }

    pub fn get(&self, side: Side, combo: usize) -> Option<&[f64]> {
        self.centroids[side.offset() + combo].as_deref()
    }

    /// Fold the per-class means of `features` (combination labels only) into
    /// the centroids of `side`. The first observation of a class sets the
    /// centroid to the batch mean.
    pub fn update(&mut self, side: Side, features: &LabeledFeatures, momentum: f64) -> Result<(), LossError> {
        if !features.is_empty() && features.dim() != self.dim {
            return Err(LossError::Mining(format!("bank width {}, features width {}", self.dim, features.dim())));
        }
        let mut sums = vec![(vec![0.0f64; self.dim], 0usize); 16];
        for (i, label) in features.labels.iter().enumerate() {
            let c = combo_of(*label)?;
            let (sum, n) = &mut sums[c];
            sum.iter_mut().zip(features.row(i)).for_each(|(s, &v)| *s += v as f64);
            *n += 1;
        }
        for (c, (sum, n)) in sums.into_iter().enumerate() {
            if n == 0 {
                continue;
            }
            let mean = sum.into_iter().map(|s| s / n as f64);
            let slot = &mut self.centroids[side.offset() + c];
            match slot {
                None => *slot = Some(mean.collect()),
                Some(cur) => cur.iter_mut().zip(mean).for_each(|(v, m)| *v = momentum * *v + (1.0 - momentum) * m),
            }
        }
        Ok(())
    }

    fn as_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[32, self.dim]);
        for (r, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                t.data_mut()[r * self.dim..(r + 1) * self.dim].iter_mut().zip(c).for_each(|(o, &v)| *o = T::of(v));
            }
        }
        t
    }
}

fn combo_of(label: GestureLabel) -> Result<usize, LossError> {
    label.combo_index().ok_or_else(|| LossError::Mining(format!("{label} is not a combination label")))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Mine triplets with anchors from both sides and candidates from the
/// opposite side. Hard mining breaks distance ties by lowest row index.
pub fn mine_triplets<R: Rng + ?Sized>(
    config: &TripletConfig,
    real: &LabeledFeatures,
    synth: &LabeledFeatures,
    bank: &CentroidBank,
    rng: &mut R,
) -> Result<(Vec<Triplet>, MiningDiagnostics), LossError> {
    config.validate()?;
    if real.is_empty() || synth.is_empty() {
        return Err(LossError::Mining("need at least one real and one synthetic combination feature".into()));
    }
    let combos = |f: &LabeledFeatures| f.labels.iter().map(|&l| combo_of(l)).collect::<Result<Vec<_>, _>>();
    let (real_c, synth_c) = (combos(real)?, combos(synth)?);
    let mut out = Vec::new();
    let mut diag = MiningDiagnostics::default();
    for (side, own, own_c, other, other_c) in
        [(Side::Real, real, &real_c, synth, &synth_c), (Side::Synthetic, synth, &synth_c, real, &real_c)]
    {
        for (a, &class) in own_c.iter().enumerate() {
            diag.anchors += 1;
            let anchor = Item::at(side, a);
            let before = out.len();
            match config.variant {
                TripletVariant::Basic | TripletVariant::Hard => {
                    let pos: Vec<usize> = (0..other.len()).filter(|&j| other_c[j] == class).collect();
                    let neg: Vec<usize> = (0..other.len()).filter(|&j| other_c[j] != class).collect();
                    if pos.is_empty() || neg.is_empty() {
                        diag.skipped += 1;
                        continue;
                    }
                    if config.variant == TripletVariant::Basic {
                        let k = config.per_anchor.min(pos.len()).min(neg.len());
                        let ps = sample(rng, pos.len(), k);
                        let ns = sample(rng, neg.len(), k);
                        for (p, n) in ps.iter().zip(ns.iter()) {
                            out.push(Triplet { anchor, positive: Item::at(side.opposite(), pos[p]), negative: Item::at(side.opposite(), neg[n]) });
                        }
                    } else {
                        let za = own.row(a);
                        let d = |j: usize| sq_dist(za, other.row(j));
                        let far = pos.iter().copied().fold(pos[0], |b, j| if d(j) > d(b) { j } else { b });
                        let near = neg.iter().copied().fold(neg[0], |b, j| if d(j) < d(b) { j } else { b });
                        out.push(Triplet { anchor, positive: Item::at(side.opposite(), far), negative: Item::at(side.opposite(), near) });
                    }
                }
                TripletVariant::Centroids => {
                    let o = side.opposite();
                    let negs: Vec<usize> = (0..16).filter(|&c| c != class && bank.get(o, c).is_some()).collect();
                    if bank.get(o, class).is_none() || negs.is_empty() {
                        diag.skipped += 1;
                        continue;
                    }
                    let n = negs[rng.random_range(0..negs.len())];
                    out.push(Triplet { anchor, positive: Item::Centroid(o, class), negative: Item::Centroid(o, n) });
                }
            }
            debug_assert!(out.len() > before);
        }
    }
    Ok((out, diag))
}

/// `max(d_ap - d_an + margin, 0)`.
pub fn hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Mean triplet hinge on `tape`; `real` and `synth` are the feature
/// variables the triplets index into. Returns `None` for an empty list.
pub fn triplet_loss<T: Scalar>(
    tape: &mut Tape<T>,
    real: Var,
    synth: Var,
    bank: &CentroidBank,
    triplets: &[Triplet],
    margin: f64,
) -> Result<Option<Var>, LossError> {
    if triplets.is_empty() {
        return Ok(None);
    }
    let nr = tape.value(real).shape()[0];
    let ns = tape.value(synth).shape()[0];
    let uses_bank = triplets.iter().any(|t| matches!(t.positive, Item::Centroid(..)) || matches!(t.negative, Item::Centroid(..)));
    let mut parts = vec![real, synth];
    if uses_bank {
        parts.push(tape.leaf(bank.as_tensor()));
    }
    let pool = tape.concat_rows(&parts)?;
    let index = |it: Item| match it {
        Item::Real(i) => i,
        Item::Synthetic(j) => nr + j,
        Item::Centroid(s, c) => nr + ns + s.offset() + c,
    };
    let a = tape.gather_rows(pool, &triplets.iter().map(|t| index(t.anchor)).collect::<Vec<_>>())?;
    let p = tape.gather_rows(pool, &triplets.iter().map(|t| index(t.positive)).collect::<Vec<_>>())?;
    let n = tape.gather_rows(pool, &triplets.iter().map(|t| index(t.negative)).collect::<Vec<_>>())?;
    let dap = tape.row_sq_dist(a, p)?;
    let dan = tape.row_sq_dist(a, n)?;
    let gap = tape.sub(dap, dan)?;
    let shifted = tape.add_scalar(gap, T::of(margin));
    let h = tape.relu(shifted);
    Ok(Some(tape.mean(h)?))
}

/// Weights of the three objective terms; a zero weight disables a term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub triplet: f64,
    pub ce_real: f64,
    pub ce_synth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { triplet: 1.0, ce_real: 1.0, ce_synth: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let w = [self.triplet, self.ce_real, self.ce_synth];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LossError::Config("loss weights must be finite and non-negative".into()));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(LossError::Config("all loss terms are disabled".into()));
        }
        Ok(())
    }
}

/// Term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub triplet: f64,
    pub ce_real: f64,
    pub ce_synth: f64,
    pub triplets: usize,
    /// True when the triplet term was enabled but no triplet was mined.
    pub empty_triplets: bool,
}

/// Mean over items of the direction and modifier cross-entropies, averaged
/// over the two heads.
pub fn heads_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &PretrainHeads,
    params: &ParameterSet<T>,
    z: Var,
    labels: &[GestureLabel],
) -> Result<Var, LossError> {
    let (ld, lm) = heads.forward(tape, params, z)?;
    let dirs: Vec<usize> = labels.iter().map(|l| l.direction.index()).collect();
    let mods: Vec<usize> = labels.iter().map(|l| l.modifier.index()).collect();
    let cd = tape.softmax_cross_entropy(ld, &dirs)?;
    let cm = tape.softmax_cross_entropy(lm, &mods)?;
    let sum = tape.add(cd, cm)?;
    Ok(tape.scale(sum, T::of(0.5)))
}

/// Inputs to [`total_loss`] that live on the tape.
pub struct ObjectiveInputs<'a> {
    /// All real features of the batch (singles and combinations).
    pub real: Var,
    pub real_labels: &'a [GestureLabel],
    /// Rows of `real` holding combinations, in the order used by the triplets.
    pub real_combos: Var,
    pub synth: Var,
    pub synth_labels: &'a [GestureLabel],
    pub triplets: &'a [Triplet],
}

/// Weighted sum of the enabled terms.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &PretrainHeads,
    params: &ParameterSet<T>,
    inputs: &ObjectiveInputs,
    bank: &CentroidBank,
    margin: f64,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown), LossError> {
    weights.validate()?;
    let mut terms = Vec::new();
    let mut b = LossBreakdown { triplets: inputs.triplets.len(), ..Default::default() };
    if weights.triplet > 0.0 {
        match triplet_loss(tape, inputs.real_combos, inputs.synth, bank, inputs.triplets, margin)? {
            Some(t) => {
                b.triplet = tape.scalar(t).as_f64();
                terms.push(tape.scale(t, T::of(weights.triplet)));
            }
            None => b.empty_triplets = true,
        }
    }
    if weights.ce_real > 0.0 {
        let t = heads_cross_entropy(tape, heads, params, inputs.real, inputs.real_labels)?;
        b.ce_real = tape.scalar(t).as_f64();
        terms.push(tape.scale(t, T::of(weights.ce_real)));
    }
    if weights.ce_synth > 0.0 {
        let t = heads_cross_entropy(tape, heads, params, inputs.synth, inputs.synth_labels)?;
        b.ce_synth = tape.scalar(t).as_f64();
        terms.push(tape.scale(t, T::of(weights.ce_synth)));
    }
    let total = if terms.is_empty() {
        let zero = tape.leaf(Tensor::scalar(T::zero()));
        tape.scale(zero, T::one())
    } else {
        tape.sum_scalars(&terms)?
    };
    b.total = tape.scalar(total).as_f64();
    if !b.total.is_finite() {
        return Err(LossError::Nn(NnError::NonFinite { layer: "total_loss".into() }));
    }
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Direction, Modifier};
    use crate::model::HeadsSize;
    use crate::rng::stream;

    fn lab(d: Direction, m: Modifier) -> GestureLabel {
        GestureLabel::new(d, m)
    }

    fn feats(rows: &[&[f32]], labels: Vec<GestureLabel>) -> LabeledFeatures {
        let dim = rows[0].len();
        LabeledFeatures::new(Tensor::new(vec![rows.len(), dim], rows.concat()).unwrap(), labels).unwrap()
    }

    #[test]
    fn only_valid_assignment() {
        let up_pinch = lab(Direction::Up, Modifier::Pinch);
        let real = feats(&[&[0.0]], vec![up_pinch]);
        let synth = feats(&[&[1.0], &[2.0]], vec![up_pinch, lab(Direction::Up, Modifier::Thumb)]);
        for variant in [TripletVariant::Basic, TripletVariant::Hard] {
            let cfg = TripletConfig { variant, ..Default::default() };
            let (ts, diag) = mine_triplets(&cfg, &real, &synth, &CentroidBank::new(1), &mut stream(0, "m", &[])).unwrap();
            assert_eq!(ts[0], Triplet { anchor: Item::Real(0), positive: Item::Synthetic(0), negative: Item::Synthetic(1) });
            // synthetic anchors lack a real negative or a real positive
            assert_eq!(diag.skipped, 2);
            assert_eq!(ts.len(), 1);
        }
    }

    #[test]
    fn hard_picks_far_positive_near_negative() {
        let up_pinch = lab(Direction::Up, Modifier::Pinch);
        let other = lab(Direction::Down, Modifier::Pinch);
        let real = feats(&[&[0.0]], vec![up_pinch]);
        let synth = feats(&[&[1.0], &[3.0], &[2.0], &[5.0]], vec![up_pinch, up_pinch, other, other]);
        let cfg = TripletConfig { variant: TripletVariant::Hard, ..Default::default() };
        let (ts, _) = mine_triplets(&cfg, &real, &synth, &CentroidBank::new(1), &mut stream(0, "m", &[])).unwrap();
        assert_eq!(ts[0], Triplet { anchor: Item::Real(0), positive: Item::Synthetic(1), negative: Item::Synthetic(2) });
    }

    #[test]
    fn basic_exhausts_candidates() {
        let up_pinch = lab(Direction::Up, Modifier::Pinch);
        let other = lab(Direction::Left, Modifier::Open);
        let real = feats(&[&[0.0]], vec![up_pinch]);
        let synth = feats(&[&[1.0], &[2.0], &[3.0], &[4.0], &[5.0]], vec![up_pinch, up_pinch, other, other, other]);
        let (ts, _) = mine_triplets(&TripletConfig::default(), &real, &synth, &CentroidBank::new(1), &mut stream(1, "m", &[])).unwrap();
        assert_eq!(ts.iter().filter(|t| t.anchor == Item::Real(0)).count(), 2);
    }

    #[test]
    fn hinge_values() {
        assert_eq!(hinge(0.0, 2.0, 1.0), 0.0);
        assert_eq!(hinge(9.0, 4.0, 1.0), 6.0);
        assert_eq!(hinge(0.0, 0.0, 1.0), 1.0);
    }

    #[test]
    fn tape_loss_matches_hinge() {
        let mut tape = Tape::<f64>::new();
        let real = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let synth = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 2.0]).unwrap());
        let t = [Triplet { anchor: Item::Real(0), positive: Item::Synthetic(0), negative: Item::Synthetic(1) }];
        let l = triplet_loss(&mut tape, real, synth, &CentroidBank::new(2), &t, 1.0).unwrap().unwrap();
        assert_eq!(tape.scalar(l), 6.0);
        let same = [Triplet { anchor: Item::Real(0), positive: Item::Real(0), negative: Item::Real(0) }];
        let l = triplet_loss(&mut tape, real, synth, &CentroidBank::new(2), &same, 1.0).unwrap().unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        assert!(triplet_loss(&mut tape, real, synth, &CentroidBank::new(2), &[], 1.0).unwrap().is_none());
    }

    #[test]
    fn centroid_update_rules() {
        let c = lab(Direction::Up, Modifier::Thumb);
        let mut bank = CentroidBank::new(1);
        bank.update(Side::Real, &feats(&[&[0.0]], vec![c]), 0.9).unwrap();
        bank.update(Side::Real, &feats(&[&[1.0]], vec![c]), 0.9).unwrap();
        assert!((bank.get(Side::Real, 0).unwrap()[0] - 0.1).abs() < 1e-12);
        assert!(bank.get(Side::Synthetic, 0).is_none());

        let mut frozen = CentroidBank::new(1);
        frozen.update(Side::Synthetic, &feats(&[&[2.0], &[4.0]], vec![c, c]), 1.0).unwrap();
        frozen.update(Side::Synthetic, &feats(&[&[-7.0]], vec![c]), 1.0).unwrap();
        assert_eq!(frozen.get(Side::Synthetic, 0).unwrap()[0], 3.0);

        let mut fixed = CentroidBank::new(1);
        for _ in 0..20 {
            fixed.update(Side::Real, &feats(&[&[0.3]], vec![c]), 0.7).unwrap();
            assert!((fixed.get(Side::Real, 0).unwrap()[0] - 0.3f32 as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_mining_uses_opposite_bank() {
        let a = lab(Direction::Up, Modifier::Thumb);
        let b = lab(Direction::Down, Modifier::Fist);
        let real = feats(&[&[0.0]], vec![a]);
        let synth = feats(&[&[1.0]], vec![b]);
        let mut bank = CentroidBank::new(1);
        let cfg = TripletConfig { variant: TripletVariant::Centroids, ..Default::default() };
        let (ts, diag) = mine_triplets(&cfg, &real, &synth, &bank, &mut stream(0, "m", &[])).unwrap();
        assert!(ts.is_empty());
        assert_eq!(diag.skipped, 2);
        bank.update(Side::Real, &real, 0.9).unwrap();
        bank.update(Side::Synthetic, &feats(&[&[1.0], &[2.0]], vec![a, b]), 0.9).unwrap();
        let (ts, _) = mine_triplets(&cfg, &real, &synth, &bank, &mut stream(0, "m", &[])).unwrap();
        let ca = a.combo_index().unwrap();
        let cb = b.combo_index().unwrap();
        assert_eq!(ts, vec![Triplet { anchor: Item::Real(0), positive: Item::Centroid(Side::Synthetic, ca), negative: Item::Centroid(Side::Synthetic, cb) }]);
    }

    fn uniform_setup(weights: LossWeights) -> LossBreakdown {
        let heads = PretrainHeads::new(HeadsSize::Small, 4);
        let mut params: ParameterSet<f64> = heads.init_params(&mut stream(0, "h", &[])).cast();
        params.iter_mut().for_each(|(_, p)| p.value.fill(0.0));
        let mut tape = Tape::<f64>::new();
        let labels = vec![lab(Direction::Up, Modifier::NoMod), lab(Direction::Left, Modifier::Open)];
        let real = tape.leaf(Tensor::new(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap());
        let combos = tape.gather_rows(real, &[1]).unwrap();
        let synth_labels = vec![lab(Direction::Left, Modifier::Open)];
        let synth = tape.leaf(Tensor::new(vec![1, 4], vec![4.0, 5.0, 6.0, 7.0]).unwrap());
        let triplets = [Triplet { anchor: Item::Real(0), positive: Item::Synthetic(0), negative: Item::Real(0) }];
        let inputs = ObjectiveInputs { real, real_labels: &labels, real_combos: combos, synth, synth_labels: &synth_labels, triplets: &triplets };
        total_loss(&mut tape, &heads, &params, &inputs, &CentroidBank::new(4), 1.0, &weights).unwrap().1
    }

    #[test]
    fn objective_terms_and_toggles() {
        let ln5 = 5f64.ln();
        let all = uniform_setup(LossWeights::default());
        assert!((all.ce_real - ln5).abs() < 1e-12 && (all.ce_synth - ln5).abs() < 1e-12);
        // anchor coincides with positive and negative: hinge equals the margin
        assert_eq!(all.triplet, 1.0);
        assert!((all.total - (1.0 + 2.0 * ln5)).abs() < 1e-12);
        let ce_only = uniform_setup(LossWeights { triplet: 0.0, ce_real: 1.0, ce_synth: 0.0 });
        assert_eq!(ce_only.total, ce_only.ce_real);
        assert!(LossWeights { triplet: 0.0, ce_real: 0.0, ce_synth: 0.0 }.validate().is_err());
    }
}
