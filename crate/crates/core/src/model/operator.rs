use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledFeatures, ModelError};
use crate::data::{Direction, GestureLabel, Modifier};
use crate::nncore::{Layer, NnError, ParameterSet, Scalar, Sequential, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    /// Element-wise mean, no parameters.
    Avg,
    /// Class-conditioned MLP over `[z_dir, onehot(dir), z_mod, onehot(mod)]`.
    Mlp,
}

pub const MLP_HIDDEN: usize = 85;

/// Maps a (direction single, modifier single) feature pair to a synthetic
/// combination feature. Parameters use the `operator.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinationOperator {
    pub kind: OperatorKind,
    dim: usize,
    mlp: Option<Sequential>,
}

/// One output of the combination operator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFeature {
    pub z: Vec<f32>,
    pub label: GestureLabel,
}

fn one_hot<T: Scalar>(classes: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros(&[classes.len(), 4]);
    for (r, &c) in classes.iter().enumerate() {
        t.data_mut()[r * 4 + c] = T::one();
    }
    t
}

impl CombinationOperator {
    pub fn new(kind: OperatorKind, dim: usize) -> Self {
        let mlp = match kind {
            OperatorKind::Avg => None,
            OperatorKind::Mlp => Some(Sequential::new(vec![
                Layer::dense("operator.hidden", 2 * dim + 8, MLP_HIDDEN),
                Layer::Relu,
                Layer::dense("operator.out", MLP_HIDDEN, dim),
            ])),
        };
        CombinationOperator { kind, dim, mlp }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet<f32> {
        self.mlp.as_ref().map(|g| g.init_params(rng)).unwrap_or_default()
    }

    pub fn param_count(&self) -> usize {
        self.init_params(&mut crate::rng::stream(0, "param-count", &[])).num_scalars()
    }

    /// Row-wise combination of `z_dir[r]` (direction class `dirs[r]`) with
    /// `z_mod[r]` (modifier class `mods[r]`); classes index the four active values.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParameterSet<T>,
        z_dir: Var,
        dirs: &[usize],
        z_mod: Var,
        mods: &[usize],
    ) -> Result<Var, NnError> {
        let rows = tape.value(z_dir).shape()[0];
        if dirs.len() != rows || mods.len() != rows || dirs.iter().chain(mods).any(|&c| c >= 4) {
            return Err(NnError::Shape(format!("operator: {rows} rows with {} / {} class ids", dirs.len(), mods.len())));
        }
        match &self.mlp {
            None => {
                let sum = tape.add(z_dir, z_mod)?;
                Ok(tape.scale(sum, T::of(0.5)))
            }
            Some(graph) => {
                let hd = tape.leaf(one_hot(dirs));
                let hm = tape.leaf(one_hot(mods));
                let x = tape.concat_cols(&[z_dir, hd, z_mod, hm])?;
                graph.forward(tape, params, x)
            }
        }
    }
}

fn check_pair(dir: GestureLabel, modifier: GestureLabel) -> Result<(Direction, Modifier), ModelError> {
    if !(dir.direction.is_active() && dir.modifier == Modifier::NoMod) {
        return Err(ModelError::Label(format!("{dir} is not a direction single")));
    }
    if !(modifier.direction == Direction::NoDir && modifier.modifier.is_active()) {
        return Err(ModelError::Label(format!("{modifier} is not a modifier single")));
    }
    Ok((dir.direction, modifier.modifier))
}

/// Combine one direction single with one modifier single.
pub fn combine(
    op: &CombinationOperator,
    params: &ParameterSet<f32>,
    (z_dir, y_dir): (&[f32], GestureLabel),
    (z_mod, y_mod): (&[f32], GestureLabel),
) -> Result<SyntheticFeature, ModelError> {
    let (d, m) = check_pair(y_dir, y_mod)?;
    if z_dir.len() != op.dim || z_mod.len() != op.dim {
        return Err(ModelError::Shape(format!("features of width {}/{}, operator expects {}", z_dir.len(), z_mod.len(), op.dim)));
    }
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::new(vec![1, op.dim], z_dir.to_vec())?);
    let b = tape.leaf(Tensor::new(vec![1, op.dim], z_mod.to_vec())?);
    let out = op.forward(&mut tape, params, a, &[d.index()], b, &[m.index()])?;
    Ok(SyntheticFeature { z: tape.value(out).data().to_vec(), label: GestureLabel::new(d, m) })
}

/// Every (direction item, modifier item) pair, direction-major.
pub fn combine_all_pairs(
    op: &CombinationOperator,
    params: &ParameterSet<f32>,
    dirs: &LabeledFeatures,
    mods: &LabeledFeatures,
) -> Result<LabeledFeatures, ModelError> {
    if dirs.is_empty() || mods.is_empty() {
        return Err(ModelError::Shape("combine_all_pairs needs non-empty inputs".into()));
    }
    let mut dir_ids = Vec::with_capacity(dirs.len());
    for &l in &dirs.labels {
        dir_ids.push(check_pair(l, GestureLabel::new(Direction::NoDir, Modifier::Thumb))?.0);
    }
    let mut mod_ids = Vec::with_capacity(mods.len());
    for &l in &mods.labels {
        mod_ids.push(check_pair(GestureLabel::new(Direction::Up, Modifier::NoMod), l)?.1);
    }
    const CHUNK: usize = 4096;
    let pairs: Vec<(usize, usize)> = (0..dirs.len()).flat_map(|i| (0..mods.len()).map(move |j| (i, j))).collect();
    let mut data = Vec::with_capacity(pairs.len() * op.dim);
    let mut labels = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let mut tape = Tape::<f32>::new();
        let zd = tape.leaf(dirs.z.clone());
        let zm = tape.leaf(mods.z.clone());
        let (is, js): (Vec<usize>, Vec<usize>) = chunk.iter().copied().unzip();
        let a = tape.gather_rows(zd, &is)?;
        let b = tape.gather_rows(zm, &js)?;
        let d: Vec<usize> = is.iter().map(|&i| dir_ids[i].index()).collect();
        let m: Vec<usize> = js.iter().map(|&j| mod_ids[j].index()).collect();
        let out = op.forward(&mut tape, params, a, &d, b, &m)?;
        data.extend_from_slice(tape.value(out).data());
        labels.extend(is.iter().zip(&js).map(|(&i, &j)| GestureLabel::new(dir_ids[i], mod_ids[j])));
    }
    LabeledFeatures::new(Tensor::new(vec![labels.len(), op.dim], data)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn single_dir(d: Direction) -> GestureLabel {
        GestureLabel::new(d, Modifier::NoMod)
    }

    fn single_mod(m: Modifier) -> GestureLabel {
        GestureLabel::new(Direction::NoDir, m)
    }

    #[test]
    fn avg_is_elementwise_mean() {
        let op = CombinationOperator::new(OperatorKind::Avg, 4);
        let p = ParameterSet::new();
        let out = combine(&op, &p, (&[1.0, 3.0, 5.0, 7.0], single_dir(Direction::Up)), (&[3.0, 5.0, 7.0, 9.0], single_mod(Modifier::Pinch)))
            .unwrap();
        assert_eq!(out.z, vec![2.0, 4.0, 6.0, 8.0]);
        assert_eq!(out.label, GestureLabel::new(Direction::Up, Modifier::Pinch));
        let z = [0.25f32, -1.5, 2.0, 0.0];
        let same = combine(&op, &p, (&z, single_dir(Direction::Left)), (&z, single_mod(Modifier::Open))).unwrap();
        assert_eq!(same.z, z.to_vec());
    }

    #[test]
    fn rejects_wrong_label_forms() {
        let op = CombinationOperator::new(OperatorKind::Avg, 2);
        let p = ParameterSet::new();
        let z = [0.0f32; 2];
        let combo = GestureLabel::new(Direction::Up, Modifier::Fist);
        assert!(matches!(combine(&op, &p, (&z, combo), (&z, single_mod(Modifier::Fist))), Err(ModelError::Label(_))));
        assert!(matches!(combine(&op, &p, (&z, single_dir(Direction::Up)), (&z, single_dir(Direction::Down))), Err(ModelError::Label(_))));
    }

    #[test]
    fn mlp_parameter_count() {
        assert_eq!(CombinationOperator::new(OperatorKind::Mlp, 64).param_count(), 137 * 85 + 86 * 64);
        assert_eq!(CombinationOperator::new(OperatorKind::Mlp, 64).param_count(), 17_149);
        assert_eq!(CombinationOperator::new(OperatorKind::Avg, 64).param_count(), 0);
    }

    fn features(labels: Vec<GestureLabel>, dim: usize, offset: f32) -> LabeledFeatures {
        let data = (0..labels.len() * dim).map(|k| k as f32 * 0.1 + offset).collect();
        LabeledFeatures::new(Tensor::new(vec![labels.len(), dim], data).unwrap(), labels).unwrap()
    }

    #[test]
    fn all_pairs_counts_and_labels() {
        let op = CombinationOperator::new(OperatorKind::Mlp, 3);
        let p = op.init_params(&mut stream(4, "init", &[]));
        let dirs = features(vec![single_dir(Direction::Up), single_dir(Direction::Down)], 3, 0.0);
        let mods = features(vec![single_mod(Modifier::Pinch); 3], 3, 1.0);
        let out = combine_all_pairs(&op, &p, &dirs, &mods).unwrap();
        assert_eq!(out.len(), 6);
        let up_pinch = GestureLabel::new(Direction::Up, Modifier::Pinch);
        let down_pinch = GestureLabel::new(Direction::Down, Modifier::Pinch);
        assert_eq!(out.labels, vec![up_pinch, up_pinch, up_pinch, down_pinch, down_pinch, down_pinch]);
        // direction-major order: pair (1, 2) sits at row 5 and matches a direct combine
        let direct = combine(&op, &p, (dirs.row(1), dirs.labels[1]), (mods.row(2), mods.labels[2])).unwrap();
        assert_eq!(out.row(5), &direct.z[..]);
    }

    #[test]
    fn full_sized_pool() {
        let dirs = features(Direction::ACTIVE.iter().flat_map(|&d| std::iter::repeat_n(single_dir(d), 58)).collect(), 2, 0.0);
        let mods = features(Modifier::ACTIVE.iter().flat_map(|&m| std::iter::repeat_n(single_mod(m), 58)).collect(), 2, 0.0);
        let op = CombinationOperator::new(OperatorKind::Avg, 2);
        assert_eq!(combine_all_pairs(&op, &ParameterSet::new(), &dirs, &mods).unwrap().len(), 53_824);
    }
}
