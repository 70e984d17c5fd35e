use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nncore::{Layer, NnError, ParameterSet, Scalar, Sequential, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadsSize {
    /// One linear layer per head.
    Small,
    /// `dim -> 96 -> 96 -> 5` per head.
    Large,
}

pub const LARGE_HIDDEN: usize = 96;

/// Two independent 5-way classifiers (direction, modifier) used during
/// pretraining only. Parameters use the `heads.dir.` / `heads.mod.` prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainHeads {
    pub size: HeadsSize,
    dir: Sequential,
    modifier: Sequential,
}

fn head(prefix: &str, size: HeadsSize, dim: usize) -> Sequential {
    match size {
        HeadsSize::Small => Sequential::new(vec![Layer::dense(format!("{prefix}.out"), dim, 5)]),
        HeadsSize::Large => Sequential::new(vec![
            Layer::dense(format!("{prefix}.hidden1"), dim, LARGE_HIDDEN),
            Layer::Relu,
            Layer::dense(format!("{prefix}.hidden2"), LARGE_HIDDEN, LARGE_HIDDEN),
            Layer::Relu,
            Layer::dense(format!("{prefix}.out"), LARGE_HIDDEN, 5),
        ]),
    }
}

fn softmax(logits: &[f32]) -> [f64; 5] {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut p = [0.0; 5];
    for (o, &l) in p.iter_mut().zip(logits) {
        *o = (l as f64 - max).exp();
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

impl PretrainHeads {
    pub fn new(size: HeadsSize, dim: usize) -> Self {
        PretrainHeads { size, dir: head("heads.dir", size, dim), modifier: head("heads.mod", size, dim) }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet<f32> {
        let mut p = self.dir.init_params(rng);
        p.extend(self.modifier.init_params(rng));
        p
    }

    pub fn param_count(&self) -> usize {
        self.init_params(&mut crate::rng::stream(0, "param-count", &[])).num_scalars()
    }

    /// Direction and modifier logits for features `z` of shape `[n, dim]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParameterSet<T>, z: Var) -> Result<(Var, Var), NnError> {
        Ok((self.dir.forward(tape, params, z)?, self.modifier.forward(tape, params, z)?))
    }

    /// Softmax probabilities of both heads for one feature vector.
    pub fn classify(&self, params: &ParameterSet<f32>, z: &[f32]) -> Result<([f64; 5], [f64; 5]), NnError> {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let (d, m) = self.forward(&mut tape, params, x)?;
        Ok((softmax(tape.value(d).data()), softmax(tape.value(m).data())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Direction, GestureLabel, Modifier};
    use crate::rng::stream;

    #[test]
    fn parameter_counts() {
        assert_eq!(PretrainHeads::new(HeadsSize::Small, 64).param_count(), 650);
        assert_eq!(PretrainHeads::new(HeadsSize::Large, 64).param_count(), 2 * (65 * 96 + 97 * 96 + 97 * 5));
    }

    #[test]
    fn zeroed_heads_are_uniform() {
        let h = PretrainHeads::new(HeadsSize::Large, 8);
        let mut p = h.init_params(&mut stream(0, "init", &[]));
        p.iter_mut().for_each(|(_, q)| q.value.fill(0.0));
        let (d, m) = h.classify(&p, &[1.0; 8]).unwrap();
        for v in d.iter().chain(&m) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_are_distributions() {
        let h = PretrainHeads::new(HeadsSize::Small, 64);
        for seed in 0..5 {
            let p = h.init_params(&mut stream(seed, "init", &[]));
            let z: Vec<f32> = (0..64).map(|k| ((k as u64 * 7 + seed) as f32).cos() * 3.0).collect();
            let (d, m) = h.classify(&p, &z).unwrap();
            for probs in [d, m] {
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(probs.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn argmax_defines_prediction() {
        let h = PretrainHeads::new(HeadsSize::Small, 1);
        let mut p = h.init_params(&mut stream(0, "init", &[]));
        p.iter_mut().for_each(|(_, q)| q.value.fill(0.0));
        p.get_mut("heads.dir.out.bias").unwrap().value.data_mut()[Direction::Up.index()] = 1.0;
        p.get_mut("heads.mod.out.bias").unwrap().value.data_mut()[Modifier::NoMod.index()] = 1.0;
        let (d, m) = h.classify(&p, &[0.0]).unwrap();
        let arg = |v: [f64; 5]| (0..5).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        let pred = GestureLabel::new(Direction::from_index(arg(d)).unwrap(), Modifier::from_index(arg(m)).unwrap());
        assert_eq!(pred, GestureLabel::new(Direction::Up, Modifier::NoMod));
    }
}
