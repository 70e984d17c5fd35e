//! Gradient-check suite over every layer type, the triplet loss and the
//! composed encoder + operator + heads objective.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{GestureLabel, Window};
use crate::losses::{mine_triplets, CentroidBank, LossWeights, TripletConfig, TripletVariant};
use crate::model::{windows_to_tensor, EncoderConfig, HeadsSize, LabeledFeatures, OperatorKind};
use crate::nncore::{
    grad_check, GradCheckOptions, GradCheckReport, Layer, LossHead, NnError, Objective, ParameterSet, Scalar, Sequential,
    Supervised, Tape, Tensor, Var,
};
use crate::pretrain::{FixedBatchObjective, PretrainModel};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub point: usize,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn randn(shape: &[usize], rng: &mut Stream) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).expect("shape product")
}

/// Random nonzero biases so ReLU inputs are generic.
fn jitter_biases(params: &mut ParameterSet<f32>, rng: &mut Stream) {
    for (name, p) in params.iter_mut() {
        if name.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
}

fn targets(n: usize, classes: usize, rng: &mut Stream) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

struct TripletOnly {
    real: Tensor<f32>,
    synth: Tensor<f32>,
    triplets: Vec<crate::losses::Triplet>,
}

impl Objective for TripletOnly {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParameterSet<T>) -> Result<Var, NnError> {
        let w = tape.param(params, "proj.weight")?;
        let b = tape.param(params, "proj.bias")?;
        let r = tape.leaf(self.real.cast());
        let s = tape.leaf(self.synth.cast());
        let r = tape.dense(r, w, b)?;
        let s = tape.dense(s, w, b)?;
        crate::losses::triplet_loss(tape, r, s, &CentroidBank::new(0), &self.triplets, 1.0)
            .map_err(|e| NnError::Shape(e.to_string()))?
            .ok_or_else(|| NnError::Shape("no triplets".into()))
    }
}

fn labelled(n: usize, combos_only: bool, rng: &mut Stream) -> Vec<GestureLabel> {
    let classes: Vec<GestureLabel> = GestureLabel::all_classes().into_iter().filter(|l| !combos_only || l.is_combination()).collect();
    (0..n).map(|_| classes[rng.random_range(0..classes.len())]).collect()
}

/// Run every case at `points` random points.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<SuiteCase>, NnError> {
    let opts = GradCheckOptions { seed, ..Default::default() };
    let mut out = Vec::new();
    for point in 0..points {
        let mut rng = stream(seed, "grad-suite", &[point as u64]);
        let mut push = |name: &str, report: GradCheckReport| out.push(SuiteCase { name: name.into(), point, report });

        let dense = Sequential::new(vec![Layer::dense("fc", 6, 4)]);
        let params = dense.init_params(&mut rng);
        let input = randn(&[5, 6], &mut rng);
        let head = LossHead::SquaredError { target: randn(&[5, 4], &mut rng) };
        push("dense+squared_error", grad_check(&Supervised { graph: &dense, input: &input, head: &head }, &params, &opts)?);

        let conv = Sequential::new(vec![
            Layer::conv1d("conv", 3, 4, 5, 2, 2),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::dense("fc", 4, 5),
        ]);
        let mut params = conv.init_params(&mut rng);
        jitter_biases(&mut params, &mut rng);
        let input = randn(&[3, 3, 17], &mut rng);
        let head = LossHead::SoftmaxCrossEntropy { targets: targets(3, 5, &mut rng) };
        push("conv1d+relu+pool+cross_entropy", grad_check(&Supervised { graph: &conv, input: &input, head: &head }, &params, &opts)?);

        let residual = Sequential::new(vec![
            Layer::conv1d("stem", 2, 4, 3, 1, 1),
            Layer::Residual {
                name: "block".into(),
                body: vec![Layer::conv1d("block.a", 4, 4, 3, 1, 1), Layer::Relu, Layer::conv1d("block.b", 4, 4, 3, 1, 1)],
            },
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::dense("fc", 4, 5),
        ]);
        let mut params = residual.init_params(&mut rng);
        jitter_biases(&mut params, &mut rng);
        let input = randn(&[2, 2, 12], &mut rng);
        let head = LossHead::SoftmaxCrossEntropy { targets: targets(2, 5, &mut rng) };
        push("residual+pool+dense+cross_entropy", grad_check(&Supervised { graph: &residual, input: &input, head: &head }, &params, &opts)?);

        let real = LabeledFeatures::new(randn(&[6, 4], &mut rng), labelled(6, true, &mut rng)).expect("rows match");
        let mut synth_labels = real.labels.clone();
        synth_labels.extend(labelled(4, true, &mut rng));
        let synth = LabeledFeatures::new(randn(&[10, 4], &mut rng), synth_labels).expect("rows match");
        let proj = Sequential::new(vec![Layer::dense("proj", 4, 3)]);
        let params = proj.init_params(&mut rng);
        let cfg = TripletConfig { variant: TripletVariant::Basic, ..Default::default() };
        let (triplets, _) = mine_triplets(&cfg, &real, &synth, &CentroidBank::new(4), &mut rng).map_err(|e| NnError::Shape(e.to_string()))?;
        let obj = TripletOnly { real: real.z.clone(), synth: synth.z.clone(), triplets };
        push("triplet_loss", grad_check(&obj, &params, &opts)?);

        for (heads, operator) in [(HeadsSize::Small, OperatorKind::Mlp), (HeadsSize::Large, OperatorKind::Avg)] {
            let enc = EncoderConfig { in_channels: 3, stem_channels: 4, channels: 6, feature_dim: 5 };
            let model = PretrainModel::new(&enc, operator, heads);
            let mut params = model.init_params(rng.random());
            jitter_biases(&mut params, &mut rng);
            let windows: Vec<Window> = GestureLabel::all_classes()
                .into_iter()
                .map(|l| Window::new(randn(&[3 * 16], &mut rng).into_data(), 3, l, 0))
                .collect();
            let input = windows_to_tensor(&windows.iter().collect::<Vec<_>>(), 3).map_err(|e| NnError::Shape(e.to_string()))?;
            let labels: Vec<GestureLabel> = windows.iter().map(|w| w.label).collect();
            let weights = LossWeights::default();
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(input.clone());
            let mut bank = CentroidBank::new(5);
            let source = crate::pretrain::TripletSource::Mine { config: &TripletConfig::default(), bank: &mut bank, rng: &mut rng };
            let (_, _, triplets) = crate::pretrain::batch_objective(&model, &mut tape, &params, x, &labels, &weights, source)
                .map_err(|e| NnError::Shape(e.to_string()))?;
            let obj = FixedBatchObjective { model: &model, input: &input, labels: &labels, triplets: &triplets, bank: &bank, margin: 1.0, weights: &weights };
            let name = format!("encoder+{operator:?}+{heads:?}_heads+total_loss").to_lowercase();
            push(&name, grad_check(&obj, &params, &GradCheckOptions { max_entries: Some(24), ..opts })?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_one_point() {
        let cases = gradient_suite(1, 3).unwrap();
        assert_eq!(cases.len(), 6);
        for c in &cases {
            assert!(c.passed(), "{} max rel error {}", c.name, c.report.max_rel_error());
        }
    }
}
