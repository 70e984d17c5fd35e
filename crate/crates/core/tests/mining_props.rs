use proptest::prelude::*;

use comhom::data::GestureLabel;
use comhom::losses::{mine_triplets, CentroidBank, Item, TripletConfig, TripletVariant};
use comhom::model::LabeledFeatures;
use comhom::nncore::Tensor;
use comhom::rng::stream;

fn combos() -> Vec<GestureLabel> {
    GestureLabel::all_classes().into_iter().filter(|l| l.is_combination()).collect()
}

fn side(rows: &[(usize, [i8; 2])]) -> LabeledFeatures {
    let labels = rows.iter().map(|(c, _)| combos()[*c]).collect();
    let z = Tensor::new(vec![rows.len(), 2], rows.iter().flat_map(|(_, v)| v.map(f32::from)).collect()).unwrap();
    LabeledFeatures::new(z, labels).unwrap()
}

fn dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows() -> impl Strategy<Value = Vec<(usize, [i8; 2])>> {
    prop::collection::vec((0..3usize, [-3i8..=3, -3i8..=3]), 1..12)
}

fn lookup<'a>(real: &'a LabeledFeatures, synth: &'a LabeledFeatures, it: Item) -> (&'a [f32], GestureLabel) {
    match it {
        Item::Real(i) => (real.row(i), real.labels[i]),
        Item::Synthetic(j) => (synth.row(j), synth.labels[j]),
        Item::Centroid(..) => unreachable!("batch variants never emit centroids"),
    }
}

proptest! {
    #[test]
    fn hard_triplets_are_extremal(r in rows(), s in rows()) {
        let (real, synth) = (side(&r), side(&s));
        let cfg = TripletConfig { variant: TripletVariant::Hard, ..Default::default() };
        let (mined, diag) = mine_triplets(&cfg, &real, &synth, &CentroidBank::new(2), &mut stream(0, "p", &[])).unwrap();
        prop_assert_eq!(mined.len() + diag.skipped, real.len() + synth.len());
        for t in mined {
            let (a, la) = lookup(&real, &synth, t.anchor);
            let (p, lp) = lookup(&real, &synth, t.positive);
            let (n, ln) = lookup(&real, &synth, t.negative);
            prop_assert_eq!(la, lp);
            prop_assert_ne!(la, ln);
            let other = if matches!(t.anchor, Item::Real(_)) { &synth } else { &real };
            for j in 0..other.len() {
                let d = dist(a, other.row(j));
                if other.labels[j] == la {
                    prop_assert!(d <= dist(a, p));
                } else {
                    prop_assert!(d >= dist(a, n));
                }
            }
        }
    }

    #[test]
    fn basic_triplets_are_valid_and_distinct(r in rows(), s in rows(), seed in any::<u64>()) {
        let (real, synth) = (side(&r), side(&s));
        let cfg = TripletConfig { variant: TripletVariant::Basic, per_anchor: 2, ..Default::default() };
        let (mined, _) = mine_triplets(&cfg, &real, &synth, &CentroidBank::new(2), &mut stream(seed, "p", &[])).unwrap();
        for t in &mined {
            prop_assert_eq!(t.positive.side(), t.anchor.side().opposite());
            prop_assert_eq!(t.negative.side(), t.anchor.side().opposite());
            prop_assert_eq!(lookup(&real, &synth, t.anchor).1, lookup(&real, &synth, t.positive).1);
            prop_assert_ne!(lookup(&real, &synth, t.anchor).1, lookup(&real, &synth, t.negative).1);
            let same_anchor: Vec<_> = mined.iter().filter(|u| u.anchor == t.anchor).collect();
            prop_assert!(same_anchor.len() <= 2);
            prop_assert_eq!(same_anchor.iter().filter(|u| u.positive == t.positive).count(), 1);
        }
    }
}
