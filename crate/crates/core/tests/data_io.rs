use std::fs;

use comhom::data::{
    generate_synth_cohort, load_dataset, save_dataset, split_loso, DataError, Dataset, GestureLabel, Manifest,
    SubjectEntry, SynthCohortSpec, Window,
};
use proptest::prelude::*;

fn write_subject(dir: &std::path::Path, id: u32, labels: &[GestureLabel], per_window: usize) -> SubjectEntry {
    let mut csv = String::from("index,direction,modifier\n");
    let mut bytes = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        csv.push_str(&format!("{i},{},{}\n", l.direction.name(), l.modifier.name()));
        for k in 0..per_window {
            bytes.extend_from_slice(&((i * per_window + k) as f32).to_le_bytes());
        }
    }
    let entry = SubjectEntry { id, data_file: format!("data_{id}.bin"), labels_file: format!("labels_{id}.csv"), count: labels.len() };
    fs::write(dir.join(&entry.data_file), bytes).unwrap();
    fs::write(dir.join(&entry.labels_file), csv).unwrap();
    entry
}

fn write_manifest(dir: &std::path::Path, channels: usize, samples: usize, subjects: Vec<SubjectEntry>) {
    let m = Manifest { schema_version: 1, sample_rate_hz: 1926.0, channels, window_samples: samples, subjects };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&m).unwrap()).unwrap();
}

fn full_cohort_labels() -> Vec<GestureLabel> {
    GestureLabel::all_classes()
        .into_iter()
        .flat_map(|l| std::iter::repeat_n(l, if l.is_single() { 73 } else { 40 }))
        .collect()
}

#[test]
fn full_cohort_manifest_loads_all_windows() {
    let dir = tempfile::tempdir().unwrap();
    let labels = full_cohort_labels();
    assert_eq!(labels.len(), 584 + 640);
    let subjects = (0..10).map(|id| write_subject(dir.path(), id, &labels, 2)).collect();
    write_manifest(dir.path(), 1, 2, subjects);
    let d = load_dataset(dir.path()).unwrap();
    assert_eq!(d.len(), 12240);
    assert_eq!(d.subjects(), (0..10).collect::<Vec<_>>());
    assert!(d.class_counts().iter().all(|(&(_, c), &n)| n == if c < 8 { 73 } else { 40 }));
}

#[test]
fn empty_subject_list_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), 8, 963, vec![]);
    let d = load_dataset(dir.path()).unwrap();
    assert!(d.is_empty());
    assert_eq!((d.channels, d.window_samples), (8, 963));
}

#[test]
fn short_binary_is_rejected_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let labels = full_cohort_labels();
    let entry = write_subject(dir.path(), 4, &labels, 3);
    let path = dir.path().join(&entry.data_file);
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 12);
    fs::write(&path, bytes).unwrap();
    write_manifest(dir.path(), 1, 3, vec![entry]);
    match load_dataset(dir.path()) {
        Err(e @ DataError::Format { .. }) => assert!(e.to_string().contains("data_4.bin"), "{e}"),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn unknown_label_string_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let entry = write_subject(dir.path(), 0, &full_cohort_labels()[..2], 1);
    fs::write(dir.path().join(&entry.labels_file), "index,direction,modifier\n0,Up,NoMod\n1,Sideways,NoMod\n").unwrap();
    write_manifest(dir.path(), 1, 1, vec![entry]);
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("labels_0.csv"), "{err}");
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Io { .. })));
}

#[test]
fn save_then_load_roundtrips() {
    let spec = SynthCohortSpec { subjects: 3, singles_per_class: 2, combos_per_class: 1, window_samples: 16, ..Default::default() };
    let d = generate_synth_cohort(&spec, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&d, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), d);
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[test]
fn synthetic_combinations_are_non_additive() {
    let spec = SynthCohortSpec { subjects: 2, singles_per_class: 6, combos_per_class: 6, window_samples: 128, ..Default::default() };
    let d = generate_synth_cohort(&spec, 3).unwrap();
    let by_class = d.indices_by_class();
    let mut floor = Vec::new();
    let mut gap = Vec::new();
    for subject in d.subjects() {
        let of = |c: usize| -> Vec<&Window> { by_class[c].iter().map(|&i| &d.windows[i]).filter(|w| w.subject == subject).collect() };
        for c in 0..24 {
            let ws = of(c);
            for pair in ws.windows(2) {
                floor.push(sq_dist(&pair[0].samples, &pair[1].samples));
            }
        }
        for label in GestureLabel::all_classes().into_iter().filter(|l| l.is_combination()) {
            let dir = of(GestureLabel::new(label.direction, comhom::data::Modifier::NoMod).class_index().unwrap());
            let modi = of(GestureLabel::new(comhom::data::Direction::NoDir, label.modifier).class_index().unwrap());
            for (k, w) in of(label.class_index().unwrap()).iter().enumerate() {
                let mean: Vec<f32> =
                    dir[k].samples.iter().zip(modi[k].samples.iter()).map(|(a, b)| (a + b) / 2.0).collect();
                gap.push(sq_dist(&w.samples, &mean));
            }
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = avg(&gap) / avg(&floor);
    assert!(ratio >= 5.0, "non-additivity ratio {ratio}");
}

fn toy_cohort(subjects: u32, per_class: usize) -> Dataset {
    let mut d = Dataset::empty(1926.0, 1, 3);
    for s in 0..subjects {
        for label in GestureLabel::all_classes() {
            for i in 0..per_class + (label.class_index().unwrap() % 3) {
                let c = label.class_index().unwrap() as f32;
                d.windows.push(Window::new(vec![s as f32, c, i as f32], 1, label, s));
            }
        }
    }
    d
}

fn keys(d: &Dataset) -> Vec<(u32, Vec<u32>)> {
    d.windows.iter().map(|w| (w.subject, w.samples.iter().map(|v| v.to_bits()).collect())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn split_partitions_exactly(subjects in 3u32..7, per_class in 1usize..9, seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let d = toy_cohort(subjects, per_class);
        for fold in 0..subjects as usize {
            let s = split_loso(&d, fold, frac, seed).unwrap();
            let mut all: Vec<_> = [&s.pre, &s.val, &s.calib, &s.test].into_iter().flat_map(keys).collect();
            let mut want = keys(&d);
            all.sort();
            want.sort();
            prop_assert_eq!(all, want);
            prop_assert!(s.pre.windows.iter().all(|w| w.subject != s.eval_subject && w.subject != s.val_subject));
            prop_assert!(s.val.windows.iter().all(|w| w.subject == s.val_subject));
            prop_assert!(s.calib.windows.iter().chain(&s.test.windows).all(|w| w.subject == s.eval_subject));
            prop_assert_ne!(s.val_subject, s.eval_subject);
            let (cal, test) = (s.calib.indices_by_class(), s.test.indices_by_class());
            for c in 0..24 {
                let n = (cal[c].len() + test[c].len()) as f64;
                prop_assert!((cal[c].len() as f64 - frac * n).abs() <= 1.0);
            }
        }
    }
}
