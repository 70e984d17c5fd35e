use rand::seq::SliceRandom;

use super::{DataError, Dataset, NUM_CLASSES};
use crate::rng::stream;

pub const DEFAULT_CALIB_FRACTION: f64 = 0.8;

/// Leave-one-subject-out partition for one fold.
#[derive(Clone, Debug)]
pub struct LosoSplit {
    pub eval_subject: u32,
    pub val_subject: u32,
    /// Pretraining subjects other than the validation subject.
    pub pre: Dataset,
    /// The held-out pretraining subject used for early stopping.
    pub val: Dataset,
    /// Evaluation-subject calibration share, all classes (combinations are
    /// only consumed by full supervision).
    pub calib: Dataset,
    pub test: Dataset,
}

/// Split `dataset` for fold `fold` (an index into the sorted subject roster).
///
/// The validation subject is the smallest remaining subject id. Each class of
/// the evaluation subject is shuffled and `floor(calib_fraction * n)` items go
/// to calibration, the remainder to test.
pub fn split_loso(dataset: &Dataset, fold: usize, calib_fraction: f64, seed: u64) -> Result<LosoSplit, DataError> {
    let subjects = dataset.subjects();
    if subjects.len() < 3 {
        return Err(DataError::Split(format!("need at least 3 subjects, have {}", subjects.len())));
    }
    if fold >= subjects.len() {
        return Err(DataError::Split(format!("fold {fold} out of range for {} subjects", subjects.len())));
    }
    if !(0.0..=1.0).contains(&calib_fraction) {
        return Err(DataError::Split(format!("calibration fraction {calib_fraction} outside [0, 1]")));
    }
    let eval_subject = subjects[fold];
    let val_subject = *subjects.iter().find(|&&s| s != eval_subject).expect("at least 3 subjects");

    let pre = dataset.filter(|w| w.subject != eval_subject && w.subject != val_subject);
    let val = dataset.filter(|w| w.subject == val_subject);
    let eval = dataset.filter(|w| w.subject == eval_subject);

    let mut rng = stream(seed, "split-loso", &[fold as u64]);
    let mut calib_idx = Vec::new();
    let mut test_idx = Vec::new();
    let by_class = eval.indices_by_class();
    debug_assert_eq!(by_class.len(), NUM_CLASSES);
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        let n_calib = ((calib_fraction * idx.len() as f64) + 1e-9).floor() as usize;
        calib_idx.extend_from_slice(&idx[..n_calib]);
        test_idx.extend_from_slice(&idx[n_calib..]);
    }
    calib_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |ids: &[usize]| eval.with_windows(ids.iter().map(|&i| eval.windows[i].clone()).collect());

    Ok(LosoSplit { eval_subject, val_subject, pre, val, calib: pick(&calib_idx), test: pick(&test_idx) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GestureLabel, Window};

    fn cohort(subjects: u32, singles: usize, combos: usize) -> Dataset {
        let mut d = Dataset::empty(1926.0, 1, 2);
        for s in 0..subjects {
            for label in GestureLabel::all_classes() {
                let n = if label.is_single() { singles } else { combos };
                for i in 0..n {
                    d.windows.push(Window::new(vec![s as f32, i as f32], 1, label, s));
                }
            }
        }
        d
    }

    #[test]
    fn full_cohort_fold_counts() {
        let d = cohort(10, 73, 40);
        let split = split_loso(&d, 3, DEFAULT_CALIB_FRACTION, 0).unwrap();
        assert_eq!(split.eval_subject, 3);
        assert_eq!(split.val_subject, 0);
        assert_eq!(split.pre.subjects().len(), 8);
        let calib = split.calib.class_counts();
        let test = split.test.class_counts();
        for label in GestureLabel::all_classes() {
            let c = label.class_index().unwrap();
            let (nc, nt) = (calib[&(3, c)], test[&(3, c)]);
            if label.is_single() {
                assert_eq!((nc, nt), (58, 15));
            } else {
                assert_eq!((nc, nt), (32, 8));
            }
        }
    }

    #[test]
    fn validation_subject_is_smallest_remaining() {
        let d = cohort(4, 2, 2);
        assert_eq!(split_loso(&d, 0, 0.8, 0).unwrap().val_subject, 1);
        assert_eq!(split_loso(&d, 2, 0.8, 0).unwrap().val_subject, 0);
    }

    #[test]
    fn rejects_bad_folds() {
        let d = cohort(3, 1, 1);
        assert!(matches!(split_loso(&d, 3, 0.8, 0), Err(DataError::Split(_))));
        assert!(matches!(split_loso(&cohort(2, 1, 1), 0, 0.8, 0), Err(DataError::Split(_))));
    }
}
