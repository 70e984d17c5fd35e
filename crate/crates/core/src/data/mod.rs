//! Gesture windows, the on-disk dataset format, subject-wise splits, noise
//! injection and a synthetic multi-subject cohort generator.

mod io;
mod label;
mod noise;
mod split;
mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

pub use io::{load_dataset, save_dataset, Manifest, SubjectEntry, MANIFEST_FILE, SCHEMA_VERSION};
pub use label::{Direction, GestureLabel, LabelKind, Modifier, NUM_CLASSES, OUTLIER_INDEX};
pub use noise::{inject_noise, noise_sigma, population_std};
pub use split::{split_loso, LosoSplit, DEFAULT_CALIB_FRACTION};
pub use synth::{generate_synth_cohort, SynthCohortSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: {message}")]
    Format { file: PathBuf, message: String },
    #[error("label error: {0}")]
    Label(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("invalid cohort spec: {0}")]
    Spec(String),
}

/// One multi-channel example. Samples are row-major `[channels, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub samples: Arc<[f32]>,
    pub channels: usize,
    pub label: GestureLabel,
    pub subject: u32,
}

impl Window {
    pub fn new(samples: Vec<f32>, channels: usize, label: GestureLabel, subject: u32) -> Self {
        Window { samples: samples.into(), channels, label, subject }
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.channels.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Ordered collection of windows sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_rate_hz: f64,
    pub channels: usize,
    pub window_samples: usize,
    pub windows: Vec<Window>,
}

impl Dataset {
    pub fn empty(sample_rate_hz: f64, channels: usize, window_samples: usize) -> Self {
        Dataset { sample_rate_hz, channels, window_samples, windows: Vec::new() }
    }

    /// Same shape metadata, different windows.
    pub fn with_windows(&self, windows: Vec<Window>) -> Self {
        Dataset { windows, ..self.empty_like() }
    }

    fn empty_like(&self) -> Self {
        Dataset::empty(self.sample_rate_hz, self.channels, self.window_samples)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.windows.iter().map(|w| w.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Window count per `(subject, class index)`.
    pub fn class_counts(&self) -> BTreeMap<(u32, usize), usize> {
        let mut counts = BTreeMap::new();
        for w in &self.windows {
            if let Some(c) = w.label.class_index() {
                *counts.entry((w.subject, c)).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Window indices per class index (0..24), in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); NUM_CLASSES];
        for (i, w) in self.windows.iter().enumerate() {
            if let Some(c) = w.label.class_index() {
                by_class[c].push(i);
            }
        }
        by_class
    }

    pub fn filter(&self, mut keep: impl FnMut(&Window) -> bool) -> Dataset {
        self.with_windows(self.windows.iter().filter(|w| keep(w)).cloned().collect())
    }
}
