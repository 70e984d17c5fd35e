use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Direction, GestureLabel, Modifier, Window};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub sample_rate_hz: f64,
    pub channels: usize,
    pub window_samples: usize,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: u32,
    pub data_file: String,
    pub labels_file: String,
    pub count: usize,
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn format_err(file: &Path, message: impl Into<String>) -> DataError {
    DataError::Format { file: file.to_path_buf(), message: message.into() }
}

fn parse_labels(path: &Path, text: &str, count: usize) -> Result<Vec<GestureLabel>, DataError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| format_err(path, "missing header"))?;
    if header.trim() != "index,direction,modifier" {
        return Err(format_err(path, format!("unexpected header {header:?}")));
    }
    let mut labels = Vec::with_capacity(count);
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [index, dir, modifier] = fields[..] else {
            return Err(format_err(path, format!("row {row}: expected 3 fields, got {line:?}")));
        };
        let index: usize = index.parse().map_err(|_| format_err(path, format!("row {row}: bad index {index:?}")))?;
        if index != row {
            return Err(format_err(path, format!("row {row}: index {index} out of sequence")));
        }
        let label = GestureLabel::new(
            dir.parse::<Direction>().map_err(|e| format_err(path, format!("row {row}: {e}")))?,
            modifier.parse::<Modifier>().map_err(|e| format_err(path, format!("row {row}: {e}")))?,
        );
        if label.class_index().is_none() {
            return Err(format_err(path, format!("row {row}: (NoDir, NoMod) is not a storable label")));
        }
        labels.push(label);
    }
    if labels.len() != count {
        return Err(format_err(path, format!("manifest declares {count} labels, file has {}", labels.len())));
    }
    Ok(labels)
}

/// Load a dataset directory (`manifest.json`, `data_<id>.bin`, `labels_<id>.csv`).
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read(&manifest_path)?)
        .map_err(|e| format_err(&manifest_path, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(format_err(&manifest_path, format!("unsupported schema_version {}", manifest.schema_version)));
    }
    if manifest.channels == 0 || manifest.window_samples == 0 {
        return Err(format_err(&manifest_path, "channels and window_samples must be positive"));
    }
    let per_window = manifest.channels * manifest.window_samples;
    let mut dataset = Dataset::empty(manifest.sample_rate_hz, manifest.channels, manifest.window_samples);
    for entry in &manifest.subjects {
        let data_path = dir.join(&entry.data_file);
        let bytes = read(&data_path)?;
        if bytes.len() != entry.count * per_window * 4 {
            return Err(format_err(
                &data_path,
                format!("expected {} windows ({} bytes), found {} bytes", entry.count, entry.count * per_window * 4, bytes.len()),
            ));
        }
        let labels_path = dir.join(&entry.labels_file);
        let text = String::from_utf8(read(&labels_path)?).map_err(|e| format_err(&labels_path, e.to_string()))?;
        let labels = parse_labels(&labels_path, &text, entry.count)?;
        for (chunk, label) in bytes.chunks_exact(per_window * 4).zip(labels) {
            let samples: Vec<f32> = chunk.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if samples.iter().any(|v| !v.is_finite()) {
                return Err(format_err(&data_path, "non-finite sample"));
            }
            dataset.windows.push(Window::new(samples, manifest.channels, label, entry.id));
        }
    }
    Ok(dataset)
}

/// Write `dataset` in the directory format read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest, DataError> {
    let io = |path: PathBuf| move |source| DataError::Io { path, source };
    fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
    let mut subjects = Vec::new();
    for id in dataset.subjects() {
        let windows: Vec<&Window> = dataset.windows.iter().filter(|w| w.subject == id).collect();
        let data_file = format!("data_{id}.bin");
        let labels_file = format!("labels_{id}.csv");
        let mut bytes = Vec::with_capacity(windows.len() * dataset.channels * dataset.window_samples * 4);
        let mut labels = String::from("index,direction,modifier\n");
        for (i, w) in windows.iter().enumerate() {
            bytes.extend(w.samples.iter().flat_map(|v| v.to_le_bytes()));
            labels.push_str(&format!("{i},{},{}\n", w.label.direction.name(), w.label.modifier.name()));
        }
        fs::write(dir.join(&data_file), bytes).map_err(io(dir.join(&data_file)))?;
        fs::write(dir.join(&labels_file), labels).map_err(io(dir.join(&labels_file)))?;
        subjects.push(SubjectEntry { id, data_file, labels_file, count: windows.len() });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        sample_rate_hz: dataset.sample_rate_hz,
        channels: dataset.channels,
        window_samples: dataset.window_samples,
        subjects,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io(path.clone()))?;
    Ok(manifest)
}
