use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::format::{check_skeleton, read_sequence, write_sequence};
use crate::error::{Error, Result};
use crate::kinematics::{PoseSequence, Skeleton};
use crate::tensor::Tensor;

pub const SKELETON_FILE: &str = "skeleton.toml";
pub const LABELS_FILE: &str = "labels.csv";
pub const SEQUENCE_EXT: &str = "mseq";

/// Sequences sharing one skeleton, each with a file stem and an optional
/// action label.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub skeleton: Skeleton,
    pub sequences: Vec<PoseSequence>,
    pub names: Vec<String>,
    pub labels: Vec<Option<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    file: String,
    label: String,
}

impl SequenceDataset {
    pub fn new(skeleton: Skeleton, sequences: Vec<PoseSequence>) -> Result<Self> {
        for s in &sequences {
            check_skeleton(s, &skeleton)?;
        }
        let names = (0..sequences.len()).map(|i| format!("seq{i:04}")).collect();
        let labels = vec![None; sequences.len()];
        Ok(SequenceDataset {
            skeleton,
            sequences,
            names,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Loads `skeleton.toml`, every `*.mseq` in name order and, when
    /// present, `labels.csv` (`file,label`, keyed by file stem).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let skeleton = Skeleton::load(dir.join(SKELETON_FILE))?;
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == SEQUENCE_EXT))
            .collect();
        paths.sort();
        let mut sequences = Vec::with_capacity(paths.len());
        let mut names = Vec::with_capacity(paths.len());
        for path in &paths {
            let seq = read_sequence(path)?;
            check_skeleton(&seq, &skeleton)?;
            sequences.push(seq);
            names.push(path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        }
        let mut labels = vec![None; sequences.len()];
        let label_path = dir.join(LABELS_FILE);
        if label_path.exists() {
            let mut by_name = BTreeMap::new();
            let mut reader = csv::Reader::from_path(&label_path)
                .map_err(|e| Error::Format(format!("{}: {e}", label_path.display())))?;
            for row in reader.deserialize::<LabelRow>() {
                let row = row.map_err(|e| Error::Format(format!("{}: {e}", label_path.display())))?;
                let stem = row.file.strip_suffix(".mseq").unwrap_or(&row.file).to_string();
                by_name.insert(stem, row.label);
            }
            for (name, label) in names.iter().zip(labels.iter_mut()) {
                *label = by_name.get(name).cloned();
            }
        }
        Ok(SequenceDataset {
            skeleton,
            sequences,
            names,
            labels,
        })
    }

    /// Writes the skeleton, one `<name>.mseq` per sequence, and labels when
    /// any sequence has one.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.skeleton.save(dir.join(SKELETON_FILE))?;
        for (name, seq) in self.names.iter().zip(&self.sequences) {
            write_sequence(dir.join(format!("{name}.{SEQUENCE_EXT}")), seq)?;
        }
        if self.labels.iter().any(Option::is_some) {
            let path = dir.join(LABELS_FILE);
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            for (name, label) in self.names.iter().zip(&self.labels) {
                if let Some(label) = label {
                    w.serialize(LabelRow {
                        file: name.clone(),
                        label: label.clone(),
                    })
                    .map_err(|e| Error::Format(e.to_string()))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn subset(&self, range: std::ops::Range<usize>) -> Self {
        SequenceDataset {
            skeleton: self.skeleton.clone(),
            sequences: self.sequences[range.clone()].to_vec(),
            names: self.names[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    /// Holds out the last `fraction` of sequences (rounded) for validation.
    pub fn split(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let held = (self.len() as f64 * fraction).round() as usize;
        let cut = self.len() - held;
        Ok((self.subset(0..cut), self.subset(cut..self.len())))
    }
}

/// A history and the frames that follow it, cut from one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    /// `[H×J×3]`
    pub history: Tensor,
    /// `[F×J×3]`
    pub target: Tensor,
    pub sequence: usize,
    pub start: usize,
}

impl TrainingWindow {
    pub fn history_frames(&self) -> usize {
        self.history.shape()[0]
    }

    pub fn future_frames(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.history.shape()[1]
    }
}

/// `[T×J×3]` → `[3J×T]`.
pub fn frames_to_channel_major(x: &Tensor) -> Result<Tensor> {
    let [t, j, 3] = *x.shape() else {
        return Err(Error::dim(
            "frames_to_channel_major",
            format!("expected [T×J×3], got {:?}", x.shape()),
        ));
    };
    let p = 3 * j;
    let mut out = vec![0.0; p * t];
    for f in 0..t {
        for ch in 0..p {
            out[ch * t + f] = x.data()[f * p + ch];
        }
    }
    Tensor::new([p, t], out)
}

/// Every `[t, t+H) → [t+H, t+H+F)` pair for `t = 0, stride, …` in every
/// sequence, in sequence then time order.
pub fn extract_windows(
    dataset: &SequenceDataset,
    history: usize,
    future: usize,
    stride: usize,
) -> Result<Vec<TrainingWindow>> {
    if stride == 0 || history == 0 {
        return Err(Error::Config(format!(
            "window history ({history}) and stride ({stride}) must be positive"
        )));
    }
    let mut out = Vec::new();
    for (si, seq) in dataset.sequences.iter().enumerate() {
        let j = seq.joints();
        let span = history + future;
        if seq.frames() < span {
            continue;
        }
        for start in (0..=seq.frames() - span).step_by(stride) {
            let w = j * 3;
            let hist = seq.data()[start * w..(start + history) * w].to_vec();
            let tgt = seq.data()[(start + history) * w..(start + span) * w].to_vec();
            out.push(TrainingWindow {
                history: Tensor::new([history, j, 3], hist)?,
                target: if future == 0 {
                    Tensor::from_parts(vec![0, j, 3], Vec::new())
                } else {
                    Tensor::new([future, j, 3], tgt)?
                },
                sequence: si,
                start,
            });
        }
    }
    Ok(out)
}
