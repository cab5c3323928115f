//! Long-horizon generation and the evaluation protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{extract_windows, SequenceDataset};
use crate::error::{Error, Result};
use crate::kinematics::{mpjpe_at_frames, PoseSequence};
use crate::model::FreqMrn;

/// Extends `history` by `horizon` frames, `F` at a time, feeding every
/// prediction back into the history. Returns the new frames and the number
/// of refinement passes.
pub fn predict_autoregressive(
    model: &FreqMrn,
    history: &PoseSequence,
    horizon: usize,
) -> Result<(PoseSequence, usize)> {
    let need = model.config.window();
    if history.frames() < need {
        return Err(Error::HistoryTooShort {
            got: history.frames(),
            need,
        });
    }
    if history.joints() != model.joints {
        return Err(Error::Skeleton {
            expected: format!("{} joints", model.joints),
            found: format!("{} joints", history.joints()),
        });
    }
    let future = model.config.future;
    let mut current = history.clone();
    let mut generated = PoseSequence::empty(history.skeleton(), history.joints(), history.frame_rate())?;
    let mut passes = 0;
    while generated.frames() < horizon {
        let out = model.predict(&current.to_channels()?)?;
        let pred = PoseSequence::from_channels(history.skeleton(), history.frame_rate(), &out.prediction)?;
        let new = pred.slice(pred.frames() - future, future)?;
        current = current.extend(&new)?;
        generated = generated.extend(&new)?;
        passes += 1;
    }
    Ok((generated.slice(0, horizon)?, passes))
}

/// Maps milliseconds to 1-based future frame positions; each value must
/// land exactly on a frame.
pub fn ms_to_frames(ms: &[f64], frame_rate: f64) -> Result<Vec<usize>> {
    ms.iter()
        .map(|&m| {
            let frames = m * frame_rate / 1000.0;
            let rounded = frames.round();
            if !(m > 0.0) || (frames - rounded).abs() > 1e-9 || rounded < 1.0 {
                return Err(Error::Config(format!(
                    "{m} ms is not a whole number of frames at {frame_rate} fps"
                )));
            }
            Ok(rounded as usize)
        })
        .collect()
}

/// Output of one evaluation predictor call.
pub struct PredictorOutput {
    /// At least as many frames as the largest requested position.
    pub future: PoseSequence,
    /// Optional per-stage futures from a single refinement pass.
    pub stages: Vec<PoseSequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub frames_ms: Vec<f64>,
    /// 1-based future frame positions matching `frames_ms`.
    pub frames: Vec<usize>,
    pub windows: usize,
    /// MPJPE per requested frame, averaged over every window.
    pub overall: Vec<f64>,
    /// Same, grouped by sequence label.
    pub per_action: BTreeMap<String, Vec<f64>>,
    /// Per stage, when the predictor reports stages.
    pub stages: Vec<Vec<f64>>,
}

/// Runs `predictor` on every `history`-frame window of `dataset` and
/// averages MPJPE at the requested frames.
pub fn evaluate_with(
    dataset: &SequenceDataset,
    history: usize,
    frames_ms: &[f64],
    stride: usize,
    mut predictor: impl FnMut(&PoseSequence, usize) -> Result<PredictorOutput>,
) -> Result<EvalTable> {
    let frame_rate = dataset
        .sequences
        .first()
        .map(PoseSequence::frame_rate)
        .ok_or_else(|| Error::Config("evaluation dataset is empty".into()))?;
    if dataset.sequences.iter().any(|s| s.frame_rate() != frame_rate) {
        return Err(Error::Config("evaluation sequences differ in frame rate".into()));
    }
    let frames = ms_to_frames(frames_ms, frame_rate)?;
    let horizon = frames.iter().copied().max().unwrap_or(0);
    let indices: Vec<usize> = frames.iter().map(|f| f - 1).collect();
    let windows = extract_windows(dataset, history, horizon, stride)?;
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "no sequence holds {history} history frames plus {horizon} future frames"
        )));
    }
    let k = frames.len();
    let mut overall = vec![0.0; k];
    let mut groups: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let mut stages: Vec<Vec<f64>> = Vec::new();
    for w in &windows {
        let seq = &dataset.sequences[w.sequence];
        let hist = seq.slice(w.start, history)?;
        let truth = seq.slice(w.start + history, horizon)?;
        let out = predictor(&hist, horizon)?;
        let errors = mpjpe_at_frames(&out.future, &truth, &indices)?;
        for (acc, e) in overall.iter_mut().zip(&errors) {
            *acc += e;
        }
        if let Some(label) = &dataset.labels[w.sequence] {
            let entry = groups.entry(label.clone()).or_insert_with(|| (vec![0.0; k], 0));
            for (acc, e) in entry.0.iter_mut().zip(&errors) {
                *acc += e;
            }
            entry.1 += 1;
        }
        if stages.is_empty() {
            stages = vec![vec![0.0; k]; out.stages.len()];
        }
        if out.stages.len() != stages.len() {
            return Err(Error::Config("predictor changed its stage count".into()));
        }
        for (acc, s) in stages.iter_mut().zip(&out.stages) {
            for (a, e) in acc.iter_mut().zip(mpjpe_at_frames(s, &truth, &indices)?) {
                *a += e;
            }
        }
    }
    let n = windows.len() as f64;
    let mean = |v: Vec<f64>, n: f64| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
    Ok(EvalTable {
        frames_ms: frames_ms.to_vec(),
        frames,
        windows: windows.len(),
        overall: mean(overall, n),
        per_action: groups.into_iter().map(|(l, (v, c))| (l, mean(v, c as f64))).collect(),
        stages: stages.into_iter().map(|v| mean(v, n)).collect(),
    })
}

/// Evaluates `model` on `history`-frame windows, generating autoregressively
/// when the furthest frame lies past `F`. Stage columns need every
/// requested frame within one pass.
pub fn evaluate(
    model: &FreqMrn,
    dataset: &SequenceDataset,
    history: usize,
    frames_ms: &[f64],
    stride: usize,
    with_stages: bool,
) -> Result<EvalTable> {
    let future = model.config.future;
    evaluate_with(dataset, history, frames_ms, stride, |hist, horizon| {
        let (generated, _) = predict_autoregressive(model, hist, horizon)?;
        let stages = if with_stages {
            if horizon > future {
                return Err(Error::Config(format!(
                    "stage columns cover one pass of {future} frames; {horizon} requested"
                )));
            }
            let out = model.predict(&hist.to_channels()?)?;
            out.stages
                .iter()
                .map(|s| {
                    let seq = PoseSequence::from_channels(hist.skeleton(), hist.frame_rate(), s)?;
                    seq.slice(seq.frames() - future, future)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(PredictorOutput {
            future: generated,
            stages,
        })
    })
}

/// Repeats the last observed pose: the model's output at initialization.
pub fn zero_motion(history: &PoseSequence, horizon: usize) -> Result<PredictorOutput> {
    let last = history.slice(history.frames() - 1, 1)?;
    let mut future = PoseSequence::empty(history.skeleton(), history.joints(), history.frame_rate())?;
    for _ in 0..horizon {
        future = future.extend(&last)?;
    }
    Ok(PredictorOutput {
        future,
        stages: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{gen_synthetic, SynthSpec};
    use crate::kinematics::Skeleton;
    use crate::model::ModelConfig;

    fn model() -> FreqMrn {
        let cfg = ModelConfig {
            history: 20,
            query: 5,
            future: 10,
            stages: 2,
            residual_pairs: 1,
            latent: 8,
            ..ModelConfig::default()
        };
        FreqMrn::new(cfg, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn dataset(frames: usize, amplitude: f64) -> SequenceDataset {
        let sk = Skeleton::synthetic(1, 3, 100.0).unwrap();
        let seqs = (0..2)
            .map(|s| {
                gen_synthetic(
                    &sk,
                    &SynthSpec {
                        frames,
                        amplitude,
                        seed: s,
                        ..SynthSpec::default()
                    },
                )
                .unwrap()
            })
            .collect();
        let mut ds = SequenceDataset::new(sk, seqs).unwrap();
        ds.labels = vec![Some("walk".into()), None];
        ds
    }

    #[test]
    fn frame_mapping() {
        assert_eq!(
            ms_to_frames(&[80.0, 400.0, 560.0, 1000.0], 25.0).unwrap(),
            vec![2, 10, 14, 25]
        );
        let err = ms_to_frames(&[90.0], 25.0).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("90")));
        assert!(ms_to_frames(&[0.0], 25.0).is_err());
    }

    #[test]
    fn autoregressive_pass_count() {
        let m = model();
        let hist = dataset(40, 100.0).sequences[0].slice(0, 20).unwrap();
        for (horizon, passes) in [(10, 1), (25, 3), (1, 1), (0, 0)] {
            let (out, n) = predict_autoregressive(&m, &hist, horizon).unwrap();
            assert_eq!((out.frames(), n), (horizon, passes));
        }
        let (a, _) = predict_autoregressive(&m, &hist, 25).unwrap();
        let (b, _) = predict_autoregressive(&m, &hist, 25).unwrap();
        assert_eq!(a, b);
        assert!(predict_autoregressive(&m, &hist.slice(0, 14).unwrap(), 5).is_err());
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let ds = dataset(50, 100.0);
        let source = ds.sequences.clone();
        let mut calls = 0;
        let table = evaluate_with(&ds, 20, &[80.0, 400.0], 5, |hist, horizon| {
            // find the window by matching its first frame
            let seq = source
                .iter()
                .find(|s| (0..s.frames()).any(|t| s.frame(t) == hist.frame(0)))
                .unwrap();
            let start = (0..seq.frames()).find(|&t| seq.frame(t) == hist.frame(0)).unwrap();
            calls += 1;
            Ok(PredictorOutput {
                future: seq.slice(start + 20, horizon).unwrap(),
                stages: Vec::new(),
            })
        })
        .unwrap();
        assert_eq!(table.overall, vec![0.0, 0.0]);
        assert_eq!(table.windows, calls);
        assert_eq!(table.per_action["walk"], vec![0.0, 0.0]);
    }

    #[test]
    fn zero_motion_on_static_data() {
        let ds = dataset(40, 0.0);
        let table = evaluate_with(&ds, 20, &[80.0, 400.0], 1, zero_motion).unwrap();
        assert_eq!(table.overall, vec![0.0, 0.0]);
        let moving = dataset(40, 100.0);
        let table = evaluate_with(&moving, 20, &[80.0, 400.0], 1, zero_motion).unwrap();
        assert!(table.overall[1] > table.overall[0]);
    }

    #[test]
    fn model_matches_zero_motion_at_init_with_stages() {
        let m = model();
        let ds = dataset(40, 100.0);
        let table = evaluate(&m, &ds, 20, &[80.0, 400.0], 3, true).unwrap();
        let base = evaluate_with(&ds, 20, &[80.0, 400.0], 3, zero_motion).unwrap();
        assert_eq!(table.stages.len(), 2);
        for (a, b) in table.overall.iter().zip(&base.overall) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(evaluate(&m, &ds, 20, &[560.0], 3, true).is_err());
        assert!(evaluate(&m, &ds, 20, &[560.0], 3, false).is_ok());
    }
}
