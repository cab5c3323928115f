use crate::error::{Error, Result};
use crate::kinematics::PoseSequence;
use crate::tensor::Tensor;

fn joint_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean per-joint position error at each requested frame, in skeleton units.
pub fn mpjpe_at_frames(pred: &PoseSequence, truth: &PoseSequence, frames: &[usize]) -> Result<Vec<f64>> {
    if pred.joints() != truth.joints() {
        return Err(Error::Skeleton {
            expected: format!("{} joints", truth.joints()),
            found: format!("{} joints", pred.joints()),
        });
    }
    let limit = pred.frames().min(truth.frames());
    let j = pred.joints();
    frames
        .iter()
        .map(|&f| {
            if f >= limit {
                return Err(Error::Bounds {
                    what: "MPJPE frame",
                    index: f,
                    limit,
                });
            }
            let (p, t) = (pred.frame(f), truth.frame(f));
            let total: f64 = (0..j)
                .map(|k| joint_distance(&p[3 * k..3 * k + 3], &t[3 * k..3 * k + 3]))
                .sum();
            Ok(total / j as f64)
        })
        .collect()
}

/// MPJPE at every frame of a pair of equally long sequences.
pub fn mpjpe_per_frame(pred: &PoseSequence, truth: &PoseSequence) -> Result<Vec<f64>> {
    if pred.frames() != truth.frames() {
        return Err(Error::dim(
            "mpjpe_per_frame",
            format!(
                "{} predicted frames vs {} ground-truth frames",
                pred.frames(),
                truth.frames()
            ),
        ));
    }
    let frames: Vec<usize> = (0..pred.frames()).collect();
    mpjpe_at_frames(pred, truth, &frames)
}

/// Per-frame MPJPE averaged over the batch, for channel-layout tensors
/// `[B×P×T]` (or `[P×T]`).
pub fn mpjpe_channels(pred: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() || pred.ndim() < 2 {
        return Err(Error::dim(
            "mpjpe_channels",
            format!("shapes {:?} and {:?}", pred.shape(), truth.shape()),
        ));
    }
    let shape = pred.shape();
    let t = shape[shape.len() - 1];
    let p = shape[shape.len() - 2];
    if !p.is_multiple_of(3) {
        return Err(Error::dim("mpjpe_channels", format!("{p} channels is not 3J")));
    }
    let joints = p / 3;
    let batch = pred.numel() / (p * t);
    let mut out = vec![0.0; t];
    for b in 0..batch {
        for j in 0..joints {
            for (f, acc) in out.iter_mut().enumerate() {
                let sq: f64 = (0..3)
                    .map(|c| {
                        let i = (b * p + 3 * j + c) * t + f;
                        (pred.data()[i] - truth.data()[i]).powi(2)
                    })
                    .sum();
                *acc += sq.sqrt();
            }
        }
    }
    let denom = (batch * joints) as f64;
    Ok(out.into_iter().map(|v| v / denom).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_seq(frames: usize, joints: usize, seed: u64) -> PoseSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * joints * 3).map(|_| rng.gen_range(-500.0..500.0)).collect();
        PoseSequence::new("s", joints, 25.0, data).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let s = random_seq(4, 3, 1);
        assert_eq!(mpjpe_per_frame(&s, &s).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_displaced_joint() {
        let truth = PoseSequence::new("s", 2, 25.0, vec![0.0; 6]).unwrap();
        let pred = PoseSequence::new("s", 2, 25.0, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(mpjpe_at_frames(&pred, &truth, &[0]).unwrap(), vec![2.5]);
    }

    #[test]
    fn out_of_range_frame() {
        let s = random_seq(3, 2, 2);
        assert!(matches!(mpjpe_at_frames(&s, &s, &[3]), Err(Error::Bounds { .. })));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matches_scalar_loop_oracle() {
        let (a, b) = (random_seq(5, 4, 3), random_seq(5, 4, 4));
        let got = mpjpe_per_frame(&a, &b).unwrap();
        for f in 0..5 {
            let mut total = 0.0;
            for j in 0..4 {
                let (pa, pb) = (a.joint(f, j), b.joint(f, j));
                let mut sq = 0.0;
                for c in 0..3 {
                    sq += (pa[c] - pb[c]) * (pa[c] - pb[c]);
                }
                total += sq.sqrt();
            }
            assert!((got[f] - total / 4.0).abs() < 1e-12);
        }
        let via_channels = mpjpe_channels(&a.to_channels().unwrap(), &b.to_channels().unwrap()).unwrap();
        for (x, y) in got.iter().zip(&via_channels) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn nonnegative_translation_invariant_and_homogeneous(seed in 0u64..5000, shift in -100.0f64..100.0, scale in 0.1f64..10.0) {
            let (a, b) = (random_seq(3, 3, seed), random_seq(3, 3, seed + 1));
            let base = mpjpe_per_frame(&a, &b).unwrap();
            prop_assert!(base.iter().all(|&v| v > 0.0));
            let moved = mpjpe_per_frame(&a.map(|x| x + shift).unwrap(), &b.map(|x| x + shift).unwrap()).unwrap();
            let scaled = mpjpe_per_frame(&a.map(|x| x * scale).unwrap(), &b.map(|x| x * scale).unwrap()).unwrap();
            for i in 0..3 {
                prop_assert!((base[i] - moved[i]).abs() < 1e-9);
                prop_assert!((base[i] * scale - scaled[i]).abs() < 1e-9 * scale.max(1.0));
            }
        }
    }
}
