use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Time-ordered 3-D joint positions, frame-major (`[T×J×3]`).
///
/// A sequence may be empty (`T = 0`) so that generation and concatenation
/// have a neutral element; everything that reads frames requires `T ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    skeleton: String,
    joints: usize,
    frame_rate: f64,
    data: Vec<f64>,
}

impl PoseSequence {
    pub fn new(skeleton: impl Into<String>, joints: usize, frame_rate: f64, data: Vec<f64>) -> Result<Self> {
        if joints == 0 {
            return Err(Error::Config("pose sequence needs at least one joint".into()));
        }
        if !data.len().is_multiple_of(joints * 3) {
            return Err(Error::dim(
                "PoseSequence::new",
                format!("{} values do not form whole frames of {joints} joints", data.len()),
            ));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::Config(format!("frame rate must be positive, got {frame_rate}")));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data {
                frame: i / (joints * 3),
                joint: (i / 3) % joints,
            });
        }
        Ok(PoseSequence {
            skeleton: skeleton.into(),
            joints,
            frame_rate,
            data,
        })
    }

    pub fn empty(skeleton: impl Into<String>, joints: usize, frame_rate: f64) -> Result<Self> {
        Self::new(skeleton, joints, frame_rate, Vec::new())
    }

    /// Builds from a `[P×T]` channel tensor (channel `3j+c` = coordinate `c`
    /// of joint `j`), the layout the model works in.
    pub fn from_channels(skeleton: impl Into<String>, frame_rate: f64, channels: &Tensor) -> Result<Self> {
        let [p, t] = channels.shape()[..] else {
            return Err(Error::dim(
                "PoseSequence::from_channels",
                format!("expected [P×T], got {:?}", channels.shape()),
            ));
        };
        if p % 3 != 0 {
            return Err(Error::dim(
                "PoseSequence::from_channels",
                format!("{p} channels is not a multiple of 3"),
            ));
        }
        let mut data = vec![0.0; p * t];
        for ch in 0..p {
            for f in 0..t {
                data[f * p + ch] = channels.data()[ch * t + f];
            }
        }
        Self::new(skeleton, p / 3, frame_rate, data)
    }

    pub fn skeleton(&self) -> &str {
        &self.skeleton
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frames(&self) -> usize {
        self.data.len() / (self.joints * 3)
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.joints * 3;
        &self.data[t * w..(t + 1) * w]
    }

    pub fn joint(&self, t: usize, j: usize) -> [f64; 3] {
        let f = self.frame(t);
        [f[3 * j], f[3 * j + 1], f[3 * j + 2]]
    }

    /// Coordinates as a `[T×J×3]` tensor.
    pub fn coords(&self) -> Result<Tensor> {
        Tensor::new([self.frames(), self.joints, 3], self.data.clone())
    }

    /// Frames `start..start+len` as a new sequence.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() {
            return Err(Error::Bounds {
                what: "pose sequence frame",
                index: start + len,
                limit: self.frames(),
            });
        }
        let w = self.joints * 3;
        Ok(PoseSequence {
            skeleton: self.skeleton.clone(),
            joints: self.joints,
            frame_rate: self.frame_rate,
            data: self.data[start * w..(start + len) * w].to_vec(),
        })
    }

    /// Channel-major copy of frames `start..start+len`: `[P×len]`.
    pub fn channels(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.frames() || len == 0 {
            return Err(Error::Bounds {
                what: "pose sequence frame",
                index: start + len,
                limit: self.frames(),
            });
        }
        let p = self.joints * 3;
        let mut out = vec![0.0; p * len];
        for f in 0..len {
            let src = self.frame(start + f);
            for ch in 0..p {
                out[ch * len + f] = src[ch];
            }
        }
        Tensor::new([p, len], out)
    }

    /// The whole sequence as `[P×T]`.
    pub fn to_channels(&self) -> Result<Tensor> {
        self.channels(0, self.frames())
    }

    /// Appends `more` along time. Both must describe the same skeleton.
    pub fn extend(&self, more: &PoseSequence) -> Result<Self> {
        if more.skeleton != self.skeleton || more.joints != self.joints {
            return Err(Error::Skeleton {
                expected: format!("{} ({} joints)", self.skeleton, self.joints),
                found: format!("{} ({} joints)", more.skeleton, more.joints),
            });
        }
        let mut data = Vec::with_capacity(self.data.len() + more.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&more.data);
        Ok(PoseSequence {
            skeleton: self.skeleton.clone(),
            joints: self.joints,
            frame_rate: self.frame_rate,
            data,
        })
    }

    /// Applies `f` to every coordinate.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.skeleton.clone(),
            self.joints,
            self.frame_rate,
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, joints: usize) -> PoseSequence {
        let data = (0..frames * joints * 3).map(|i| i as f64).collect();
        PoseSequence::new("s", joints, 25.0, data).unwrap()
    }

    #[test]
    fn rejects_non_finite_with_frame_index() {
        let mut data = vec![0.0; 2 * 2 * 3];
        data[9] = f64::NAN; // frame 1, joint 1
        assert!(matches!(
            PoseSequence::new("s", 2, 25.0, data),
            Err(Error::Data { frame: 1, joint: 1 })
        ));
    }

    #[test]
    fn channel_layout_round_trip() {
        let s = seq(5, 2);
        let ch = s.to_channels().unwrap();
        assert_eq!(ch.shape(), &[6, 5]);
        assert_eq!(ch.get(&[4, 3]), s.joint(3, 1)[1]);
        assert_eq!(PoseSequence::from_channels("s", 25.0, &ch).unwrap(), s);
    }

    #[test]
    fn extend_lengths() {
        let a = seq(50, 2);
        assert_eq!(a.extend(&seq(10, 2)).unwrap().frames(), 60);
        assert_eq!(a.extend(&PoseSequence::empty("s", 2, 25.0).unwrap()).unwrap(), a);
        let mut h = a.clone();
        for _ in 0..3 {
            h = h.extend(&seq(10, 2)).unwrap();
        }
        assert_eq!(h.frames(), 80);
    }

    #[test]
    fn extend_rejects_other_skeleton() {
        let a = seq(3, 2);
        let b = PoseSequence::new("other", 2, 25.0, vec![0.0; 6]).unwrap();
        assert!(matches!(a.extend(&b), Err(Error::Skeleton { .. })));
        assert!(matches!(a.extend(&seq(1, 3)), Err(Error::Skeleton { .. })));
    }

    #[test]
    fn slicing_bounds() {
        let s = seq(5, 1);
        assert_eq!(s.slice(1, 3).unwrap().frame(0), s.frame(1));
        assert!(s.slice(3, 3).is_err());
        assert!(s.channels(5, 1).is_err());
    }
}
