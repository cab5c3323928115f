//! Seeded articulated motion for desk-scale experiments.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{PoseSequence, Skeleton};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Sinusoid,
    Lissajous,
    PiecewiseConstantVelocity,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(SynthKind::Sinusoid),
            "lissajous" => Ok(SynthKind::Lissajous),
            "piecewise-constant-velocity" => Ok(SynthKind::PiecewiseConstantVelocity),
            other => Err(Error::Config(format!(
                "unknown synthetic kind `{other}` (expected sinusoid, lissajous or piecewise-constant-velocity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Peak displacement in millimetres.
    pub amplitude: f64,
    /// Cycles per second.
    pub frequency: f64,
    pub frames: usize,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: SynthKind::Sinusoid,
            amplitude: 100.0,
            frequency: 1.0,
            frames: 60,
            frame_rate: 25.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Frames per cycle.
    pub fn period(&self) -> f64 {
        self.frame_rate / self.frequency
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!(
                "amplitude must be nonnegative, got {}",
                self.amplitude
            )));
        }
        if !(self.frequency > 0.0 && self.frame_rate > 0.0) {
            return Err(Error::Config("frequency and frame rate must be positive".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("synthetic sequences need at least one frame".into()));
        }
        Ok(())
    }
}

/// Rest pose: chain `c` points along its own direction, joints spaced by
/// their bone lengths.
fn rest_pose(skeleton: &Skeleton) -> Vec<[f64; 3]> {
    let mut pose = vec![[0.0; 3]; skeleton.joint_count()];
    let chains = skeleton.chains().len() as f64;
    for (ci, chain) in skeleton.chains().iter().enumerate() {
        let angle = TAU * ci as f64 / chains;
        let dir = [angle.cos(), angle.sin(), 0.3];
        let mut at = pose[chain.joints[0]];
        for (k, &joint) in chain.joints.iter().enumerate().skip(1) {
            let bone = skeleton.units().to_millimeters(chain.bone_lengths[k - 1]);
            for c in 0..3 {
                at[c] += dir[c] * bone;
            }
            if skeleton.chain_position(joint) == Some((ci, k)) {
                pose[joint] = at;
            }
        }
    }
    pose
}

/// Generates one sequence. Each joint moves about its rest position with a
/// joint-specific phase; the sinusoid and Lissajous kinds repeat exactly
/// every `frame_rate / frequency` frames.
pub fn gen_synthetic(skeleton: &Skeleton, spec: &SynthSpec) -> Result<PoseSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let joints = skeleton.joint_count();
    let rest = rest_pose(skeleton);
    let base_phase = rng.gen_range(0.0..TAU);
    let phases: Vec<f64> = (0..joints)
        .map(|j| base_phase + 0.4 * j as f64 + rng.gen_range(0.0..0.2))
        .collect();
    let a = spec.amplitude;
    let period = spec.period();
    let mut data = Vec::with_capacity(spec.frames * joints * 3);
    match spec.kind {
        SynthKind::Sinusoid | SynthKind::Lissajous => {
            for t in 0..spec.frames {
                // reduce modulo the period first so frames a period apart match
                let u = TAU * ((t as f64 % period) / period);
                for (j, r) in rest.iter().enumerate() {
                    let p = u + phases[j];
                    let offset = match spec.kind {
                        SynthKind::Sinusoid => [p.sin(), 0.5 * p.cos(), 0.25 * (p + 1.0).sin()],
                        _ => [
                            (3.0 * u + phases[j]).sin(),
                            (2.0 * u).sin() * 0.8,
                            (u + phases[j]).cos() * 0.3,
                        ],
                    };
                    data.extend((0..3).map(|c| r[c] + a * offset[c]));
                }
            }
        }
        SynthKind::PiecewiseConstantVelocity => {
            let segment = (period / 2.0).round().max(1.0) as usize;
            let mut pos: Vec<[f64; 3]> = rest.clone();
            let mut vel = vec![[0.0; 3]; joints];
            for t in 0..spec.frames {
                if t % segment == 0 {
                    for v in vel.iter_mut() {
                        for c in v.iter_mut() {
                            *c = a * rng.gen_range(-1.0..1.0) / segment as f64;
                        }
                    }
                }
                for p in &pos {
                    data.extend_from_slice(p);
                }
                for (p, v) in pos.iter_mut().zip(&vel) {
                    for c in 0..3 {
                        p[c] += v[c];
                    }
                }
            }
        }
    }
    PoseSequence::new(skeleton.name(), joints, spec.frame_rate, data)
}
