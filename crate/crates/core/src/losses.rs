//! Kinematics-weighted position loss, velocity loss and their sum.
//!
//! Tape losses take channel tensors `[B×P×T]`; the `*_values` helpers take
//! frame-major `[T×J×3]` tensors and return plain numbers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kinematics::Skeleton;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalForm {
    /// `F − f + L` on future frames; the last frame gets weight 0.
    Unshifted,
    /// Same plus one, so the last frame keeps weight 1.
    #[default]
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Include the weighted position term.
    pub use_position: bool,
    /// Kinematic spatial-temporal weights; off means λ ≡ 1.
    pub use_st_weights: bool,
    pub use_velocity: bool,
    /// Supervise the `L` query frames as well as the `F` future ones.
    pub reconstruct_query: bool,
    pub spatial_floor: f64,
    pub temporal_form: TemporalForm,
    /// Apply the loss to every stage output instead of only the last.
    pub supervise_all_stages: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            use_position: true,
            use_st_weights: true,
            use_velocity: true,
            reconstruct_query: true,
            spatial_floor: 0.1,
            temporal_form: TemporalForm::Shifted,
            supervise_all_stages: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_position && !self.use_velocity {
            return Err(Error::Config("every loss component is disabled".into()));
        }
        if !(self.spatial_floor > 0.0 && self.spatial_floor.is_finite()) {
            return Err(Error::Config(format!(
                "spatial floor must be positive, got {}",
                self.spatial_floor
            )));
        }
        Ok(())
    }
}

/// Per-joint factor `(j'/l)·ln(cumulative bone length in mm)`, clamped
/// below at `floor`; chain roots get `floor`.
pub fn spatial_factors(skeleton: &Skeleton, floor: f64) -> Result<Tensor> {
    let mut out = Vec::with_capacity(skeleton.joint_count());
    for joint in 0..skeleton.joint_count() {
        let (chain, position) = skeleton.chain_position(joint).ok_or(Error::Bounds {
            what: "joint without chain",
            index: joint,
            limit: skeleton.joint_count(),
        })?;
        if position == 0 {
            out.push(floor);
            continue;
        }
        let bones = skeleton.chains()[chain].bone_count() as f64;
        let length = skeleton
            .units()
            .to_millimeters(skeleton.cumulative_bone_length(chain, position)?);
        let log = length.ln();
        if log <= 0.0 {
            log::warn!(
                "joint {joint} ({}) sits {length:.3} mm down its chain; using floor {floor}",
                skeleton.joint_names()[joint]
            );
        }
        out.push((position as f64 / bones * log).max(floor));
    }
    Tensor::new([out.len()], out)
}

/// Temporal factors over the `L + F` frames of the prediction window.
pub fn temporal_factors(query_len: usize, future_len: usize, form: TemporalForm) -> Result<Tensor> {
    if query_len == 0 || future_len == 0 {
        return Err(Error::Config(format!(
            "temporal factors need L, F ≥ 1 (got {query_len}, {future_len})"
        )));
    }
    let offset = match form {
        TemporalForm::Unshifted => 0.0,
        TemporalForm::Shifted => 1.0,
    };
    let (l, fut) = (query_len as f64, future_len as f64);
    let values = (1..=query_len + future_len)
        .map(|f| {
            if f <= query_len {
                1.0
            } else {
                fut - f as f64 + l + offset
            }
        })
        .collect();
    Tensor::new([query_len + future_len], values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// `[T×J]`, summing to `J·T`.
    pub lambda: Tensor,
    pub spatial: Tensor,
    pub temporal: Tensor,
}

impl LossWeights {
    /// `λ[f][j] = c·t_f·s_j` with `c` fixing the total at `J·T`.
    pub fn assemble(spatial: &Tensor, temporal: &Tensor) -> Result<Self> {
        if spatial.ndim() != 1 || temporal.ndim() != 1 {
            return Err(Error::dim(
                "assemble_lambda",
                format!(
                    "factors must be vectors, got {:?} and {:?}",
                    spatial.shape(),
                    temporal.shape()
                ),
            ));
        }
        if spatial
            .data()
            .iter()
            .chain(temporal.data())
            .any(|&v| !(v >= 0.0) || !v.is_finite())
        {
            return Err(Error::Config(
                "loss weight factors must be finite and nonnegative".into(),
            ));
        }
        let (j, t) = (spatial.numel(), temporal.numel());
        let mut raw = Vec::with_capacity(t * j);
        for &tf in temporal.data() {
            raw.extend(spatial.data().iter().map(|&s| s * tf));
        }
        let lambda = normalized(raw, [t, j])?;
        Ok(LossWeights {
            lambda,
            spatial: spatial.clone(),
            temporal: temporal.clone(),
        })
    }

    /// λ ≡ 1.
    pub fn uniform(joints: usize, frames: usize) -> Self {
        LossWeights {
            lambda: Tensor::ones([frames, joints]),
            spatial: Tensor::ones([joints]),
            temporal: Tensor::ones([frames]),
        }
    }

    pub fn for_skeleton(skeleton: &Skeleton, query_len: usize, future_len: usize, config: &LossConfig) -> Result<Self> {
        if !config.use_st_weights {
            return Ok(Self::uniform(skeleton.joint_count(), query_len + future_len));
        }
        let spatial = spatial_factors(skeleton, config.spatial_floor)?;
        let temporal = temporal_factors(query_len, future_len, config.temporal_form)?;
        Self::assemble(&spatial, &temporal)
    }

    pub fn frames(&self) -> usize {
        self.lambda.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.lambda.shape()[1]
    }

    /// Rows `start..` renormalized to sum to `J·(T − start)`.
    pub fn tail(&self, start: usize) -> Result<Tensor> {
        let (t, j) = (self.frames(), self.joints());
        if start >= t {
            return Err(Error::Bounds {
                what: "loss weight frame",
                index: start,
                limit: t,
            });
        }
        normalized(self.lambda.data()[start * j..].to_vec(), [t - start, j])
    }
}

fn normalized(raw: Vec<f64>, shape: [usize; 2]) -> Result<Tensor> {
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("loss weights are all zero".into()));
    }
    let c = (shape[0] * shape[1]) as f64 / total;
    Tensor::new(shape, raw.into_iter().map(|v| v * c).collect())
}

fn check_pair(tape: &Tape, op: &'static str, pred: Var, truth: Var) -> Result<(usize, usize, usize)> {
    let (a, b) = (tape.value(pred).shape(), tape.value(truth).shape());
    if a != b {
        return Err(Error::dim(op, format!("prediction {a:?} vs target {b:?}")));
    }
    match *a {
        [batch, p, t] if p % 3 == 0 => Ok((batch, p / 3, t)),
        _ => Err(Error::dim(op, format!("expected [B×3J×T], got {a:?}"))),
    }
}

/// Mean over batch, frames and joints of `λ[f][j]·‖pred − truth‖`.
pub fn loss_st(tape: &mut Tape, pred: Var, truth: Var, lambda: &Tensor) -> Result<Var> {
    let (batch, joints, frames) = check_pair(tape, "loss_st", pred, truth)?;
    if lambda.shape() != [frames, joints] {
        return Err(Error::dim(
            "loss_st",
            format!("weights {:?} for {frames} frames × {joints} joints", lambda.shape()),
        ));
    }
    let diff = tape.sub(pred, truth)?;
    let norms = tape.joint_norms(diff)?;
    let mut expanded = Vec::with_capacity(batch * joints * frames);
    for _ in 0..batch {
        for j in 0..joints {
            expanded.extend((0..frames).map(|f| lambda.get(&[f, j])));
        }
    }
    let w = tape.constant(Tensor::new([batch, joints, frames], expanded)?);
    let weighted = tape.mul(norms, w)?;
    tape.mean(weighted)
}

fn velocities(tape: &mut Tape, x: Var, frames: usize) -> Result<Var> {
    let later = tape.slice_last(x, 1, frames - 1)?;
    let earlier = tape.slice_last(x, 0, frames - 1)?;
    tape.sub(later, earlier)
}

/// Mean per-joint distance between predicted and true frame-to-frame
/// displacements.
pub fn loss_velocity(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let (_, _, frames) = check_pair(tape, "loss_velocity", pred, truth)?;
    if frames < 2 {
        return Err(Error::Length {
            what: "velocity loss frames",
            got: frames,
            need: 2,
        });
    }
    let vp = velocities(tape, pred, frames)?;
    let vt = velocities(tape, truth, frames)?;
    let diff = tape.sub(vp, vt)?;
    let norms = tape.joint_norms(diff)?;
    tape.mean(norms)
}

/// Sum of the enabled components on `[B×P×(L+F)]`. Without query
/// reconstruction only the last `F` frames are supervised.
pub fn loss_total(
    tape: &mut Tape,
    pred: Var,
    truth: Var,
    weights: &LossWeights,
    config: &LossConfig,
    query_len: usize,
) -> Result<Var> {
    config.validate()?;
    let (_, joints, frames) = check_pair(tape, "loss_total", pred, truth)?;
    if weights.frames() != frames || weights.joints() != joints {
        return Err(Error::dim(
            "loss_total",
            format!(
                "weights {:?} for {frames} frames × {joints} joints",
                weights.lambda.shape()
            ),
        ));
    }
    let (pred, truth, lambda) = if config.reconstruct_query {
        (pred, truth, weights.lambda.clone())
    } else {
        let future = frames.checked_sub(query_len).filter(|&f| f > 0).ok_or(Error::Length {
            what: "supervised future frames",
            got: frames.saturating_sub(query_len),
            need: 1,
        })?;
        (
            tape.slice_last(pred, query_len, future)?,
            tape.slice_last(truth, query_len, future)?,
            weights.tail(query_len)?,
        )
    };
    let lambda = if config.use_st_weights {
        lambda
    } else {
        Tensor::ones(lambda.shape().to_vec())
    };
    let mut terms = Vec::with_capacity(2);
    if config.use_position {
        terms.push(loss_st(tape, pred, truth, &lambda)?);
    }
    if config.use_velocity {
        terms.push(loss_velocity(tape, pred, truth)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// `[T×J×3]` → `[1×3J×T]`.
pub fn frames_to_channels(x: &Tensor) -> Result<Tensor> {
    let [t, j, 3] = *x.shape() else {
        return Err(Error::dim(
            "frames_to_channels",
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
    Tensor::new([1, p, t], out)
}

fn on_tape(pred: &Tensor, truth: &Tensor, body: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(frames_to_channels(pred)?);
    let t = tape.constant(frames_to_channels(truth)?);
    let out = body(&mut tape, p, t)?;
    Ok(tape.value(out).item())
}

/// [`loss_st`] on frame-major `[T×J×3]` tensors.
pub fn loss_st_values(pred: &Tensor, truth: &Tensor, weights: &LossWeights) -> Result<f64> {
    on_tape(pred, truth, |tape, p, t| loss_st(tape, p, t, &weights.lambda))
}

/// [`loss_velocity`] on frame-major `[T×J×3]` tensors.
pub fn loss_velocity_values(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    on_tape(pred, truth, loss_velocity)
}

/// [`loss_total`] on frame-major `[T×J×3]` tensors.
pub fn loss_total_values(
    pred: &Tensor,
    truth: &Tensor,
    weights: &LossWeights,
    config: &LossConfig,
    query_len: usize,
) -> Result<f64> {
    on_tape(pred, truth, |tape, p, t| {
        loss_total(tape, p, t, weights, config, query_len)
    })
}
