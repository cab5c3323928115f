//! Motion attention: condenses a pose history of any length into a
//! fixed-size summary of `L + F` frames.
//!
//! The last `L` frames form the query, every length-`L` window that still has
//! `F` frames after it forms a key, and the summary is the convex
//! combination of the corresponding `L + F`-frame value windows, weighted by
//! the normalized query/key dot products. Values stay in pose space.

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Forward, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Widths of the two convolutions so that together they see exactly
/// `query_len` frames. `query_len = 10` gives `(6, 5)`.
pub fn kernel_widths(query_len: usize) -> (usize, usize) {
    let first = (query_len + 2) / 2;
    (first, query_len + 1 - first)
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvLayer {
    fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        width: usize,
        bias: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let fan_in = c_in * width;
        let kernel = store.add(
            format!("{name}.kernel"),
            fan_in_uniform(&[c_out, c_in, width], fan_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), fan_in_uniform(&[c_out], fan_in, rng)));
        ConvLayer { kernel, bias }
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let bias = self.bias.map(|b| f.var(b));
        f.tape.conv1d(x, f.var(self.kernel), bias)
    }
}

/// Two-layer temporal CNN, rectified after each layer: `[P×L] → [d]`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub query_len: usize,
}

impl Encoder {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        latent: usize,
        query_len: usize,
        bias: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let (w1, w2) = kernel_widths(query_len);
        Encoder {
            conv1: ConvLayer::init(store, &format!("{name}.conv1"), channels, latent, w1, bias, rng),
            conv2: ConvLayer::init(store, &format!("{name}.conv2"), latent, latent, w2, bias, rng),
            query_len,
        }
    }

    /// Encodes every length-`L` window of `x` (`[B×P×T]`), giving
    /// `[B×d×(T−L+1)]`; column `i` sees frames `i..i+L`.
    pub fn encode_sliding(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(f, x)?;
        let h = f.tape.relu(h)?;
        let h = self.conv2.forward(f, h)?;
        f.tape.relu(h)
    }

    /// Encodes exactly one window of `L` frames (`[P×L]` or `[B×P×L]`).
    pub fn encode(&self, f: &mut Forward<'_>, window: Var) -> Result<Var> {
        let shape = f.tape.value(window).shape().to_vec();
        if shape.last() != Some(&self.query_len) {
            return Err(Error::dim(
                "encode",
                format!("window {shape:?} must have exactly {} frames", self.query_len),
            ));
        }
        let out = self.encode_sliding(f, window)?;
        let d = f.tape.value(out).shape()[shape.len() - 2];
        let flat: Vec<usize> = if shape.len() == 3 { vec![shape[0], d] } else { vec![d] };
        f.tape.reshape(out, &flat)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query_net: Encoder,
    pub key_net: Encoder,
    pub query_len: usize,
    pub future_len: usize,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        channels: usize,
        latent: usize,
        query_len: usize,
        future_len: usize,
        bias: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if query_len == 0 || future_len == 0 || latent == 0 {
            return Err(Error::Config(format!(
                "attention needs positive L, F and d (got {query_len}, {future_len}, {latent})"
            )));
        }
        Ok(AttentionParams {
            query_net: Encoder::init(store, "attention.query", channels, latent, query_len, bias, rng),
            key_net: Encoder::init(store, "attention.key", channels, latent, query_len, bias, rng),
            query_len,
            future_len,
        })
    }

    /// Number of key/value windows in a history of `history_len` frames.
    pub fn window_count(&self, history_len: usize) -> Result<usize> {
        let need = self.query_len + self.future_len;
        if history_len < need {
            return Err(Error::HistoryTooShort { got: history_len, need });
        }
        Ok(history_len - need + 1)
    }

    /// Summarizes `history` (`[B×P×H]`).
    pub fn summarize(&self, f: &mut Forward<'_>, history: Var) -> Result<MotionSummary> {
        let shape = f.tape.value(history).shape().to_vec();
        let [batch, _, h] = shape[..] else {
            return Err(Error::dim(
                "summarize",
                format!("history must be [B×P×H], got {shape:?}"),
            ));
        };
        let count = self.window_count(h)?;
        let (l, fut) = (self.query_len, self.future_len);

        let query_frames = f.tape.slice_last(history, h - l, l)?;
        let q = self.query_net.encode_sliding(f, query_frames)?;
        // keys only over windows that leave F frames of value after them
        let key_frames = f.tape.slice_last(history, 0, h - fut)?;
        let keys = self.key_net.encode_sliding(f, key_frames)?;
        let d = f.tape.value(q).shape()[1];

        let q_row = f.tape.reshape(q, &[batch, 1, d])?;
        let scores = f.tape.matmul(q_row, keys)?;
        let scores = f.tape.reshape(scores, &[batch, count])?;
        attend(f.tape, scores, history, l + fut)
    }
}

/// Normalizes raw `scores` (`[B×n]`) onto the simplex and mixes the `n`
/// value windows of length `window` from `history` (`[B×P×H]`).
pub fn attend(tape: &mut Tape, scores: Var, history: Var, window: usize) -> Result<MotionSummary> {
    let (weights, fallback) = tape.normalize_sum(scores)?;
    let values = tape.window_mix(weights, history, window)?;
    Ok(MotionSummary {
        values,
        weights,
        scores,
        fallback,
    })
}

/// Attention output on the tape.
#[derive(Debug, Clone)]
pub struct MotionSummary {
    /// `[B×P×(L+F)]`
    pub values: Var,
    /// `[B×n]`, one simplex row per sample.
    pub weights: Var,
    pub scores: Var,
    /// Samples whose scores were all zero and fell back to uniform weights.
    pub fallback: Vec<bool>,
}

impl MotionSummary {
    pub fn weights_tensor(&self, tape: &Tape) -> Tensor {
        tape.value(self.weights).clone()
    }
}
