//! Forward constructors. Each validates shapes, computes the value and
//! records the node; the matching backward rule lives in `Tape::propagate`.

use rand::Rng;

use super::{mm, split_axis, BatchNormConfig, MatMulGeometry, Mode, Op, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(batch, channels, time)` for a `[C×T]` or `[B×C×T]` conv input.
pub(crate) fn conv_input_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [c, t] => (1, c, t),
        [b, c, t] => (b, c, t),
        _ => unreachable!("validated in forward"),
    }
}

pub(crate) struct WindowGeometry {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub count: usize,
    pub window: usize,
}

impl WindowGeometry {
    pub(crate) fn of(weights: &[usize], seq: &[usize], window: usize) -> Result<Self> {
        let bad = |why: &str| {
            Error::dim(
                "window_mix",
                format!("weights {weights:?}, sequence {seq:?}, window {window}: {why}"),
            )
        };
        let (wb, count) = match *weights {
            [n] => (None, n),
            [b, n] => (Some(b), n),
            _ => return Err(bad("weights must be [n] or [B×n]")),
        };
        let (sb, channels, len) = match *seq {
            [p, t] => (None, p, t),
            [b, p, t] => (Some(b), p, t),
            _ => return Err(bad("sequence must be [P×T] or [B×P×T]")),
        };
        if wb != sb {
            return Err(bad("batch axes differ"));
        }
        if window == 0 || count + window - 1 > len {
            return Err(bad("windows overrun the sequence"));
        }
        Ok(WindowGeometry {
            batch: wb.unwrap_or(1),
            channels,
            len,
            count,
            window,
        })
    }
}

fn last_axis(shape: &[usize], op: &'static str) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| Error::dim(op, "scalar has no last axis"))
}

impl Tape {
    /// Matrix product with an optional shared batch axis.
    ///
    /// Accepts `[m×k]·[k×n]`, `[B×m×k]·[k×n]`, `[m×k]·[B×k×n]` and
    /// `[B×m×k]·[B×k×n]`; a 2-D operand is broadcast over the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let av = self.node_value(ia);
        let bv = self.node_value(ib);
        let geo = MatMulGeometry::of(av.shape(), bv.shape())?;
        let mut out = vec![0.0; geo.batch * geo.m * geo.n];
        for bi in 0..geo.batch {
            mm(
                &av.data()[bi * geo.a_stride..bi * geo.a_stride + geo.m * geo.k],
                &bv.data()[bi * geo.b_stride..bi * geo.b_stride + geo.k * geo.n],
                geo.m,
                geo.k,
                geo.n,
                &mut out[bi * geo.m * geo.n..(bi + 1) * geo.m * geo.n],
            );
        }
        let shape = if geo.batched {
            vec![geo.batch, geo.m, geo.n]
        } else {
            vec![geo.m, geo.n]
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a: ia, b: ib }, false))
    }

    /// Valid (unpadded, stride 1) cross-correlation along the last axis.
    ///
    /// `input` is `[C_in×T]` or `[B×C_in×T]`, `kernel` is `[C_out×C_in×W]`,
    /// `bias` is `[C_out]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let ix = self.check(input)?;
        let iw = self.check(kernel)?;
        let ibias = bias.map(|b| self.check(b)).transpose()?;
        let x = self.node_value(ix);
        let w = self.node_value(iw);
        let batched = match x.ndim() {
            2 => false,
            3 => true,
            _ => {
                return Err(Error::dim(
                    "conv1d",
                    format!("input must be [C×T] or [B×C×T], got {:?}", x.shape()),
                ))
            }
        };
        let (batch, c_in, t) = conv_input_dims(x.shape());
        let [c_out, wc_in, width] = w.shape()[..] else {
            return Err(Error::dim(
                "conv1d",
                format!("kernel must be [C_out×C_in×W], got {:?}", w.shape()),
            ));
        };
        if wc_in != c_in {
            return Err(Error::dim(
                "conv1d",
                format!(
                    "input {:?} has {c_in} channels, kernel {:?} expects {wc_in}",
                    x.shape(),
                    w.shape()
                ),
            ));
        }
        if t < width {
            return Err(Error::TemporalLength { len: t, width });
        }
        if let Some(ib) = ibias {
            let bshape = self.node_value(ib).shape();
            if bshape != [c_out] {
                return Err(Error::dim("conv1d", format!("bias must be [{c_out}], got {bshape:?}")));
            }
        }
        let t_out = t - width + 1;
        let mut out = vec![0.0; batch * c_out * t_out];
        for b in 0..batch {
            for o in 0..c_out {
                let orow = &mut out[(b * c_out + o) * t_out..(b * c_out + o + 1) * t_out];
                if let Some(ib) = ibias {
                    orow.fill(self.nodes[ib].value.data()[o]);
                }
                for c in 0..c_in {
                    let xoff = (b * c_in + c) * t;
                    for k in 0..width {
                        let wv = w.data()[(o * c_in + c) * width + k];
                        let xs = &x.data()[xoff + k..xoff + k + t_out];
                        for (acc, xv) in orow.iter_mut().zip(xs) {
                            *acc += wv * xv;
                        }
                    }
                }
            }
        }
        let shape = if batched {
            vec![batch, c_out, t_out]
        } else {
            vec![c_out, t_out]
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv1d {
                input: ix,
                kernel: iw,
                bias: ibias,
            },
            false,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let av = self.node_value(ia);
        let bv = self.node_value(ib);
        let (shape, data) = if av.shape() == bv.shape() {
            let d = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            (av.shape().to_vec(), d)
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            (av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())
        } else if av.is_scalar() {
            let x = av.data()[0];
            (bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::dim(
                name,
                format!("incompatible shapes {:?} and {:?}", av.shape(), bv.shape()),
            ));
        };
        Ok(self.push(Tensor::from_parts(shape, data), op(ia, ib), false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.node_value(ia).map(|x| x * factor);
        Ok(self.push(v, Op::Scale { a: ia, factor }, false))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.node_value(ia).map(f64::tanh);
        Ok(self.push(v, Op::Tanh { a: ia }, false))
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.node_value(ia).map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(v, Op::Relu { a: ia }, false))
    }

    /// Batch normalization over every axis except `axis`.
    ///
    /// Train mode normalizes with the batch statistics and folds them into
    /// `stats` (running variance uses the unbiased estimate). Eval mode
    /// normalizes with `stats` and fails if they were never initialized.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        stats: &mut RunningStats,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let ix = self.check(input)?;
        let ig = self.check(gamma)?;
        let ib = self.check(beta)?;
        let x = self.node_value(ix);
        if axis >= x.ndim() {
            return Err(Error::dim(
                "batchnorm",
                format!("axis {axis} out of range for shape {:?}", x.shape()),
            ));
        }
        let (outer, c, inner) = split_axis(x.shape(), axis);
        for (name, idx) in [("gamma", ig), ("beta", ib)] {
            if self.node_value(idx).shape() != [c] {
                return Err(Error::dim(
                    "batchnorm",
                    format!("{name} must be [{c}], got {:?}", self.node_value(idx).shape()),
                ));
            }
        }
        if stats.channels() != c {
            return Err(Error::dim(
                "batchnorm",
                format!("running stats hold {} channels, input has {c}", stats.channels()),
            ));
        }
        let n = outer * inner;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let off = (o * c + ch) * inner;
                        *m += x.data()[off..off + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for o in 0..outer {
                    for ch in 0..c {
                        let off = (o * c + ch) * inner;
                        var[ch] += x.data()[off..off + inner]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
            Mode::Eval => {
                if !stats.initialized {
                    return Err(Error::State(
                        "batch norm running statistics are uninitialized; run a training pass first".into(),
                    ));
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
        let gam = self.node_value(ig).data();
        let bet = self.node_value(ib).data();
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for ch in 0..c {
                let off = (o * c + ch) * inner;
                for j in off..off + inner {
                    xhat[j] = (x.data()[j] - mean[ch]) * inv_std[ch];
                    out[j] = gam[ch] * xhat[j] + bet[ch];
                }
            }
        }
        if mode == Mode::Train {
            let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            if stats.initialized {
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - cfg.momentum) * stats.mean[ch] + cfg.momentum * mean[ch];
                    stats.var[ch] = (1.0 - cfg.momentum) * stats.var[ch] + cfg.momentum * var[ch] * unbiased;
                }
            } else {
                stats.mean = mean;
                stats.var = var.iter().map(|v| v * unbiased).collect();
                stats.initialized = true;
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input: ix,
                gamma: ig,
                beta: ib,
                axis,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            false,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` at train time,
    /// eval mode (and `rate == 0`) returns `input` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        let ix = self.check(input)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.node_value(ix);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { a: ix, mask }, false))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.node_value(ia).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape { a: ia }, false))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_last", "nothing to concatenate"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let lead = self.node_value(idx[0]).shape();
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut total = 0;
        for &i in &idx {
            let s = self.node_value(i).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(
                    "concat_last",
                    format!("shape {s:?} does not share leading axes {lead:?}"),
                ));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idx {
                let v = self.node_value(i);
                let w = *v.shape().last().unwrap();
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: idx }, false))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.node_value(ia);
        let last = last_axis(v.shape(), "slice_last")?;
        if len == 0 || start + len > last {
            return Err(Error::dim(
                "slice_last",
                format!("range {start}..{} outside axis of length {last}", start + len),
            ));
        }
        let rows = v.numel() / last;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.data()[r * last + start..r * last + start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { a: ia, start }, false))
    }

    /// Appends `extra` copies of the final column along the last axis.
    pub fn pad_last(&mut self, a: Var, extra: usize) -> Result<Var> {
        let ia = self.check(a)?;
        if extra == 0 {
            return Ok(a);
        }
        let v = self.node_value(ia);
        let last = last_axis(v.shape(), "pad_last")?;
        let rows = v.numel() / last;
        let mut out = Vec::with_capacity(rows * (last + extra));
        for r in 0..rows {
            let row = &v.data()[r * last..(r + 1) * last];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[last - 1], extra));
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = last + extra;
        Ok(self.push(Tensor::from_parts(shape, out), Op::PadLast { a: ia }, false))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.node_value(ia).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: ia }, false))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.node_value(ia);
        let m = v.sum() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean { a: ia }, false))
    }

    /// Divides each row (last axis) by its sum. Rows summing to exactly zero
    /// become uniform; the returned flags mark those rows.
    pub fn normalize_sum(&mut self, a: Var) -> Result<(Var, Vec<bool>)> {
        let ia = self.check(a)?;
        let v = self.node_value(ia);
        let width = last_axis(v.shape(), "normalize_sum")?;
        let rows = v.numel() / width;
        let mut out = Vec::with_capacity(v.numel());
        let mut fallback = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data()[r * width..(r + 1) * width];
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                fallback.push(true);
                out.extend(std::iter::repeat_n(1.0 / width as f64, width));
            } else {
                fallback.push(false);
                out.extend(row.iter().map(|x| x / total));
            }
        }
        let shape = v.shape().to_vec();
        let var = self.push(
            Tensor::from_parts(shape, out),
            Op::NormalizeSum {
                a: ia,
                fallback: fallback.clone(),
            },
            false,
        );
        Ok((var, fallback))
    }

    /// `out[b,p,t] = Σ_i weights[b,i] · seq[b,p,i+t]` for `t < window`.
    pub fn window_mix(&mut self, weights: Var, seq: Var, window: usize) -> Result<Var> {
        let iw = self.check(weights)?;
        let is = self.check(seq)?;
        let w = self.node_value(iw);
        let s = self.node_value(is);
        let geo = WindowGeometry::of(w.shape(), s.shape(), window)?;
        let mut out = vec![0.0; geo.batch * geo.channels * window];
        for b in 0..geo.batch {
            for p in 0..geo.channels {
                let orow = &mut out[(b * geo.channels + p) * window..][..window];
                let soff = (b * geo.channels + p) * geo.len;
                for i in 0..geo.count {
                    let wv = w.data()[b * geo.count + i];
                    for (o, x) in orow.iter_mut().zip(&s.data()[soff + i..soff + i + window]) {
                        *o += wv * x;
                    }
                }
            }
        }
        let mut shape = s.shape().to_vec();
        *shape.last_mut().unwrap() = window;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::WindowMix { weights: iw, seq: is },
            false,
        ))
    }

    /// Euclidean norm of each xyz triple: `[…×3J×T] → […×J×T]`, where
    /// channel `3j+c` holds coordinate `c` of joint `j`.
    pub fn joint_norms(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.node_value(ia);
        let shape = v.shape();
        if shape.len() < 2 || !shape[shape.len() - 2].is_multiple_of(3) {
            return Err(Error::dim("joint_norms", format!("expected [..×3J×T], got {shape:?}")));
        }
        let t = shape[shape.len() - 1];
        let p = shape[shape.len() - 2];
        let joints = p / 3;
        let batch = v.numel() / (p * t);
        let mut out = vec![0.0; batch * joints * t];
        for b in 0..batch {
            for j in 0..joints {
                for f in 0..t {
                    let sq: f64 = (0..3).map(|c| v.data()[(b * p + 3 * j + c) * t + f].powi(2)).sum();
                    out[(b * joints + j) * t + f] = sq.sqrt();
                }
            }
        }
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape[n - 2] = joints;
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::JointNorms { a: ia }, false))
    }
}
