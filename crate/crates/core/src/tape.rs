//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The forward pass records every operation into a linear arena of buffers;
//! [`Tape::backward`] replays the ops in reverse, accumulating vector-Jacobian
//! products. A tape is rebuilt per forward pass and confined to one thread.

use crate::error::{GsaError, Result};
use crate::ops;
use crate::tensor::{softmax_row, Tensor};

pub type BufId = usize;

#[derive(Debug, Clone)]
struct TapeBuf {
    data: Vec<f32>,
    shape: Vec<usize>,
}

/// A recorded operation. Constant payloads (targets, loss weights, teacher
/// probabilities) are stored inline because gradients never flow into them.
#[derive(Debug, Clone)]
enum TapeOp {
    Conv2d {
        input: BufId,
        weight: BufId,
        bias: BufId,
        out: BufId,
        stride: usize,
        padding: usize,
    },
    Silu {
        input: BufId,
        out: BufId,
    },
    ChannelScale {
        input: BufId,
        lambda: BufId,
        out: BufId,
    },
    UpsampleNearest {
        input: BufId,
        out: BufId,
        factor: usize,
    },
    ConcatChannels {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    /// [N,C,H,W] -> [N*H*W, C] row-per-location reorder.
    NchwToRows {
        input: BufId,
        out: BufId,
    },
    /// Weighted sum of elementwise BCE-with-logits terms (scalar out).
    BceSum {
        logits: BufId,
        out: BufId,
        targets: Vec<f32>,
        weights: Vec<f32>,
    },
    /// Weighted sum of elementwise smooth-L1 terms (scalar out).
    SmoothL1Sum {
        pred: BufId,
        out: BufId,
        targets: Vec<f32>,
        weights: Vec<f32>,
    },
    /// T^2-scaled KL(teacher || student) averaged over rows (scalar out).
    KdLoss {
        student: BufId,
        out: BufId,
        teacher_probs: Vec<f32>,
        temperature: f32,
    },
    WeightedSum {
        input: BufId,
        out: BufId,
        weights: Vec<f32>,
    },
    ScalarAdd {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    ScalarScale {
        a: BufId,
        out: BufId,
        k: f32,
    },
}

#[derive(Debug)]
pub struct Tape {
    bufs: Vec<TapeBuf>,
    ops: Vec<TapeOp>,
    grads: Vec<Option<Vec<f32>>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new(), recording: true }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// When recording is off, forward values are still computed but no ops
    /// are kept, so backward finds nothing to replay. Inference-only mode.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    fn record(&mut self, op: TapeOp) {
        if self.recording {
            self.ops.push(op);
        }
    }

    pub fn alloc(&mut self, shape: Vec<usize>, data: Vec<f32>) -> BufId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.bufs.push(TapeBuf { data, shape });
        self.grads.push(None);
        self.bufs.len() - 1
    }

    pub fn leaf(&mut self, t: &Tensor) -> BufId {
        self.alloc(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn data(&self, id: BufId) -> &[f32] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn scalar_value(&self, id: BufId) -> f32 {
        debug_assert_eq!(self.bufs[id].data.len(), 1);
        self.bufs[id].data[0]
    }

    pub fn grad(&self, id: BufId) -> Option<&[f32]> {
        self.grads[id].as_deref()
    }

    /// Gradient buffer, zeros when the buffer was never reached.
    pub fn grad_or_zeros(&self, id: BufId) -> Vec<f32> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.bufs[id].data.len()],
        }
    }

    fn accumulate(&mut self, id: BufId, delta: &[f32]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => self.grads[id] = Some(delta.to_vec()),
        }
    }

    // ── Recorded operations ─────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: BufId,
        weight: BufId,
        bias: BufId,
        stride: usize,
        padding: usize,
    ) -> Result<BufId> {
        let s = ops::ConvShape::resolve(self.shape(input), self.shape(weight), stride, padding)?;
        let cout = self.shape(weight)[0];
        if self.bufs[bias].data.len() != cout {
            return Err(GsaError::Dimension {
                axis: "bias",
                expected: cout,
                got: self.bufs[bias].data.len(),
            });
        }
        let out_data = ops::conv2d_forward(
            &self.bufs[input].data,
            &self.bufs[weight].data,
            &self.bufs[bias].data,
            &s,
        );
        let out = self.alloc(vec![s.batch, s.cout, s.hout, s.wout], out_data);
        self.record(TapeOp::Conv2d {
            input,
            weight,
            bias,
            out,
            stride,
            padding,
        });
        Ok(out)
    }

    pub fn silu(&mut self, input: BufId) -> BufId {
        let mut data = vec![0.0; self.bufs[input].data.len()];
        ops::silu_forward(&self.bufs[input].data, &mut data);
        let shape = self.bufs[input].shape.clone();
        let out = self.alloc(shape, data);
        self.record(TapeOp::Silu { input, out });
        out
    }

    pub fn channel_scale(&mut self, input: BufId, lambda: BufId) -> Result<BufId> {
        let shape = self.bufs[input].shape.clone();
        let [batch, c, h, w]: [usize; 4] = shape
            .as_slice()
            .try_into()
            .map_err(|_| GsaError::argument("input", "channel_scale input must be rank 4"))?;
        if self.bufs[lambda].data.len() != c {
            return Err(GsaError::Dimension {
                axis: "lambda",
                expected: c,
                got: self.bufs[lambda].data.len(),
            });
        }
        let mut data = vec![0.0; self.bufs[input].data.len()];
        ops::channel_scale_forward(
            &self.bufs[input].data,
            &self.bufs[lambda].data,
            batch,
            h * w,
            &mut data,
        );
        let out = self.alloc(shape, data);
        self.record(TapeOp::ChannelScale { input, lambda, out });
        Ok(out)
    }

    pub fn upsample_nearest(&mut self, input: BufId, factor: usize) -> Result<BufId> {
        if factor < 1 {
            return Err(GsaError::argument("factor", "must be >= 1"));
        }
        let [n, c, h, w]: [usize; 4] = self.bufs[input]
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| GsaError::argument("input", "upsample input must be rank 4"))?;
        let mut data = vec![0.0; n * c * h * factor * w * factor];
        ops::upsample_forward(&self.bufs[input].data, n * c, h, w, factor, &mut data);
        let out = self.alloc(vec![n, c, h * factor, w * factor], data);
        self.record(TapeOp::UpsampleNearest { input, out, factor });
        Ok(out)
    }

    pub fn concat_channels(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let [na, ca, ha, wa]: [usize; 4] = self.bufs[a]
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| GsaError::argument("a", "concat input must be rank 4"))?;
        let [nb, cb, hb, wb]: [usize; 4] = self.bufs[b]
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| GsaError::argument("b", "concat input must be rank 4"))?;
        if na != nb {
            return Err(GsaError::Dimension { axis: "batch", expected: na, got: nb });
        }
        if ha != hb {
            return Err(GsaError::Dimension { axis: "height", expected: ha, got: hb });
        }
        if wa != wb {
            return Err(GsaError::Dimension { axis: "width", expected: wa, got: wb });
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            data.extend_from_slice(&self.bufs[a].data[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&self.bufs[b].data[n * cb * hw..(n + 1) * cb * hw]);
        }
        let out = self.alloc(vec![na, ca + cb, ha, wa], data);
        self.record(TapeOp::ConcatChannels { a, b, out });
        Ok(out)
    }

    /// Reorder [N,C,H,W] into one row of C values per spatial location.
    pub fn nchw_to_rows(&mut self, input: BufId) -> Result<BufId> {
        let [n, c, h, w]: [usize; 4] = self.bufs[input]
            .shape
            .as_slice()
            .try_into()
            .map_err(|_| GsaError::argument("input", "expected rank-4 input"))?;
        let hw = h * w;
        let mut data = vec![0.0f32; n * c * hw];
        let src = &self.bufs[input].data;
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    data[(ni * hw + p) * c + ci] = src[(ni * c + ci) * hw + p];
                }
            }
        }
        let out = self.alloc(vec![n * hw, c], data);
        self.record(TapeOp::NchwToRows { input, out });
        Ok(out)
    }

    /// Scalar: `sum_i weights[i] * bce_with_logits(logits[i], targets[i])`.
    pub fn bce_sum(&mut self, logits: BufId, targets: Vec<f32>, weights: Vec<f32>) -> BufId {
        let z = &self.bufs[logits].data;
        debug_assert_eq!(z.len(), targets.len());
        debug_assert_eq!(z.len(), weights.len());
        let mut acc = 0.0f32;
        for ((&zi, &ti), &wi) in z.iter().zip(&targets).zip(&weights) {
            if wi != 0.0 {
                acc += wi * ops::bce_with_logits(zi, ti);
            }
        }
        let out = self.alloc(vec![1], vec![acc]);
        self.record(TapeOp::BceSum { logits, out, targets, weights });
        out
    }

    /// Scalar: `sum_i weights[i] * smooth_l1(pred[i], targets[i])`.
    pub fn smooth_l1_sum(&mut self, pred: BufId, targets: Vec<f32>, weights: Vec<f32>) -> BufId {
        let x = &self.bufs[pred].data;
        debug_assert_eq!(x.len(), targets.len());
        let mut acc = 0.0f32;
        for ((&xi, &ti), &wi) in x.iter().zip(&targets).zip(&weights) {
            if wi != 0.0 {
                acc += wi * ops::smooth_l1(xi, ti);
            }
        }
        let out = self.alloc(vec![1], vec![acc]);
        self.record(TapeOp::SmoothL1Sum { pred, out, targets, weights });
        out
    }

    /// Distillation loss over rows of logits: `T^2 * mean_rows KL(Q_t || Q_s)`.
    ///
    /// `teacher_probs` must already be temperature-softmaxed rows matching the
    /// student buffer's [rows, classes] shape; gradients flow only to the
    /// student logits.
    pub fn kd_loss(
        &mut self,
        student: BufId,
        teacher_probs: Vec<f32>,
        temperature: f32,
    ) -> Result<BufId> {
        if !(temperature > 0.0) {
            return Err(GsaError::argument("temperature", "must be positive"));
        }
        let shape = self.bufs[student].shape.clone();
        let classes = *shape.last().ok_or_else(|| GsaError::argument("student", "empty shape"))?;
        if teacher_probs.len() != self.bufs[student].data.len() {
            return Err(GsaError::Dimension {
                axis: "teacher",
                expected: self.bufs[student].data.len(),
                got: teacher_probs.len(),
            });
        }
        let rows = teacher_probs.len() / classes;
        let loss = kd_loss_rows(&self.bufs[student].data, &teacher_probs, classes, temperature);
        let _ = rows;
        let out = self.alloc(vec![1], vec![loss]);
        self.record(TapeOp::KdLoss { student, out, teacher_probs, temperature });
        Ok(out)
    }

    pub fn weighted_sum(&mut self, input: BufId, weights: Vec<f32>) -> BufId {
        let acc: f32 = self.bufs[input]
            .data
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum();
        let out = self.alloc(vec![1], vec![acc]);
        self.record(TapeOp::WeightedSum { input, out, weights });
        out
    }

    pub fn scalar_add(&mut self, a: BufId, b: BufId) -> BufId {
        let v = self.scalar_value(a) + self.scalar_value(b);
        let out = self.alloc(vec![1], vec![v]);
        self.record(TapeOp::ScalarAdd { a, b, out });
        out
    }

    pub fn scalar_scale(&mut self, a: BufId, k: f32) -> BufId {
        let v = self.scalar_value(a) * k;
        let out = self.alloc(vec![1], vec![v]);
        self.record(TapeOp::ScalarScale { a, out, k });
        out
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss buffer.
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.bufs[loss].data.len() != 1 {
            return Err(GsaError::argument("loss", "backward seed must be scalar"));
        }
        if self.grads[loss].is_none() {
            self.grads[loss] = Some(vec![1.0]);
        }
        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &TapeOp) {
        match op {
            TapeOp::Conv2d { input, weight, bias, out, stride, padding } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let s = ops::ConvShape::resolve(
                    &self.bufs[*input].shape,
                    &self.bufs[*weight].shape,
                    *stride,
                    *padding,
                )
                .expect("recorded conv shape must stay valid");
                let mut gi = vec![0.0; self.bufs[*input].data.len()];
                let mut gw = vec![0.0; self.bufs[*weight].data.len()];
                let mut gb = vec![0.0; self.bufs[*bias].data.len()];
                ops::conv2d_backward(
                    &self.bufs[*input].data,
                    &self.bufs[*weight].data,
                    &g,
                    &s,
                    &mut gi,
                    &mut gw,
                    &mut gb,
                );
                self.accumulate(*input, &gi);
                self.accumulate(*weight, &gw);
                self.accumulate(*bias, &gb);
            }
            TapeOp::Silu { input, out } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let mut gi = vec![0.0; self.bufs[*input].data.len()];
                ops::silu_backward(&self.bufs[*input].data, &g, &mut gi);
                self.accumulate(*input, &gi);
            }
            TapeOp::ChannelScale { input, lambda, out } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let [batch, _, h, w]: [usize; 4] =
                    self.bufs[*input].shape.as_slice().try_into().unwrap();
                let mut gi = vec![0.0; self.bufs[*input].data.len()];
                let mut gl = vec![0.0; self.bufs[*lambda].data.len()];
                ops::channel_scale_backward(
                    &self.bufs[*input].data,
                    &self.bufs[*lambda].data,
                    &g,
                    batch,
                    h * w,
                    &mut gi,
                    &mut gl,
                );
                self.accumulate(*input, &gi);
                self.accumulate(*lambda, &gl);
            }
            TapeOp::UpsampleNearest { input, out, factor } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let [n, c, h, w]: [usize; 4] =
                    self.bufs[*input].shape.as_slice().try_into().unwrap();
                let mut gi = vec![0.0; self.bufs[*input].data.len()];
                ops::upsample_backward(&g, n * c, h, w, *factor, &mut gi);
                self.accumulate(*input, &gi);
            }
            TapeOp::ConcatChannels { a, b, out } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let [n, ca, h, w]: [usize; 4] =
                    self.bufs[*a].shape.as_slice().try_into().unwrap();
                let cb = self.bufs[*b].shape[1];
                let hw = h * w;
                let mut ga = vec![0.0; self.bufs[*a].data.len()];
                let mut gb = vec![0.0; self.bufs[*b].data.len()];
                for ni in 0..n {
                    let row = &g[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
                    ga[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(&row[..ca * hw]);
                    gb[ni * cb * hw..(ni + 1) * cb * hw].copy_from_slice(&row[ca * hw..]);
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            TapeOp::NchwToRows { input, out } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let [n, c, h, w]: [usize; 4] =
                    self.bufs[*input].shape.as_slice().try_into().unwrap();
                let hw = h * w;
                let mut gi = vec![0.0; self.bufs[*input].data.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for p in 0..hw {
                            gi[(ni * c + ci) * hw + p] += g[(ni * hw + p) * c + ci];
                        }
                    }
                }
                self.accumulate(*input, &gi);
            }
            TapeOp::BceSum { logits, out, targets, weights } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let g = g[0];
                let mut gi = vec![0.0; self.bufs[*logits].data.len()];
                for (i, gi_v) in gi.iter_mut().enumerate() {
                    if weights[i] != 0.0 {
                        *gi_v = g
                            * weights[i]
                            * ops::bce_with_logits_grad(self.bufs[*logits].data[i], targets[i]);
                    }
                }
                self.accumulate(*logits, &gi);
            }
            TapeOp::SmoothL1Sum { pred, out, targets, weights } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let g = g[0];
                let mut gi = vec![0.0; self.bufs[*pred].data.len()];
                for (i, gi_v) in gi.iter_mut().enumerate() {
                    if weights[i] != 0.0 {
                        *gi_v = g
                            * weights[i]
                            * ops::smooth_l1_grad(self.bufs[*pred].data[i], targets[i]);
                    }
                }
                self.accumulate(*pred, &gi);
            }
            TapeOp::KdLoss { student, out, teacher_probs, temperature } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let g = g[0];
                let classes = *self.bufs[*student].shape.last().unwrap();
                let rows = teacher_probs.len() / classes;
                let t = *temperature;
                let mut gi = vec![0.0; self.bufs[*student].data.len()];
                let mut qs = vec![0.0f32; classes];
                for r in 0..rows {
                    let z = &self.bufs[*student].data[r * classes..(r + 1) * classes];
                    softmax_row(z, t, &mut qs);
                    let qt = &teacher_probs[r * classes..(r + 1) * classes];
                    for c in 0..classes {
                        gi[r * classes + c] = g * t / rows as f32 * (qs[c] - qt[c]);
                    }
                }
                self.accumulate(*student, &gi);
            }
            TapeOp::WeightedSum { input, out, weights } => {
                let Some(g) = self.grads[*out].clone() else { return };
                let g = g[0];
                let gi: Vec<f32> = weights.iter().map(|w| g * w).collect();
                self.accumulate(*input, &gi);
            }
            TapeOp::ScalarAdd { a, b, out } => {
                let Some(g) = self.grads[*out].clone() else { return };
                self.accumulate(*a, &g);
                self.accumulate(*b, &g);
            }
            TapeOp::ScalarScale { a, out, k } => {
                let Some(g) = self.grads[*out].clone() else { return };
                self.accumulate(*a, &[g[0] * k]);
            }
        }
    }
}

/// Value of the distillation loss without a tape.
pub fn kd_loss_rows(student_logits: &[f32], teacher_probs: &[f32], classes: usize, t: f32) -> f32 {
    let rows = teacher_probs.len() / classes;
    let mut qs = vec![0.0f32; classes];
    let mut acc = 0.0f64;
    for r in 0..rows {
        softmax_row(&student_logits[r * classes..(r + 1) * classes], t, &mut qs);
        let qt = &teacher_probs[r * classes..(r + 1) * classes];
        for c in 0..classes {
            if qt[c] > 0.0 {
                acc += qt[c] as f64 * (qt[c] as f64 / qs[c].max(1e-30) as f64).ln();
            }
        }
    }
    (t as f64 * t as f64 * acc / rows as f64) as f32
}

/// A scalar function that can report its own gradient.
pub trait ScalarFn {
    fn value(&self, x: &[f32]) -> Result<f32>;
    fn gradient(&self, x: &[f32]) -> Result<Vec<f32>>;
}

/// Pair of closures implementing [`ScalarFn`].
pub struct FnPair<V, G>
where
    V: Fn(&[f32]) -> Result<f32>,
    G: Fn(&[f32]) -> Result<Vec<f32>>,
{
    pub value: V,
    pub gradient: G,
}

impl<V, G> ScalarFn for FnPair<V, G>
where
    V: Fn(&[f32]) -> Result<f32>,
    G: Fn(&[f32]) -> Result<Vec<f32>>,
{
    fn value(&self, x: &[f32]) -> Result<f32> {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f32]) -> Result<Vec<f32>> {
        (self.gradient)(x)
    }
}

/// Max relative error between the analytic gradient and central differences:
/// `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
pub fn grad_check(f: &dyn ScalarFn, x: &[f32], eps: f32) -> Result<f32> {
    let analytic = f.gradient(x)?;
    if analytic.len() != x.len() {
        return Err(GsaError::Dimension {
            axis: "gradient",
            expected: x.len(),
            got: analytic.len(),
        });
    }
    let mut worst = 0.0f32;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let fp = f.value(&xp)?;
        xp[i] = x[i] - eps;
        let fm = f.value(&xp)?;
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GsaError::Numeric(format!(
                "non-finite value in finite-difference probe at coordinate {i}"
            )));
        }
        let fd = (fp as f64 - fm as f64) / (2.0 * eps as f64);
        let err = (analytic[i] as f64 - fd).abs() / f64::max(1.0, analytic[i].abs() as f64);
        worst = worst.max(err as f32);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut StdRng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Check one tape op's backward against central differences.
    ///
    /// `graph` maps the variable buffer (shape `var_shape`) to the op output;
    /// the scalar test function is a fixed random weighting of that output.
    fn check_backward<F>(var_shape: Vec<usize>, x: &[f32], tol: f32, seed: u64, graph: F)
    where
        F: Fn(&mut Tape, BufId) -> BufId,
    {
        let run = |xv: &[f32], want_grad: bool| -> Result<(f32, Vec<f32>)> {
            let mut tape = Tape::new();
            let var = tape.alloc(var_shape.clone(), xv.to_vec());
            let out = graph(&mut tape, var);
            let mut rng = StdRng::seed_from_u64(seed);
            // keep |loss| near 1 so fp32 rounding stays below the tolerance
            let coeff: Vec<f32> = rand_vec(&mut rng, tape.data(out).len())
                .iter()
                .map(|c| c * 0.1)
                .collect();
            let loss = tape.weighted_sum(out, coeff);
            let v = tape.scalar_value(loss);
            if want_grad {
                tape.backward(loss)?;
                Ok((v, tape.grad_or_zeros(var)))
            } else {
                Ok((v, vec![]))
            }
        };
        let f = FnPair {
            value: |xv: &[f32]| run(xv, false).map(|r| r.0),
            gradient: |xv: &[f32]| run(xv, true).map(|r| r.1),
        };
        let err = grad_check(&f, x, 1e-3).unwrap();
        assert!(err < tol, "finite-difference mismatch: {err} >= {tol}");
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let f = FnPair {
            value: |x: &[f32]| Ok(x.iter().sum()),
            gradient: |x: &[f32]| Ok(vec![1.0; x.len()]),
        };
        // dyadic values and a power-of-two eps keep the fp32 probe exact
        let x = vec![0.25f32, -0.75, 2.0, 0.0];
        let err = grad_check(&f, &x, 0.0009765625).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let (n, cin, h, w, cout, k) = (1usize, 2usize, 5usize, 5usize, 2usize, 3usize);
        let weight = rand_vec(&mut rng, cout * cin * k * k);
        let bias = rand_vec(&mut rng, cout);
        let x = rand_vec(&mut rng, n * cin * h * w);

        // w.r.t. input
        let (wc, bc) = (weight.clone(), bias.clone());
        check_backward(vec![n, cin, h, w], &x, 1e-3, 101, move |tape, var| {
            let wid = tape.alloc(vec![cout, cin, k, k], wc.clone());
            let bid = tape.alloc(vec![cout], bc.clone());
            tape.conv2d(var, wid, bid, 1, 1).unwrap()
        });

        // w.r.t. weight
        let xc = x.clone();
        let bc = bias.clone();
        check_backward(vec![cout, cin, k, k], &weight, 1e-3, 102, move |tape, var| {
            let xid = tape.alloc(vec![n, cin, h, w], xc.clone());
            let bid = tape.alloc(vec![cout], bc.clone());
            tape.conv2d(xid, var, bid, 1, 1).unwrap()
        });

        // w.r.t. bias
        let xc = x.clone();
        let wc = weight.clone();
        check_backward(vec![cout], &bias, 1e-3, 103, move |tape, var| {
            let xid = tape.alloc(vec![n, cin, h, w], xc.clone());
            let wid = tape.alloc(vec![cout, cin, k, k], wc.clone());
            tape.conv2d(xid, wid, var, 1, 1).unwrap()
        });
    }

    #[test]
    fn silu_and_upsample_backward_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(12);
        let x = rand_vec(&mut rng, 2 * 3 * 4 * 4);
        check_backward(vec![2, 3, 4, 4], &x, 1e-3, 104, |tape, var| tape.silu(var));
        check_backward(vec![2, 3, 4, 4], &x, 1e-3, 105, |tape, var| {
            tape.upsample_nearest(var, 2).unwrap()
        });
    }

    #[test]
    fn channel_scale_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        let x = rand_vec(&mut rng, 2 * 4 * 3 * 3);
        let lambda = rand_vec(&mut rng, 4);

        let lc = lambda.clone();
        check_backward(vec![2, 4, 3, 3], &x, 1e-3, 106, move |tape, var| {
            let lid = tape.alloc(vec![4], lc.clone());
            tape.channel_scale(var, lid).unwrap()
        });

        let xc = x.clone();
        check_backward(vec![4], &lambda, 1e-3, 107, move |tape, var| {
            let xid = tape.alloc(vec![2, 4, 3, 3], xc.clone());
            tape.channel_scale(xid, var).unwrap()
        });
    }

    #[test]
    fn concat_and_reorder_backward_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(14);
        let a = rand_vec(&mut rng, 2 * 2 * 3 * 3);
        let b = rand_vec(&mut rng, 2 * 3 * 3 * 3);

        let bc = b.clone();
        check_backward(vec![2, 2, 3, 3], &a, 1e-3, 108, move |tape, var| {
            let bid = tape.alloc(vec![2, 3, 3, 3], bc.clone());
            tape.concat_channels(var, bid).unwrap()
        });
        let ac = a.clone();
        check_backward(vec![2, 3, 3, 3], &b, 1e-3, 109, move |tape, var| {
            let aid = tape.alloc(vec![2, 2, 3, 3], ac.clone());
            tape.concat_channels(aid, var).unwrap()
        });
        check_backward(vec![2, 3, 3, 3], &b, 1e-3, 110, |tape, var| {
            tape.nchw_to_rows(var).unwrap()
        });
    }

    #[test]
    fn loss_terms_backward_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(15);
        let z = rand_vec(&mut rng, 12);
        let targets: Vec<f32> = (0..12).map(|i| (i % 2) as f32).collect();
        let weights: Vec<f32> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 0.25 }).collect();

        let (tc, wc) = (targets.clone(), weights.clone());
        check_backward(vec![12], &z, 1e-3, 111, move |tape, var| {
            tape.bce_sum(var, tc.clone(), wc.clone())
        });

        // keep |pred - target| away from the smooth-L1 kink at 1
        let pred: Vec<f32> = (0..8).map(|i| 0.3 * i as f32).collect();
        let targets: Vec<f32> = (0..8).map(|i| 0.3 * i as f32 + if i % 2 == 0 { 0.4 } else { -1.8 }).collect();
        let weights = vec![0.5f32; 8];
        check_backward(vec![8], &pred, 1e-3, 112, move |tape, var| {
            tape.smooth_l1_sum(var, targets.clone(), weights.clone())
        });
    }

    #[test]
    fn kd_loss_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(16);
        let classes = 5;
        let rows = 4;
        let student = rand_vec(&mut rng, rows * classes);
        let teacher_logits = rand_vec(&mut rng, rows * classes);
        let t = 2.0;
        let mut teacher_probs = vec![0.0f32; rows * classes];
        for r in 0..rows {
            softmax_row(
                &teacher_logits[r * classes..(r + 1) * classes],
                t,
                &mut teacher_probs[r * classes..(r + 1) * classes],
            );
        }
        check_backward(vec![rows, classes], &student, 1e-3, 113, move |tape, var| {
            tape.kd_loss(var, teacher_probs.clone(), t).unwrap()
        });
    }

    #[test]
    fn scalar_combination_backward() {
        // loss = a + 3*b: d/da = 1, d/db = 3
        let mut tape = Tape::new();
        let a = tape.alloc(vec![1], vec![2.0]);
        let b = tape.alloc(vec![1], vec![5.0]);
        let b3 = tape.scalar_scale(b, 3.0);
        let loss = tape.scalar_add(a, b3);
        assert_eq!(tape.scalar_value(loss), 17.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[3.0]);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let mut tape = Tape::new();
        let aid = tape.leaf(&a);
        let bid = tape.leaf(&b);
        let cat = tape.concat_channels(aid, bid).unwrap();
        assert_eq!(tape.shape(cat), &[1, 2, 2, 2]);
        assert_eq!(&tape.data(cat)[..4], a.data());
        assert_eq!(&tape.data(cat)[4..], b.data());
    }

    #[test]
    fn concat_with_empty_second_operand() {
        let a = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f32).collect());
        let b = Tensor::new(vec![1, 0, 2, 2], vec![]);
        let mut tape = Tape::new();
        let aid = tape.leaf(&a);
        let bid = tape.leaf(&b);
        let cat = tape.concat_channels(aid, bid).unwrap();
        assert_eq!(tape.shape(cat), &[1, 2, 2, 2]);
        assert_eq!(tape.data(cat), a.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.alloc(vec![1, 1, 2, 2], vec![0.0; 4]);
        let b = tape.alloc(vec![1, 1, 3, 2], vec![0.0; 6]);
        let err = tape.concat_channels(a, b).unwrap_err();
        assert!(err.to_string().contains("height"));
    }

    #[test]
    fn kd_loss_zero_for_identical_logits() {
        let logits = vec![0.4f32, -1.0, 2.5, 0.0, 0.1, 0.2];
        let classes = 3;
        let mut teacher = vec![0.0f32; 6];
        for r in 0..2 {
            softmax_row(&logits[r * classes..(r + 1) * classes], 2.0, &mut teacher[r * classes..(r + 1) * classes]);
        }
        let loss = kd_loss_rows(&logits, &teacher, classes, 2.0);
        assert!(loss.abs() < 1e-6, "{loss}");
    }

    #[test]
    fn kd_loss_reference_two_class_value() {
        // teacher [2,0], student [0,0], T=2 -> 4*KL([0.73106,0.26894] || [0.5,0.5])
        let mut teacher = vec![0.0f32; 2];
        softmax_row(&[2.0, 0.0], 2.0, &mut teacher);
        let loss = kd_loss_rows(&[0.0, 0.0], &teacher, 2, 2.0);
        assert!((loss - 0.4439).abs() < 5e-4, "{loss}");
    }

    #[test]
    fn kd_loss_invariant_to_constant_student_shift() {
        let mut teacher = vec![0.0f32; 4];
        softmax_row(&[1.0, -0.5, 0.3, 2.0], 2.0, &mut teacher);
        let a = kd_loss_rows(&[0.2, 0.9, -0.4, 0.0], &teacher, 4, 2.0);
        let b = kd_loss_rows(&[5.2, 5.9, 4.6, 5.0], &teacher, 4, 2.0);
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}
