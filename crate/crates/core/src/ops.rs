//! Raw forward/backward kernels over flat row-major buffers.
//!
//! These are the numeric workhorses behind the tape ops. They take explicit
//! shape parameters and never allocate tensors themselves, so the tape can
//! reuse them for both the recorded forward pass and the reverse sweep.

use crate::error::{GsaError, Result};
use crate::tensor::sigmoid;

/// Output spatial size of a convolution.
///
/// `Hout = floor((H + 2*padding - K)/stride) + 1`, which must be positive.
/// The floor matches the universal framework convention; whenever the span
/// divides evenly it coincides with the exact formula.
pub fn conv2d_output_dim(
    axis: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(GsaError::Dimension {
            axis,
            expected: kernel,
            got: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Lay out conv patches as a `[Cin*K*K, Hout*Wout]` column matrix.
fn im2col(
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    hout: usize,
    wout: usize,
    col: &mut [f32],
) {
    let out_hw = hout * wout;
    debug_assert_eq!(col.len(), cin * k * k * out_hw);
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * out_hw..][..out_hw];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut row[oy * wout..(oy + 1) * wout];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column matrix back onto the input layout.
fn col2im_add(
    col: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    hout: usize,
    wout: usize,
    out: &mut [f32],
) {
    let out_hw = hout * wout;
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * out_hw..][..out_hw];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wout + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[i][j] += sum_k a[i][k] * b[k][j]` with a contiguous inner loop.
fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_v) in a_row.iter().enumerate() {
            if a_v == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_v * b_v;
            }
        }
    }
}

#[derive(Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvShape {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<ConvShape> {
        let [batch, cin, h, w]: [usize; 4] = input_shape
            .try_into()
            .map_err(|_| GsaError::argument("input", "conv input must be rank 4 (N,C,H,W)"))?;
        let [cout, wcin, k, k2]: [usize; 4] = weight_shape
            .try_into()
            .map_err(|_| GsaError::argument("weight", "conv weight must be rank 4 (Cout,Cin,K,K)"))?;
        if k != k2 {
            return Err(GsaError::Dimension {
                axis: "kernel",
                expected: k,
                got: k2,
            });
        }
        if k % 2 == 0 {
            return Err(GsaError::argument("kernel", format!("must be odd, got {k}")));
        }
        if wcin != cin {
            return Err(GsaError::Dimension {
                axis: "in_channels",
                expected: wcin,
                got: cin,
            });
        }
        if stride == 0 {
            return Err(GsaError::argument("stride", "must be >= 1"));
        }
        let hout = conv2d_output_dim("height", h, k, stride, padding)?;
        let wout = conv2d_output_dim("width", w, k, stride, padding)?;
        Ok(ConvShape {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            padding,
            hout,
            wout,
        })
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.cout * self.hout * self.wout
    }
}

/// Cross-correlation forward pass: `out[n,o] = W[o] * patch + bias[o]`.
pub fn conv2d_forward(input: &[f32], weight: &[f32], bias: &[f32], s: &ConvShape) -> Vec<f32> {
    let out_hw = s.hout * s.wout;
    let ckk = s.cin * s.k * s.k;
    let mut out = vec![0.0f32; s.out_numel()];
    let mut col = vec![0.0f32; ckk * out_hw];
    for n in 0..s.batch {
        let img = &input[n * s.cin * s.h * s.w..][..s.cin * s.h * s.w];
        im2col(img, s.cin, s.h, s.w, s.k, s.stride, s.padding, s.hout, s.wout, &mut col);
        let dst = &mut out[n * s.cout * out_hw..][..s.cout * out_hw];
        for (o, chunk) in dst.chunks_mut(out_hw).enumerate() {
            chunk.fill(bias[o]);
        }
        matmul_acc(weight, &col, dst, s.cout, ckk, out_hw);
    }
    out
}

/// Gradients of the conv forward w.r.t. input, weight and bias.
pub fn conv2d_backward(
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    s: &ConvShape,
    grad_input: &mut [f32],
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
) {
    let out_hw = s.hout * s.wout;
    let ckk = s.cin * s.k * s.k;
    let mut col = vec![0.0f32; ckk * out_hw];
    let mut dcol = vec![0.0f32; ckk * out_hw];
    for n in 0..s.batch {
        let img = &input[n * s.cin * s.h * s.w..][..s.cin * s.h * s.w];
        let g = &grad_out[n * s.cout * out_hw..][..s.cout * out_hw];

        im2col(img, s.cin, s.h, s.w, s.k, s.stride, s.padding, s.hout, s.wout, &mut col);

        // dW[o][ckk] += sum_hw g[o][hw] * col[ckk][hw]
        for o in 0..s.cout {
            let g_row = &g[o * out_hw..(o + 1) * out_hw];
            let dw_row = &mut grad_weight[o * ckk..(o + 1) * ckk];
            for (p, dw) in dw_row.iter_mut().enumerate() {
                let col_row = &col[p * out_hw..(p + 1) * out_hw];
                let mut acc = 0.0f32;
                for (a, b) in g_row.iter().zip(col_row) {
                    acc += a * b;
                }
                *dw += acc;
            }
            grad_bias[o] += g_row.iter().sum::<f32>();
        }

        // dcol[ckk][hw] = sum_o W[o][ckk] * g[o][hw]
        dcol.fill(0.0);
        for o in 0..s.cout {
            let g_row = &g[o * out_hw..(o + 1) * out_hw];
            let w_row = &weight[o * ckk..(o + 1) * ckk];
            for (p, &w_v) in w_row.iter().enumerate() {
                if w_v == 0.0 {
                    continue;
                }
                let dc_row = &mut dcol[p * out_hw..(p + 1) * out_hw];
                for (dc, &g_v) in dc_row.iter_mut().zip(g_row) {
                    *dc += w_v * g_v;
                }
            }
        }
        let gi = &mut grad_input[n * s.cin * s.h * s.w..][..s.cin * s.h * s.w];
        col2im_add(&dcol, s.cin, s.h, s.w, s.k, s.stride, s.padding, s.hout, s.wout, gi);
    }
}

pub fn silu_forward(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * sigmoid(v);
    }
}

pub fn silu_backward(x: &[f32], grad_out: &[f32], grad_in: &mut [f32]) {
    for ((gi, &v), &g) in grad_in.iter_mut().zip(x).zip(grad_out) {
        let s = sigmoid(v);
        *gi += g * (s + v * s * (1.0 - s));
    }
}

/// Per-channel scaling: `out[n,c,h,w] = in[n,c,h,w] * lambda[c]`.
pub fn channel_scale_forward(
    input: &[f32],
    lambda: &[f32],
    batch: usize,
    hw: usize,
    out: &mut [f32],
) {
    let c = lambda.len();
    for n in 0..batch {
        for (ci, &l) in lambda.iter().enumerate() {
            let off = (n * c + ci) * hw;
            for (o, &v) in out[off..off + hw].iter_mut().zip(&input[off..off + hw]) {
                *o = v * l;
            }
        }
    }
}

pub fn channel_scale_backward(
    input: &[f32],
    lambda: &[f32],
    grad_out: &[f32],
    batch: usize,
    hw: usize,
    grad_input: &mut [f32],
    grad_lambda: &mut [f32],
) {
    let c = lambda.len();
    for n in 0..batch {
        for ci in 0..c {
            let off = (n * c + ci) * hw;
            let l = lambda[ci];
            let mut acc = 0.0f32;
            for i in off..off + hw {
                grad_input[i] += grad_out[i] * l;
                acc += grad_out[i] * input[i];
            }
            grad_lambda[ci] += acc;
        }
    }
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_forward(
    input: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    out: &mut [f32],
) {
    let (fh, fw) = (h * factor, w * factor);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * fh * fw..(p + 1) * fh * fw];
        for oy in 0..fh {
            let src_row = &src[(oy / factor) * w..(oy / factor + 1) * w];
            let dst_row = &mut dst[oy * fw..(oy + 1) * fw];
            for (ox, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[ox / factor];
            }
        }
    }
}

/// Backward of nearest upsampling: sum gradients over each replicated block.
pub fn upsample_backward(
    grad_out: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    grad_in: &mut [f32],
) {
    let (fh, fw) = (h * factor, w * factor);
    for p in 0..planes {
        let g = &grad_out[p * fh * fw..(p + 1) * fh * fw];
        let gi = &mut grad_in[p * h * w..(p + 1) * h * w];
        for oy in 0..fh {
            for ox in 0..fw {
                gi[(oy / factor) * w + (ox / factor)] += g[oy * fw + ox];
            }
        }
    }
}

/// Binary cross-entropy with logits, numerically stable form.
pub fn bce_with_logits(z: f32, target: f32) -> f32 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

pub fn bce_with_logits_grad(z: f32, target: f32) -> f32 {
    sigmoid(z) - target
}

/// Smooth-L1 (Huber with delta 1) between prediction and target.
pub fn smooth_l1(x: f32, target: f32) -> f32 {
    let d = x - target;
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f32, target: f32) -> f32 {
    let d = x - target;
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
