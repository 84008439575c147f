//! Value-level compute kernels shared by the tape ops and the LRP engine.
//!
//! Convolutions go through im2col/col2im so the inner loops are contiguous
//! dot products and axpy updates. All kernels are single-threaded; callers
//! parallelize over samples or chunks.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Output spatial extent of a cross-correlation with floor semantics.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Output spatial extent of a transposed convolution.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> usize {
    (input - 1) * stride + kernel + output_padding - 2 * padding
}

fn expect_rank<F: Element>(op: &'static str, t: &Tensor<F>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::InvalidArgument {
            op,
            message: format!("expected rank-{rank} tensor, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn expect_dim<F: Element>(
    op: &'static str,
    t: &Tensor<F>,
    dim: usize,
    expected: usize,
) -> Result<()> {
    let got = t.shape()[dim];
    if got != expected {
        return Err(Error::ShapeMismatch {
            op,
            dim,
            expected,
            got,
        });
    }
    Ok(())
}

// ── dense helpers ───────────────────────────────────────────────────────

/// out[r][s] += dot(a[r], b[s]) with a: (r_dim, k), b: (s_dim, k).
pub fn gemm_nt<F: Element>(a: &[F], b: &[F], r_dim: usize, s_dim: usize, k: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), r_dim * k);
    debug_assert_eq!(b.len(), s_dim * k);
    debug_assert_eq!(out.len(), r_dim * s_dim);
    for r in 0..r_dim {
        let ar = &a[r * k..(r + 1) * k];
        let or = &mut out[r * s_dim..(r + 1) * s_dim];
        for (s, o) in or.iter_mut().enumerate() {
            let bs = &b[s * k..(s + 1) * k];
            let mut acc = F::ZERO;
            for (x, y) in ar.iter().zip(bs.iter()) {
                acc += *x * *y;
            }
            *o += acc;
        }
    }
}

/// out[r][c] += sum_s a[r][s] * b[s][c] with a: (r_dim, s_dim), b: (s_dim, c_dim).
pub fn gemm_nn<F: Element>(
    a: &[F],
    b: &[F],
    r_dim: usize,
    s_dim: usize,
    c_dim: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), r_dim * s_dim);
    debug_assert_eq!(b.len(), s_dim * c_dim);
    debug_assert_eq!(out.len(), r_dim * c_dim);
    for r in 0..r_dim {
        let ar = &a[r * s_dim..(r + 1) * s_dim];
        let or = &mut out[r * c_dim..(r + 1) * c_dim];
        for (s, &av) in ar.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let bs = &b[s * c_dim..(s + 1) * c_dim];
            for (o, &bv) in or.iter_mut().zip(bs.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[s][c] += sum_r a[r][s] * b[r][c] with a: (r_dim, s_dim), b: (r_dim, c_dim).
pub fn gemm_tn<F: Element>(
    a: &[F],
    b: &[F],
    r_dim: usize,
    s_dim: usize,
    c_dim: usize,
    out: &mut [F],
) {
    debug_assert_eq!(a.len(), r_dim * s_dim);
    debug_assert_eq!(b.len(), r_dim * c_dim);
    debug_assert_eq!(out.len(), s_dim * c_dim);
    for r in 0..r_dim {
        let ar = &a[r * s_dim..(r + 1) * s_dim];
        let br = &b[r * c_dim..(r + 1) * c_dim];
        for (s, &av) in ar.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let os = &mut out[s * c_dim..(s + 1) * c_dim];
            for (o, &bv) in os.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    }
}

// ── im2col / col2im ─────────────────────────────────────────────────────

/// Extracts all kernel-sized patches of one image into rows.
///
/// `img` is (channels, h, w); the result has one row per output position
/// (row-major over (oy, ox)) and `channels * kh * kw` columns. Out-of-bounds
/// taps read zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Element>(
    img: &[F],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [F],
) {
    let k_len = channels * kh * kw;
    debug_assert_eq!(cols.len(), out_h * out_w * k_len);
    for v in cols.iter_mut() {
        *v = F::ZERO;
    }
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &mut cols[(oy * out_w + ox) * k_len..(oy * out_w + ox + 1) * k_len];
            for c in 0..channels {
                let img_c = &img[c * h * w..(c + 1) * h * w];
                for u in 0..kh {
                    let iy = (oy * stride + u) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for v in 0..kw {
                        let ix = (ox * stride + v) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        row[(c * kh + u) * kw + v] = img_c[iy * w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto an image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Element>(
    cols: &[F],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    img: &mut [F],
) {
    let k_len = channels * kh * kw;
    debug_assert_eq!(cols.len(), out_h * out_w * k_len);
    debug_assert_eq!(img.len(), channels * h * w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &cols[(oy * out_w + ox) * k_len..(oy * out_w + ox + 1) * k_len];
            for c in 0..channels {
                let img_c = &mut img[c * h * w..(c + 1) * h * w];
                for u in 0..kh {
                    let iy = (oy * stride + u) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for v in 0..kw {
                        let ix = (ox * stride + v) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img_c[iy * w + ix as usize] += row[(c * kh + u) * kw + v];
                    }
                }
            }
        }
    }
}

// ── convolution ─────────────────────────────────────────────────────────

pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn conv_geometry<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", weight, 4)?;
    let (batch, in_ch, in_h, in_w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (out_ch, w_in_ch, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if w_in_ch != in_ch {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dim: 1,
            expected: in_ch,
            got: w_in_ch,
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            message: "stride must be positive".into(),
        });
    }
    let out_h = conv_out_extent(in_h, kh, stride, padding);
    let out_w = conv_out_extent(in_w, kw, stride, padding);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 => Ok(ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            out_h,
            out_w,
        }),
        _ => Err(Error::InvalidArgument {
            op: "conv2d",
            message: format!(
                "kernel {kh}x{kw} with stride {stride}, padding {padding} does not fit input {in_h}x{in_w}"
            ),
        }),
    }
}

/// Cross-correlation of NCHW `input` with OIHW `weight`.
pub fn conv2d<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    let g = conv_geometry(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != g.out_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: 0,
                expected: g.out_ch,
                got: b.numel(),
            });
        }
    }
    let k_len = g.in_ch * g.kh * g.kw;
    let plane = g.out_h * g.out_w;
    let mut out = Tensor::zeros(vec![g.batch, g.out_ch, g.out_h, g.out_w]);
    let mut cols = vec![F::ZERO; plane * k_len];
    for n in 0..g.batch {
        let img = &input.data()[n * g.in_ch * g.in_h * g.in_w..(n + 1) * g.in_ch * g.in_h * g.in_w];
        im2col(
            img, g.in_ch, g.in_h, g.in_w, g.kh, g.kw, stride, padding, g.out_h, g.out_w, &mut cols,
        );
        let out_n = &mut out.data_mut()[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        gemm_nt(weight.data(), &cols, g.out_ch, plane, k_len, out_n);
        if let Some(b) = bias {
            for co in 0..g.out_ch {
                let bv = b.data()[co];
                for o in out_n[co * plane..(co + 1) * plane].iter_mut() {
                    *o += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] w.r.t. its input only (used by relevance
/// propagation, which redistributes backwards through fixed weights).
pub fn conv2d_input_grad<F: Element>(
    input_shape: &[usize],
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Tensor<F> {
    let (batch, in_ch, in_h, in_w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (out_ch, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let k_len = in_ch * kh * kw;
    let plane = out_h * out_w;
    let mut grad_input = Tensor::zeros(input_shape.to_vec());
    let mut gcols = vec![F::ZERO; plane * k_len];
    for n in 0..batch {
        let go = &grad_out.data()[n * out_ch * plane..(n + 1) * out_ch * plane];
        for v in gcols.iter_mut() {
            *v = F::ZERO;
        }
        gemm_tn(go, weight.data(), out_ch, plane, k_len, &mut gcols);
        let gi = &mut grad_input.data_mut()
            [n * in_ch * in_h * in_w..(n + 1) * in_ch * in_h * in_w];
        col2im(
            &gcols, in_ch, in_h, in_w, kh, kw, stride, padding, out_h, out_w, gi,
        );
    }
    grad_input
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_grads<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let g = conv_geometry(input, weight, stride, padding).expect("shapes checked at forward");
    let k_len = g.in_ch * g.kh * g.kw;
    let plane = g.out_h * g.out_w;
    let mut grad_input = Tensor::zeros(input.shape().to_vec());
    let mut grad_weight = Tensor::zeros(weight.shape().to_vec());
    let mut grad_bias = Tensor::zeros(vec![g.out_ch]);
    let mut cols = vec![F::ZERO; plane * k_len];
    let mut gcols = vec![F::ZERO; plane * k_len];
    for n in 0..g.batch {
        let img = &input.data()[n * g.in_ch * g.in_h * g.in_w..(n + 1) * g.in_ch * g.in_h * g.in_w];
        let go = &grad_out.data()[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        im2col(
            img, g.in_ch, g.in_h, g.in_w, g.kh, g.kw, stride, padding, g.out_h, g.out_w, &mut cols,
        );
        // grad_weight[co][k] += sum_p go[co][p] * cols[p][k]
        gemm_nn(go, &cols, g.out_ch, plane, k_len, grad_weight.data_mut());
        for v in gcols.iter_mut() {
            *v = F::ZERO;
        }
        // gcols[p][k] = sum_co go[co][p] * w[co][k]
        gemm_tn(go, weight.data(), g.out_ch, plane, k_len, &mut gcols);
        let gi = &mut grad_input.data_mut()
            [n * g.in_ch * g.in_h * g.in_w..(n + 1) * g.in_ch * g.in_h * g.in_w];
        col2im(
            &gcols, g.in_ch, g.in_h, g.in_w, g.kh, g.kw, stride, padding, g.out_h, g.out_w, gi,
        );
        for co in 0..g.out_ch {
            let mut acc = F::ZERO;
            for &v in &go[co * plane..(co + 1) * plane] {
                acc += v;
            }
            grad_bias.data_mut()[co] += acc;
        }
    }
    (grad_input, grad_weight, grad_bias)
}

/// Transposed convolution (gradient-of-conv semantics). `weight` is laid out
/// (in_ch, out_ch, kh, kw).
pub fn conv_transpose2d<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<F>> {
    expect_rank("conv_transpose2d", input, 4)?;
    expect_rank("conv_transpose2d", weight, 4)?;
    let (batch, in_ch, in_h, in_w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    expect_dim("conv_transpose2d", weight, 0, in_ch)?;
    let (out_ch, kh, kw) = (weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    if stride == 0 {
        return Err(Error::InvalidArgument {
            op: "conv_transpose2d",
            message: "stride must be positive".into(),
        });
    }
    if output_padding >= stride && output_padding != 0 {
        return Err(Error::InvalidArgument {
            op: "conv_transpose2d",
            message: format!("output_padding {output_padding} must be smaller than stride {stride}"),
        });
    }
    let out_h = conv_transpose_out_extent(in_h, kh, stride, padding, output_padding);
    let out_w = conv_transpose_out_extent(in_w, kw, stride, padding, output_padding);
    if let Some(b) = bias {
        if b.numel() != out_ch {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                dim: 1,
                expected: out_ch,
                got: b.numel(),
            });
        }
    }
    let k_len = out_ch * kh * kw;
    let plane = in_h * in_w;
    let mut out = Tensor::zeros(vec![batch, out_ch, out_h, out_w]);
    let mut cols = vec![F::ZERO; plane * k_len];
    for n in 0..batch {
        let x = &input.data()[n * in_ch * plane..(n + 1) * in_ch * plane];
        for v in cols.iter_mut() {
            *v = F::ZERO;
        }
        // cols[p][k] = sum_ci x[ci][p] * w[ci][k]
        gemm_tn(x, weight.data(), in_ch, plane, k_len, &mut cols);
        let out_n = &mut out.data_mut()[n * out_ch * out_h * out_w..(n + 1) * out_ch * out_h * out_w];
        col2im(
            &cols, out_ch, out_h, out_w, kh, kw, stride, padding, in_h, in_w, out_n,
        );
        if let Some(b) = bias {
            for co in 0..out_ch {
                let bv = b.data()[co];
                for o in out_n[co * out_h * out_w..(co + 1) * out_h * out_w].iter_mut() {
                    *o += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_transpose2d`] w.r.t. input, weight and bias.
pub fn conv_transpose2d_grads<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (batch, in_ch, in_h, in_w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (out_ch, kh, kw) = (weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let k_len = out_ch * kh * kw;
    let plane = in_h * in_w;
    let mut grad_input = Tensor::zeros(input.shape().to_vec());
    let mut grad_weight = Tensor::zeros(weight.shape().to_vec());
    let mut grad_bias = Tensor::zeros(vec![out_ch]);
    let mut gcols = vec![F::ZERO; plane * k_len];
    for n in 0..batch {
        let go = &grad_out.data()[n * out_ch * out_h * out_w..(n + 1) * out_ch * out_h * out_w];
        im2col(
            go, out_ch, out_h, out_w, kh, kw, stride, padding, in_h, in_w, &mut gcols,
        );
        let x = &input.data()[n * in_ch * plane..(n + 1) * in_ch * plane];
        let gi = &mut grad_input.data_mut()[n * in_ch * plane..(n + 1) * in_ch * plane];
        // grad_input[ci][p] = dot(w[ci], gcols[p])
        gemm_nt(weight.data(), &gcols, in_ch, plane, k_len, gi);
        // grad_weight[ci][k] += sum_p x[ci][p] * gcols[p][k]
        gemm_nn(x, &gcols, in_ch, plane, k_len, grad_weight.data_mut());
        for co in 0..out_ch {
            let mut acc = F::ZERO;
            for &v in &go[co * out_h * out_w..(co + 1) * out_h * out_w] {
                acc += v;
            }
            grad_bias.data_mut()[co] += acc;
        }
    }
    (grad_input, grad_weight, grad_bias)
}

// ── linear ──────────────────────────────────────────────────────────────

/// Affine map. `input` is (in,) or (batch, in); `weight` is (out, in).
pub fn linear<F: Element>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    expect_rank("linear", weight, 2)?;
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let (batch, vec_in) = match input.shape() {
        [n] => (1, *n),
        [b, n] => (*b, *n),
        _ => {
            return Err(Error::InvalidArgument {
                op: "linear",
                message: format!("expected rank-1 or rank-2 input, got {:?}", input.shape()),
            })
        }
    };
    if vec_in != in_dim {
        return Err(Error::ShapeMismatch {
            op: "linear",
            dim: input.shape().len() - 1,
            expected: in_dim,
            got: vec_in,
        });
    }
    if let Some(b) = bias {
        if b.numel() != out_dim {
            return Err(Error::ShapeMismatch {
                op: "linear",
                dim: 0,
                expected: out_dim,
                got: b.numel(),
            });
        }
    }
    let mut out = vec![F::ZERO; batch * out_dim];
    gemm_nt(input.data(), weight.data(), batch, out_dim, in_dim, &mut out);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(out_dim) {
            for (o, &bv) in row.iter_mut().zip(b.data().iter()) {
                *o += bv;
            }
        }
    }
    let shape = if input.shape().len() == 1 {
        vec![out_dim]
    } else {
        vec![batch, out_dim]
    };
    Tensor::new(shape, out)
}

// ── pooling ─────────────────────────────────────────────────────────────

/// Window means over NCHW input with floor semantics.
pub fn avg_pool2d<F: Element>(
    input: &Tensor<F>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<F>> {
    expect_rank("avg_pool2d", input, 4)?;
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument {
            op: "avg_pool2d",
            message: "kernel and stride must be positive".into(),
        });
    }
    let (batch, ch, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let out_h = conv_out_extent(h, kernel, stride, 0);
    let out_w = conv_out_extent(w, kernel, stride, 0);
    let (out_h, out_w) = match (out_h, out_w) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::InvalidArgument {
                op: "avg_pool2d",
                message: format!("window {kernel} does not fit input {h}x{w}"),
            })
        }
    };
    let inv = F::ONE / F::from_f64((kernel * kernel) as f64);
    let mut out = Tensor::zeros(vec![batch, ch, out_h, out_w]);
    for nc in 0..batch * ch {
        let img = &input.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = F::ZERO;
                for u in 0..kernel {
                    let row = &img[(oy * stride + u) * w + ox * stride..];
                    for &v in &row[..kernel] {
                        acc += v;
                    }
                }
                dst[oy * out_w + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`avg_pool2d`]: each window cell receives grad/(k·k).
pub fn avg_pool2d_grad<F: Element>(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let inv = F::ONE / F::from_f64((kernel * kernel) as f64);
    let mut grad_input = Tensor::zeros(input_shape.to_vec());
    for nc in 0..input_shape[0] * input_shape[1] {
        let go = &grad_out.data()[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        let gi = &mut grad_input.data_mut()[nc * h * w..(nc + 1) * h * w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = go[oy * out_w + ox] * inv;
                for u in 0..kernel {
                    let row = &mut gi[(oy * stride + u) * w + ox * stride..];
                    for v in row[..kernel].iter_mut() {
                        *v += g;
                    }
                }
            }
        }
    }
    grad_input
}

// ── softmax ─────────────────────────────────────────────────────────────

/// Row-wise numerically stable softmax on a (batch, k) tensor.
pub fn softmax_rows<F: Element>(logits: &Tensor<F>) -> Tensor<F> {
    let cols = *logits.shape().last().unwrap();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(cols) {
        let mut max = row[0];
        for &v in row.iter() {
            max = max.max(v);
        }
        let mut sum = F::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}
