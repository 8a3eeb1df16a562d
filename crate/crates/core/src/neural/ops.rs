//! Layer kernels: convolution via im2col + GEMM, transposed convolution as
//! its adjoint, elementwise activations and batch normalization.

use super::{shape_err, NeuralError, Result, Tensor};

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `op`
/// optionally transposes. `a` is `m×k` after `op`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output length of a convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub fn tconv_out_len(n: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    ((n.checked_sub(1)?) * stride + k + out_pad).checked_sub(2 * pad)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(src: &[f64], g: Geometry, cols: &mut [f64]) {
    let n = g.cols();
    for ch in 0..g.c {
        let plane = &src[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ch * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dst`.
fn col2im(cols: &[f64], g: Geometry, dst: &mut [f64]) {
    let n = g.cols();
    for ch in 0..g.c {
        let plane = &mut dst[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ch * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel(node: &str, weight: &Tensor) -> Result<usize> {
    let [_, _, kh, kw] = weight.dims();
    if kh != kw || kh == 0 {
        return Err(shape_err(
            node,
            format!("kernel must be square and non-empty, got {kh}×{kw}"),
        ));
    }
    Ok(kh)
}

fn check_bias(node: &str, bias: Option<&[f64]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(shape_err(
            node,
            format!("bias has {} entries, need {channels}", b.len()),
        )),
        _ => Ok(()),
    }
}

fn add_bias(out: &mut [f64], bias: Option<&[f64]>, plane: usize) {
    if let Some(bias) = bias {
        for (chunk, b) in out.chunks_mut(plane).zip(bias) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
}

fn conv_geometry(node: &str, input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    let k = check_kernel(node, weight)?;
    let [_, c, h, w] = input.dims();
    if weight.dims()[1] != c {
        return Err(shape_err(
            node,
            format!("input has {c} channels, weight expects {}", weight.dims()[1]),
        ));
    }
    if stride == 0 {
        return Err(shape_err(node, "stride must be at least 1"));
    }
    let (oh, ow) = match (conv_out_len(h, k, stride, pad), conv_out_len(w, k, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(shape_err(
                node,
                format!("{h}×{w} input too small for kernel {k} with pad {pad}"),
            ))
        }
    };
    Ok(Geometry {
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh,
        ow,
    })
}

pub(crate) fn conv_forward_named(
    node: &str,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geometry(node, input, weight, stride, pad)?;
    let out_c = weight.dims()[0];
    check_bias(node, bias, out_c)?;
    let n = input.batch();
    let mut out = vec![0.0; n * out_c * g.cols()];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        im2col(input.item(i), g, &mut cols);
        let dst = &mut out[i * out_c * g.cols()..(i + 1) * out_c * g.cols()];
        gemm(out_c, g.rows(), g.cols(), weight.data(), false, &cols, false, dst, 0.0);
        add_bias(dst, bias, g.cols());
    }
    Ok(Tensor::from_raw([n, out_c, g.oh, g.ow], out))
}

/// Zero-padded cross-correlation. `weight` is `(out_c, in_c, k, k)`.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    conv_forward_named("conv2d", input, weight, bias, stride, pad)
}

/// Gradients of a (transposed) convolution with respect to its operands.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

fn channel_sums(t: &Tensor) -> Vec<f64> {
    let [n, c, _, _] = t.dims();
    let mut sums = vec![0.0; c];
    for i in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += t.plane(i, ch).iter().sum::<f64>();
        }
    }
    sums
}

pub(crate) fn conv_backward_named(
    node: &str,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let g = conv_geometry(node, input, weight, stride, pad)?;
    let out_c = weight.dims()[0];
    let n = input.batch();
    if grad_out.dims() != [n, out_c, g.oh, g.ow] {
        return Err(shape_err(
            node,
            format!("upstream gradient {:?} does not match output", grad_out.dims()),
        ));
    }
    let mut d_in = vec![0.0; input.len()];
    let mut d_w = vec![0.0; weight.len()];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let item_in = g.c * g.h * g.w;
    for i in 0..n {
        let go = grad_out.item(i);
        im2col(input.item(i), g, &mut cols);
        gemm(out_c, g.cols(), g.rows(), go, false, &cols, true, &mut d_w, 1.0);
        gemm(
            g.rows(),
            out_c,
            g.cols(),
            weight.data(),
            true,
            go,
            false,
            &mut cols,
            0.0,
        );
        col2im(&cols, g, &mut d_in[i * item_in..(i + 1) * item_in]);
    }
    Ok(ConvGrads {
        input: Tensor::from_raw(input.dims(), d_in),
        weight: Tensor::from_raw(weight.dims(), d_w),
        bias: channel_sums(grad_out),
    })
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    conv_backward_named("conv2d", input, weight, grad_out, stride, pad)
}

// Geometry of the forward convolution whose input-adjoint the transposed
// convolution computes: output space of the tconv is the conv's input.
fn tconv_geometry(
    node: &str,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Geometry> {
    let k = check_kernel(node, weight)?;
    let [_, c, h, w] = input.dims();
    if weight.dims()[0] != c {
        return Err(shape_err(
            node,
            format!("input has {c} channels, weight expects {}", weight.dims()[0]),
        ));
    }
    if stride == 0 || out_pad >= stride {
        return Err(shape_err(
            node,
            format!("need stride >= 1 and out_pad < stride, got {stride}/{out_pad}"),
        ));
    }
    let (oh, ow) = match (
        tconv_out_len(h, k, stride, pad, out_pad),
        tconv_out_len(w, k, stride, pad, out_pad),
    ) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => return Err(shape_err(node, format!("{h}×{w} input gives an empty output"))),
    };
    Ok(Geometry {
        c: weight.dims()[1],
        h: oh,
        w: ow,
        k,
        stride,
        pad,
        oh: h,
        ow: w,
    })
}

pub(crate) fn tconv_forward_named(
    node: &str,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor> {
    let g = tconv_geometry(node, input, weight, stride, pad, out_pad)?;
    let in_c = input.channels();
    check_bias(node, bias, g.c)?;
    let n = input.batch();
    let item_out = g.c * g.h * g.w;
    let mut out = vec![0.0; n * item_out];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        gemm(
            g.rows(),
            in_c,
            g.cols(),
            weight.data(),
            true,
            input.item(i),
            false,
            &mut cols,
            0.0,
        );
        let dst = &mut out[i * item_out..(i + 1) * item_out];
        col2im(&cols, g, dst);
        add_bias(dst, bias, g.h * g.w);
    }
    Ok(Tensor::from_raw([n, g.c, g.h, g.w], out))
}

/// Transposed convolution, the adjoint of [`conv2d_forward`] with the same
/// weight. `weight` is `(in_c, out_c, k, k)`; output length per axis is
/// `(n - 1) * stride - 2 * pad + k + out_pad`.
pub fn tconv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor> {
    tconv_forward_named("tconv2d", input, weight, bias, stride, pad, out_pad)
}

pub(crate) fn tconv_backward_named(
    node: &str,
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<ConvGrads> {
    let g = tconv_geometry(node, input, weight, stride, pad, out_pad)?;
    let in_c = input.channels();
    let n = input.batch();
    if grad_out.dims() != [n, g.c, g.h, g.w] {
        return Err(shape_err(
            node,
            format!("upstream gradient {:?} does not match output", grad_out.dims()),
        ));
    }
    let mut d_in = vec![0.0; input.len()];
    let mut d_w = vec![0.0; weight.len()];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let item_in = in_c * g.cols();
    for i in 0..n {
        im2col(grad_out.item(i), g, &mut cols);
        let x = input.item(i);
        gemm(
            in_c,
            g.rows(),
            g.cols(),
            weight.data(),
            false,
            &cols,
            false,
            &mut d_in[i * item_in..(i + 1) * item_in],
            0.0,
        );
        gemm(in_c, g.cols(), g.rows(), x, false, &cols, true, &mut d_w, 1.0);
    }
    Ok(ConvGrads {
        input: Tensor::from_raw(input.dims(), d_in),
        weight: Tensor::from_raw(weight.dims(), d_w),
        bias: channel_sums(grad_out),
    })
}

pub fn tconv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<ConvGrads> {
    tconv_backward_named("tconv2d", input, weight, grad_out, stride, pad, out_pad)
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Values a batch-norm backward pass needs from its forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    /// Batch mean per channel (training mode only).
    pub mean: Vec<f64>,
    /// Unbiased batch variance per channel (training mode only).
    pub var: Vec<f64>,
    pub training: bool,
}

/// Per-channel normalization. With `running = None` batch statistics are
/// used (training); otherwise the given running mean and variance.
pub(crate) fn batchnorm_named(
    node: &str,
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    running: Option<(&[f64], &[f64])>,
) -> Result<(Tensor, BatchNormCache)> {
    let [n, c, h, w] = x.dims();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err(
            node,
            format!("affine parameters sized {} for {c} channels", gamma.len()),
        ));
    }
    let count = n * h * w;
    let (mean, var_biased, var_unbiased) = match running {
        Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), Vec::new()),
        None => {
            if count < 2 {
                return Err(NeuralError::DegenerateBatch { node: node.to_string() });
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (ch, m) in mean.iter_mut().enumerate() {
                *m = (0..n).map(|i| x.plane(i, ch).iter().sum::<f64>()).sum::<f64>() / count as f64;
                var[ch] = (0..n)
                    .map(|i| x.plane(i, ch).iter().map(|v| (v - *m) * (v - *m)).sum::<f64>())
                    .sum::<f64>()
                    / count as f64;
            }
            let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
            (mean, var, unbiased)
        }
    };
    let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let p = h * w;
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * p;
            for (j, &v) in x.plane(i, ch).iter().enumerate() {
                let xh = (v - mean[ch]) * inv_std[ch];
                x_hat[off + j] = xh;
                y[off + j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let training = running.is_none();
    Ok((
        Tensor::from_raw(x.dims(), y),
        BatchNormCache {
            x_hat: Tensor::from_raw(x.dims(), x_hat),
            inv_std,
            mean: if training { mean } else { Vec::new() },
            var: var_unbiased,
            training,
        },
    ))
}

pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    running: Option<(&[f64], &[f64])>,
) -> Result<(Tensor, BatchNormCache)> {
    batchnorm_named("batchnorm", x, gamma, beta, eps, running)
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward(grad_out: &Tensor, gamma: &[f64], cache: &BatchNormCache) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = grad_out.dims();
    let p = h * w;
    let count = (n * p) as f64;
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            for (g, xh) in grad_out.plane(i, ch).iter().zip(cache.x_hat.plane(i, ch)) {
                d_gamma[ch] += g * xh;
                d_beta[ch] += g;
            }
        }
    }
    let mut dx = vec![0.0; grad_out.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * p;
            let scale = gamma[ch] * cache.inv_std[ch];
            for (j, (g, xh)) in grad_out.plane(i, ch).iter().zip(cache.x_hat.plane(i, ch)).enumerate() {
                dx[off + j] = if cache.training {
                    scale * (g - d_beta[ch] / count - xh * d_gamma[ch] / count)
                } else {
                    scale * g
                };
            }
        }
    }
    (Tensor::from_raw(grad_out.dims(), dx), d_gamma, d_beta)
}
