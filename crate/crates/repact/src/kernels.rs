//! Dense numeric kernels shared by the autodiff tape and the inference path.
//!
//! Convolutions run as im2col plus a row-major GEMM. Forward and the
//! input-gradient pass parallelise over batch samples with rayon — every
//! sample writes a disjoint output slice, so results are bit-identical for
//! any thread count. All reductions (bias gradients, batch statistics,
//! weight-gradient accumulation) stay serial in a fixed order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

pub fn linear_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, din) = as_matrix(x, "linear input")?;
    let (wdin, dout) = as_matrix(w, "linear weight")?;
    if din != wdin || b.shape() != [dout] {
        return Err(Error::invalid(format!(
            "linear shapes disagree: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, dout])?;
    T::gemm(
        n,
        din,
        dout,
        T::one(),
        x.data(),
        false,
        w.data(),
        false,
        T::zero(),
        out.data_mut(),
    );
    for row in out.data_mut().chunks_exact_mut(dout) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_w, grad_b)` for `y = xW + b` given `g = ∂L/∂y`.
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, din) = as_matrix(x, "linear input")?;
    let (_, dout) = as_matrix(w, "linear weight")?;
    let mut gx = Tensor::zeros(&[n, din])?;
    let mut gw = Tensor::zeros(&[din, dout])?;
    let mut gb = Tensor::zeros(&[dout])?;
    // ∂L/∂x = g Wᵀ
    T::gemm(
        n,
        dout,
        din,
        T::one(),
        g.data(),
        false,
        w.data(),
        true,
        T::zero(),
        gx.data_mut(),
    );
    // ∂L/∂W = xᵀ g
    T::gemm(
        din,
        n,
        dout,
        T::one(),
        x.data(),
        true,
        g.data(),
        false,
        T::zero(),
        gw.data_mut(),
    );
    for row in g.data().chunks_exact(dout) {
        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((gx, gw, gb))
}

fn as_matrix<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(Error::invalid(format!(
            "{what} must be rank 2, got {other:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv2d_dims<T: Element>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvDims> {
    let &[batch, in_c, in_h, in_w] = x.shape() else {
        return Err(Error::invalid(format!(
            "conv2d input must be rank 4, got {:?}",
            x.shape()
        )));
    };
    let &[out_c, kc, kh, kw] = k.shape() else {
        return Err(Error::invalid(format!(
            "conv2d kernel must be rank 4, got {:?}",
            k.shape()
        )));
    };
    if kc != in_c {
        return Err(Error::invalid(format!(
            "conv2d channel mismatch: input has {in_c}, kernel expects {kc}"
        )));
    }
    if b.shape() != [out_c] {
        return Err(Error::invalid(format!(
            "conv2d bias must have shape [{out_c}], got {:?}",
            b.shape()
        )));
    }
    if spec.stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let padded_h = in_h + 2 * spec.pad;
    let padded_w = in_w + 2 * spec.pad;
    if padded_h < kh || padded_w < kw {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} does not fit padded input {padded_h}x{padded_w}"
        )));
    }
    let out_h = (padded_h - kh) / spec.stride + 1;
    let out_w = (padded_w - kw) / spec.stride + 1;
    Ok(ConvDims {
        batch,
        in_channels: in_c,
        in_h,
        in_w,
        out_channels: out_c,
        kh,
        kw,
        out_h,
        out_w,
    })
}

/// Fill the im2col matrix `[C·Kh·Kw, Ho·Wo]` for one sample.
fn im2col<T: Element>(x: &[T], d: &ConvDims, spec: ConvSpec, col: &mut [T]) {
    let hw = d.out_h * d.out_w;
    let mut row = 0;
    for c in 0..d.in_channels {
        let plane = &x[c * d.in_h * d.in_w..(c + 1) * d.in_h * d.in_w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let dst = &mut col[row * hw..(row + 1) * hw];
                let mut idx = 0;
                for ho in 0..d.out_h {
                    let h = (ho * spec.stride + kh) as isize - spec.pad as isize;
                    for wo in 0..d.out_w {
                        let w = (wo * spec.stride + kw) as isize - spec.pad as isize;
                        dst[idx] = if h >= 0
                            && (h as usize) < d.in_h
                            && w >= 0
                            && (w as usize) < d.in_w
                        {
                            plane[h as usize * d.in_w + w as usize]
                        } else {
                            T::zero()
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column gradient back into one sample's input gradient.
fn col2im_add<T: Element>(col: &[T], d: &ConvDims, spec: ConvSpec, gx: &mut [T]) {
    let hw = d.out_h * d.out_w;
    let mut row = 0;
    for c in 0..d.in_channels {
        let plane_off = c * d.in_h * d.in_w;
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let src = &col[row * hw..(row + 1) * hw];
                let mut idx = 0;
                for ho in 0..d.out_h {
                    let h = (ho * spec.stride + kh) as isize - spec.pad as isize;
                    for wo in 0..d.out_w {
                        let w = (wo * spec.stride + kw) as isize - spec.pad as isize;
                        if h >= 0 && (h as usize) < d.in_h && w >= 0 && (w as usize) < d.in_w {
                            gx[plane_off + h as usize * d.in_w + w as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let d = conv2d_dims(x, k, b, spec)?;
    let hw = d.out_h * d.out_w;
    let ckk = d.in_channels * d.kh * d.kw;
    let in_stride = d.in_channels * d.in_h * d.in_w;
    let out_stride = d.out_channels * hw;
    let mut out = Tensor::zeros(&[d.batch, d.out_channels, d.out_h, d.out_w])?;

    out.data_mut()
        .par_chunks_exact_mut(out_stride)
        .enumerate()
        .for_each(|(n, out_n)| {
            let mut col = vec![T::zero(); ckk * hw];
            im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &d, spec, &mut col);
            T::gemm(
                d.out_channels,
                ckk,
                hw,
                T::one(),
                k.data(),
                false,
                &col,
                false,
                T::zero(),
                out_n,
            );
            for (o, plane) in out_n.chunks_exact_mut(hw).enumerate() {
                let bias = b.data()[o];
                for v in plane {
                    *v += bias;
                }
            }
        });
    Ok(out)
}

/// Returns `(grad_x, grad_k, grad_b)`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    spec: ConvSpec,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv2d_dims(x, k, b, spec)?;
    let hw = d.out_h * d.out_w;
    let ckk = d.in_channels * d.kh * d.kw;
    let in_stride = d.in_channels * d.in_h * d.in_w;
    let out_stride = d.out_channels * hw;
    debug_assert_eq!(g.shape(), [d.batch, d.out_channels, d.out_h, d.out_w]);

    let mut gx = Tensor::zeros(&[d.batch, d.in_channels, d.in_h, d.in_w])?;
    let mut gk = Tensor::zeros(&[d.out_channels, d.in_channels, d.kh, d.kw])?;
    let mut gb = Tensor::zeros(&[d.out_channels])?;

    // Input gradient: independent per sample, parallel.
    gx.data_mut()
        .par_chunks_exact_mut(in_stride)
        .enumerate()
        .for_each(|(n, gx_n)| {
            let g_n = &g.data()[n * out_stride..(n + 1) * out_stride];
            let mut gcol = vec![T::zero(); ckk * hw];
            T::gemm(
                ckk,
                d.out_channels,
                hw,
                T::one(),
                k.data(),
                true,
                g_n,
                false,
                T::zero(),
                &mut gcol,
            );
            col2im_add(&gcol, &d, spec, gx_n);
        });

    // Weight and bias gradients: fixed-order accumulation over samples.
    let mut col = vec![T::zero(); ckk * hw];
    for n in 0..d.batch {
        let g_n = &g.data()[n * out_stride..(n + 1) * out_stride];
        im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &d, spec, &mut col);
        T::gemm(
            d.out_channels,
            hw,
            ckk,
            T::one(),
            g_n,
            false,
            &col,
            true,
            T::one(),
            gk.data_mut(),
        );
        for (o, plane) in g_n.chunks_exact(hw).enumerate() {
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            gb.data_mut()[o] += acc;
        }
    }
    Ok((gx, gk, gb))
}

// ---------------------------------------------------------------------------
// batchnorm2d (per-channel, over N×H×W)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Bn2dStats<T> {
    /// Per-channel mean of the batch.
    pub mean: Vec<T>,
    /// Per-channel biased variance of the batch.
    pub var: Vec<T>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

fn bn_dims<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid(format!(
            "batchnorm2d input must be rank 4, got {:?}",
            x.shape()
        )));
    };
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::invalid(format!(
            "batchnorm2d parameters must have shape [{c}], got γ {:?} β {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok([n, c, h, w])
}

pub fn batchnorm2d_stats<T: Element>(x: &Tensor<T>) -> Result<Bn2dStats<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid(format!(
            "batchnorm2d input must be rank 4, got {:?}",
            x.shape()
        )));
    };
    let count = n * h * w;
    if count < 2 {
        return Err(Error::invalid(
            "batchnorm2d train mode needs at least 2 elements per channel",
        ));
    }
    let hw = h * w;
    let inv = T::one() / T::from_f64(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for nn in 0..n {
            let plane = &x.data()[(nn * c + ch) * hw..(nn * c + ch + 1) * hw];
            for &v in plane {
                acc += v;
            }
        }
        mean[ch] = acc * inv;
        let mut acc2 = T::zero();
        for nn in 0..n {
            let plane = &x.data()[(nn * c + ch) * hw..(nn * c + ch + 1) * hw];
            for &v in plane {
                let dv = v - mean[ch];
                acc2 += dv * dv;
            }
        }
        var[ch] = acc2 * inv;
    }
    Ok(Bn2dStats { mean, var, count })
}

pub fn batchnorm2d_apply<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = bn_dims(x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::invalid("batchnorm2d statistics length mismatch"));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w])?;
    for ch in 0..c {
        let scale = gamma.data()[ch] / (var[ch] + eps).sqrt();
        let shift = beta.data()[ch] - scale * mean[ch];
        for nn in 0..n {
            let off = (nn * c + ch) * hw;
            let src = &x.data()[off..off + hw];
            let dst = &mut out.data_mut()[off..off + hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = scale * s + shift;
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`. `through_batch_stats` selects
/// the full train-mode chain (statistics depend on `x`) versus the frozen
/// eval-mode chain.
pub fn batchnorm2d_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
    through_batch_stats: bool,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid(format!(
            "batchnorm2d input must be rank 4, got {:?}",
            x.shape()
        )));
    };
    let hw = h * w;
    let count = T::from_f64((n * hw) as f64);
    let mut gx = Tensor::zeros(&[n, c, h, w])?;
    let mut ggamma = Tensor::zeros(&[c])?;
    let mut gbeta = Tensor::zeros(&[c])?;
    for ch in 0..c {
        let inv = T::one() / (var[ch] + eps).sqrt();
        let mu = mean[ch];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for nn in 0..n {
            let off = (nn * c + ch) * hw;
            for i in 0..hw {
                let gi = g.data()[off + i];
                sum_g += gi;
                sum_gx += gi * (x.data()[off + i] - mu) * inv;
            }
        }
        gbeta.data_mut()[ch] = sum_g;
        ggamma.data_mut()[ch] = sum_gx;
        let scale = gamma.data()[ch] * inv;
        let mean_g = sum_g / count;
        let mean_gx = sum_gx / count;
        for nn in 0..n {
            let off = (nn * c + ch) * hw;
            for i in 0..hw {
                let gi = g.data()[off + i];
                gx.data_mut()[off + i] = if through_batch_stats {
                    let xhat = (x.data()[off + i] - mu) * inv;
                    scale * (gi - mean_g - xhat * mean_gx)
                } else {
                    scale * gi
                };
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

// ---------------------------------------------------------------------------
// global average pool
// ---------------------------------------------------------------------------

pub fn global_avg_pool_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid(format!(
            "global_avg_pool input must be rank 4, got {:?}",
            x.shape()
        )));
    };
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let mut out = Tensor::zeros(&[n, c])?;
    for nc in 0..n * c {
        let mut acc = T::zero();
        for &v in &x.data()[nc * hw..(nc + 1) * hw] {
            acc += v;
        }
        out.data_mut()[nc] = acc * inv;
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Element>(
    in_shape: &[usize],
    g: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = in_shape else {
        return Err(Error::invalid(format!(
            "global_avg_pool input must be rank 4, got {in_shape:?}"
        )));
    };
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let mut gx = Tensor::zeros(&[n, c, h, w])?;
    for nc in 0..n * c {
        let spread = g.data()[nc] * inv;
        for v in &mut gx.data_mut()[nc * hw..(nc + 1) * hw] {
            *v = spread;
        }
    }
    Ok(gx)
}

// ---------------------------------------------------------------------------
// softmax cross-entropy (mean over the batch, optional label smoothing)
// ---------------------------------------------------------------------------

/// Returns `(loss, probs)` where probs are the row softmaxes, kept for the
/// backward pass. The smoothed target is `(1−ls)·onehot + ls/K`.
pub fn softmax_ce_forward<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
) -> Result<(T, Tensor<T>)> {
    let (n, k) = as_matrix(logits, "logits")?;
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!(
            "label smoothing must be in [0, 1), got {smoothing}"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let ls = T::from_f64(smoothing);
    let uniform = ls / T::from_f64(k as f64);
    let confident = T::one() - ls;
    let mut probs = Tensor::zeros(&[n, k])?;
    let mut loss = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        let z = &logits.data()[row * k..(row + 1) * k];
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in z {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        let p = &mut probs.data_mut()[row * k..(row + 1) * k];
        let mut row_loss = T::zero();
        for (j, &v) in z.iter().enumerate() {
            let log_p = v - max - log_denom;
            p[j] = log_p.exp();
            let mut q = uniform;
            if j == label {
                q += confident;
            }
            row_loss -= q * log_p;
        }
        loss += row_loss;
    }
    Ok((loss / T::from_f64(n as f64), probs))
}

/// `∂loss/∂logits = (probs − q) · upstream / N`.
pub fn softmax_ce_backward<T: Element>(
    probs: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
    upstream: T,
) -> Result<Tensor<T>> {
    let (n, k) = as_matrix(probs, "probs")?;
    let ls = T::from_f64(smoothing);
    let uniform = ls / T::from_f64(k as f64);
    let confident = T::one() - ls;
    let scale = upstream / T::from_f64(n as f64);
    let mut g = Tensor::zeros(&[n, k])?;
    for (row, &label) in labels.iter().enumerate() {
        let p = &probs.data()[row * k..(row + 1) * k];
        let out = &mut g.data_mut()[row * k..(row + 1) * k];
        for j in 0..k {
            let mut q = uniform;
            if j == label {
                q += confident;
            }
            out[j] = (p[j] - q) * scale;
        }
    }
    Ok(g)
}
