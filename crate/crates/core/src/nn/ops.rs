//! Forward and backward kernels on plain tensors. The tape in `graph`
//! composes these; they are also usable directly for inference.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

fn kernel_size(weight: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match weight.shape()[..] {
        [o, i, k, k2] if k == k2 && k % 2 == 1 => Ok((o, i, k)),
        _ => Err(Error::shape(
            "conv weights",
            format!("expected [out, in, k, k] with odd k, got {:?}", weight.shape()),
        )),
    }
}

/// Unfolds a `[C, H, W]` input into a `(C*k*k) x (H*W)` patch matrix with
/// zero padding `k / 2`.
fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1]
                        .copy_from_slice(&plane[src + sx0..src + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a patch matrix back, summing overlaps.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (d, &s) in plane[base + sx0..base + sx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.chw().map_err(|_| {
        Error::shape("conv input", format!("expected [C, H, W], got {:?}", input.shape()))
    })?;
    let (o, i, k) = kernel_size(weight)?;
    if i != c {
        return Err(Error::shape(
            "conv input",
            format!("weights expect {i} input channels, input has {c}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape(
                "conv bias",
                format!("expected [{o}], got {:?}", b.shape()),
            ));
        }
    }
    Ok((o, c, h, w, k))
}

/// Same-size 2-D convolution (cross-correlation) with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (o, c, h, w, k) = check_conv(input, weight, bias)?;
    let hw = h * w;
    let ckk = c * k * k;
    let owned;
    let cols: &[T] = if k == 1 {
        input.data()
    } else {
        owned = im2col(input.data(), c, h, w, k);
        &owned
    };
    let mut out = vec![T::zero(); o * hw];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(hw).zip(b.data()) {
            row.fill(bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        o,
        ckk,
        hw,
        T::one(),
        weight.data(),
        (ckk as isize, 1),
        cols,
        (hw as isize, 1),
        beta,
        &mut out,
        (hw as isize, 1),
    );
    Tensor::from_vec(&[o, h, w], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (o, c, h, w, k) = check_conv(input, weight, None)?;
    if grad_out.shape() != [o, h, w] {
        return Err(Error::shape(
            "conv grad",
            format!("expected [{o}, {h}, {w}], got {:?}", grad_out.shape()),
        ));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let owned;
    let cols: &[T] = if k == 1 {
        input.data()
    } else {
        owned = im2col(input.data(), c, h, w, k);
        &owned
    };
    let g = grad_out.data();

    let mut gw = vec![T::zero(); o * ckk];
    T::gemm(
        o,
        hw,
        ckk,
        T::one(),
        g,
        (hw as isize, 1),
        cols,
        (1, hw as isize),
        T::zero(),
        &mut gw,
        (ckk as isize, 1),
    );

    let mut gcols = vec![T::zero(); ckk * hw];
    T::gemm(
        ckk,
        o,
        hw,
        T::one(),
        weight.data(),
        (1, ckk as isize),
        g,
        (hw as isize, 1),
        T::zero(),
        &mut gcols,
        (hw as isize, 1),
    );
    let gin = if k == 1 { gcols } else { col2im(&gcols, c, h, w, k) };

    let gb: Vec<T> = g.chunks(hw).map(|row| row.iter().copied().sum()).collect();
    Ok(ConvGrads {
        input: Tensor::from_vec(&[c, h, w], gin)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[o], gb)?,
    })
}

/// 2×2 average pooling.
pub fn avg_pool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "downsample input",
            format!("spatial size {h}x{w} must be even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            let r0 = &p[2 * y * w..(2 * y + 1) * w];
            let r1 = &p[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                out.push((r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let up = upsample2(grad_out)?;
    Ok(up.map(|v| v * T::of(0.25)))
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            let row = &p[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let pooled = avg_pool2(grad_out)?;
    Ok(pooled.map(|v| v * T::of(4.0)))
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    input.map(|v| if v > T::zero() { v } else { v * s })
}

pub fn leaky_relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    input
        .zip_map(grad_out, |x, g| if x > T::zero() { g } else { g * s })
        .expect("activation shapes match")
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Matrix product with a fixed accumulation order: for every output
/// element the inner index runs sequentially from 0 to k-1.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.rows_cols()?;
    let (k2, n) = b.rows_cols()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {m}x{k} · {k2}x{n}"),
        ));
    }
    let bt = transpose(b)?;
    let (ad, btd) = (a.data(), bt.data());
    let mut out = vec![T::zero(); m * n];
    let row_kernel = |(i, row): (usize, &mut [T])| {
        let ar = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let bc = &btd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += ar[p] * bc[p];
            }
            *o = acc;
        }
    };
    if m * n * k >= 1 << 20 {
        out.par_chunks_mut(n.max(1)).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n.max(1)).enumerate().for_each(row_kernel);
    }
    Tensor::from_vec(&[m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.rows_cols()?;
    let d = a.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(d[i * c + j]);
        }
    }
    Tensor::from_vec(&[c, r], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = a.rows_cols()?;
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::from_vec(a.shape(), out)
}

/// Gradient of row softmax given its output `y`: `y ⊙ (g − rowsum(g ⊙ y))`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = y.rows_cols()?;
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(c.max(1)).zip(grad_out.data().chunks(c.max(1))) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::from_vec(y.shape(), out)
}

/// Concatenates `[C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let (_, h, w) = first.chw()?;
    let mut c_total = 0;
    let mut data = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        let (c, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                format!("concat input {i}"),
                format!("spatial {ph}x{pw} differs from {h}x{w}"),
            ));
        }
        c_total += c;
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[c_total, h, w], data)
}
