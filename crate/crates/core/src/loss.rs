//! Window-gated SSIM loss.
//!
//! Every `window`×`window` patch (at the configured stride) compares the
//! fused patch against one source patch. The variance gate picks X when
//! `var(X) > var(Y)` and Y otherwise, so ties go to Y; the mean gate uses
//! patch means instead. The loss is `1 - mean(SSIM)` over all windows and
//! is differentiable with respect to the fused image only.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::nn::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl SsimParams {
    pub fn new(window: usize, dynamic_range: f64) -> Result<Self> {
        if window == 0 || window.is_multiple_of(2) {
            return Err(Error::Config(format!("SSIM window must be odd, got {window}")));
        }
        Ok(SsimParams {
            window,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
        })
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams::new(11, 1.0).expect("11 is odd")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossGate {
    Mean,
    Var,
}

impl LossGate {
    pub const ALL: [LossGate; 2] = [LossGate::Mean, LossGate::Var];

    pub fn as_str(self) -> &'static str {
        match self {
            LossGate::Mean => "mean",
            LossGate::Var => "var",
        }
    }
}

impl fmt::Display for LossGate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossGate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(LossGate::Mean),
            "var" | "variance" => Ok(LossGate::Var),
            other => Err(Error::Config(format!(
                "unknown loss gate `{other}` (expected mean or var)"
            ))),
        }
    }
}

/// Mean, variance and (optionally) covariance of a patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowStats {
    pub mu: f64,
    pub var: f64,
    pub cov: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub window_count: usize,
    pub frac_selected_x: f64,
}

pub fn patch_mean(patch: &[f64]) -> f64 {
    patch.iter().sum::<f64>() / patch.len() as f64
}

/// Population variance (divides by the number of pixels).
pub fn patch_variance(patch: &[f64]) -> f64 {
    let mu = patch_mean(patch);
    patch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / patch.len() as f64
}

/// Statistics of `b` with its covariance against `a`.
pub fn window_stats(a: &[f64], b: &[f64]) -> (WindowStats, WindowStats) {
    let n = a.len() as f64;
    let (ma, mb) = (patch_mean(a), patch_mean(b));
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (
        WindowStats {
            mu: ma,
            var: va / n,
            cov: cov / n,
        },
        WindowStats {
            mu: mb,
            var: vb / n,
            cov: cov / n,
        },
    )
}

fn ssim_from_stats(a: &WindowStats, b: &WindowStats, p: &SsimParams) -> f64 {
    ((2.0 * a.mu * b.mu + p.c1) * (2.0 * a.cov + p.c2))
        / ((a.mu * a.mu + b.mu * b.mu + p.c1) * (a.var + b.var + p.c2))
}

/// SSIM of two equally sized patches with uniform window statistics.
pub fn ssim_window(a: &[f64], b: &[f64], p: &SsimParams) -> f64 {
    assert_eq!(a.len(), b.len(), "ssim_window: patch sizes differ");
    let (sa, sb) = window_stats(a, b);
    ssim_from_stats(&sa, &sb, p)
}

fn gate_selects_x(wx: &[f64], wy: &[f64], gate: LossGate) -> bool {
    match gate {
        LossGate::Var => patch_variance(wx) > patch_variance(wy),
        LossGate::Mean => patch_mean(wx) > patch_mean(wy),
    }
}

/// SSIM of the fused patch against whichever source patch has the larger
/// variance (Y on ties).
pub fn var_ssim_window(wx: &[f64], wy: &[f64], wf: &[f64], p: &SsimParams) -> f64 {
    if gate_selects_x(wx, wy, LossGate::Var) {
        ssim_window(wx, wf, p)
    } else {
        ssim_window(wy, wf, p)
    }
}

fn window_origins(h: usize, w: usize, win: usize, stride: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..=h - win)
        .step_by(stride)
        .flat_map(move |r| (0..=w - win).step_by(stride).map(move |c| (r, c)))
}

fn gather(buf: &mut Vec<f64>, src: &[f64], w: usize, r: usize, c: usize, win: usize) {
    buf.clear();
    for row in r..r + win {
        buf.extend_from_slice(&src[row * w + c..row * w + c + win]);
    }
}

fn check_inputs(h: usize, w: usize, lens: [usize; 3], p: &SsimParams, stride: usize) -> Result<()> {
    if lens.iter().any(|&l| l != h * w) {
        return Err(Error::shape(
            "loss inputs",
            format!("expected three {h}x{w} images, got lengths {lens:?}"),
        ));
    }
    if h < p.window || w < p.window {
        return Err(Error::Precondition(format!(
            "{h}x{w} image is smaller than the {0}x{0} SSIM window",
            p.window
        )));
    }
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    Ok(())
}

/// Gated SSIM loss and its gradient with respect to `fused`.
#[allow(clippy::too_many_arguments)]
pub fn gated_ssim_loss(
    x: &[f64],
    y: &[f64],
    fused: &[f64],
    h: usize,
    w: usize,
    p: &SsimParams,
    stride: usize,
    gate: LossGate,
) -> Result<(LossReport, Vec<f64>)> {
    check_inputs(h, w, [x.len(), y.len(), fused.len()], p, stride)?;
    let win = p.window;
    let n = (win * win) as f64;
    let mut grad = vec![0.0; h * w];
    let (mut wx, mut wy, mut wf) = (Vec::new(), Vec::new(), Vec::new());
    let (mut total, mut count, mut picked_x) = (0.0, 0usize, 0usize);

    for (r, c) in window_origins(h, w, win, stride) {
        gather(&mut wx, x, w, r, c, win);
        gather(&mut wy, y, w, r, c, win);
        gather(&mut wf, fused, w, r, c, win);
        let use_x = gate_selects_x(&wx, &wy, gate);
        picked_x += use_x as usize;
        let src = if use_x { &wx } else { &wy };
        let (sa, sb) = window_stats(src, &wf);
        let a1 = 2.0 * sa.mu * sb.mu + p.c1;
        let a2 = 2.0 * sa.cov + p.c2;
        let b1 = sa.mu * sa.mu + sb.mu * sb.mu + p.c1;
        let b2 = sa.var + sb.var + p.c2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        count += 1;

        // ∂S/∂μ_f, ∂S/∂σ²_f, ∂S/∂σ_sf, then chain through each fused pixel.
        let d_mu = 2.0 * sa.mu * a2 / (b1 * b2) - s * 2.0 * sb.mu / b1;
        let d_var = -s / b2;
        let d_cov = 2.0 * a1 / (b1 * b2);
        let mut k = 0;
        for row in r..r + win {
            for col in c..c + win {
                let (fv, sv) = (wf[k], src[k]);
                grad[row * w + col] +=
                    (d_mu + d_var * 2.0 * (fv - sb.mu) + d_cov * (sv - sa.mu)) / n;
                k += 1;
            }
        }
    }
    let scale = -1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((
        LossReport {
            loss: 1.0 - total / count as f64,
            window_count: count,
            frac_selected_x: picked_x as f64 / count as f64,
        },
        grad,
    ))
}

fn as_f64(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

fn image_loss(ix: &Image, iy: &Image, if_: &Image, p: &SsimParams, stride: usize, gate: LossGate) -> Result<LossReport> {
    if ix.dims() != iy.dims() || ix.dims() != if_.dims() {
        return Err(Error::shape(
            "loss inputs",
            format!("{:?}, {:?}, {:?}", ix.dims(), iy.dims(), if_.dims()),
        ));
    }
    let (h, w) = ix.dims();
    gated_ssim_loss(&as_f64(ix), &as_f64(iy), &as_f64(if_), h, w, p, stride, gate).map(|r| r.0)
}

/// `1 - mean SSIM` with the variance gate.
pub fn loss_var_ssim(ix: &Image, iy: &Image, if_: &Image, p: &SsimParams, stride: usize) -> Result<LossReport> {
    image_loss(ix, iy, if_, p, stride, LossGate::Var)
}

/// `1 - mean SSIM` with the window-mean gate.
pub fn loss_mean_ssim(ix: &Image, iy: &Image, if_: &Image, p: &SsimParams, stride: usize) -> Result<LossReport> {
    image_loss(ix, iy, if_, p, stride, LossGate::Mean)
}

/// Per-window gate outcomes (`true` = X selected), in window raster order.
pub fn gate_decisions(ix: &Image, iy: &Image, p: &SsimParams, stride: usize, gate: LossGate) -> Result<Vec<bool>> {
    let (h, w) = ix.dims();
    check_inputs(h, w, [ix.data().len(), iy.data().len(), h * w], p, stride)?;
    let (x, y) = (as_f64(ix), as_f64(iy));
    let (mut wx, mut wy) = (Vec::new(), Vec::new());
    Ok(window_origins(h, w, p.window, stride)
        .map(|(r, c)| {
            gather(&mut wx, &x, w, r, c, p.window);
            gather(&mut wy, &y, w, r, c, p.window);
            gate_selects_x(&wx, &wy, gate)
        })
        .collect())
}

/// Records the gated loss on the tape as a function of `fused` (`[1, H, W]`).
pub fn loss_node<T: Scalar>(
    g: &mut Graph<T>,
    fused: Var,
    ix: &Image,
    iy: &Image,
    p: &SsimParams,
    stride: usize,
    gate: LossGate,
) -> Result<(Var, LossReport)> {
    let (h, w) = ix.dims();
    if g.shape(fused) != [1, h, w] || iy.dims() != (h, w) {
        return Err(Error::shape(
            "loss inputs",
            format!("fused {:?} vs sources {:?}/{:?}", g.shape(fused), ix.dims(), iy.dims()),
        ));
    }
    let f: Vec<f64> = g.value(fused).data().iter().map(|v| v.as_f64()).collect();
    let (report, grad) = gated_ssim_loss(&as_f64(ix), &as_f64(iy), &f, h, w, p, stride, gate)?;
    let grad = Tensor::from_vec(&[1, h, w], grad.into_iter().map(T::of).collect())?;
    let node = g.linearized(fused, T::of(report.loss), grad)?;
    Ok((node, report))
}
