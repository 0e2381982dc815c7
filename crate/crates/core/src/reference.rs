//! Slow, direct implementations used as oracles by the tests, the
//! acceptance suite and the `selftest` command. Nothing here is shared
//! with the fast paths: every formula is written out with plain loops.

use std::f64::consts::FRAC_PI_2;

use crate::image_io::Image;
use crate::loss::{LossGate, SsimParams};
use crate::metrics::Metric;
use crate::nn::NetworkParams;
use crate::tensor::Tensor;

const SLOPE: f64 = 0.01;

fn dims3(t: &Tensor<f64>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Zero-padded "same" convolution with an odd square kernel.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (cin, h, wd) = dims3(x);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[cout, h, wd]);
    for o in 0..cout {
        for r in 0..h {
            for c in 0..wd {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for i in 0..cin {
                    for kr in 0..k {
                        for kc in 0..k {
                            let rr = r as isize + kr as isize - pad;
                            let cc = c as isize + kc as isize - pad;
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(i * h + rr as usize) * wd + cc as usize];
                            let wv = w.data()[((o * cin + i) * k + kr) * k + kc];
                            acc += xv * wv;
                        }
                    }
                }
                out.data_mut()[(o * h + r) * wd + c] = acc;
            }
        }
    }
    out
}

pub fn avg_pool2(x: &Tensor<f64>) -> Tensor<f64> {
    let (ch, h, w) = dims3(x);
    let mut out = Tensor::zeros(&[ch, h / 2, w / 2]);
    for i in 0..ch {
        for r in 0..h / 2 {
            for c in 0..w / 2 {
                let mut s = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        s += x.data()[(i * h + 2 * r + dr) * w + 2 * c + dc];
                    }
                }
                out.data_mut()[(i * (h / 2) + r) * (w / 2) + c] = s / 4.0;
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor<f64>) -> Tensor<f64> {
    let (ch, h, w) = dims3(x);
    let mut out = Tensor::zeros(&[ch, 2 * h, 2 * w]);
    for i in 0..ch {
        for r in 0..2 * h {
            for c in 0..2 * w {
                out.data_mut()[(i * 2 * h + r) * 2 * w + c] = x.data()[(i * h + r / 2) * w + c / 2];
            }
        }
    }
    out
}

pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out.data_mut()[i * n + j] = s;
        }
    }
    out
}

fn leaky(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v > 0.0 { v } else { SLOPE * v })
}

fn named(p: &NetworkParams<f64>, name: &str) -> Tensor<f64> {
    p.get(name)
        .unwrap_or_else(|| panic!("oracle needs parameter `{name}`"))
        .value
        .clone()
}

pub fn res_block(x: &Tensor<f64>, p: &NetworkParams<f64>, prefix: &str) -> Tensor<f64> {
    let conv = |input: &Tensor<f64>, part: &str| {
        let w = named(p, &format!("{prefix}.{part}.w"));
        let b = named(p, &format!("{prefix}.{part}.b"));
        conv2d(input, &w, Some(&b))
    };
    let h = leaky(&conv(x, "conv1"));
    let h = conv(&h, "conv2");
    let skip = if p.contains(&format!("{prefix}.proj.w")) {
        conv(x, "proj")
    } else {
        x.clone()
    };
    leaky(&h.zip_map(&skip, |a, b| a + b).expect("same shape"))
}

fn positions(f: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (c, h, w) = dims3(f);
    (0..h * w)
        .map(|p| (0..c).map(|ch| f.data()[ch * h * w + p]).collect())
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn weighted_maps(weights: &[Vec<f64>], vals: &[Vec<f64>], shape: &[usize]) -> Tensor<f64> {
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let mut out = Tensor::zeros(shape);
    for p in 0..n {
        for ch in 0..c {
            out.data_mut()[ch * n + p] = (0..n).map(|q| weights[p][q] * vals[q][ch]).sum();
        }
    }
    out
}

fn correlation(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let scale = 1.0 / (a[0].len() as f64).sqrt();
    a.iter()
        .map(|u| b.iter().map(|v| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() * scale).collect())
        .collect()
}

/// `(map_x, map_y)` of the deepest-scale attention.
pub fn deep_maps(fx: &Tensor<f64>, fy: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (q, k) = (positions(fx), positions(fy));
    let p: Vec<Vec<f64>> = correlation(&q, &k).iter().map(|r| softmax(r)).collect();
    (weighted_maps(&p, &q, fx.shape()), weighted_maps(&p, &k, fx.shape()))
}

/// `softmax_rows(Aᵀ) K` where `A` is the correlation of `fx` against `fy`.
pub fn deep_maps_transposed(fx: &Tensor<f64>, fy: &Tensor<f64>) -> Tensor<f64> {
    let (q, k) = (positions(fx), positions(fy));
    let a = correlation(&q, &k);
    let n = a.len();
    let p: Vec<Vec<f64>> = (0..n)
        .map(|i| softmax(&(0..n).map(|j| a[j][i]).collect::<Vec<_>>()))
        .collect();
    weighted_maps(&p, &k, fx.shape())
}

/// SSIM written directly from the luminance/contrast/structure formula.
pub fn ssim_window(a: &[f64], b: &[f64], p: &SsimParams) -> f64 {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for i in 0..a.len() {
        va += (a[i] - mu_a).powi(2) / n;
        vb += (b[i] - mu_b).powi(2) / n;
        cov += (a[i] - mu_a) * (b[i] - mu_b) / n;
    }
    let lum = (2.0 * mu_a * mu_b + p.c1) / (mu_a.powi(2) + mu_b.powi(2) + p.c1);
    let cs = (2.0 * cov + p.c2) / (va + vb + p.c2);
    lum * cs
}

fn window_of(img: &Image, r0: usize, c0: usize, k: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(k * k);
    for r in r0..r0 + k {
        for c in c0..c0 + k {
            v.push(img.get(r, c) as f64);
        }
    }
    v
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

/// Brute-force gated loss: visits every window, applies the gate
/// (ties select Y) and averages `1 - SSIM`.
pub fn gated_ssim_loss(x: &Image, y: &Image, f: &Image, p: &SsimParams, stride: usize, gate: LossGate) -> f64 {
    let (h, w) = x.dims();
    let k = p.window;
    let mut total = 0.0;
    let mut count = 0;
    let mut r = 0;
    while r + k <= h {
        let mut c = 0;
        while c + k <= w {
            let (wx, wy, wf) = (window_of(x, r, c, k), window_of(y, r, c, k), window_of(f, r, c, k));
            let pick_x = match gate {
                LossGate::Var => variance(&wx) > variance(&wy),
                LossGate::Mean => wx.iter().sum::<f64>() > wy.iter().sum::<f64>(),
            };
            total += 1.0 - ssim_window(if pick_x { &wx } else { &wy }, &wf, p);
            count += 1;
            c += stride;
        }
        r += stride;
    }
    total / count as f64
}

fn pixels(img: &Image) -> Vec<Vec<f64>> {
    let (h, w) = img.dims();
    (0..h)
        .map(|r| (0..w).map(|c| img.get(r, c) as f64 * 255.0).collect())
        .collect()
}

fn histogram(img: &Image) -> Vec<f64> {
    let mut h = vec![0.0; 256];
    for &v in img.data() {
        let mut bin = (v as f64 * 255.999).floor() as usize;
        if bin > 255 {
            bin = 255;
        }
        h[bin] += 1.0;
    }
    let n = img.data().len() as f64;
    h.iter().map(|c| c / n).collect()
}

pub fn en(f: &Image) -> f64 {
    let mut e = 0.0;
    for p in histogram(f) {
        if p > 0.0 {
            e -= p * p.log2();
        }
    }
    e
}

pub fn sd(f: &Image) -> f64 {
    let v: Vec<f64> = pixels(f).concat();
    variance(&v).sqrt()
}

pub fn sf(f: &Image) -> f64 {
    let px = pixels(f);
    let (h, w) = f.dims();
    let mut rf = Vec::new();
    let mut cf = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if c > 0 {
                rf.push((px[r][c] - px[r][c - 1]).powi(2));
            }
            if r > 0 {
                cf.push((px[r][c] - px[r - 1][c]).powi(2));
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&rf) + mean(&cf)).sqrt()
}

fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn sobel_at(px: &[Vec<f64>], r: usize, c: usize) -> (f64, f64) {
    let (h, w) = (px.len(), px[0].len());
    let (mut gx, mut gy) = (0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            let v = px[mirror(r as isize + i as isize - 1, h)][mirror(c as isize + j as isize - 1, w)];
            gx += SOBEL_X[i][j] * v;
            gy += SOBEL_Y[i][j] * v;
        }
    }
    (gx, gy)
}

pub fn ei(f: &Image) -> f64 {
    let px = pixels(f);
    let (h, w) = f.dims();
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (gx, gy) = sobel_at(&px, r, c);
            s += (gx * gx + gy * gy).sqrt();
        }
    }
    s / (h * w) as f64
}

fn kl(a: &Image, b: &Image) -> f64 {
    let (pa, pb) = (histogram(a), histogram(b));
    let mut d = 0.0;
    for k in 0..256 {
        if pa[k] > 0.0 {
            d += pa[k] * (pa[k] / pb[k].max(1e-12)).log2();
        }
    }
    d
}

pub fn ce(x: &Image, y: &Image, f: &Image) -> f64 {
    0.5 * (kl(x, f) + kl(y, f))
}

fn mi_pair(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    let bin = |v: f32| ((v as f64 * 255.999).floor() as usize).min(255);
    let mut joint = vec![vec![0.0; 256]; 256];
    for i in 0..a.data().len() {
        joint[bin(a.data()[i])][bin(b.data()[i])] += 1.0 / n;
    }
    let (pa, pb) = (histogram(a), histogram(b));
    let mut mi = 0.0;
    for i in 0..256 {
        for j in 0..256 {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (pa[i] * pb[j])).log2();
            }
        }
    }
    mi
}

pub fn mi(x: &Image, y: &Image, f: &Image) -> f64 {
    mi_pair(x, f) + mi_pair(y, f)
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let da: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let db: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

pub fn scd(x: &Image, y: &Image, f: &Image) -> f64 {
    let (px, py, pf) = (pixels(x).concat(), pixels(y).concat(), pixels(f).concat());
    let d1: Vec<f64> = (0..pf.len()).map(|i| pf[i] - py[i]).collect();
    let d2: Vec<f64> = (0..pf.len()).map(|i| pf[i] - px[i]).collect();
    corr(&d1, &px) + corr(&d2, &py)
}

fn edge_maps(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let px = pixels(img);
    let (h, w) = img.dims();
    let mut g = Vec::new();
    let mut a = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let (sx, sy) = sobel_at(&px, r, c);
            g.push((sx * sx + sy * sy).sqrt());
            a.push(if sx == 0.0 { FRAC_PI_2 } else { (sy / sx).atan() });
        }
    }
    (g, a)
}

fn qaf(g_src: f64, a_src: f64, g_f: f64, a_f: f64) -> f64 {
    let rel = if g_src == 0.0 || g_f == 0.0 {
        0.0
    } else {
        g_src.min(g_f) / g_src.max(g_f)
    };
    let orient = 1.0 - (a_src - a_f).abs() / FRAC_PI_2;
    let qg = 0.9994 / (1.0 + (-15.0 * (rel - 0.5)).exp());
    let qa = 0.9879 / (1.0 + (-22.0 * (orient - 0.8)).exp());
    qg * qa
}

pub fn qabf(x: &Image, y: &Image, f: &Image) -> f64 {
    let (gx, ax) = edge_maps(x);
    let (gy, ay) = edge_maps(y);
    let (gf, af) = edge_maps(f);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..gf.len() {
        num += qaf(gx[i], ax[i], gf[i], af[i]) * gx[i] + qaf(gy[i], ay[i], gf[i], af[i]) * gy[i];
        den += gx[i] + gy[i];
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn gaussian_2d(n: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut k = vec![vec![0.0; n]; n];
    let mut s = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
            s += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    k
}

/// Weighted mean, variances and covariance of two patches under window `k`.
fn weighted_stats(a: &[Vec<f64>], b: &[Vec<f64>], k: &[Vec<f64>]) -> (f64, f64, f64, f64, f64) {
    let n = k.len();
    let (mut ma, mut mb) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            ma += k[i][j] * a[i][j];
            mb += k[i][j] * b[i][j];
        }
    }
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            va += k[i][j] * (a[i][j] - ma).powi(2);
            vb += k[i][j] * (b[i][j] - mb).powi(2);
            cov += k[i][j] * (a[i][j] - ma) * (b[i][j] - mb);
        }
    }
    (ma, mb, va, vb, cov)
}

fn patch(img: &[Vec<f64>], r: isize, c: isize, n: usize, reflect: bool) -> Vec<Vec<f64>> {
    let (h, w) = (img.len(), img[0].len());
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let (rr, cc) = (r + i as isize, c + j as isize);
                    if reflect {
                        img[mirror(rr, h)][mirror(cc, w)]
                    } else {
                        img[rr as usize][cc as usize]
                    }
                })
                .collect()
        })
        .collect()
}

fn ssim_and_cs(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    let (h, w) = (a.len(), a[0].len());
    let n = 11.min(h).min(w);
    let k = gaussian_2d(n, 1.5);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (mut ssim, mut cs, mut count) = (0.0, 0.0, 0.0);
    for r in 0..=h - n {
        for c in 0..=w - n {
            let pa = patch(a, r as isize, c as isize, n, false);
            let pb = patch(b, r as isize, c as isize, n, false);
            let (ma, mb, va, vb, cov) = weighted_stats(&pa, &pb, &k);
            let s_cs = (2.0 * cov + c2) / (va + vb + c2);
            cs += s_cs;
            ssim += s_cs * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            count += 1.0;
        }
    }
    (ssim / count, cs / count)
}

fn halve(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (a.len(), a[0].len());
    let at = |r: usize, c: usize| a[r.min(h - 1)][c.min(w - 1)];
    (0..h.div_ceil(2))
        .map(|r| {
            (0..w.div_ceil(2))
                .map(|c| {
                    (at(2 * r, 2 * c) + at(2 * r + 1, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c + 1))
                        / 4.0
                })
                .collect()
        })
        .collect()
}

fn ms_ssim_pair(a: &Image, f: &Image) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let min_dim = a.height().min(a.width());
    let mut levels = 1;
    for l in 2..=5 {
        if min_dim >= 11 * (1 << (l - 1)) {
            levels = l;
        }
    }
    let total: f64 = weights[..levels].iter().sum();
    let (mut pa, mut pf) = (pixels(a), pixels(f));
    let mut out = 1.0;
    for (l, &wt) in weights.iter().enumerate().take(levels) {
        let (ssim, cs) = ssim_and_cs(&pa, &pf);
        let v = if l == levels - 1 { ssim } else { cs };
        out *= v.max(0.0).powf(wt / total);
        pa = halve(&pa);
        pf = halve(&pf);
    }
    out
}

pub fn ms_ssim(x: &Image, y: &Image, f: &Image) -> f64 {
    0.5 * (ms_ssim_pair(x, f) + ms_ssim_pair(y, f))
}

fn blur(img: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half = (k.len() / 2) as isize;
    (0..img.len())
        .map(|r| {
            (0..img[0].len())
                .map(|c| {
                    let p = patch(img, r as isize - half, c as isize - half, k.len(), true);
                    let mut s = 0.0;
                    for i in 0..k.len() {
                        for j in 0..k.len() {
                            s += k[i][j] * p[i][j];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn vif_pair(reference: &Image, dist: &Image) -> f64 {
    let (mut r, mut d) = (pixels(reference), pixels(dist));
    let sn = 2.0;
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4 {
        let n = (1usize << (5 - scale)) + 1;
        let k = gaussian_2d(n, n as f64 / 5.0);
        if scale > 1 {
            let every_other = |m: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                m.into_iter()
                    .step_by(2)
                    .map(|row| row.into_iter().step_by(2).collect())
                    .collect()
            };
            r = every_other(blur(&r, &k));
            d = every_other(blur(&d, &k));
        }
        let half = (n / 2) as isize;
        for i in 0..r.len() {
            for j in 0..r[0].len() {
                let pr = patch(&r, i as isize - half, j as isize - half, n, true);
                let pd = patch(&d, i as isize - half, j as isize - half, n, true);
                let (_, _, s1, s2, s12) = weighted_stats(&pr, &pd, &k);
                let (mut s1, s2) = (s1.max(0.0), s2.max(0.0));
                let mut g = s12 / (s1 + 1e-10);
                let mut sv = s2 - g * s12;
                if s1 < 1e-10 {
                    g = 0.0;
                    sv = s2;
                    s1 = 0.0;
                }
                if s2 < 1e-10 {
                    g = 0.0;
                    sv = 0.0;
                }
                if g < 0.0 {
                    sv = s2;
                    g = 0.0;
                }
                sv = sv.max(1e-10);
                num += (1.0 + g * g * s1 / (sv + sn)).log10();
                den += (1.0 + s1 / sn).log10();
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn vif(x: &Image, y: &Image, f: &Image) -> f64 {
    0.5 * (vif_pair(x, f) + vif_pair(y, f))
}

/// Oracle value of `metric` on one triple.
pub fn metric(metric: Metric, x: &Image, y: &Image, f: &Image) -> f64 {
    match metric {
        Metric::Ei => ei(f),
        Metric::Ce => ce(x, y, f),
        Metric::Sf => sf(f),
        Metric::En => en(f),
        Metric::Qabf => qabf(x, y, f),
        Metric::MsSsim => ms_ssim(x, y, f),
        Metric::Sd => sd(f),
        Metric::Vif => vif(x, y, f),
        Metric::Scd => scd(x, y, f),
        Metric::Mi => mi(x, y, f),
    }
}
