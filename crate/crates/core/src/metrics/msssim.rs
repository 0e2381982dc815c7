//! Multi-scale structural similarity on the 0–255 scale.

use super::filter::{box_downsample2, filter_valid, gaussian_taps, Plane};
use crate::image_io::Image;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

pub(crate) fn plane(img: &Image) -> Plane {
    let (h, w) = img.dims();
    Plane::new(h, w, img.data().iter().map(|&v| v as f64 * 255.0).collect())
}

/// Number of scales used for an image whose smaller side is `min_dim`:
/// the largest `l ≤ 5` with `min_dim ≥ 11·2^(l-1)`, at least 1.
pub fn scale_count(min_dim: usize) -> usize {
    (1..=5)
        .rev()
        .find(|&l| min_dim >= WINDOW << (l - 1))
        .unwrap_or(1)
}

/// Mean SSIM and mean contrast-structure term at one scale.
/// The window shrinks to the image when the image is smaller than 11.
pub fn ssim_cs(a: &Plane, b: &Plane) -> (f64, f64) {
    let size = WINDOW.min(a.h).min(a.w);
    let taps = gaussian_taps(size, SIGMA);
    let c1 = (K1 * 255.0).powi(2);
    let c2 = (K2 * 255.0).powi(2);
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let e_aa = filter_valid(&a.zip(a, |x, y| x * y), &taps);
    let e_bb = filter_valid(&b.zip(b, |x, y| x * y), &taps);
    let e_ab = filter_valid(&a.zip(b, |x, y| x * y), &taps);
    let n = mu_a.data.len();
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = e_aa.data[i] - ma * ma;
        let vb = e_bb.data[i] - mb * mb;
        let cov = e_ab.data[i] - ma * mb;
        let cs_i = (2.0 * cov + c2) / (va + vb + c2);
        cs += cs_i;
        ssim += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs_i;
    }
    (ssim / n as f64, cs / n as f64)
}

/// MS-SSIM between two planes; negative per-scale terms are clamped to zero
/// before exponentiation and the weights are renormalised over the scales used.
pub fn ms_ssim_pair(a: &Plane, b: &Plane) -> f64 {
    let levels = scale_count(a.h.min(a.w));
    let weights = &MS_SSIM_WEIGHTS[..levels];
    let total: f64 = weights.iter().sum();
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut value = 1.0;
    for (l, &w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_cs(&a, &b);
        let term = if l + 1 == levels { ssim } else { cs };
        value *= term.max(0.0).powf(w / total);
        if l + 1 < levels {
            a = box_downsample2(&a);
            b = box_downsample2(&b);
        }
    }
    value
}

pub fn ms_ssim_terms(ix: &Image, iy: &Image, if_: &Image) -> [f64; 2] {
    let f = plane(if_);
    [ms_ssim_pair(&plane(ix), &f), ms_ssim_pair(&plane(iy), &f)]
}

/// Mean of the two source comparisons.
pub fn ms_ssim(ix: &Image, iy: &Image, if_: &Image) -> f64 {
    let [a, b] = ms_ssim_terms(ix, iy, if_);
    (a + b) / 2.0
}
