//! Pixel-domain visual information fidelity over four scales.

use super::filter::{filter_same_reflect, gaussian_taps, subsample2, Plane};
use super::msssim::plane;
use crate::image_io::Image;

pub const SIGMA_N_SQ: f64 = 2.0;
const TINY: f64 = 1e-10;

/// Window size at scale `s` (1-based): 17, 9, 5, 3.
pub fn window_size(scale: usize) -> usize {
    (1 << (5 - scale)) + 1
}

/// Per-pixel contribution `(num, den)` from local statistics.
pub fn vif_terms(var_ref: f64, var_dist: f64, cov: f64) -> (f64, f64) {
    let mut s1 = var_ref.max(0.0);
    let s2 = var_dist.max(0.0);
    let mut g = cov / (s1 + TINY);
    let mut sv = s2 - g * cov;
    if s1 < TINY {
        g = 0.0;
        sv = s2;
        s1 = 0.0;
    }
    if s2 < TINY {
        g = 0.0;
        sv = 0.0;
    }
    if g < 0.0 {
        sv = s2;
        g = 0.0;
    }
    if sv <= TINY {
        sv = TINY;
    }
    (
        (1.0 + g * g * s1 / (sv + SIGMA_N_SQ)).log10(),
        (1.0 + s1 / SIGMA_N_SQ).log10(),
    )
}

/// Fidelity of `dist` to `reference`; zero when the reference carries no signal.
pub fn vif_pair(reference: &Plane, dist: &Plane) -> f64 {
    let (mut r, mut d) = (reference.clone(), dist.clone());
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4 {
        let n = window_size(scale);
        let taps = gaussian_taps(n, n as f64 / 5.0);
        if scale > 1 {
            r = subsample2(&filter_same_reflect(&r, &taps));
            d = subsample2(&filter_same_reflect(&d, &taps));
        }
        let mu_r = filter_same_reflect(&r, &taps);
        let mu_d = filter_same_reflect(&d, &taps);
        let e_rr = filter_same_reflect(&r.zip(&r, |a, b| a * b), &taps);
        let e_dd = filter_same_reflect(&d.zip(&d, |a, b| a * b), &taps);
        let e_rd = filter_same_reflect(&r.zip(&d, |a, b| a * b), &taps);
        for i in 0..mu_r.data.len() {
            let (mr, md) = (mu_r.data[i], mu_d.data[i]);
            let (a, b) = vif_terms(
                e_rr.data[i] - mr * mr,
                e_dd.data[i] - md * md,
                e_rd.data[i] - mr * md,
            );
            num += a;
            den += b;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn vif_components(ix: &Image, iy: &Image, if_: &Image) -> [f64; 2] {
    let f = plane(if_);
    [vif_pair(&plane(ix), &f), vif_pair(&plane(iy), &f)]
}

/// Mean of the per-source fidelities.
pub fn vif(ix: &Image, iy: &Image, if_: &Image) -> f64 {
    let [a, b] = vif_components(ix, iy, if_);
    (a + b) / 2.0
}
