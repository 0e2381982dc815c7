//! Intensity statistics and gradient metrics on the 0–255 scale:
//! SD, SF, SCD, EI and the Xydeas–Petrović edge-preservation index.

use std::f64::consts::FRAC_PI_2;

use crate::image_io::Image;
use crate::util::reflect_index;

pub(crate) fn scaled(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64 * 255.0).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation of intensities.
pub fn standard_deviation(img: &Image) -> f64 {
    let v = scaled(img);
    let mu = mean(&v);
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64).sqrt()
}

/// `sqrt(RF² + CF²)` with row frequency from horizontal neighbour
/// differences and column frequency from vertical ones.
pub fn spatial_frequency(img: &Image) -> f64 {
    let v = scaled(img);
    let (h, w) = img.dims();
    let mut rf = 0.0;
    for r in 0..h {
        for c in 1..w {
            let d = v[r * w + c] - v[r * w + c - 1];
            rf += d * d;
        }
    }
    let mut cf = 0.0;
    for r in 1..h {
        for c in 0..w {
            let d = v[r * w + c] - v[(r - 1) * w + c];
            cf += d * d;
        }
    }
    let rf = if w > 1 { rf / (h * (w - 1)) as f64 } else { 0.0 };
    let cf = if h > 1 { cf / ((h - 1) * w) as f64 } else { 0.0 };
    (rf + cf).sqrt()
}

/// Pearson correlation; zero when either operand has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// `[r(f - y, x), r(f - x, y)]`.
pub fn scd_terms(ix: &Image, iy: &Image, if_: &Image) -> [f64; 2] {
    let (x, y, f) = (scaled(ix), scaled(iy), scaled(if_));
    let f_minus_y: Vec<f64> = f.iter().zip(&y).map(|(a, b)| a - b).collect();
    let f_minus_x: Vec<f64> = f.iter().zip(&x).map(|(a, b)| a - b).collect();
    [pearson(&f_minus_y, &x), pearson(&f_minus_x, &y)]
}

/// Sum of the correlations of differences.
pub fn scd(ix: &Image, iy: &Image, if_: &Image) -> f64 {
    let [a, b] = scd_terms(ix, iy, if_);
    a + b
}

/// Horizontal and vertical 3×3 Sobel responses with mirrored borders.
pub fn sobel(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let v = scaled(img);
    let (h, w) = img.dims();
    let px = |r: isize, c: isize| v[reflect_index(r, h) * w + reflect_index(c, w)];
    let mut gx = Vec::with_capacity(h * w);
    let mut gy = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            gx.push(
                (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1))
                    - (px(r - 1, c - 1) + 2.0 * px(r, c - 1) + px(r + 1, c - 1)),
            );
            gy.push(
                (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1))
                    - (px(r - 1, c - 1) + 2.0 * px(r - 1, c) + px(r - 1, c + 1)),
            );
        }
    }
    (gx, gy)
}

/// Mean Sobel gradient magnitude.
pub fn edge_intensity(img: &Image) -> f64 {
    let (gx, gy) = sobel(img);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).sum::<f64>() / gx.len() as f64
}

/// Sigmoid constants of the edge-preservation index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QabfConstants {
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
}

pub const QABF: QabfConstants = QabfConstants {
    gamma_g: 0.9994,
    kappa_g: -15.0,
    sigma_g: 0.5,
    gamma_a: 0.9879,
    kappa_a: -22.0,
    sigma_a: 0.8,
};

impl QabfConstants {
    /// Preservation score for relative strength `g` and orientation agreement `a`.
    pub fn preservation(&self, g: f64, a: f64) -> f64 {
        let qg = self.gamma_g / (1.0 + (self.kappa_g * (g - self.sigma_g)).exp());
        let qa = self.gamma_a / (1.0 + (self.kappa_a * (a - self.sigma_a)).exp());
        qg * qa
    }

    /// Score of a perfectly preserved edge (`g = a = 1`).
    pub fn ceiling(&self) -> f64 {
        self.preservation(1.0, 1.0)
    }
}

struct EdgeField {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn edge_field(img: &Image) -> EdgeField {
    let (gx, gy) = sobel(img);
    let strength = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let angle = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| if x == 0.0 { FRAC_PI_2 } else { (y / x).atan() })
        .collect();
    EdgeField { strength, angle }
}

fn preservation_map(src: &EdgeField, fused: &EdgeField, k: &QabfConstants) -> Vec<f64> {
    (0..src.strength.len())
        .map(|i| {
            let (gs, gf) = (src.strength[i], fused.strength[i]);
            let g = if gs == 0.0 || gf == 0.0 {
                0.0
            } else if gs > gf {
                gf / gs
            } else {
                gs / gf
            };
            let a = 1.0 - (src.angle[i] - fused.angle[i]).abs() / FRAC_PI_2;
            k.preservation(g, a)
        })
        .collect()
}

/// Edge-strength weighted preservation of source edges in the fused image,
/// in `[0, 1]`. Returns 0 when neither source has any edge.
pub fn qabf(ix: &Image, iy: &Image, if_: &Image) -> f64 {
    let (ea, eb, ef) = (edge_field(ix), edge_field(iy), edge_field(if_));
    let qa = preservation_map(&ea, &ef, &QABF);
    let qb = preservation_map(&eb, &ef, &QABF);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..qa.len() {
        num += qa[i] * ea.strength[i] + qb[i] * eb.strength[i];
        den += ea.strength[i] + eb.strength[i];
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}
