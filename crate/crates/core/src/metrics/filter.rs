//! Separable Gaussian filtering helpers shared by MS-SSIM and VIF.

use crate::util::reflect_index;

/// A single-channel `f64` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w);
        Plane { h, w, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane::new(
            self.h,
            self.w,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane::new(self.h, self.w, self.data.iter().map(|&a| f(a)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Correlation over positions where the window fits entirely.
pub fn filter_valid(p: &Plane, taps: &[f64]) -> Plane {
    let k = taps.len();
    if p.h < k || p.w < k {
        return Plane::new(0, 0, Vec::new());
    }
    let (oh, ow) = (p.h - k + 1, p.w - k + 1);
    let mut rows = vec![0.0; p.h * ow];
    for r in 0..p.h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, &tv) in taps.iter().enumerate() {
                acc += tv * p.data[r * p.w + c + t];
            }
            rows[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, &tv) in taps.iter().enumerate() {
                acc += tv * rows[(r + t) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    Plane::new(oh, ow, out)
}

/// Same-size correlation with mirrored borders.
pub fn filter_same_reflect(p: &Plane, taps: &[f64]) -> Plane {
    let k = taps.len() as isize;
    let half = k / 2;
    let mut rows = vec![0.0; p.h * p.w];
    for r in 0..p.h {
        for c in 0..p.w {
            let mut acc = 0.0;
            for (t, &tv) in taps.iter().enumerate() {
                let cc = reflect_index(c as isize + t as isize - half, p.w);
                acc += tv * p.data[r * p.w + cc];
            }
            rows[r * p.w + c] = acc;
        }
    }
    let mut out = vec![0.0; p.h * p.w];
    for r in 0..p.h {
        for c in 0..p.w {
            let mut acc = 0.0;
            for (t, &tv) in taps.iter().enumerate() {
                let rr = reflect_index(r as isize + t as isize - half, p.h);
                acc += tv * rows[rr * p.w + c];
            }
            out[r * p.w + c] = acc;
        }
    }
    Plane::new(p.h, p.w, out)
}

/// Keeps every second row and column starting at the first.
pub fn subsample2(p: &Plane) -> Plane {
    let (oh, ow) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for r in (0..p.h).step_by(2) {
        for c in (0..p.w).step_by(2) {
            out.push(p.at(r, c));
        }
    }
    Plane::new(oh, ow, out)
}

/// 2×2 block mean with edge replication for odd sizes; output `ceil(n/2)`.
pub fn box_downsample2(p: &Plane) -> Plane {
    let (oh, ow) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let (r0, r1) = (2 * r, (2 * r + 1).min(p.h - 1));
        for c in 0..ow {
            let (c0, c1) = (2 * c, (2 * c + 1).min(p.w - 1));
            out.push((p.at(r0, c0) + p.at(r0, c1) + p.at(r1, c0) + p.at(r1, c1)) / 4.0);
        }
    }
    Plane::new(oh, ow, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }

    #[test]
    fn constant_plane_is_preserved() {
        let p = Plane::new(6, 7, vec![3.0; 42]);
        let t = gaussian_taps(5, 1.0);
        for v in filter_same_reflect(&p, &t).data {
            assert!((v - 3.0).abs() < 1e-12);
        }
        let valid = filter_valid(&p, &t);
        assert_eq!((valid.h, valid.w), (2, 3));
        assert_eq!(box_downsample2(&p).data.len(), 3 * 4);
    }
}
