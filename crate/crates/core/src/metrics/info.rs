//! Histogram-based metrics: entropy, cross entropy, mutual information.

use crate::image_io::Image;

/// Floor applied to the reference probability in cross entropy.
pub const CE_EPSILON: f64 = 1e-12;

/// 256-bin intensity histogram; bin of `v` is `floor(v * 255.999)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram256 {
    pub counts: [u64; 256],
    pub total: u64,
}

pub fn bin_of(v: f32) -> usize {
    ((v as f64 * 255.999).floor() as usize).min(255)
}

impl Histogram256 {
    pub fn of(img: &Image) -> Self {
        let mut counts = [0u64; 256];
        for &v in img.data() {
            counts[bin_of(v)] += 1;
        }
        Histogram256 {
            counts,
            total: img.data().len() as u64,
        }
    }

    pub fn probabilities(&self) -> [f64; 256] {
        let mut p = [0.0; 256];
        for (pi, &c) in p.iter_mut().zip(&self.counts) {
            *pi = c as f64 / self.total as f64;
        }
        p
    }
}

fn entropy_of(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum::<f64>() + 0.0
}

/// Shannon entropy of the intensity histogram, in bits.
pub fn entropy(img: &Image) -> f64 {
    entropy_of(&Histogram256::of(img).probabilities())
}

/// `Σ p_a log2(p_a / max(p_b, ε))` over bins where `p_a > 0`.
pub fn kl_divergence(a: &Image, b: &Image) -> f64 {
    let pa = Histogram256::of(a).probabilities();
    let pb = Histogram256::of(b).probabilities();
    pa.iter()
        .zip(&pb)
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &y)| x * (x / y.max(CE_EPSILON)).log2())
        .sum()
}

/// Per-source divergences `[D(x‖f), D(y‖f)]`.
pub fn cross_entropy_terms(ix: &Image, iy: &Image, if_: &Image) -> [f64; 2] {
    [kl_divergence(ix, if_), kl_divergence(iy, if_)]
}

pub fn cross_entropy(ix: &Image, iy: &Image, if_: &Image) -> f64 {
    let [a, b] = cross_entropy_terms(ix, iy, if_);
    (a + b) / 2.0
}

/// Mutual information in bits from the 256×256 joint histogram.
pub fn mutual_information_pair(a: &Image, b: &Image) -> f64 {
    let mut joint = vec![0u64; 256 * 256];
    for (&u, &v) in a.data().iter().zip(b.data()) {
        joint[bin_of(u) * 256 + bin_of(v)] += 1;
    }
    let n = a.data().len() as f64;
    let mut pa = [0.0; 256];
    let mut pb = [0.0; 256];
    for i in 0..256 {
        for j in 0..256 {
            let p = joint[i * 256 + j] as f64 / n;
            pa[i] += p;
            pb[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..256 {
        for j in 0..256 {
            let c = joint[i * 256 + j];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * (p / (pa[i] * pb[j])).log2();
            }
        }
    }
    mi.max(0.0)
}

pub fn mutual_information_terms(ix: &Image, iy: &Image, if_: &Image) -> [f64; 2] {
    [mutual_information_pair(ix, if_), mutual_information_pair(iy, if_)]
}

/// `MI(x; f) + MI(y; f)`.
pub fn mutual_information(ix: &Image, iy: &Image, if_: &Image) -> f64 {
    let [a, b] = mutual_information_terms(ix, iy, if_);
    a + b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_and_half() -> Image {
        Image::from_fn(8, 8, |r, _| if r < 4 { 0.0 } else { 1.0 })
    }

    fn all_levels() -> Image {
        Image::from_fn(16, 16, |r, c| (r * 16 + c) as f32 / 255.0)
    }

    #[test]
    fn bins_cover_each_byte_value_once() {
        for k in 0..=255u32 {
            assert_eq!(bin_of(k as f32 / 255.0), k as usize);
        }
    }

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(entropy(&Image::filled(8, 8, 0.3).unwrap()), 0.0);
        assert!((entropy(&half_and_half()) - 1.0).abs() < 1e-12);
        assert!((entropy(&all_levels()) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_identical_images_is_zero() {
        let img = all_levels();
        assert_eq!(cross_entropy(&img, &img, &img), 0.0);
        assert!(kl_divergence(&half_and_half(), &Image::filled(8, 8, 0.5).unwrap()) > 0.0);
    }

    #[test]
    fn self_information_equals_entropy() {
        let img = all_levels();
        let mi = mutual_information(&img, &img, &img);
        assert!((mi - 2.0 * entropy(&img)).abs() < 1e-9);
    }
}
