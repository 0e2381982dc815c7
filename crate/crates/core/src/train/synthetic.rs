//! Procedural stand-in for registered infrared/visible pairs.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image_io::{Image, ImagePair, PairDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticMode {
    /// `x == y`.
    Identical,
    /// Shared scene geometry; X carries fine texture, Y warm blobs on a
    /// flat background with sensor noise.
    Modal,
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Grating { freq: f32, angle: f32, phase: f32 },
    Checker { period: f32 },
    Rings { freq: f32, cr: f32, cc: f32 },
    Blobs,
}

fn blob_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<(f32, f32, f32, f32)> {
    (0..rng.random_range(3..7))
        .map(|_| {
            (
                rng.random_range(0.0..size as f32),
                rng.random_range(0.0..size as f32),
                rng.random_range(size as f32 / 12.0..size as f32 / 4.0),
                rng.random_range(0.3..1.0),
            )
        })
        .collect()
}

fn blobs_at(blobs: &[(f32, f32, f32, f32)], r: f32, c: f32) -> f32 {
    blobs
        .iter()
        .map(|&(br, bc, s, a)| a * (-((r - br).powi(2) + (c - bc).powi(2)) / (2.0 * s * s)).exp())
        .sum::<f32>()
        .min(1.0)
}

fn pattern_at(p: Pattern, blobs: &[(f32, f32, f32, f32)], r: f32, c: f32) -> f32 {
    match p {
        Pattern::Grating { freq, angle, phase } => {
            0.5 + 0.4 * (2.0 * PI * freq * (r * angle.sin() + c * angle.cos()) + phase).sin()
        }
        Pattern::Checker { period } => {
            let v = ((r / period).floor() + (c / period).floor()) as i64;
            if v.rem_euclid(2) == 0 {
                0.2
            } else {
                0.8
            }
        }
        Pattern::Rings { freq, cr, cc } => {
            let d = ((r - cr).powi(2) + (c - cc).powi(2)).sqrt();
            0.5 + 0.4 * (2.0 * PI * freq * d).cos()
        }
        Pattern::Blobs => 0.15 + 0.8 * blobs_at(blobs, r, c),
    }
}

fn random_pattern(rng: &mut ChaCha8Rng, size: usize) -> Pattern {
    match rng.random_range(0..4) {
        0 => Pattern::Grating {
            freq: rng.random_range(0.04..0.15),
            angle: rng.random_range(0.0..PI),
            phase: rng.random_range(0.0..2.0 * PI),
        },
        1 => Pattern::Checker {
            period: rng.random_range(4.0..12.0),
        },
        2 => Pattern::Rings {
            freq: rng.random_range(0.04..0.12),
            cr: rng.random_range(0.0..size as f32),
            cc: rng.random_range(0.0..size as f32),
        },
        _ => Pattern::Blobs,
    }
}

/// One `size`×`size` pair drawn from `rng`.
pub fn synthetic_pair(rng: &mut ChaCha8Rng, size: usize, mode: SyntheticMode, id: &str) -> Result<ImagePair> {
    let pattern = random_pattern(rng, size);
    let blobs = blob_field(rng, size);
    let shade = rng.random_range(0.6..1.0f32);
    let x = Image::from_fn(size, size, |r, c| {
        let (rf, cf) = (r as f32, c as f32);
        let base = pattern_at(pattern, &blobs, rf, cf);
        let light = 1.0 - shade * 0.3 * (rf / size as f32);
        base * light
    });
    let y = match mode {
        SyntheticMode::Identical => x.clone(),
        SyntheticMode::Modal => {
            let noise: Vec<f32> = (0..size * size).map(|_| rng.random_range(-0.03..0.03)).collect();
            Image::from_fn(size, size, |r, c| {
                0.1 + 0.85 * blobs_at(&blobs, r as f32, c as f32) + noise[r * size + c]
            })
        }
    };
    ImagePair::new(x, y, id)
}

/// `n` pairs of side `size`, reproducible from `seed`.
pub fn synthetic_pairs(n: usize, size: usize, seed: u64, mode: SyntheticMode) -> Result<Vec<ImagePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| synthetic_pair(&mut rng, size, mode, &format!("syn{i:04}")))
        .collect()
}

pub fn synthetic_dataset(n: usize, size: usize, seed: u64, mode: SyntheticMode) -> Result<PairDataset> {
    PairDataset::new(synthetic_pairs(n, size, seed, mode)?, size)
}
