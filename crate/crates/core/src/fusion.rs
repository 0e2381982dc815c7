//! Cross-modal feature mapping and the per-scale fusion rules.
//!
//! At the deepest scale the two modalities are correlated position by
//! position: with `Q` and `K` the `(h*w) x C` flattenings of `f_x` and
//! `f_y`,
//!
//! ```text
//! P     = softmax_rows(Q Kᵀ / sqrt(C))
//! map_x = P Q,   map_y = P K
//! ```
//!
//! Shallower scales receive the upsampled maps of every deeper scale,
//! concatenated and projected by a learned 3×3 convolution (one per
//! modality). Every scale is then fused as `map_x ⊙ f_x + map_y ⊙ f_y`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::layers;
use crate::nn::{Graph, NetworkParams, Var};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionRule {
    /// `f_x + f_y` per scale.
    Add,
    /// Channel concatenation followed by a learned 1×1 convolution.
    Concat,
    /// Attention-map weighting.
    Mapping,
}

impl FusionRule {
    pub const ALL: [FusionRule; 3] = [FusionRule::Add, FusionRule::Concat, FusionRule::Mapping];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionRule::Add => "add",
            FusionRule::Concat => "concat",
            FusionRule::Mapping => "mapping",
        }
    }
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Ok(FusionRule::Add),
            "concat" | "cascade" => Ok(FusionRule::Concat),
            "mapping" => Ok(FusionRule::Mapping),
            other => Err(Error::Config(format!(
                "unknown fusion rule `{other}` (expected add, concat or mapping)"
            ))),
        }
    }
}

/// Attention weights for one scale, shaped like that scale's features.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    pub map_x: Var,
    pub map_y: Var,
}

/// One fused tensor per encoder scale, finest first.
#[derive(Clone, Debug)]
pub struct FusedPyramid {
    pub levels: Vec<Var>,
}

fn flatten_positions<T: Scalar>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let (c, h, w) = g.value(f).chw()?;
    let flat = g.reshape(f, &[c, h * w])?;
    g.transpose(flat)
}

fn unflatten_positions<T: Scalar>(g: &mut Graph<T>, m: Var, c: usize, h: usize, w: usize) -> Result<Var> {
    let t = g.transpose(m)?;
    g.reshape(t, &[c, h, w])
}

/// Parameter-free attention maps from the deepest features.
pub fn deep_maps<T: Scalar>(g: &mut Graph<T>, f_x: Var, f_y: Var) -> Result<AttentionMaps> {
    if g.shape(f_x) != g.shape(f_y) {
        return Err(Error::shape(
            "deep_maps",
            format!("f_x {:?} vs f_y {:?}", g.shape(f_x), g.shape(f_y)),
        ));
    }
    let (c, h, w) = g.value(f_x).chw()?;
    let q = flatten_positions(g, f_x)?;
    let k_t = g.reshape(f_y, &[c, h * w])?;
    let k = g.transpose(k_t)?;
    let corr = g.matmul(q, k_t)?;
    let corr = g.scale(corr, 1.0 / (c as f64).sqrt());
    let p = g.softmax_rows(corr)?;
    let mx = g.matmul(p, q)?;
    let my = g.matmul(p, k)?;
    Ok(AttentionMaps {
        map_x: unflatten_positions(g, mx, c, h, w)?,
        map_y: unflatten_positions(g, my, c, h, w)?,
    })
}

fn map_param(modality: char, scale: usize) -> String {
    format!("fuse.map_{modality}.s{scale}")
}

/// Dense shallow maps for `scale`. `deeper` holds the maps of scales
/// `scale+1 ..= deepest` in that order; each is upsampled to this scale,
/// all are concatenated and projected to `scale_channels`.
pub fn shallow_maps<T: Scalar>(
    g: &mut Graph<T>,
    deeper: &[AttentionMaps],
    params: &NetworkParams<T>,
    scale: usize,
    scale_channels: usize,
) -> Result<AttentionMaps> {
    if deeper.is_empty() {
        return Err(Error::shape("shallow_maps", "needs at least one deeper map"));
    }
    let mut ups_x = Vec::with_capacity(deeper.len());
    let mut ups_y = Vec::with_capacity(deeper.len());
    for (i, m) in deeper.iter().enumerate() {
        let (mut ux, mut uy) = (m.map_x, m.map_y);
        for _ in 0..=i {
            ux = g.upsample2x(ux)?;
            uy = g.upsample2x(uy)?;
        }
        ups_x.push(ux);
        ups_y.push(uy);
    }
    let cat_x = g.concat(&ups_x)?;
    let cat_y = g.concat(&ups_y)?;
    for (cat, modality) in [(cat_x, 'x'), (cat_y, 'y')] {
        let name = format!("{}.w", map_param(modality, scale));
        let expected = params.get(&name).map(|p| p.value.shape()[1]);
        if expected.is_some_and(|e| e != g.shape(cat)[0]) {
            return Err(Error::shape(
                name,
                format!(
                    "expects {} input channels, dense maps provide {}",
                    expected.unwrap_or(0),
                    g.shape(cat)[0]
                ),
            ));
        }
    }
    Ok(AttentionMaps {
        map_x: layers::conv3x3(g, params, &map_param('x', scale), cat_x, scale_channels)?,
        map_y: layers::conv3x3(g, params, &map_param('y', scale), cat_y, scale_channels)?,
    })
}

/// `map_x ⊙ f_x + map_y ⊙ f_y`.
pub fn fuse_scale<T: Scalar>(
    g: &mut Graph<T>,
    f_x: Var,
    f_y: Var,
    maps: &AttentionMaps,
) -> Result<Var> {
    let shape = g.shape(f_x).to_vec();
    for (what, v) in [("f_y", f_y), ("map_x", maps.map_x), ("map_y", maps.map_y)] {
        if g.shape(v) != shape {
            return Err(Error::shape(
                format!("fuse_scale {what}"),
                format!("{:?} vs f_x {shape:?}", g.shape(v)),
            ));
        }
    }
    let a = g.mul(maps.map_x, f_x)?;
    let b = g.mul(maps.map_y, f_y)?;
    g.add(a, b)
}

pub fn init_fusion<T: Scalar, R: Rng + ?Sized>(
    params: &mut NetworkParams<T>,
    rng: &mut R,
    rule: FusionRule,
    cfg: &EncoderConfig,
) -> Result<()> {
    let levels = cfg.levels();
    match rule {
        FusionRule::Add => {}
        FusionRule::Concat => {
            for k in 0..levels {
                let c = cfg.channels(k);
                params.init_conv(rng, &format!("fuse.concat.s{k}"), c, 2 * c, 1, 1.0)?;
            }
        }
        FusionRule::Mapping => {
            for k in (0..levels - 1).rev() {
                let dense_in: usize = (k + 1..levels).map(|j| cfg.channels(j)).sum();
                for modality in ['x', 'y'] {
                    params.init_conv(rng, &map_param(modality, k), cfg.channels(k), dense_in, 3, 1.0)?;
                }
            }
        }
    }
    Ok(())
}

pub fn fuse_pyramids<T: Scalar>(
    g: &mut Graph<T>,
    px: &FeaturePyramid,
    py: &FeaturePyramid,
    params: &NetworkParams<T>,
    rule: FusionRule,
) -> Result<FusedPyramid> {
    if px.levels.len() != py.levels.len() {
        return Err(Error::shape(
            "fuse_pyramids",
            format!("{} vs {} levels", px.levels.len(), py.levels.len()),
        ));
    }
    for (k, (&a, &b)) in px.levels.iter().zip(&py.levels).enumerate() {
        if g.shape(a) != g.shape(b) {
            return Err(Error::shape(
                format!("fuse_pyramids level {k}"),
                format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
            ));
        }
    }
    let levels = match rule {
        FusionRule::Add => px
            .levels
            .iter()
            .zip(&py.levels)
            .map(|(&a, &b)| g.add(a, b))
            .collect::<Result<Vec<_>>>()?,
        FusionRule::Concat => {
            let mut out = Vec::with_capacity(px.levels.len());
            for (k, (&a, &b)) in px.levels.iter().zip(&py.levels).enumerate() {
                let cat = g.concat(&[a, b])?;
                out.push(layers::conv(g, params, &format!("fuse.concat.s{k}"), cat)?);
            }
            out
        }
        FusionRule::Mapping => {
            let n = px.levels.len();
            // maps[i] holds scale n-1-i (deepest first while building)
            let mut maps = vec![deep_maps(g, px.deepest(), py.deepest())?];
            for k in (0..n - 1).rev() {
                let deeper: Vec<AttentionMaps> = maps.iter().rev().copied().collect();
                let c = g.shape(px.levels[k])[0];
                maps.push(shallow_maps(g, &deeper, params, k, c)?);
            }
            maps.reverse();
            let mut out = Vec::with_capacity(n);
            for k in 0..n {
                out.push(fuse_scale(g, px.levels[k], py.levels[k], &maps[k])?);
            }
            out
        }
    };
    Ok(FusedPyramid { levels })
}
