//! Deep-to-shallow aggregation of the fused pyramid into the output image.

use rand::Rng;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusedPyramid;
use crate::nn::layers;
use crate::nn::{Graph, NetworkParams, Var};
use crate::tensor::Scalar;

/// Decoder geometry; always mirrors the encoder it is paired with. The
/// output activation is a sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub encoder: EncoderConfig,
}

impl From<EncoderConfig> for DecoderConfig {
    fn from(encoder: EncoderConfig) -> Self {
        DecoderConfig { encoder }
    }
}

pub fn init_decoder<T: Scalar, R: Rng + ?Sized>(
    params: &mut NetworkParams<T>,
    rng: &mut R,
    cfg: &DecoderConfig,
) -> Result<()> {
    let enc = &cfg.encoder;
    for k in (0..enc.levels() - 1).rev() {
        let in_ch = enc.channels(k + 1) + enc.channels(k);
        params.init_conv(rng, &format!("dec.s{k}"), enc.channels(k), in_ch, 3, 1.0)?;
    }
    params.init_conv(rng, "dec.out", 1, enc.channels(0), 3, 1.0)
}

/// `d_{n-1} = fused_{n-1}`; `d_k = act(conv(concat(up(d_{k+1}), fused_k)))`;
/// output `sigmoid(conv(d_0))` with one channel at full resolution.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    fused: &FusedPyramid,
    params: &NetworkParams<T>,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let enc = &cfg.encoder;
    let n = enc.levels();
    if fused.levels.len() != n {
        return Err(Error::shape(
            "decoder input",
            format!("expected {n} levels, got {}", fused.levels.len()),
        ));
    }
    let (_, h, w) = g.value(fused.levels[0]).chw()?;
    for (k, &v) in fused.levels.iter().enumerate() {
        let expected = [enc.channels(k), h >> k, w >> k];
        if g.shape(v) != expected || (h >> k) << k != h || (w >> k) << k != w {
            return Err(Error::shape(
                format!("decoder level {k}"),
                format!("expected {expected:?}, got {:?}", g.shape(v)),
            ));
        }
    }
    let mut d = fused.levels[n - 1];
    for k in (0..n - 1).rev() {
        let up = g.upsample2x(d)?;
        let cat = g.concat(&[up, fused.levels[k]])?;
        let conv = layers::conv3x3(g, params, &format!("dec.s{k}"), cat, enc.channels(k))?;
        d = g.leaky_relu(conv);
    }
    let out = layers::conv3x3(g, params, "dec.out", d, 1)?;
    Ok(g.sigmoid(out))
}
