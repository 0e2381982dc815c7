//! Parameterised building blocks: named convolutions and residual blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::NetworkParams;
use crate::tensor::Scalar;

/// Convolution with weights `{prefix}.w` and bias `{prefix}.b`.
pub fn conv<T: Scalar>(
    g: &mut Graph<T>,
    params: &NetworkParams<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.w"))?;
    let b = g.param(params, &format!("{prefix}.b"))?;
    g.conv(x, w, Some(b))
}

/// 3×3 same-size convolution producing `out_channels` maps.
pub fn conv3x3<T: Scalar>(
    g: &mut Graph<T>,
    params: &NetworkParams<T>,
    prefix: &str,
    x: Var,
    out_channels: usize,
) -> Result<Var> {
    let name = format!("{prefix}.w");
    let shape = params
        .get(&name)
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
        .value
        .shape();
    if shape.len() != 4 || shape[0] != out_channels || shape[2..] != [3, 3] {
        return Err(Error::shape(
            name,
            format!("expected [{out_channels}, in, 3, 3], got {shape:?}"),
        ));
    }
    conv(g, params, prefix, x)
}

/// Residual block: `act(conv2(act(conv1(x))) + proj(x))` where `proj` is a
/// 1×1 convolution present exactly when the channel count changes.
pub fn res_block<T: Scalar>(
    g: &mut Graph<T>,
    params: &NetworkParams<T>,
    prefix: &str,
    x: Var,
    out_channels: usize,
) -> Result<Var> {
    let in_channels = g.shape(x)[0];
    let proj_name = format!("{prefix}.proj.w");
    let has_proj = params.contains(&proj_name);
    if in_channels != out_channels && !has_proj {
        return Err(Error::Config(format!(
            "res-block `{prefix}` maps {in_channels} -> {out_channels} channels but has no projection"
        )));
    }
    if in_channels == out_channels && has_proj {
        return Err(Error::Config(format!(
            "res-block `{prefix}` keeps {in_channels} channels but carries a projection"
        )));
    }
    let h = conv3x3(g, params, &format!("{prefix}.conv1"), x, out_channels)?;
    let h = g.leaky_relu(h);
    let h = conv3x3(g, params, &format!("{prefix}.conv2"), h, out_channels)?;
    let skip = if has_proj {
        conv(g, params, &format!("{prefix}.proj"), x)?
    } else {
        x
    };
    let sum = g.add(h, skip)?;
    Ok(g.leaky_relu(sum))
}

pub fn init_res_block<T: Scalar, R: Rng + ?Sized>(
    params: &mut NetworkParams<T>,
    rng: &mut R,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
) -> Result<()> {
    params.init_conv(rng, &format!("{prefix}.conv1"), out_channels, in_channels, 3, 1.0)?;
    // Second conv at half gain.
    params.init_conv(rng, &format!("{prefix}.conv2"), out_channels, out_channels, 3, 0.5)?;
    if in_channels != out_channels {
        params.init_conv(rng, &format!("{prefix}.proj"), out_channels, in_channels, 1, 1.0)?;
    }
    Ok(())
}
