//! Assembly of encoders, fusion module and decoder into one network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, DecoderConfig};
use crate::encoder::{self, Branch, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionRule};
use crate::image_io::Image;
use crate::nn::{Graph, NetworkParams, Var};
use crate::tensor::Scalar;

/// Everything that determines the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub encoder: EncoderConfig,
    pub fusion_rule: FusionRule,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoder: EncoderConfig::default(),
            fusion_rule: FusionRule::Mapping,
        }
    }
}

impl ArchConfig {
    pub fn new(depth: usize, base_channels: usize, fusion_rule: FusionRule) -> Result<Self> {
        Ok(ArchConfig {
            encoder: EncoderConfig::new(depth, base_channels)?,
            fusion_rule,
        })
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig::from(self.encoder)
    }
}

#[derive(Clone, Debug)]
pub struct FusionNet<T: Scalar = f32> {
    pub arch: ArchConfig,
    pub params: NetworkParams<T>,
}

/// Freshly initialised parameters for `arch`, drawn from `seed`.
pub fn init_params<T: Scalar>(arch: &ArchConfig, seed: u64) -> Result<NetworkParams<T>> {
    arch.encoder.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::new();
    encoder::init_encoder(&mut params, &mut rng, Branch::X, &arch.encoder)?;
    encoder::init_encoder(&mut params, &mut rng, Branch::Y, &arch.encoder)?;
    fusion::init_fusion(&mut params, &mut rng, arch.fusion_rule, &arch.encoder)?;
    decoder::init_decoder(&mut params, &mut rng, &arch.decoder())?;
    Ok(params)
}

/// Full forward pass on `[1, H, W]` inputs; returns the `[1, H, W]` fused image.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &NetworkParams<T>,
    arch: &ArchConfig,
    x: Var,
    y: Var,
) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::shape(
            "network inputs",
            format!("x {:?} vs y {:?}", g.shape(x), g.shape(y)),
        ));
    }
    let px = encoder::encode(g, x, params, Branch::X, &arch.encoder)?;
    let py = encoder::encode(g, y, params, Branch::Y, &arch.encoder)?;
    let fused = fusion::fuse_pyramids(g, &px, &py, params, arch.fusion_rule)?;
    decoder::decode(g, &fused, params, &arch.decoder())
}

impl<T: Scalar> FusionNet<T> {
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        Ok(FusionNet {
            arch,
            params: init_params(&arch, seed)?,
        })
    }

    /// Wraps existing parameters after checking names and shapes against `arch`.
    pub fn from_params(arch: ArchConfig, params: NetworkParams<T>) -> Result<Self> {
        let expected = init_params::<T>(&arch, 0)?;
        let mut problems = Vec::new();
        if expected.len() != params.len() {
            problems.push(format!(
                "parameter count {} (architecture needs {})",
                params.len(),
                expected.len()
            ));
        }
        for e in expected.iter() {
            match params.get(&e.name) {
                None => problems.push(format!("missing `{}`", e.name)),
                Some(p) if p.value.shape() != e.value.shape() => problems.push(format!(
                    "`{}` shape {:?} (needs {:?})",
                    e.name,
                    p.value.shape(),
                    e.value.shape()
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Incompatible { fields: problems });
        }
        Ok(FusionNet { arch, params })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
        forward(g, &self.params, &self.arch, x, y)
    }

    /// Fuses two equally sized images of any size: inputs are
    /// reflect-padded to the required multiple and the output is cropped back.
    pub fn fuse(&self, ix: &Image, iy: &Image) -> Result<Image> {
        if ix.dims() != iy.dims() {
            return Err(Error::shape(
                "fuse inputs",
                format!("x is {:?}, y is {:?}", ix.dims(), iy.dims()),
            ));
        }
        let m = self.arch.encoder.size_multiple();
        let (px, (h, w)) = encoder::pad_to_multiple(ix, m);
        let (py, _) = encoder::pad_to_multiple(iy, m);
        let mut g = Graph::new();
        let x = g.input(px.to_tensor());
        let y = g.input(py.to_tensor());
        let out = self.forward(&mut g, x, y)?;
        Image::from_tensor(g.value(out))?.crop(0, 0, h, w)
    }
}
