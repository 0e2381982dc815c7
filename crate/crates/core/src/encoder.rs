//! Weight-independent encoder branches producing multi-scale feature pyramids.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::nn::layers;
use crate::nn::{Graph, NetworkParams, Var};
use crate::tensor::Scalar;
use crate::util::reflect_index;

/// Which source an encoder branch serves. Branches never share weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    X,
    Y,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::X => "enc_x",
            Branch::Y => "enc_y",
        }
    }
}

/// Depth counts the stem convolution plus one res-block per extra scale:
/// depth 3 is a stem and two res-blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 3,
            base_channels: 16,
        }
    }
}

impl EncoderConfig {
    pub fn new(depth: usize, base_channels: usize) -> Result<Self> {
        let cfg = EncoderConfig {
            depth,
            base_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=5).contains(&self.depth) {
            return Err(Error::Config(format!(
                "depth must be 3, 4 or 5, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }

    /// Channel width at pyramid level `scale` (0 = full resolution).
    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn levels(&self) -> usize {
        self.depth
    }
}

/// Per-scale features, finest first: level `k` is `[base*2^k, H/2^k, W/2^k]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> Var {
        *self.levels.last().expect("pyramids are never empty")
    }
}

pub fn init_encoder<T: Scalar, R: Rng + ?Sized>(
    params: &mut NetworkParams<T>,
    rng: &mut R,
    branch: Branch,
    cfg: &EncoderConfig,
) -> Result<()> {
    let p = branch.prefix();
    params.init_conv(rng, &format!("{p}.stem"), cfg.channels(0), 1, 3, 1.0)?;
    for k in 1..cfg.levels() {
        layers::init_res_block(
            params,
            rng,
            &format!("{p}.block{k}"),
            cfg.channels(k - 1),
            cfg.channels(k),
        )?;
    }
    Ok(())
}

/// Runs one branch: `s0 = act(stem(img))`, then
/// `s_k = res_block(downsample(s_{k-1}))` for each deeper level.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    img: Var,
    params: &NetworkParams<T>,
    branch: Branch,
    cfg: &EncoderConfig,
) -> Result<FeaturePyramid> {
    let shape = g.shape(img).to_vec();
    let &[1, h, w] = &shape[..] else {
        return Err(Error::shape(
            "encoder input",
            format!("expected [1, H, W], got {shape:?}"),
        ));
    };
    let m = cfg.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(
            "encoder input",
            format!("{h}x{w} is not divisible by {m}; apply pad_to_multiple first"),
        ));
    }
    let p = branch.prefix();
    let stem = layers::conv3x3(g, params, &format!("{p}.stem"), img, cfg.channels(0))?;
    let mut levels = vec![g.leaky_relu(stem)];
    for k in 1..cfg.levels() {
        let down = g.downsample2x(levels[k - 1])?;
        levels.push(layers::res_block(
            g,
            params,
            &format!("{p}.block{k}"),
            down,
            cfg.channels(k),
        )?);
    }
    Ok(FeaturePyramid { levels })
}

/// Reflect-pads on the bottom and right up to the next multiple. Returns
/// the padded image and the original `(height, width)`.
pub fn pad_to_multiple(img: &Image, multiple: usize) -> (Image, (usize, usize)) {
    let (h, w) = img.dims();
    let multiple = multiple.max(1);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return (img.clone(), (h, w));
    }
    let padded = Image::from_fn(ph, pw, |r, c| {
        img.get(reflect_index(r as isize, h), reflect_index(c as isize, w))
    });
    (padded, (h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_for(cfg: &EncoderConfig, seed: u64) -> NetworkParams<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetworkParams::new();
        init_encoder(&mut p, &mut rng, Branch::X, cfg).unwrap();
        init_encoder(&mut p, &mut rng, Branch::Y, cfg).unwrap();
        p
    }

    #[test]
    fn pyramid_shapes_follow_channel_plan() {
        let cfg = EncoderConfig::default();
        let p = params_for(&cfg, 0);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 256, 256]));
        let pyr = encode(&mut g, x, &p, Branch::X, &cfg).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(shapes, [vec![16, 256, 256], vec![32, 128, 128], vec![64, 64, 64]]);
    }

    #[test]
    fn deeper_configs_add_levels() {
        let cfg = EncoderConfig::new(5, 4).unwrap();
        let p = params_for(&cfg, 0);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 32, 32]));
        let pyr = encode(&mut g, x, &p, Branch::Y, &cfg).unwrap();
        let last = g.shape(pyr.deepest()).to_vec();
        assert_eq!(last, [64, 2, 2]);
        assert!(EncoderConfig::new(6, 16).is_err());
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let cfg = EncoderConfig::default();
        let p = params_for(&cfg, 1);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 16, 16]));
        let pyr = encode(&mut g, x, &p, Branch::X, &cfg).unwrap();
        for v in pyr.levels {
            assert!(g.value(v).data().iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn branches_do_not_share_weights() {
        let cfg = EncoderConfig::default();
        let p = params_for(&cfg, 2);
        let xs: Vec<_> = p.names().filter(|n| n.starts_with("enc_x.")).collect();
        let ys: Vec<_> = p.names().filter(|n| n.starts_with("enc_y.")).collect();
        assert_eq!(xs.len(), ys.len());
        assert!(xs.iter().all(|n| !ys.contains(n)));

        let img = Image::from_fn(16, 16, |r, c| ((r * 3 + c * 5) % 16) as f32 / 15.0);
        let mut g = Graph::new();
        let x = g.input(img.to_tensor());
        let fx = encode(&mut g, x, &p, Branch::X, &cfg).unwrap();
        let fy = encode(&mut g, x, &p, Branch::Y, &cfg).unwrap();
        for (a, b) in fx.levels.iter().zip(&fy.levels) {
            // Independent random weights give features that differ almost everywhere.
            let differ = g
                .value(*a)
                .data()
                .iter()
                .zip(g.value(*b).data())
                .filter(|(u, v)| u != v)
                .count();
            assert!(differ as f64 > 0.9 * g.value(*a).len() as f64);
        }
    }

    #[test]
    fn indivisible_input_points_to_padding() {
        let cfg = EncoderConfig::default();
        let p = params_for(&cfg, 0);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 18, 17]));
        let err = encode(&mut g, x, &p, Branch::X, &cfg).unwrap_err().to_string();
        assert!(err.contains("pad_to_multiple"), "{err}");
    }

    #[test]
    fn padding_cases() {
        let img = Image::from_fn(256, 256, |r, c| ((r + c) % 256) as f32 / 255.0);
        let (same, dims) = pad_to_multiple(&img, 4);
        assert_eq!((same, dims), (img, (256, 256)));

        let odd = Image::from_fn(255, 255, |r, c| ((r * 7 + c) % 256) as f32 / 255.0);
        let (padded, dims) = pad_to_multiple(&odd, 4);
        assert_eq!(padded.dims(), (256, 256));
        assert_eq!(padded.get(255, 10), odd.get(253, 10));
        assert_eq!(padded.crop(0, 0, dims.0, dims.1).unwrap(), odd);
    }
}
