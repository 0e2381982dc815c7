//! Gradient-check suite and oracle self-test behind the `gradcheck` and
//! `selftest` commands.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, Branch, EncoderConfig};
use crate::error::Result;
use crate::fusion::{self, AttentionMaps, FusionRule};
use crate::image_io::Image;
use crate::loss::{gated_ssim_loss, loss_node, LossGate, SsimParams};
use crate::metrics::Metric;
use crate::network::{forward, init_params, ArchConfig};
use crate::nn::layers;
use crate::nn::{grad_check, GradCheckConfig, GradCheckReport, Graph, NetworkParams, Var};
use crate::reference;
use crate::tensor::Tensor;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("length matches shape")
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _| rng.random::<f32>())
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output entry matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(random_tensor(g.shape(y), seed));
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

fn conv_params(specs: &[(&str, usize, usize, usize)], seed: u64) -> Result<NetworkParams<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetworkParams::new();
    for &(name, out, inp, k) in specs {
        p.init_conv(&mut rng, name, out, inp, k, 1.0)?;
    }
    for e in p.iter_mut().filter(|e| e.name.ends_with(".b")) {
        e.value = random_tensor(e.value.shape(), seed + 1).map(|v| 0.1 * v);
    }
    Ok(p)
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, &NetworkParams<f64>) -> Result<Var>>;

fn layer_cases(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let x = random_tensor(&[3, 8, 8], 1);
    let mut out = Vec::new();
    let mut run = |label: &str, p: NetworkParams<f64>, f: LossFn| -> Result<()> {
        out.push(grad_check(label, f, &p, cfg)?);
        Ok(())
    };

    let xi = x.clone();
    run(
        "conv3x3",
        conv_params(&[("c", 4, 3, 3)], 10)?,
        Box::new(move |g, p| {
            let i = g.input(xi.clone());
            let y = layers::conv3x3(g, p, "c", i, 4)?;
            probe(g, y, 11)
        }),
    )?;

    let xi = x.clone();
    run(
        "conv1x1+leaky_relu",
        conv_params(&[("c", 5, 3, 1)], 12)?,
        Box::new(move |g, p| {
            let i = g.input(xi.clone());
            let y = layers::conv(g, p, "c", i)?;
            let a = g.leaky_relu(y);
            probe(g, a, 13)
        }),
    )?;

    let xi = x.clone();
    run(
        "sigmoid",
        conv_params(&[("c", 1, 3, 3)], 14)?,
        Box::new(move |g, p| {
            let i = g.input(xi.clone());
            let y = layers::conv(g, p, "c", i)?;
            let s = g.sigmoid(y);
            probe(g, s, 15)
        }),
    )?;

    let xi = x.clone();
    run(
        "downsample+upsample+concat",
        conv_params(&[("a", 2, 3, 3), ("b", 2, 4, 3)], 16)?,
        Box::new(move |g, p| {
            let i = g.input(xi.clone());
            let a = layers::conv(g, p, "a", i)?;
            let d = g.downsample2x(a)?;
            let u = g.upsample2x(d)?;
            let c = g.concat(&[u, a])?;
            let y = layers::conv(g, p, "b", c)?;
            probe(g, y, 17)
        }),
    )?;

    let xi = x.clone();
    let mut rb = NetworkParams::new();
    layers::init_res_block(&mut rb, &mut ChaCha8Rng::seed_from_u64(18), "rb", 3, 6)?;
    run(
        "res_block",
        rb,
        Box::new(move |g, p| {
            let i = g.input(xi.clone());
            let y = layers::res_block(g, p, "rb", i, 6)?;
            probe(g, y, 19)
        }),
    )?;

    let xi = x.clone();
    run(
        "mapping (matmul+softmax+transpose)",
        conv_params(&[("fx", 4, 3, 3), ("fy", 4, 3, 3)], 20)?,
        Box::new(move |g, p| {
            let i = g.input(xi.clone());
            let fx = layers::conv(g, p, "fx", i)?;
            let fy = layers::conv(g, p, "fy", i)?;
            let m = fusion::deep_maps(g, fx, fy)?;
            let fused = fusion::fuse_scale(g, fx, fy, &m)?;
            probe(g, fused, 21)
        }),
    )?;

    let xi = x.clone();
    run(
        "dense shallow maps",
        conv_params(
            &[
                ("d1", 4, 3, 3),
                ("d2", 8, 3, 3),
                ("fuse.map_x.s0", 2, 12, 3),
                ("fuse.map_y.s0", 2, 12, 3),
            ],
            22,
        )?,
        Box::new(move |g, p| {
            let i = g.input(xi.clone());
            let half = g.downsample2x(i)?;
            let quarter = g.downsample2x(half)?;
            let m1 = layers::conv(g, p, "d1", half)?;
            let m2 = layers::conv(g, p, "d2", quarter)?;
            let deeper = [
                AttentionMaps { map_x: m1, map_y: m1 },
                AttentionMaps { map_x: m2, map_y: m2 },
            ];
            let maps = fusion::shallow_maps(g, &deeper, p, 0, 2)?;
            let s = g.add(maps.map_x, maps.map_y)?;
            probe(g, s, 23)
        }),
    )?;

    let enc = EncoderConfig::new(3, 2)?;
    let mut ep = NetworkParams::new();
    encoder::init_encoder(&mut ep, &mut ChaCha8Rng::seed_from_u64(24), Branch::X, &enc)?;
    let img = random_tensor(&[1, 8, 8], 25).map(|v| 0.5 + 0.5 * v);
    run(
        "encoder",
        ep,
        Box::new(move |g, p| {
            let i = g.input(img.clone());
            let pyr = encoder::encode(g, i, p, Branch::X, &enc)?;
            let mut total = probe(g, pyr.levels[0], 26)?;
            for (k, &l) in pyr.levels.iter().enumerate().skip(1) {
                let t = probe(g, l, 26 + k as u64)?;
                total = g.add(total, t)?;
            }
            Ok(total)
        }),
    )?;
    Ok(out)
}

/// Full network on `size`×`size` random sources with the gated SSIM loss.
pub fn network_case(
    arch: &ArchConfig,
    size: usize,
    gate: LossGate,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let params = init_params::<f64>(arch, 7)?;
    let (ix, iy) = (random_image(size, size, 30), random_image(size, size, 31));
    let arch = *arch;
    let label = format!(
        "network depth {} {} / {} loss, {size}x{size}",
        arch.encoder.depth, arch.fusion_rule, gate
    );
    grad_check(
        &label,
        move |g: &mut Graph<f64>, p: &NetworkParams<f64>| {
            let x = g.input(ix.to_tensor());
            let y = g.input(iy.to_tensor());
            let out = forward(g, p, &arch, x, y)?;
            let (loss, _) = loss_node(g, out, &ix, &iy, &SsimParams::default(), 1, gate)?;
            Ok(loss)
        },
        &params,
        cfg,
    )
}

/// Every layer type in isolation plus the full depth-3 network on 16×16.
pub fn gradcheck_suite(arch: &ArchConfig, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut reports = layer_cases(cfg)?;
    reports.push(network_case(arch, 16, LossGate::Var, cfg)?);
    Ok(reports)
}

/// Default suite: mapping rule, depth 3, 16 base channels.
pub fn default_gradcheck(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    gradcheck_suite(&ArchConfig::new(3, 16, FusionRule::Mapping)?, cfg)
}

#[derive(Clone, Debug)]
pub struct SelftestLine {
    pub name: String,
    pub max_abs_err: f64,
    pub tolerance: f64,
}

impl SelftestLine {
    pub fn passed(&self) -> bool {
        self.max_abs_err.is_finite() && self.max_abs_err <= self.tolerance
    }
}

impl fmt::Display for SelftestLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<6} {:<24} max |err| {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.max_abs_err,
            self.tolerance
        )
    }
}

/// Tolerance used when comparing a metric with its oracle.
pub fn metric_tolerance(m: Metric) -> f64 {
    if m == Metric::Vif {
        1e-4
    } else {
        1e-6
    }
}

/// Every metric against its oracle on `triples` random 16×16 triples,
/// plus both loss gates against the brute-force window oracle on 20×20.
pub fn selftest(triples: usize, seed: u64) -> Result<Vec<SelftestLine>> {
    let mut lines = Vec::new();
    let data: Vec<(Image, Image, Image)> = (0..triples as u64)
        .map(|i| {
            let s = seed.wrapping_add(3 * i);
            (random_image(16, 16, s), random_image(16, 16, s + 1), random_image(16, 16, s + 2))
        })
        .collect();
    for m in Metric::ALL {
        let mut worst = 0.0f64;
        for (x, y, f) in &data {
            let fast = m.evaluate(x, y, f).0;
            let slow = reference::metric(m, x, y, f);
            let err = (fast - slow).abs();
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
        }
        lines.push(SelftestLine {
            name: format!("metric {m}"),
            max_abs_err: worst,
            tolerance: metric_tolerance(m),
        });
    }
    let p = SsimParams::default();
    for gate in LossGate::ALL {
        let mut worst = 0.0f64;
        for i in 0..triples.min(20) as u64 {
            let s = seed.wrapping_add(1000 + 3 * i);
            let (x, y, f) = (random_image(20, 20, s), random_image(20, 20, s + 1), random_image(20, 20, s + 2));
            let as64 = |im: &Image| im.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
            let (rep, _) = gated_ssim_loss(&as64(&x), &as64(&y), &as64(&f), 20, 20, &p, 1, gate)?;
            let want = reference::gated_ssim_loss(&x, &y, &f, &p, 1, gate);
            worst = worst.max((rep.loss - want).abs());
        }
        lines.push(SelftestLine {
            name: format!("loss {gate} gate"),
            max_abs_err: worst,
            tolerance: 1e-6,
        });
    }
    Ok(lines)
}
