//! End-to-end unsupervised training, checkpoints and the ablation harness.

mod ablate;
mod adam;
mod checkpoint;
mod config;
mod synthetic;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use ablate::{ablate, dataset_hash, AblationAxes, AblationRow};
pub use adam::Adam;
pub use checkpoint::{infer_fuse, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{TrainConfig, CONFIG_KEYS, DEFAULT_SEED};
pub use synthetic::{synthetic_dataset, synthetic_pair, synthetic_pairs, SyntheticMode};

use crate::error::{Error, Result};
use crate::image_io::{random_crop, ImagePair, PairDataset};
use crate::loss::{loss_node, LossReport, SsimParams};
use crate::network::{forward, init_params, ArchConfig};
use crate::nn::{Graph, NetworkParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub frac_x: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_frac_x: f64,
}

/// Append-only record of every optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn push(&mut self, rec: StepRecord) {
        debug_assert!(self.steps.last().is_none_or(|l| l.step < rec.step));
        self.steps.push(rec);
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Mean loss over the last `n` steps (fewer if the log is shorter).
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.steps[self.steps.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64)
    }

    pub fn epochs(&self) -> Vec<EpochSummary> {
        let mut out: Vec<EpochSummary> = Vec::new();
        for s in &self.steps {
            match out.last_mut() {
                Some(e) if e.epoch == s.epoch => {
                    e.steps += 1;
                    e.mean_loss += s.loss;
                    e.mean_frac_x += s.frac_x;
                }
                _ => out.push(EpochSummary {
                    epoch: s.epoch,
                    steps: 1,
                    mean_loss: s.loss,
                    mean_frac_x: s.frac_x,
                }),
            }
        }
        for e in &mut out {
            e.mean_loss /= e.steps as f64;
            e.mean_frac_x /= e.steps as f64;
        }
        out
    }

    /// `step,loss,frac_x` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,frac_x\n");
        for r in &self.steps {
            writeln!(s, "{},{},{}", r.step, r.loss, r.frac_x).expect("writing to a String");
        }
        s
    }
}

/// Loss and parameter gradients for one training pair.
fn item_gradients(
    params: &NetworkParams<f32>,
    arch: &ArchConfig,
    pair: &ImagePair,
    cfg: &TrainConfig,
) -> Result<(LossReport, NetworkParams<f32>)> {
    let mut g = Graph::new();
    let x = g.input(pair.x.to_tensor());
    let y = g.input(pair.y.to_tensor());
    let out = forward(&mut g, params, arch, x, y)?;
    let (loss, report) = loss_node(
        &mut g,
        out,
        &pair.x,
        &pair.y,
        &SsimParams::default(),
        cfg.window_stride,
        cfg.loss_gate,
    )?;
    let mut grads = params.clone();
    grads.zero_grad();
    g.backward(loss, &mut grads)?;
    Ok((report, grads))
}

fn total_steps(cfg: &TrainConfig, per_epoch: usize) -> usize {
    cfg.steps.unwrap_or(cfg.epochs * per_epoch)
}

/// Trains a fresh network. The result depends only on `dataset` and `cfg`:
/// batch items are processed in parallel but their gradients are summed in
/// a fixed order.
pub fn train(dataset: &PairDataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    train_with_progress(dataset, cfg, |_| {})
}

pub fn train_with_progress(
    dataset: &PairDataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&StepRecord),
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training set has no pairs".into()));
    }
    let arch = cfg.arch()?;
    let mut params = init_params::<f32>(&arch, cfg.seed)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total = total_steps(cfg, per_epoch);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    for step in 0..total {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<ImagePair> = order[cursor..end]
            .iter()
            .map(|&i| random_crop(&dataset.pairs()[i], cfg.crop, &mut rng))
            .collect::<Result<_>>()?;
        cursor = end;

        let results: Vec<(LossReport, NetworkParams<f32>)> = batch
            .par_iter()
            .map(|pair| item_gradients(&params, &arch, pair, cfg))
            .collect::<Result<_>>()?;

        params.zero_grad();
        let (mut loss, mut frac_x) = (0.0, 0.0);
        for (report, grads) in &results {
            loss += report.loss;
            frac_x += report.frac_selected_x;
            params.accumulate_grads(grads)?;
        }
        let n = results.len() as f64;
        let (loss, frac_x) = (loss / n, frac_x / n);
        let grads_finite = params.iter().all(|p| p.grad.is_finite());
        if !loss.is_finite() || !grads_finite {
            return Err(Error::NonFiniteLoss {
                step,
                last_good: Box::new(Checkpoint::new(cfg.clone(), params)),
            });
        }
        params.scale_grads(1.0 / n as f32);
        opt.step(&mut params)?;

        let rec = StepRecord {
            step,
            epoch,
            loss,
            frac_x,
        };
        progress(&rec);
        log.push(rec);
    }
    Ok((Checkpoint::new(cfg.clone(), params), log))
}
