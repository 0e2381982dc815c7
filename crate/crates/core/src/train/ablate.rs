use std::io::Write;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionRule;
use crate::image_io::{ImagePair, PairDataset};
use crate::loss::LossGate;
use crate::metrics::{evaluate_all, Metric};

use super::checkpoint::infer_fuse;
use super::config::TrainConfig;
use super::train;

/// Which configuration fields vary; the others stay at the base value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationAxes {
    pub fusion_rule: bool,
    pub loss_gate: bool,
    pub depth: bool,
}

impl AblationAxes {
    /// Parses a comma list of `fusion`, `loss_gate` (or `loss`), `depth`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut axes = AblationAxes::default();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "fusion" | "fusion_rule" => axes.fusion_rule = true,
                "loss" | "loss_gate" => axes.loss_gate = true,
                "depth" => axes.depth = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation axis `{other}` (expected fusion, loss_gate, depth)"
                    )))
                }
            }
        }
        Ok(axes)
    }

    /// Cartesian product over the selected axes, fusion rule varying slowest.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let rules: Vec<FusionRule> = if self.fusion_rule {
            FusionRule::ALL.to_vec()
        } else {
            vec![base.fusion_rule]
        };
        let gates: Vec<LossGate> = if self.loss_gate {
            LossGate::ALL.to_vec()
        } else {
            vec![base.loss_gate]
        };
        let depths: Vec<usize> = if self.depth { vec![3, 4, 5] } else { vec![base.depth] };
        let mut out = Vec::new();
        for &fusion_rule in &rules {
            for &loss_gate in &gates {
                for &depth in &depths {
                    out.push(TrainConfig {
                        fusion_rule,
                        loss_gate,
                        depth,
                        ..base.clone()
                    });
                }
            }
        }
        out
    }
}

/// SHA-256 over pair ids, sizes and quantised pixels, as lowercase hex.
pub fn dataset_hash(pairs: &[ImagePair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        let (rows, cols) = p.dims();
        h.update((p.id.len() as u64).to_le_bytes());
        h.update(p.id.as_bytes());
        h.update((rows as u64).to_le_bytes());
        h.update((cols as u64).to_le_bytes());
        h.update(p.x.to_bytes());
        h.update(p.y.to_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: TrainConfig,
    pub dataset_hash: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub status: String,
    /// Mean of each metric over the held-out pairs, in `metrics` order.
    pub metrics: Vec<f64>,
}

fn run_one(
    train_set: &PairDataset,
    held_out: &[ImagePair],
    cfg: &TrainConfig,
    metrics: &[Metric],
    hash: &str,
) -> AblationRow {
    let mut row = AblationRow {
        config: cfg.clone(),
        dataset_hash: hash.to_string(),
        steps: 0,
        final_loss: None,
        status: String::new(),
        metrics: Vec::new(),
    };
    let (ckpt, log) = match train(train_set, cfg) {
        Ok(r) => r,
        Err(Error::NonFiniteLoss { step, .. }) => {
            row.steps = step;
            row.status = format!("non-finite loss at step {step}");
            return row;
        }
        Err(e) => {
            row.status = format!("failed: {e}");
            return row;
        }
    };
    row.steps = log.steps.len();
    row.final_loss = log.final_loss();
    let mut sums = vec![0.0; metrics.len()];
    for pair in held_out {
        let report = infer_fuse(&ckpt, &pair.x, &pair.y)
            .and_then(|f| evaluate_all(&pair.x, &pair.y, &f, metrics));
        match report {
            Ok(r) => {
                for (s, v) in sums.iter_mut().zip(&r.values) {
                    *s += v.value;
                }
            }
            Err(e) => {
                row.status = format!("evaluation failed: {e}");
                return row;
            }
        }
    }
    row.metrics = sums.iter().map(|s| s / held_out.len().max(1) as f64).collect();
    row.status = "ok".into();
    row
}

/// Trains every configuration of the product with the base seed and
/// evaluates each on `held_out`. A failing run is recorded in its row and
/// the others continue. At most `jobs` runs execute at once.
pub fn ablate(
    train_set: &PairDataset,
    held_out: &[ImagePair],
    base: &TrainConfig,
    axes: AblationAxes,
    metrics: &[Metric],
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let mut all = train_set.pairs().to_vec();
    all.extend_from_slice(held_out);
    let hash = dataset_hash(&all);
    let configs = axes.configs(base);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(|| {
        configs
            .par_iter()
            .map(|cfg| run_one(train_set, held_out, cfg, metrics, &hash))
            .collect()
    }))
}

pub const FIXED_COLUMNS: [&str; 8] = [
    "fusion_rule",
    "loss_gate",
    "depth",
    "seed",
    "dataset_hash",
    "steps",
    "final_loss",
    "status",
];

impl AblationRow {
    pub fn header(metrics: &[Metric]) -> Vec<String> {
        FIXED_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(metrics.iter().map(|m| m.name().to_string()))
            .collect()
    }

    pub fn record(&self, metrics: &[Metric]) -> Vec<String> {
        let mut r = vec![
            self.config.fusion_rule.to_string(),
            self.config.loss_gate.to_string(),
            self.config.depth.to_string(),
            self.config.seed.to_string(),
            self.dataset_hash.clone(),
            self.steps.to_string(),
            self.final_loss.map_or(String::new(), |l| format!("{l:.6}")),
            self.status.clone(),
        ];
        for i in 0..metrics.len() {
            r.push(self.metrics.get(i).map_or(String::new(), |v| format!("{v:.6}")));
        }
        r
    }

    /// Writes a header and one row per run.
    pub fn write_csv<W: Write>(rows: &[AblationRow], metrics: &[Metric], out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::io("ablation csv", std::io::Error::other(e));
        wr.write_record(Self::header(metrics)).map_err(err)?;
        for row in rows {
            wr.write_record(row.record(metrics)).map_err(err)?;
        }
        wr.flush().map_err(|e| Error::io("ablation csv", e))
    }
}
