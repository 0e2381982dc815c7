//! Objective fusion-quality metrics and their CSV report form.

pub mod filter;
pub mod info;
pub mod msssim;
pub mod spatial;
pub mod vif;

use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image_io::Image;

pub use info::{cross_entropy, entropy, mutual_information, Histogram256};
pub use msssim::ms_ssim;
pub use spatial::{edge_intensity, qabf, scd, spatial_frequency, standard_deviation};
pub use vif::vif;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Ei,
    Ce,
    Sf,
    En,
    Qabf,
    MsSsim,
    Sd,
    Vif,
    Scd,
    Mi,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Ei,
        Metric::Ce,
        Metric::Sf,
        Metric::En,
        Metric::Qabf,
        Metric::MsSsim,
        Metric::Sd,
        Metric::Vif,
        Metric::Scd,
        Metric::Mi,
    ];

    /// Default column set for `eval`.
    pub const DEFAULT: [Metric; 8] = [
        Metric::Ei,
        Metric::Ce,
        Metric::Sf,
        Metric::En,
        Metric::Qabf,
        Metric::MsSsim,
        Metric::Sd,
        Metric::Vif,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ei => "EI",
            Metric::Ce => "CE",
            Metric::Sf => "SF",
            Metric::En => "EN",
            Metric::Qabf => "Qabf",
            Metric::MsSsim => "MS_SSIM",
            Metric::Sd => "SD",
            Metric::Vif => "VIF",
            Metric::Scd => "SCD",
            Metric::Mi => "MI",
        }
    }

    /// Whether the value combines one score per source image.
    pub fn has_components(self) -> bool {
        matches!(
            self,
            Metric::Ce | Metric::MsSsim | Metric::Vif | Metric::Scd | Metric::Mi
        )
    }

    pub fn evaluate(self, ix: &Image, iy: &Image, if_: &Image) -> (f64, Option<[f64; 2]>) {
        match self {
            Metric::Ei => (edge_intensity(if_), None),
            Metric::Sf => (spatial_frequency(if_), None),
            Metric::En => (entropy(if_), None),
            Metric::Sd => (standard_deviation(if_), None),
            Metric::Qabf => (qabf(ix, iy, if_), None),
            Metric::Ce => {
                let t = info::cross_entropy_terms(ix, iy, if_);
                ((t[0] + t[1]) / 2.0, Some(t))
            }
            Metric::Mi => {
                let t = info::mutual_information_terms(ix, iy, if_);
                (t[0] + t[1], Some(t))
            }
            Metric::Scd => {
                let t = spatial::scd_terms(ix, iy, if_);
                (t[0] + t[1], Some(t))
            }
            Metric::MsSsim => {
                let t = msssim::ms_ssim_terms(ix, iy, if_);
                ((t[0] + t[1]) / 2.0, Some(t))
            }
            Metric::Vif => {
                let t = vif::vif_components(ix, iy, if_);
                ((t[0] + t[1]) / 2.0, Some(t))
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        let key = if key == "MSSSIM" { "MS_SSIM".to_string() } else { key };
        Metric::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_uppercase() == key)
            .ok_or_else(|| {
                let valid: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown metric `{}`; valid names: {}",
                    s.trim(),
                    valid.join(", ")
                ))
            })
    }
}

/// Parses a comma-separated list such as `EN,SD`; duplicates are dropped.
pub fn parse_metric_list(list: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Metric = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty metric list".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
    pub per_source: Option<[f64; 2]>,
}

/// Requested metrics for one image triple, in request order.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub values: Vec<MetricValue>,
}

impl MetricReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.iter().find(|v| v.metric == metric).map(|v| v.value)
    }

    pub fn metrics(&self) -> Vec<Metric> {
        self.values.iter().map(|v| v.metric).collect()
    }

    pub fn header(&self) -> Vec<String> {
        self.values.iter().map(|v| v.metric.name().to_string()).collect()
    }

    pub fn row(&self) -> Vec<String> {
        self.values.iter().map(|v| format!("{:.6}", v.value)).collect()
    }
}

fn check_dims(ix: &Image, iy: &Image, if_: &Image) -> Result<()> {
    if ix.dims() != iy.dims() || ix.dims() != if_.dims() {
        return Err(Error::shape(
            "metric inputs",
            format!("x {:?}, y {:?}, fused {:?}", ix.dims(), iy.dims(), if_.dims()),
        ));
    }
    Ok(())
}

pub fn evaluate_all(ix: &Image, iy: &Image, if_: &Image, selected: &[Metric]) -> Result<MetricReport> {
    check_dims(ix, iy, if_)?;
    let values = selected
        .iter()
        .map(|&metric| {
            let (value, per_source) = metric.evaluate(ix, iy, if_);
            MetricValue {
                metric,
                value,
                per_source,
            }
        })
        .collect();
    Ok(MetricReport { values })
}

/// Evaluates many `(x, y, fused)` triples in parallel; output order follows input order.
pub fn evaluate_batch(
    triples: &[(Image, Image, Image)],
    selected: &[Metric],
) -> Result<Vec<MetricReport>> {
    triples
        .par_iter()
        .map(|(x, y, f)| evaluate_all(x, y, f, selected))
        .collect()
}

/// Appends one report row to a CSV file, writing the header first if the
/// file is new or empty. An existing header must match.
pub fn append_csv(path: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    if !fresh {
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let existing: Vec<String> = rd
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if existing != report.header() {
            return Err(Error::Config(format!(
                "{} has columns {:?}, report has {:?}",
                path.display(),
                existing,
                report.header()
            )));
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut wr = csv::Writer::from_writer(file);
    if fresh {
        wr.write_record(report.header()).map_err(|e| csv_error(path, e))?;
    }
    wr.write_record(report.row()).map_err(|e| csv_error(path, e))?;
    wr.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_names_case_insensitively() {
        assert_eq!("ms_ssim".parse::<Metric>().unwrap(), Metric::MsSsim);
        assert_eq!("qabf".parse::<Metric>().unwrap(), Metric::Qabf);
        assert_eq!(parse_metric_list("EN, sd").unwrap(), vec![Metric::En, Metric::Sd]);
        let err = "PSNR".parse::<Metric>().unwrap_err().to_string();
        assert!(err.contains("PSNR") && err.contains("MS_SSIM"));
    }

    #[test]
    fn constant_fused_image_has_zero_en_and_sd() {
        let src = Image::from_fn(16, 16, |r, c| ((r + c) % 4) as f32 / 3.0);
        let flat = Image::filled(16, 16, 0.2).unwrap();
        let rep = evaluate_all(&src, &src, &flat, &[Metric::En, Metric::Sd]).unwrap();
        assert_eq!(rep.header(), vec!["EN", "SD"]);
        assert_eq!(rep.get(Metric::En), Some(0.0));
        assert_eq!(rep.get(Metric::Sd), Some(0.0));
        assert_eq!(rep.row(), vec!["0.000000", "0.000000"]);
    }

    #[test]
    fn symmetric_metrics_ignore_source_order() {
        let x = Image::from_fn(16, 16, |r, c| ((r * 3 + c * 5) % 11) as f32 / 10.0);
        let y = Image::from_fn(16, 16, |r, c| ((r * c + 2) % 7) as f32 / 6.0);
        let f = Image::from_fn(16, 16, |r, c| (x.get(r, c) + y.get(r, c)) / 2.0);
        for m in [Metric::Ce, Metric::Mi, Metric::Scd, Metric::MsSsim, Metric::Vif, Metric::Qabf] {
            let a = m.evaluate(&x, &y, &f).0;
            let b = m.evaluate(&y, &x, &f).0;
            assert!((a - b).abs() < 1e-12, "{m}: {a} vs {b}");
        }
    }

    #[test]
    fn csv_appends_under_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let img = Image::from_fn(16, 16, |r, c| ((r ^ c) % 8) as f32 / 7.0);
        let rep = evaluate_all(&img, &img, &img, &Metric::DEFAULT).unwrap();
        append_csv(&path, &rep).unwrap();
        append_csv(&path, &rep).unwrap();
        let mut rd = csv::Reader::from_path(&path).unwrap();
        assert_eq!(rd.headers().unwrap().len(), 8);
        let rows: Vec<_> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][5], "1.000000");
        let other = evaluate_all(&img, &img, &img, &[Metric::En]).unwrap();
        assert!(append_csv(&path, &other).is_err());
    }
}
