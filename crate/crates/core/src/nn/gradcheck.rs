//! Central finite-difference verification of tape gradients (double precision).
//!
//! Perturbed evaluations keep every leaky-ReLU unit on the side it took in
//! the unperturbed pass. Without that, a bias step that moves a whole
//! channel almost always pushes some unit across its kink and the
//! difference quotient stops measuring the derivative.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{ActivationPattern, Graph, Var};
use crate::nn::params::NetworkParams;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum allowed relative error per entry.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to round-off are compared absolutely.
    pub abs_floor: f64,
    /// Entries probed per parameter tensor; tensors at or below this size
    /// are checked exhaustively.
    pub entries_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            entries_per_param: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Set when an analytic or numeric gradient was NaN/inf.
    pub non_finite: bool,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub label: String,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !p.passed)
            .map(|p| p.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} (max rel err {:.3e}, tol {:.0e})",
            self.label,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tolerance
        )?;
        for p in &self.params {
            if p.non_finite {
                writeln!(f, "  {:<32} NaN", p.name)?;
            } else {
                writeln!(
                    f,
                    "  {:<32} n={:<3} max={:.3e} mean={:.3e}{}",
                    p.name,
                    p.checked,
                    p.max_rel_err,
                    p.mean_rel_err,
                    if p.passed { "" } else { "  <-- FAIL" }
                )?;
            }
        }
        Ok(())
    }
}

fn scalar_of(g: &Graph<f64>, loss: Var) -> Result<f64> {
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::shape("loss", format!("expected scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

fn evaluate<F>(f: &F, params: &NetworkParams<f64>, pattern: &ActivationPattern) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &NetworkParams<f64>) -> Result<Var>,
{
    let mut g = Graph::with_frozen_activations(pattern.clone());
    let loss = f(&mut g, params)?;
    if g.pattern_mismatch() {
        return Err(Error::shape("grad check", "loss closure built a different graph"));
    }
    scalar_of(&g, loss)
}

/// Zeroes the gradient buffers, runs one forward/backward pass and returns the loss.
pub fn analytic_gradients<F>(f: &F, params: &mut NetworkParams<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &NetworkParams<f64>) -> Result<Var>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss, params)?;
    Ok(g.value(loss).data()[0])
}

/// Compares the gradients currently stored in `params` against central
/// finite differences of `f`.
pub fn finite_difference_report<F>(
    label: &str,
    f: &F,
    params: &NetworkParams<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &NetworkParams<f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pattern = {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        scalar_of(&g, loss)?;
        g.activation_pattern()
    };
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let entry = params.entry(pi);
        let n = entry.value.len();
        let indices: Vec<usize> = if n <= cfg.entries_per_param {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, cfg.entries_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut errs = Vec::with_capacity(indices.len());
        let mut non_finite = false;
        for &i in &indices {
            let original = entry.value.data()[i];
            probe.entry_mut(pi).value.data_mut()[i] = original + cfg.step;
            let plus = evaluate(f, &probe, &pattern)?;
            probe.entry_mut(pi).value.data_mut()[i] = original - cfg.step;
            let minus = evaluate(f, &probe, &pattern)?;
            probe.entry_mut(pi).value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = entry.grad.data()[i];
            if !numeric.is_finite() || !analytic.is_finite() {
                non_finite = true;
                errs.push(f64::NAN);
                continue;
            }
            let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
            errs.push((analytic - numeric).abs() / denom);
        }
        let max = errs.iter().copied().fold(0.0, f64::max);
        let mean = if errs.is_empty() {
            0.0
        } else {
            errs.iter().sum::<f64>() / errs.len() as f64
        };
        out.push(ParamCheck {
            name: entry.name.clone(),
            checked: indices.len(),
            max_rel_err: if non_finite { f64::NAN } else { max },
            mean_rel_err: mean,
            non_finite,
            passed: !non_finite && max < cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        tolerance: cfg.tolerance,
        params: out,
    })
}

/// Analytic gradients followed by a finite-difference comparison.
pub fn grad_check<F>(
    label: &str,
    f: F,
    params: &NetworkParams<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &NetworkParams<f64>) -> Result<Var>,
{
    let mut with_grads = params.clone();
    analytic_gradients(&f, &mut with_grads)?;
    finite_difference_report(label, &f, &with_grads, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers;
    use crate::tensor::Tensor;

    fn single_conv() -> (NetworkParams<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = NetworkParams::new();
        p.init_conv(&mut rng, "c", 3, 2, 3, 1.0).unwrap();
        let x = Tensor::from_vec(
            &[2, 6, 6],
            (0..72).map(|i| ((i * 37 % 23) as f64 / 23.0) - 0.4).collect(),
        )
        .unwrap();
        (p, x)
    }

    fn loss_of(x: Tensor<f64>) -> impl Fn(&mut Graph<f64>, &NetworkParams<f64>) -> Result<Var> {
        move |g: &mut Graph<f64>, p: &NetworkParams<f64>| {
            let xi = g.input(x.clone());
            let y = layers::conv3x3(g, p, "c", xi, 3)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        }
    }

    #[test]
    fn single_conv_passes() {
        let (p, x) = single_conv();
        let report = grad_check("conv", loss_of(x), &p, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let (mut p, x) = single_conv();
        let f = loss_of(x);
        analytic_gradients(&f, &mut p).unwrap();
        p.get_mut("c.w").unwrap().grad.data_mut().iter_mut().for_each(|g| *g *= 2.0);
        let report = finite_difference_report("corrupt", &f, &p, &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures(), ["c.w"]);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let (mut p, x) = single_conv();
        let f = loss_of(x);
        analytic_gradients(&f, &mut p).unwrap();
        p.get_mut("c.b").unwrap().grad.data_mut()[0] = f64::NAN;
        let report = finite_difference_report("nan", &f, &p, &GradCheckConfig::default()).unwrap();
        let b = report.params.iter().find(|e| e.name == "c.b").unwrap();
        assert!(b.non_finite && !b.passed);
        assert!(report.to_string().contains("NaN"));
    }
}
