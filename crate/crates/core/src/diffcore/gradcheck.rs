//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so exact zeros compare
    /// absolutely.
    pub floor: f64,
    /// Check at most this many elements per input, sampled without
    /// replacement. `None` checks everything.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tol: 1e-3,
            floor: 1e-6,
            max_per_input: None,
            seed: 0,
        }
    }
}

/// An element whose central difference straddles a non-differentiable
/// point (a ReLU/ELU sign change or a pooling argmax switch).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KinkFlag {
    pub input: usize,
    pub element: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst checked entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub flagged: Vec<KinkFlag>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::instrumented();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, true)).collect();
    let out = f(&mut g, &vars)?;
    if let Some(op) = g.first_nonfinite() {
        return Err(Error::NonFinite { op });
    }
    Ok((g.scalar(out), g.branch_signature()))
}

/// Compares the gradient of the scalar function `f` with respect to each of
/// `inputs` against central finite differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::instrumented();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, true)).collect();
    let out = f(&mut g, &vars)?;
    if let Some(op) = g.first_nonfinite() {
        return Err(Error::NonFinite { op });
    }
    let base_sig = g.branch_signature();
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        flagged: Vec::new(),
        tol: cfg.tol,
    };
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[ti])
            .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
        let mut elems: Vec<usize> = match cfg.max_per_input {
            Some(m) if m < t.len() => index::sample(&mut rng, t.len(), m).into_vec(),
            _ => (0..t.len()).collect(),
        };
        elems.sort_unstable();
        for e in elems {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + cfg.step;
            let (fp, sp) = eval(&f, &work)?;
            work[ti].data_mut()[e] = orig - cfg.step;
            let (fm, sm) = eval(&f, &work)?;
            work[ti].data_mut()[e] = orig;
            if sp != base_sig || sm != base_sig {
                report.flagged.push(KinkFlag { input: ti, element: e });
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((ti, e));
            }
        }
    }
    Ok(report)
}
