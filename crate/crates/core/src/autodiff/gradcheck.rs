//! Central finite-difference check of tape gradients.

use super::{AutodiffError, Result, Tape, Tensor, Var};
use rand::seq::index::sample;

/// Gradients smaller than this are compared in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Which entries of each parameter tensor to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many entries per tensor, chosen with the given seed.
    Sampled { per_tensor: usize, seed: u64 },
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h^2).
    #[default]
    TwoPoint,
    /// Fourth-order five-point formula, truncation error O(h^4).
    FivePoint,
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat entry)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `graph` with central differences.
///
/// `graph` builds a scalar from parameter variables on a fresh tape. The
/// relative error of one entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRADIENT_FLOOR)`.
pub fn finite_difference_check<F>(graph: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(check_with_coverage(graph, params, step, Coverage::All)?.max_rel_error)
}

pub fn check_with_coverage<F>(
    graph: F,
    params: &[Tensor],
    step: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with_stencil(graph, params, step, coverage, Stencil::TwoPoint)
}

pub fn check_with_stencil<F>(
    graph: F,
    params: &[Tensor],
    step: f64,
    coverage: Coverage,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(AutodiffError::InvalidArgument {
            node: 0,
            op: "finite_difference_check",
            reason: format!("step {step} outside (0, 1e-2]"),
        });
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (ti, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ti], p.len());
        let entries: Vec<usize> = match coverage {
            Coverage::All => (0..p.len()).collect(),
            Coverage::Sampled { per_tensor, seed } if per_tensor < p.len() => {
                let mut rng = super::rng::seeded_stream(seed, ti as u64);
                let mut idx = sample(&mut rng, p.len(), per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
            Coverage::Sampled { .. } => (0..p.len()).collect(),
        };
        for j in entries {
            let orig = p.data()[j];
            let mut at = |offset: f64| {
                work[ti].data_mut()[j] = orig + offset;
                eval(&work)
            };
            let first = at(step)? - at(-step)?;
            let numeric = match stencil {
                Stencil::TwoPoint => first / (2.0 * step),
                Stencil::FivePoint => (8.0 * first - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step),
            };
            work[ti].data_mut()[j] = orig;
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((ti, j));
            }
        }
    }
    Ok(report)
}
