//! Discretized Gaussian mixtures over integer residuals.
//!
//! Residuals live in `[-255, 255]`; symbol index is `value + 255`. The mass of
//! bin `r` is `Σ_k w_k [Φ_k(r + ½) - Φ_k(r - ½)]`, with the two edge bins
//! extended to ±∞ so the 511 masses sum to one.
//!
//! Parameters pass through [`canonical_round`] before they become frequency
//! tables. The grid is coarse enough that encoder and decoder always land on
//! the same values, and every later step is a pure function of those values.

use crate::autodiff::{kernels, Real, Tape, Tensor, Var};
use crate::coder::{quantize_pmf, FreqTable};
use crate::special;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

pub const RESIDUAL_MIN: i32 = -255;
pub const RESIDUAL_MAX: i32 = 255;
/// Number of residual symbols.
pub const ALPHABET: usize = 511;
pub const SIGMA_MIN: f64 = 1e-3;
/// Probability floor inside the training loss.
pub const P_FLOOR: f64 = 1e-9;
/// Parameters are rounded to multiples of `2^-GRID_BITS`.
pub const GRID_BITS: u32 = 12;
const GRID: f64 = (1u32 << GRID_BITS) as f64;
/// Means are clamped to this magnitude before rounding.
const MEAN_LIMIT: f64 = 4096.0;

static SIGMA_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// How many standard deviations [`discretized_pmf`] has raised to
/// [`SIGMA_MIN`] since process start.
pub fn sigma_clamp_count() -> u64 {
    SIGMA_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("residual {0} outside [-255, 255]")]
    ResidualOutOfRange(i32),
    #[error("{params} parameter sets for {residuals} residuals")]
    LengthMismatch { params: usize, residuals: usize },
    #[error("invalid mixture: {0}")]
    Invalid(String),
}

#[inline]
pub fn symbol_of(residual: i32) -> usize {
    (residual - RESIDUAL_MIN) as usize
}

#[inline]
pub fn residual_of(symbol: usize) -> i32 {
    symbol as i32 + RESIDUAL_MIN
}

/// One mixture: `K` weights, means and standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self, GmmError> {
        let p = GmmParams { weights, means, stds };
        p.validate()?;
        Ok(p)
    }

    pub fn single(mean: f64, std: f64) -> Self {
        GmmParams {
            weights: vec![1.0],
            means: vec![mean],
            stds: vec![std],
        }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<(), GmmError> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(GmmError::Invalid(format!(
                "component counts {}/{}/{}",
                k,
                self.means.len(),
                self.stds.len()
            )));
        }
        if self.weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(GmmError::Invalid("negative weight".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(GmmError::Invalid(format!("weights sum to {s}")));
        }
        if self.means.iter().chain(&self.stds).any(|v| !v.is_finite()) {
            return Err(GmmError::Invalid("non-finite mean or std".into()));
        }
        if self.stds.iter().any(|&s| s <= 0.0) {
            return Err(GmmError::Invalid("non-positive std".into()));
        }
        Ok(())
    }

    /// Frequency table used by the coder for these parameters.
    pub fn table(&self) -> FreqTable {
        quantize_pmf(&discretized_pmf(self)).expect("discretized PMF is normalized")
    }
}

/// Maps one raw head row `[logits; means; raw stds]` (3K values) to mixture
/// parameters: softmax weights, raw means, `max(softplus, SIGMA_MIN)` stds.
pub fn head_to_params<T: Real>(raw: &[T], k: usize) -> GmmParams {
    debug_assert_eq!(raw.len(), 3 * k);
    let mut w = vec![T::ZERO; k];
    kernels::softmax_row(&raw[..k], &mut w);
    let floor = T::from_f64(SIGMA_MIN);
    GmmParams {
        weights: w.iter().map(|v| v.to_f64()).collect(),
        means: raw[k..2 * k].iter().map(|v| v.to_f64()).collect(),
        stds: raw[2 * k..]
            .iter()
            .map(|&v| kernels::softplus(v).max(floor).to_f64())
            .collect(),
    }
}

/// Probability of each of the 511 residual values.
pub fn discretized_pmf(params: &GmmParams) -> Vec<f64> {
    let mut pmf = vec![0.0; ALPHABET];
    let mut mass = vec![0.0; ALPHABET];
    for k in 0..params.components() {
        let mut sigma = params.stds[k];
        if sigma.is_nan() || sigma < SIGMA_MIN {
            SIGMA_CLAMPS.fetch_add(1, Ordering::Relaxed);
            sigma = SIGMA_MIN;
        }
        component_masses(params.means[k], sigma, &mut mass);
        let w = params.weights[k];
        for (p, &m) in pmf.iter_mut().zip(&mass) {
            *p += w * m;
        }
    }
    pmf
}

/// Tail-folded bin masses of one Gaussian.
///
/// Each interior edge stores whichever tail of the CDF is the smaller
/// number, so far-tail bins are differences of small values.
fn component_masses(mean: f64, sigma: f64, out: &mut [f64]) {
    // edge i sits at residual value i - 254.5, for i in 0..510
    let mut tail = [0.0f64; ALPHABET - 1];
    let mut upper = [false; ALPHABET - 1];
    for i in 0..ALPHABET - 1 {
        let z = (i as f64 - 254.5 - mean) / sigma;
        if z > 0.0 {
            upper[i] = true;
            tail[i] = special::normal_sf(z);
        } else {
            tail[i] = special::normal_cdf(z);
        }
    }
    let cdf_below = |i: usize| -> (f64, bool) { (tail[i], upper[i]) };
    for (r, slot) in out.iter_mut().enumerate() {
        let lo = if r == 0 { None } else { Some(cdf_below(r - 1)) };
        let hi = if r == ALPHABET - 1 { None } else { Some(cdf_below(r)) };
        *slot = match (lo, hi) {
            (None, None) => 1.0,
            (None, Some((t, false))) => t,
            (None, Some((t, true))) => 1.0 - t,
            (Some((t, true)), None) => t,
            (Some((t, false)), None) => 1.0 - t,
            (Some((a, false)), Some((b, false))) => b - a,
            (Some((a, true)), Some((b, true))) => a - b,
            (Some((a, false)), Some((b, true))) => 1.0 - a - b,
            // an upper edge below a lower edge cannot happen for sorted edges
            (Some((_, true)), Some((_, false))) => unreachable!("edges out of order"),
        };
    }
}

/// Mass of a single residual bin, with the same tail folding.
pub fn bin_probability(params: &GmmParams, residual: i32) -> f64 {
    let mut p = 0.0;
    for k in 0..params.components() {
        let sigma = params.stds[k].max(SIGMA_MIN);
        let mu = params.means[k];
        let lo = if residual == RESIDUAL_MIN {
            f64::NEG_INFINITY
        } else {
            (residual as f64 - 0.5 - mu) / sigma
        };
        let hi = if residual == RESIDUAL_MAX {
            f64::INFINITY
        } else {
            (residual as f64 + 0.5 - mu) / sigma
        };
        p += params.weights[k] * special::normal_interval(lo, hi);
    }
    p
}

/// Cross-entropy in nats: `-Σ ln max(P(r), P_FLOOR)`.
pub fn nll_loss(params: &[GmmParams], residuals: &[i32]) -> Result<f64, GmmError> {
    if params.len() != residuals.len() {
        return Err(GmmError::LengthMismatch {
            params: params.len(),
            residuals: residuals.len(),
        });
    }
    let mut loss = 0.0;
    for (p, &r) in params.iter().zip(residuals) {
        check_residual(r)?;
        loss -= bin_probability(p, r).max(P_FLOOR).ln();
    }
    Ok(loss)
}

fn check_residual(r: i32) -> Result<(), GmmError> {
    if (RESIDUAL_MIN..=RESIDUAL_MAX).contains(&r) {
        Ok(())
    } else {
        Err(GmmError::ResidualOutOfRange(r))
    }
}

/// Builds the training loss on `tape` from raw head outputs `[L, 3K]`.
/// Returns a scalar in nats, summed over the `L` residuals.
pub fn nll_loss_on_tape(
    tape: &mut Tape,
    head: Var,
    residuals: &[i32],
    k: usize,
) -> Result<Var, crate::autodiff::AutodiffError> {
    use crate::autodiff::AutodiffError;
    let n = residuals.len();
    if let Some(&r) = residuals.iter().find(|r| check_residual(**r).is_err()) {
        return Err(AutodiffError::InvalidArgument {
            node: tape.len(),
            op: "nll_loss",
            reason: format!("residual {r} outside [-255, 255]"),
        });
    }
    let logits = tape.slice_cols(head, 0, k)?;
    let weights = tape.softmax(logits)?;
    let means = tape.slice_cols(head, k, k)?;
    let raw_std = tape.slice_cols(head, 2 * k, k)?;
    let sp = tape.softplus(raw_std)?;
    let sigma = tape.clamp_min(sp, SIGMA_MIN)?;

    let per_row = |f: &dyn Fn(i32) -> f64| -> Tensor {
        let data = residuals.iter().flat_map(|&r| std::iter::repeat_n(f(r), k)).collect();
        Tensor::new(vec![n, k], data).expect("shape")
    };
    let hi_edge = tape.constant(per_row(&|r| r as f64 + 0.5));
    let lo_edge = tape.constant(per_row(&|r| r as f64 - 0.5));
    let keep_hi = tape.constant(per_row(&|r| f64::from(r != RESIDUAL_MAX)));
    let fold_hi = tape.constant(per_row(&|r| f64::from(r == RESIDUAL_MAX)));
    let keep_lo = tape.constant(per_row(&|r| f64::from(r != RESIDUAL_MIN)));
    let fold_lo = tape.constant(per_row(&|r| f64::from(r == RESIDUAL_MIN)));
    // bins above a component's mean use upper-tail masses, the rest lower-tail
    let mu = tape.value(means).data().to_vec();
    let above: Vec<f64> = (0..n * k).map(|i| f64::from(residuals[i / k] as f64 > mu[i])).collect();
    let upper = tape.constant(Tensor::new(vec![n, k], above.clone()).expect("shape"));
    let lower = tape.constant(Tensor::new(vec![n, k], above.iter().map(|&a| 1.0 - a).collect()).expect("shape"));

    let scaled = |edge: Var, tape: &mut Tape| -> Result<Var, AutodiffError> {
        let d = tape.sub(edge, means)?;
        let z = tape.div(d, sigma)?;
        tape.scale(z, std::f64::consts::FRAC_1_SQRT_2)
    };
    let y_hi = scaled(hi_edge, tape)?;
    let y_lo = scaled(lo_edge, tape)?;
    // erfc(y) = 2 P(X > edge), erfc(-y) = 2 P(X < edge)
    let tail = |y: Var, keep: Var, fold: Var, tape: &mut Tape| -> Result<Var, AutodiffError> {
        let e = tape.erfc(y)?;
        let e = tape.mul(e, keep)?;
        let f = tape.scale(fold, 2.0)?;
        tape.add(e, f)
    };
    let zero = tape.constant(Tensor::zeros(&[n, k]));
    let neg_hi = tape.scale(y_hi, -1.0)?;
    let neg_lo = tape.scale(y_lo, -1.0)?;
    let above_lo = tail(y_lo, keep_lo, fold_lo, tape)?;
    let above_hi = tail(y_hi, keep_hi, zero, tape)?;
    let below_hi = tail(neg_hi, keep_hi, fold_hi, tape)?;
    let below_lo = tail(neg_lo, keep_lo, zero, tape)?;
    let up_mass = tape.sub(above_lo, above_hi)?;
    let low_mass = tape.sub(below_hi, below_lo)?;
    let up_mass = tape.mul(up_mass, upper)?;
    let low_mass = tape.mul(low_mass, lower)?;
    let both = tape.add(up_mass, low_mass)?;
    let bins = tape.scale(both, 0.5)?;
    let weighted = tape.mul(weights, bins)?;
    let p = tape.sum_cols(weighted)?;
    let p = tape.clamp_min(p, P_FLOOR)?;
    let logp = tape.log(p)?;
    let total = tape.sum(logp)?;
    tape.scale(total, -1.0)
}

/// Rounds parameters onto the `2^-12` grid.
///
/// Means and stds round half-to-even; stds never drop below the first grid
/// point at or above [`SIGMA_MIN`]. Weights are distributed over 4096 units by
/// largest remainder (ties to the lower component) so they sum to exactly 1.
/// The result is a fixed point of this function.
pub fn canonical_round(params: &GmmParams) -> GmmParams {
    let k = params.components();
    let scaled: Vec<f64> = params
        .weights
        .iter()
        .map(|&w| if w.is_finite() { w.max(0.0) } else { 0.0 })
        .collect();
    let sum: f64 = scaled.iter().sum();
    let units = GRID;
    let mut floors = Vec::with_capacity(k);
    let mut rems = Vec::with_capacity(k);
    for &w in &scaled {
        let u = if sum > 0.0 { w / sum * units } else { units / k as f64 };
        let f = u.floor();
        floors.push(f as i64);
        rems.push(u - f);
    }
    let mut deficit = units as i64 - floors.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| rems[b].partial_cmp(&rems[a]).unwrap().then(a.cmp(&b)));
    let mut i = 0;
    while deficit > 0 {
        floors[order[i % k]] += 1;
        deficit -= 1;
        i += 1;
    }
    while deficit < 0 {
        let j = order[k - 1 - (i % k)];
        if floors[j] > 0 {
            floors[j] -= 1;
            deficit += 1;
        }
        i += 1;
    }

    let min_std_units = (SIGMA_MIN * GRID).ceil();
    GmmParams {
        weights: floors.iter().map(|&f| f as f64 / GRID).collect(),
        means: params
            .means
            .iter()
            .map(|&m| {
                let m = if m.is_finite() { m.clamp(-MEAN_LIMIT, MEAN_LIMIT) } else { 0.0 };
                (m * GRID).round_ties_even() / GRID
            })
            .collect(),
        stds: params
            .stds
            .iter()
            .map(|&s| {
                let s = if s.is_finite() { s.min(MEAN_LIMIT) } else { 1.0 };
                (s * GRID).round_ties_even().max(min_std_units) / GRID
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rng;
    use rand::Rng;

    #[test]
    fn unit_normal_center_bin() {
        let pmf = discretized_pmf(&GmmParams::single(0.0, 1.0));
        assert!((pmf[symbol_of(0)] - 0.382_924_922_548_026).abs() < 1e-13);
    }

    #[test]
    fn minimal_sigma_concentrates() {
        let pmf = discretized_pmf(&GmmParams::single(0.0, SIGMA_MIN));
        assert!(pmf[symbol_of(0)] > 1.0 - 1e-12);
        let rest: f64 = pmf.iter().enumerate().filter(|(i, _)| *i != 255).map(|(_, p)| p).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn symmetric_mixture() {
        let p = GmmParams::new(vec![0.5, 0.5], vec![-10.0, 10.0], vec![1.0, 1.0]).unwrap();
        let pmf = discretized_pmf(&p);
        for r in 0..=255 {
            assert!((pmf[symbol_of(r)] - pmf[symbol_of(-r)]).abs() < 1e-15, "r={r}");
        }
    }

    #[test]
    fn tail_folding_keeps_mass() {
        let pmf = discretized_pmf(&GmmParams::single(400.0, 3.0));
        assert!(pmf[ALPHABET - 1] > 1.0 - 1e-12);
        let pmf = discretized_pmf(&GmmParams::single(-300.0, 20.0));
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((pmf[0] - special::normal_cdf(45.5 / 20.0)).abs() < 1e-12);
    }

    #[test]
    fn sigma_clamp_counted() {
        let before = sigma_clamp_count();
        let p = GmmParams::single(0.0, 1e-6);
        let pmf = discretized_pmf(&p);
        assert!(sigma_clamp_count() > before);
        assert!(pmf[symbol_of(0)] > 1.0 - 1e-12);
    }

    #[test]
    fn nll_of_half_is_ln2() {
        // mean on the bin edge at +0.5 puts half the mass at or below 0
        let p = GmmParams::single(0.5, 1.0);
        let below: f64 = discretized_pmf(&p)[..=symbol_of(0)].iter().sum();
        assert!((below - 0.5).abs() < 1e-15);
        // a two-point mixture with P(0) = 0.5 exactly
        let p = GmmParams::new(vec![0.5, 0.5], vec![0.0, 200.0], vec![SIGMA_MIN, SIGMA_MIN]).unwrap();
        let l = nll_loss(&[p], &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_out_of_support() {
        let p = GmmParams::single(0.0, 1.0);
        assert_eq!(nll_loss(std::slice::from_ref(&p), &[256]).unwrap_err(), GmmError::ResidualOutOfRange(256));
        assert!(matches!(nll_loss(&[p], &[0, 1]), Err(GmmError::LengthMismatch { .. })));
    }

    #[test]
    fn nll_near_zero_when_certain() {
        let p = GmmParams::single(3.0, SIGMA_MIN);
        let l = nll_loss(&[p], &[3]).unwrap();
        assert!(l.abs() < 1e-11);
    }

    #[test]
    fn canonical_weights_third_split() {
        let p = GmmParams::new(vec![1.0 / 3.0, 2.0 / 3.0], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let c = canonical_round(&p);
        assert_eq!(c.weights, vec![1365.0 / 4096.0, 2731.0 / 4096.0]);
        assert_eq!(c.weights.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn canonical_is_idempotent() {
        let mut r = rng::seeded(9);
        for _ in 0..500 {
            let k = r.random_range(1..=5);
            let mut w: Vec<f64> = (0..k).map(|_| r.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            let p = GmmParams {
                weights: w,
                means: (0..k).map(|_| r.random_range(-300.0..300.0)).collect(),
                stds: (0..k).map(|_| r.random_range(0.0..50.0)).collect(),
            };
            let c = canonical_round(&p);
            assert_eq!(canonical_round(&c), c);
            assert!(c.stds.iter().all(|&s| s >= SIGMA_MIN));
            c.validate().unwrap();
        }
    }

    #[test]
    fn canonical_half_grid_ties_to_even() {
        let g = 1.0 / 4096.0;
        // 10.5 grid units rounds to 10, 11.5 to 12
        let p = GmmParams::single(10.5 * g, 11.5 * g);
        let c = canonical_round(&p);
        assert_eq!(c.means[0], 10.0 * g);
        assert_eq!(c.stds[0], 12.0 * g);
        // a hair either side of the tie resolves by nearest
        let p = GmmParams::single(10.5 * g + 1e-12, 10.5 * g - 1e-12);
        let c = canonical_round(&p);
        assert_eq!(c.means[0], 11.0 * g);
        assert_eq!(c.stds[0], 10.0 * g);
    }

    #[test]
    fn canonical_absorbs_small_perturbations() {
        let g = 1.0 / 4096.0;
        let mut r = rng::seeded(10);
        for _ in 0..1000 {
            // centre values at least 2^-13 away from every tie point
            let units: f64 = r.random_range(-1000..1000) as f64;
            let base = units * g;
            let eps = r.random_range(-0.49..0.49) * g * 0.5;
            let a = canonical_round(&GmmParams::single(base, 1.0));
            let b = canonical_round(&GmmParams::single(base + eps, 1.0 + eps));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tape_loss_matches_scalar() {
        let mut r = rng::seeded(12);
        let k = 3;
        let n = 20;
        let raw: Vec<f64> = (0..n * 3 * k).map(|_| r.random_range(-2.0..2.0)).collect();
        let res: Vec<i32> = (0..n).map(|i| [-255, 255, 0, 1, -3][i % 5]).collect();
        let mut tape = Tape::new();
        let head = tape.param(Tensor::new(vec![n, 3 * k], raw.clone()).unwrap());
        let l = nll_loss_on_tape(&mut tape, head, &res, k).unwrap();
        let params: Vec<GmmParams> = raw.chunks(3 * k).map(|c| head_to_params(c, k)).collect();
        let oracle = nll_loss(&params, &res).unwrap();
        assert!((tape.value(l).item() - oracle).abs() < 1e-10);
    }

    #[test]
    fn tape_loss_gradient_matches_fd() {
        let mut r = rng::seeded(13);
        let k = 2;
        let n = 6;
        let raw: Vec<f64> = (0..n * 3 * k).map(|_| r.random_range(-1.0..1.0)).collect();
        let res = vec![0, 1, -1, 2, 0, -2];
        let err = crate::autodiff::finite_difference_check(
            |t, p| nll_loss_on_tape(t, p[0], &res, k),
            &[Tensor::new(vec![n, 3 * k], raw).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
