//! Property tests: every tape primitive against central differences, plus
//! softmax and layer-norm output invariants.

use proptest::prelude::*;
use rand::Rng;
use resc_core::autodiff::gradcheck::{check_with_stencil, Coverage, Stencil};
use resc_core::autodiff::{rng, Result, Tape, Tensor, Var};

const TOL: f64 = 1e-6;
const STEP: f64 = 1e-3;

fn tensor(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Max relative gradient error of `sum(op(params) * w)` for a fixed random `w`.
fn check<F>(seed: u64, params: Vec<Tensor>, op: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut t = Tape::inference();
        let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
        let out = op(&mut t, &vars).unwrap();
        t.value(out).shape().to_vec()
    };
    let w = tensor(&mut rng::seeded_stream(seed, 77), &probe, -1.0, 1.0);
    let graph = |tape: &mut Tape, vars: &[Var]| {
        let out = op(tape, vars)?;
        let wv = tape.constant(w.clone());
        let m = tape.mul(out, wv)?;
        tape.sum(m)
    };
    check_with_stencil(graph, &params, STEP, Coverage::All, Stencil::FivePoint).unwrap().max_rel_error
}

fn pair(seed: u64, shape: &[usize]) -> Vec<Tensor> {
    let mut r = rng::seeded(seed);
    vec![tensor(&mut r, shape, -1.0, 1.0), tensor(&mut r, shape, -1.0, 1.0)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn elementwise_binary(seed in any::<u64>(), n in 1usize..4, m in 1usize..5) {
        let ps = pair(seed, &[n, m]);
        prop_assert!(check(seed, ps.clone(), |t, v| t.add(v[0], v[1])) < TOL);
        prop_assert!(check(seed, ps.clone(), |t, v| t.sub(v[0], v[1])) < TOL);
        prop_assert!(check(seed, ps.clone(), |t, v| t.mul(v[0], v[1])) < TOL);
        let mut r = rng::seeded(seed ^ 1);
        let den = vec![ps[0].clone(), tensor(&mut r, &[n, m], 0.5, 2.0)];
        prop_assert!(check(seed, den, |t, v| t.div(v[0], v[1])) < TOL);
    }

    #[test]
    fn row_broadcasts(seed in any::<u64>(), n in 1usize..4, m in 1usize..5) {
        let mut r = rng::seeded(seed);
        let ps = vec![tensor(&mut r, &[n, m], -1.0, 1.0), tensor(&mut r, &[m], -1.0, 1.0)];
        prop_assert!(check(seed, ps.clone(), |t, v| t.add_row(v[0], v[1])) < TOL);
        prop_assert!(check(seed, ps, |t, v| t.mul_row(v[0], v[1])) < TOL);
    }

    #[test]
    fn elementwise_unary(seed in any::<u64>(), n in 1usize..4, m in 1usize..5) {
        let mut r = rng::seeded(seed);
        let x = vec![tensor(&mut r, &[n, m], -2.0, 2.0)];
        prop_assert!(check(seed, x.clone(), |t, v| t.scale(v[0], -1.7)) < TOL);
        prop_assert!(check(seed, x.clone(), |t, v| t.add_scalar(v[0], 0.3)) < TOL);
        prop_assert!(check(seed, x.clone(), |t, v| t.gelu(v[0])) < TOL);
        prop_assert!(check(seed, x.clone(), |t, v| t.erf(v[0])) < TOL);
        prop_assert!(check(seed, x.clone(), |t, v| t.erfc(v[0])) < TOL);
        prop_assert!(check(seed, x.clone(), |t, v| t.softplus(v[0])) < TOL);
        prop_assert!(check(seed, x.clone(), |t, v| t.exp(v[0])) < TOL);
        let pos = vec![tensor(&mut r, &[n, m], 0.3, 3.0)];
        prop_assert!(check(seed, pos, |t, v| t.log(v[0])) < TOL);
        let away: Vec<f64> = x[0].data().iter().map(|&v| if (v - 0.1).abs() < 0.05 { v + 0.2 } else { v }).collect();
        let away = vec![Tensor::new(vec![n, m], away).unwrap()];
        prop_assert!(check(seed, away, |t, v| t.clamp_min(v[0], 0.1)) < TOL);
    }

    #[test]
    fn matmul_and_reductions(seed in any::<u64>(), n in 1usize..4, k in 1usize..5, m in 1usize..4) {
        let mut r = rng::seeded(seed);
        let ps = vec![tensor(&mut r, &[n, k], -1.0, 1.0), tensor(&mut r, &[k, m], -1.0, 1.0)];
        prop_assert!(check(seed, ps.clone(), |t, v| t.matmul(v[0], v[1])) < TOL);
        prop_assert!(check(seed, ps.clone(), |t, v| t.sum(v[0])) < TOL);
        prop_assert!(check(seed, ps.clone(), |t, v| t.sum_cols(v[0])) < TOL);
        prop_assert!(check(seed, ps, |t, v| t.transpose(v[0])) < TOL);
    }

    #[test]
    fn normalizations(seed in any::<u64>(), n in 1usize..4, m in 3usize..7) {
        let mut r = rng::seeded(seed);
        let x = vec![tensor(&mut r, &[n, m], -2.0, 2.0)];
        prop_assert!(check(seed, x.clone(), |t, v| t.softmax(v[0])) < TOL);
        prop_assert!(check(seed, x, |t, v| t.layer_norm(v[0])) < TOL);
    }

    #[test]
    fn shape_ops(seed in any::<u64>(), n in 2usize..5, m in 2usize..5) {
        let mut r = rng::seeded(seed);
        let ps = vec![tensor(&mut r, &[n, m], -1.0, 1.0), tensor(&mut r, &[1, m], -1.0, 1.0)];
        prop_assert!(check(seed, ps.clone(), |t, v| t.reshape(v[0], &[m, n])) < TOL);
        prop_assert!(check(seed, ps.clone(), |t, v| t.slice_rows(v[0], 1, n - 1)) < TOL);
        prop_assert!(check(seed, ps.clone(), |t, v| t.slice_cols(v[0], 1, m - 1)) < TOL);
        prop_assert!(check(seed, ps.clone(), |t, v| t.concat_rows(&[v[1], v[0], v[1]])) < TOL);
        prop_assert!(check(seed, ps, |t, v| t.embedding(v[0], &[n - 1, 0, n - 1])) < TOL);
    }

    #[test]
    fn conv_and_pool(seed in any::<u64>(), c in 1usize..3, h in 3usize..7, w in 3usize..7, o in 1usize..3) {
        let mut r = rng::seeded(seed);
        let ps = vec![
            tensor(&mut r, &[c, h, w], -1.0, 1.0),
            tensor(&mut r, &[o, c * 9], -1.0, 1.0),
            tensor(&mut r, &[o], -1.0, 1.0),
        ];
        prop_assert!(check(seed, ps.clone(), |t, v| t.conv2d(v[0], v[1], v[2], 3, 2, 1)) < TOL);
        prop_assert!(check(seed, ps.clone(), |t, v| t.adaptive_avg_pool(v[0], 2, 2)) < TOL);
        prop_assert!(check(seed, ps, |t, v| t.adaptive_avg_pool(v[0], 4, 3)) < TOL);
    }

    #[test]
    fn attention(seed in any::<u64>(), n in 1usize..6, prefix in 0usize..4) {
        let mut r = rng::seeded(seed);
        let ps: Vec<Tensor> = (0..3).map(|_| tensor(&mut r, &[n, 4], -1.0, 1.0)).collect();
        let prefix = prefix.min(n);
        prop_assert!(check(seed, ps, |t, v| t.attention(v[0], v[1], v[2], 2, prefix)) < TOL);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), n in 1usize..5, m in 1usize..40) {
        let mut r = rng::seeded(seed);
        let mut t = Tape::inference();
        let x = t.constant(tensor(&mut r, &[n, m], -30.0, 30.0));
        let s = t.softmax(x).unwrap();
        let out = t.value(s);
        for i in 0..n {
            let row = out.row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_moments(seed in any::<u64>(), n in 1usize..5, m in 2usize..64, scale in 0.01f64..100.0) {
        let mut r = rng::seeded(seed);
        let mut t = Tape::inference();
        let x = t.constant(tensor(&mut r, &[n, m], -scale, scale));
        let y = t.layer_norm(x).unwrap();
        let out = t.value(y);
        for i in 0..n {
            let row = out.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            prop_assert!(mean.abs() < 1e-10, "{mean}");
            prop_assert!((var - 1.0).abs() < 1e-8, "{var}");
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut r = rng::seeded(seed);
            let mut t = Tape::new();
            let a = t.param(tensor(&mut r, &[3, 5], -1.0, 1.0));
            let b = t.param(tensor(&mut r, &[5, 4], -1.0, 1.0));
            let m = t.matmul(a, b).unwrap();
            let g = t.gelu(m).unwrap();
            let s = t.softmax(g).unwrap();
            t.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
