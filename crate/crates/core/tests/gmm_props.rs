//! Mixture PMF, quantization and loss properties against independent oracles.

use proptest::prelude::*;
use resc_core::autodiff::gradcheck::{check_with_stencil, Coverage, Stencil};
use resc_core::autodiff::Tensor;
use resc_core::coder::quantize_pmf;
use resc_core::gmm::{bin_probability, discretized_pmf, nll_loss, nll_loss_on_tape, symbol_of};
use resc_core::{canonical_round, GmmParams, ALPHABET, PROB_TOTAL};

/// Composite Simpson integral of the mixture density over `[a, b]`.
fn simpson_mass(p: &GmmParams, a: f64, b: f64) -> f64 {
    let n = 200;
    let h = (b - a) / n as f64;
    let density = |x: f64| -> f64 {
        (0..p.components())
            .map(|k| {
                let z = (x - p.means[k]) / p.stds[k];
                p.weights[k] * (-0.5 * z * z).exp() / (p.stds[k] * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum()
    };
    let mut s = density(a) + density(b);
    for i in 1..n {
        s += density(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn mixture() -> impl Strategy<Value = GmmParams> {
    (1usize..6).prop_flat_map(|k| {
        (
            prop::collection::vec(0.05f64..1.0, k),
            prop::collection::vec(-200.0f64..200.0, k),
            prop::collection::vec(0.5f64..40.0, k),
        )
            .prop_map(|(w, m, s)| {
                let total: f64 = w.iter().sum();
                GmmParams::new(w.iter().map(|v| v / total).collect(), m, s).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn pmf_is_normalized(p in mixture()) {
        let pmf = discretized_pmf(&p);
        prop_assert_eq!(pmf.len(), ALPHABET);
        prop_assert!(pmf.iter().all(|&v| v >= 0.0));
        prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pmf_matches_numeric_integration(p in mixture(), r in -254i32..255) {
        let pmf = discretized_pmf(&p);
        let oracle = simpson_mass(&p, r as f64 - 0.5, r as f64 + 0.5);
        prop_assert!((pmf[symbol_of(r)] - oracle).abs() < 1e-9, "{} vs {oracle}", pmf[symbol_of(r)]);
        prop_assert!((bin_probability(&p, r) - pmf[symbol_of(r)]).abs() < 1e-12);
    }

    #[test]
    fn mean_shift_moves_argmax(mu in -200.0f64..200.0, sigma in 0.3f64..10.0) {
        let argmax = |p: &GmmParams| {
            let pmf = discretized_pmf(p);
            (0..pmf.len()).max_by(|&a, &b| pmf[a].partial_cmp(&pmf[b]).unwrap().then(b.cmp(&a))).unwrap()
        };
        // keep the mode off a bin edge, where the argmax is a tie
        let mu = if (mu - mu.floor() - 0.5).abs() < 0.02 { mu + 0.1 } else { mu };
        let a = argmax(&GmmParams::single(mu, sigma));
        let b = argmax(&GmmParams::single(mu + 1.0, sigma));
        prop_assert_eq!(b, a + 1);
    }

    #[test]
    fn quantization_sums_and_covers(p in mixture()) {
        let t = quantize_pmf(&discretized_pmf(&p)).unwrap();
        prop_assert_eq!(t.len(), ALPHABET);
        prop_assert_eq!(t.freqs().iter().map(|&f| f as u64).sum::<u64>(), PROB_TOTAL as u64);
        prop_assert!(t.freqs().iter().all(|&f| f >= 1));
    }

    #[test]
    fn quantization_is_permutation_equivariant(
        raw in prop::collection::vec(1.0f64..2.0, 2..64),
        keys in prop::collection::vec(any::<u64>(), 64),
    ) {
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut perm: Vec<usize> = (0..probs.len()).collect();
        perm.sort_by_key(|&i| (keys[i], i));
        let permuted: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
        let base = quantize_pmf(&probs).unwrap();
        let moved = quantize_pmf(&permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(moved.freq(j), base.freq(i));
        }
    }

    #[test]
    fn canonical_tables_are_deterministic(p in mixture(), eps in -1e-7f64..1e-7) {
        let c = canonical_round(&p);
        prop_assert_eq!(canonical_round(&c), c.clone());
        prop_assert_eq!(c.table(), canonical_round(&p).table());
        prop_assert!((c.weights.iter().sum::<f64>() - 1.0).abs() == 0.0);
        let nudged = GmmParams {
            weights: p.weights.clone(),
            means: p.means.iter().map(|m| m + eps).collect(),
            stds: p.stds.clone(),
        };
        // equal canonical parameters always give equal tables
        let cn = canonical_round(&nudged);
        if cn == c {
            prop_assert_eq!(cn.table(), c.table());
        }
    }

    #[test]
    fn loss_is_negative_log_of_pmf(p in mixture(), rs in prop::collection::vec(-255i32..=255, 1..8)) {
        let params = vec![p.clone(); rs.len()];
        let loss = nll_loss(&params, &rs).unwrap();
        let pmf = discretized_pmf(&p);
        let oracle: f64 = rs.iter().map(|&r| -pmf[symbol_of(r)].max(1e-9).ln()).sum();
        prop_assert!((loss - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
    }

    #[test]
    fn tape_loss_matches_scalar_loss_in_the_tails(p in mixture(), rs in prop::collection::vec(-255i32..=255, 1..8)) {
        use resc_core::autodiff::Tape;
        let k = p.components();
        let mut raw = Vec::new();
        for _ in &rs {
            raw.extend(p.weights.iter().map(|w| w.ln()));
            raw.extend(&p.means);
            // inverse softplus
            raw.extend(p.stds.iter().map(|s| s + (-(-s).exp()).ln_1p()));
        }
        let mut t = Tape::inference();
        let head = t.constant(Tensor::new(vec![rs.len(), 3 * k], raw).unwrap());
        let l = nll_loss_on_tape(&mut t, head, &rs, k).unwrap();
        let tape = t.value(l).item();
        let scalar = nll_loss(&vec![p; rs.len()], &rs).unwrap();
        prop_assert!((tape - scalar).abs() <= 1e-9 * scalar.abs().max(1.0), "{tape} vs {scalar}");
    }

    #[test]
    fn tape_loss_gradient(seed in any::<u64>(), k in 1usize..4, rs in prop::collection::vec(-255i32..=255, 1..5)) {
        use rand::Rng;
        let mut r = resc_core::autodiff::rng::seeded(seed);
        let n = rs.len();
        let mut raw = Vec::with_capacity(n * 3 * k);
        for _ in 0..n {
            raw.extend((0..k).map(|_| r.random_range(-1.0..1.0)));
            raw.extend((0..k).map(|_| r.random_range(-15.0..15.0)));
            raw.extend((0..k).map(|_| r.random_range(1.0..3.0)));
        }
        let head = Tensor::new(vec![n, 3 * k], raw).unwrap();
        let report = check_with_stencil(
            |t, v| {
                let l = nll_loss_on_tape(t, v[0], &rs, k)?;
                t.scale(l, 1.0 / n as f64)
            },
            &[head],
            1e-3,
            Coverage::All,
            Stencil::FivePoint,
        )
        .unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }
}
