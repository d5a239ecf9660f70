//! Range coder round trips and code-length overhead.

use proptest::prelude::*;
use resc_core::coder::{ac_decode, ac_encode, ideal_bits, quantize_pmf, FreqTable};
use resc_core::GmmParams;

fn tables() -> impl Strategy<Value = Vec<FreqTable>> {
    let one = prop_oneof![
        (2usize..600, prop::collection::vec(0.0f64..1.0, 600)).prop_map(|(n, raw)| {
            let raw = &raw[..n];
            let total: f64 = raw.iter().sum::<f64>() + 1e-300;
            quantize_pmf(&raw.iter().map(|v| v / total).collect::<Vec<_>>()).unwrap()
        }),
        (-100.0f64..100.0, 0.001f64..30.0).prop_map(|(m, s)| GmmParams::single(m, s).table()),
    ];
    prop::collection::vec(one, 1..5)
}

/// Symbols that mostly follow the tables but include rare ones.
fn symbols(tables: &[FreqTable], picks: &[(u32, bool)]) -> Vec<usize> {
    picks
        .iter()
        .enumerate()
        .map(|(i, &(u, uniform))| {
            let t = &tables[i % tables.len()];
            if uniform {
                u as usize % t.len()
            } else {
                t.find(u % resc_core::PROB_TOTAL)
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, ..ProptestConfig::default() })]

    #[test]
    fn round_trip(ts in tables(), picks in prop::collection::vec((any::<u32>(), prop::bool::weighted(0.1)), 0..3000)) {
        let syms = symbols(&ts, &picks);
        let provider = |pos: usize, _: &[usize]| ts[pos % ts.len()].clone();
        let stream = ac_encode(&syms, provider).unwrap();
        let back = ac_decode(&stream, syms.len(), provider).unwrap();
        prop_assert_eq!(back, syms);
    }

    #[test]
    fn overhead_within_64_bits(ts in tables(), picks in prop::collection::vec((any::<u32>(), prop::bool::weighted(0.1)), 0..3000)) {
        let syms = symbols(&ts, &picks);
        let provider = |pos: usize, _: &[usize]| ts[pos % ts.len()].clone();
        let stream = ac_encode(&syms, provider).unwrap();
        // oracle: Shannon cost from the raw frequencies
        let oracle: f64 = syms
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let t = &ts[i % ts.len()];
                (resc_core::PROB_TOTAL as f64 / t.freq(s) as f64).log2()
            })
            .sum();
        prop_assert!((ideal_bits(&syms, provider) - oracle).abs() < 1e-6 * oracle.max(1.0));
        prop_assert!(stream.bit_length() as f64 <= oracle + 64.0, "{} > {oracle} + 64", stream.bit_length());
    }

    #[test]
    fn history_dependent_tables(seed in any::<u64>(), n in 0usize..2000) {
        // table depends on the previous symbol, the way the model conditions
        let table_for = |prev: Option<usize>| GmmParams::single(prev.map_or(0.0, |p| p as f64 - 255.0) * 0.5, 3.0).table();
        let provider = |_: usize, h: &[usize]| table_for(h.last().copied());
        let mut state = seed;
        let mut syms = Vec::with_capacity(n);
        for _ in 0..n {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let t = table_for(syms.last().copied());
            syms.push(t.find((state >> 40) as u32 % resc_core::PROB_TOTAL));
        }
        let stream = ac_encode(&syms, provider).unwrap();
        prop_assert_eq!(ac_decode(&stream, n, provider).unwrap(), syms);
    }
}
