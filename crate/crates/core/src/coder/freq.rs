use super::{CoderError, Result, PROB_TOTAL};
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

/// Largest alphabet for which every symbol can keep a frequency of at least 1.
pub const MAX_SYMBOLS: usize = 1 << 15;

/// Integer PMF with total [`PROB_TOTAL`] and every entry at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl FreqTable {
    pub fn new(freqs: Vec<u32>) -> Result<Self> {
        if freqs.is_empty() || freqs.len() > MAX_SYMBOLS {
            return Err(CoderError::InvalidTable(format!("{} symbols", freqs.len())));
        }
        if let Some(i) = freqs.iter().position(|&f| f == 0) {
            return Err(CoderError::InvalidTable(format!("symbol {i} has zero frequency")));
        }
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        if total != PROB_TOTAL as u64 {
            return Err(CoderError::InvalidTable(format!("total {total} != {PROB_TOTAL}")));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Ok(FreqTable { freqs, cum })
    }

    /// Equal frequencies up to one unit; the remainder goes to the lowest
    /// symbols.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_SYMBOLS {
            return Err(CoderError::TooManySymbols(n));
        }
        let base = PROB_TOTAL / n as u32;
        let extra = (PROB_TOTAL % n as u32) as usize;
        Self::new((0..n).map(|i| base + u32::from(i < extra)).collect())
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.freqs[s]
    }

    pub fn cum(&self, s: usize) -> u32 {
        self.cum[s]
    }

    /// Symbol whose slot `[cum, cum + freq)` contains `target`.
    pub fn find(&self, target: u32) -> usize {
        // first cum strictly greater than target, minus one
        self.cum.partition_point(|&c| c <= target) - 1
    }

    pub fn cost_bits(&self, s: usize) -> f64 {
        -(self.freqs[s] as f64 / PROB_TOTAL as f64).log2()
    }
}

/// Rounds probabilities to a [`FreqTable`].
///
/// Largest-remainder rounding to the total, then every zero entry is raised
/// to 1 with the deficit taken one unit at a time from the current largest
/// entry. Ties go to the lowest symbol index throughout.
pub fn quantize_pmf(probs: &[f64]) -> Result<FreqTable> {
    let n = probs.len();
    if n > MAX_SYMBOLS {
        return Err(CoderError::TooManySymbols(n));
    }
    if n == 0 {
        return Err(CoderError::InvalidPmf("empty".into()));
    }
    let mut sum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if !(p >= 0.0 && p.is_finite()) {
            return Err(CoderError::InvalidPmf(format!("probability {p} at {i}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(CoderError::InvalidPmf(format!("sums to {sum}")));
    }

    let total = PROB_TOTAL as f64;
    let mut freqs = Vec::with_capacity(n);
    let mut rems = Vec::with_capacity(n);
    let mut assigned: i64 = 0;
    for &p in probs {
        let scaled = p * total;
        let f = scaled.floor();
        freqs.push(f as i64);
        rems.push(scaled - f);
        assigned += f as i64;
    }
    let mut deficit = PROB_TOTAL as i64 - assigned;

    let by_rem_desc = |a: &usize, b: &usize| -> Ordering {
        rems[*b].partial_cmp(&rems[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b))
    };
    if deficit > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        let take = (deficit as usize).min(n);
        if take < n {
            order.select_nth_unstable_by(take, by_rem_desc);
        }
        while deficit > 0 {
            for &i in &order[..take.min(deficit as usize)] {
                freqs[i] += 1;
                deficit -= 1;
            }
        }
    } else if deficit < 0 {
        // only reachable when the input sums slightly above 1
        let mut order: Vec<usize> = (0..n).filter(|&i| freqs[i] > 0).collect();
        order.sort_by(|a, b| rems[*a].partial_cmp(&rems[*b]).unwrap_or(Ordering::Equal).then(a.cmp(b)));
        let mut k = 0;
        while deficit < 0 {
            let i = order[k % order.len()];
            if freqs[i] > 0 {
                freqs[i] -= 1;
                deficit += 1;
            }
            k += 1;
        }
    }

    let zeros = freqs.iter().filter(|&&f| f == 0).count();
    if zeros > 0 {
        let mut heap: BinaryHeap<(i64, Reverse<usize>)> = freqs
            .iter()
            .enumerate()
            .filter(|(_, &f)| f > 1)
            .map(|(i, &f)| (f, Reverse(i)))
            .collect();
        for f in freqs.iter_mut().filter(|f| **f == 0) {
            *f = 1;
        }
        for _ in 0..zeros {
            let (f, Reverse(i)) = heap.pop().expect("total exceeds symbol count");
            freqs[i] = f - 1;
            if f - 1 > 1 {
                heap.push((f - 1, Reverse(i)));
            }
        }
    }
    FreqTable::new(freqs.into_iter().map(|f| f as u32).collect())
}
