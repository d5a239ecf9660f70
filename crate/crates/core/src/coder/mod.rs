//! Integer arithmetic coding over per-symbol frequency tables.
//!
//! Tables always total [`PROB_TOTAL`] and give every symbol a nonzero slot,
//! so any symbol the model can name is codable. The coder itself lives in
//! [`range`]; [`ac_encode`] / [`ac_decode`] drive it from a table provider.

mod freq;
pub mod range;

pub use freq::{quantize_pmf, FreqTable, MAX_SYMBOLS};
pub use range::{RangeDecoder, RangeEncoder};

use thiserror::Error;

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoderError {
    #[error("{0} symbols exceeds the limit of {MAX_SYMBOLS}")]
    TooManySymbols(usize),
    #[error("invalid probability vector: {0}")]
    InvalidPmf(String),
    #[error("invalid frequency table: {0}")]
    InvalidTable(String),
    #[error("symbol {symbol} at position {position} outside table of {size} symbols")]
    SymbolOutOfRange {
        position: usize,
        symbol: usize,
        size: usize,
    },
    #[error("stream truncated after {0} bytes")]
    Truncated(usize),
    #[error("stream has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("corrupt stream at byte {0}")]
    Corrupt(usize),
}

pub type Result<T> = std::result::Result<T, CoderError>;

/// Encoded symbols. Every byte is payload, so `bit_length == 8 * bytes.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitStream {
    pub bytes: Vec<u8>,
}

impl BitStream {
    pub fn bit_length(&self) -> u64 {
        self.bytes.len() as u64 * 8
    }
}

/// Supplies the table for position `pos`, given every symbol before it.
///
/// Decoding calls the provider with the symbols decoded so far, so a provider
/// that only reads `history` sees identical inputs on both sides.
pub trait TableProvider {
    fn table(&mut self, pos: usize, history: &[usize]) -> FreqTable;
}

impl<F: FnMut(usize, &[usize]) -> FreqTable> TableProvider for F {
    fn table(&mut self, pos: usize, history: &[usize]) -> FreqTable {
        self(pos, history)
    }
}

pub fn ac_encode<P: TableProvider>(symbols: &[usize], mut tables: P) -> Result<BitStream> {
    let mut enc = RangeEncoder::new();
    for (pos, &s) in symbols.iter().enumerate() {
        let t = tables.table(pos, &symbols[..pos]);
        if s >= t.len() {
            return Err(CoderError::SymbolOutOfRange {
                position: pos,
                symbol: s,
                size: t.len(),
            });
        }
        enc.encode(&t, s);
    }
    Ok(BitStream {
        bytes: enc.finish(),
    })
}

pub fn ac_decode<P: TableProvider>(stream: &BitStream, count: usize, mut tables: P) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(&stream.bytes)?;
    let mut out = Vec::with_capacity(count);
    for pos in 0..count {
        let t = tables.table(pos, &out);
        let s = dec.decode(&t)?;
        out.push(s);
    }
    dec.finish()?;
    Ok(out)
}

/// Ideal code length in bits of `symbols` under their tables.
pub fn ideal_bits<P: TableProvider>(symbols: &[usize], mut tables: P) -> f64 {
    let mut bits = 0.0;
    for (pos, &s) in symbols.iter().enumerate() {
        let t = tables.table(pos, &symbols[..pos]);
        bits += t.cost_bits(s);
    }
    bits
}
