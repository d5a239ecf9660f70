//! 64-bit range coder with carry propagation and byte-wise renormalization.
//!
//! The encoder keeps a 64-bit window of the code value in `low` plus one
//! carry bit. Bytes leave the window from the top; a run of `0xFF` bytes is
//! held back until it is known whether a carry will turn it into zeros.
//! After the last symbol a single byte pins a value inside the final
//! interval, so a stream costs at most 8 bits beyond its ideal length.

use super::{CoderError, FreqTable, Result, PROB_BITS};

const BOTTOM: u64 = 1 << 56;
const WINDOW_MASK: u128 = (1u128 << 64) - 1;
const FF_THRESHOLD: u128 = 0xFFu128 << 56;
/// Zero bytes the decoder reads past the end of a well-formed stream.
const TAIL_PAD: usize = 7;

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: Option<u8>,
    pending: usize,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            cache: None,
            pending: 0,
            out: Vec::new(),
        }
    }

    /// Narrows the interval to `symbol`'s slot. The caller guarantees
    /// `symbol < table.len()`.
    #[inline]
    pub fn encode(&mut self, table: &FreqTable, symbol: usize) {
        let r = self.range >> PROB_BITS;
        self.low += r as u128 * table.cum(symbol) as u128;
        self.range = r * table.freq(symbol) as u64;
        while self.range < BOTTOM {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if self.low < FF_THRESHOLD || self.low > WINDOW_MASK {
            let carry = (self.low >> 64) as u8;
            if let Some(c) = self.cache {
                self.out.push(c.wrapping_add(carry));
            } else {
                debug_assert_eq!(carry, 0, "carry out of the first byte");
            }
            for _ in 0..self.pending {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = Some(((self.low >> 56) & 0xFF) as u8);
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & WINDOW_MASK;
    }

    /// Bytes emitted so far, counting held-back ones.
    pub fn bytes_so_far(&self) -> usize {
        self.out.len() + self.pending + usize::from(self.cache.is_some())
    }

    pub fn finish(mut self) -> Vec<u8> {
        // smallest multiple of 2^56 inside [low, low + range)
        let mask = (BOTTOM - 1) as u128;
        self.low = (self.low + mask) & !mask;
        self.shift_low();
        if let Some(c) = self.cache {
            self.out.push(c);
        }
        self.out.extend(std::iter::repeat_n(0xFF, self.pending));
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.is_empty() {
            return Err(CoderError::Truncated(0));
        }
        let mut dec = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u64::MAX,
        };
        for _ in 0..8 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u64;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        if self.pos > self.data.len() + TAIL_PAD {
            return Err(CoderError::Truncated(self.data.len()));
        }
        Ok(b)
    }

    #[inline]
    pub fn decode(&mut self, table: &FreqTable) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let target = self.code / r;
        if target >= super::PROB_TOTAL as u64 {
            return Err(CoderError::Corrupt(self.pos.min(self.data.len())));
        }
        let s = table.find(target as u32);
        self.code -= r * table.cum(s) as u64;
        self.range = r * table.freq(s) as u64;
        while self.range < BOTTOM {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u64;
        }
        Ok(s)
    }

    /// Checks that the stream ended exactly where the encoder stopped.
    pub fn finish(self) -> Result<()> {
        let consumed = self.pos.saturating_sub(TAIL_PAD);
        match consumed.cmp(&self.data.len()) {
            std::cmp::Ordering::Equal => Ok(()),
            std::cmp::Ordering::Less => Err(CoderError::TrailingBytes(self.data.len() - consumed)),
            std::cmp::Ordering::Greater => Err(CoderError::Truncated(self.data.len())),
        }
    }
}
