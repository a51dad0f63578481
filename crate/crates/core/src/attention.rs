//! The attention query: turn a CAM into an integer datastore key.
//!
//! `normalize -> threshold(tau) -> flatten (row-major) -> bits to integer`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cam::{minmax_normalize, Cam};
use crate::error::{Error, Result};

pub const MAX_KEY_BITS: usize = 64;

/// Which end of the flattened bit vector maps to the least significant bit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitOrder {
    /// Bit `i` of the flattened vector contributes `2^i`.
    #[default]
    Little,
    /// Bit `i` contributes `2^(L-1-i)`.
    Big,
}

impl BitOrder {
    pub fn code(self) -> u8 {
        match self {
            BitOrder::Little => 0,
            BitOrder::Big => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BitOrder::Little),
            1 => Some(BitOrder::Big),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcmlConfig {
    tau: f32,
    grid_h: usize,
    grid_w: usize,
    bit_order: BitOrder,
}

impl GcmlConfig {
    pub fn new(tau: f32, grid_h: usize, grid_w: usize, bit_order: BitOrder) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidConfig(format!("tau {tau} outside [0, 1]")));
        }
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::InvalidConfig(format!("grid {grid_h}x{grid_w} is empty")));
        }
        let bits = grid_h.saturating_mul(grid_w);
        if bits > MAX_KEY_BITS {
            return Err(Error::InvalidConfig(format!(
                "grid {grid_h}x{grid_w} needs {bits} key bits; at most {MAX_KEY_BITS} are supported"
            )));
        }
        Ok(Self { tau, grid_h, grid_w, bit_order })
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn bit_order(&self) -> BitOrder {
        self.bit_order
    }

    /// Key length `L = grid_h * grid_w`.
    pub fn key_bits(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Number of distinct keys, `2^L`, as a float (exact for every L ≤ 64).
    pub fn key_space(&self) -> f64 {
        2f64.powi(self.key_bits() as i32)
    }

    pub fn with_tau(self, tau: f32) -> Result<Self> {
        Self::new(tau, self.grid_h, self.grid_w, self.bit_order)
    }

    /// Reshapes the grid while keeping `L` fixed.
    pub fn with_grid(self, grid_h: usize, grid_w: usize) -> Result<Self> {
        if grid_h * grid_w != self.key_bits() {
            return Err(Error::ConfigMismatch(format!(
                "grid {grid_h}x{grid_w} has {} cells but the key length is {}",
                grid_h * grid_w,
                self.key_bits()
            )));
        }
        Self::new(self.tau, grid_h, grid_w, self.bit_order)
    }

    pub fn key_fits(&self, key: BitKey) -> bool {
        self.key_bits() == 64 || key.0 >> self.key_bits() == 0
    }
}

/// Thresholded grid of activated cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BitGrid {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BitKey(pub u64);

impl BitKey {
    pub fn value(self) -> u64 {
        self.0
    }

    pub fn count_ones(self) -> u32 {
        self.0.count_ones()
    }
}

impl fmt::Display for BitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for BitKey {
    fn from(v: u64) -> Self {
        BitKey(v)
    }
}

/// Sets a cell iff its value is `>= tau`. Input must already be in `[0, 1]`.
pub fn threshold(m: &Cam, tau: f32) -> Result<BitGrid> {
    if let Some(v) = m.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidValue(format!("value {v} outside [0, 1]; normalize the map before thresholding")));
    }
    let tau = f64::from(tau);
    Ok(BitGrid { h: m.h, w: m.w, bits: m.values.iter().map(|&v| v >= tau).collect() })
}

/// Row-major flattening.
pub fn flatten_bits(g: &BitGrid) -> Vec<bool> {
    g.bits.clone()
}

pub fn unflatten_bits(bits: &[bool], h: usize, w: usize) -> Result<BitGrid> {
    if bits.len() != h * w {
        return Err(Error::InvalidShape(format!("{} bits cannot fill a {h}x{w} grid", bits.len())));
    }
    Ok(BitGrid { h, w, bits: bits.to_vec() })
}

pub fn key_from_bits(bits: &[bool], order: BitOrder) -> Result<BitKey> {
    let len = bits.len();
    if len > MAX_KEY_BITS {
        return Err(Error::InvalidValue(format!("{len} bits exceed the {MAX_KEY_BITS}-bit key")));
    }
    let key = bits.iter().enumerate().filter(|(_, &b)| b).fold(0u64, |acc, (i, _)| {
        let shift = match order {
            BitOrder::Little => i,
            BitOrder::Big => len - 1 - i,
        };
        acc | (1u64 << shift)
    });
    Ok(BitKey(key))
}

/// Inverse of [`key_from_bits`] for a known length.
pub fn bits_from_key(key: BitKey, len: usize, order: BitOrder) -> Result<Vec<bool>> {
    if len > MAX_KEY_BITS {
        return Err(Error::InvalidValue(format!("{len} bits exceed the {MAX_KEY_BITS}-bit key")));
    }
    if len < 64 && key.0 >> len != 0 {
        return Err(Error::InvalidValue(format!("key {key} does not fit in {len} bits")));
    }
    Ok((0..len)
        .map(|i| {
            let shift = match order {
                BitOrder::Little => i,
                BitOrder::Big => len - 1 - i,
            };
            key.0 >> shift & 1 == 1
        })
        .collect())
}

/// Key for a map that is already min-max normalized.
pub fn key_from_normalized(normalized: &Cam, cfg: &GcmlConfig) -> Result<BitKey> {
    check_grid(normalized, cfg)?;
    let grid = threshold(normalized, cfg.tau)?;
    key_from_bits(&flatten_bits(&grid), cfg.bit_order)
}

pub fn attention_key(m: &Cam, cfg: &GcmlConfig) -> Result<BitKey> {
    check_grid(m, cfg)?;
    key_from_normalized(&minmax_normalize(m), cfg)
}

fn check_grid(m: &Cam, cfg: &GcmlConfig) -> Result<()> {
    if (m.h, m.w) != cfg.grid() {
        return Err(Error::DimensionMismatch(format!(
            "map is {}x{} but the attention grid is {}x{}",
            m.h, m.w, cfg.grid_h, cfg.grid_w
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(h: usize, w: usize, v: &[f64]) -> Cam {
        Cam::new(h, w, v.to_vec(), 0).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let g = threshold(&cam(2, 2, &[0.67, 0.0, 0.0, 1.0]), 0.5).unwrap();
        assert_eq!(g.bits, vec![true, false, false, true]);
        let g = threshold(&cam(2, 2, &[0.67, 0.0, 0.0, 1.0]), 0.0).unwrap();
        assert!(g.bits.iter().all(|&b| b));
        let g = threshold(&cam(2, 2, &[0.3, 1.0, 0.0, 1.0]), 1.0).unwrap();
        assert_eq!(g.bits, vec![false, true, false, true]);
    }

    #[test]
    fn threshold_rejects_unnormalized() {
        assert!(matches!(threshold(&cam(1, 2, &[0.5, 1.5]), 0.5), Err(Error::InvalidValue(_))));
        assert!(threshold(&cam(1, 2, &[-0.1, 0.5]), 0.5).is_err());
    }

    #[test]
    fn flatten_examples() {
        let g = BitGrid { h: 2, w: 2, bits: vec![true, false, false, true] };
        assert_eq!(flatten_bits(&g), vec![true, false, false, true]);
        let z = BitGrid { h: 3, w: 2, bits: vec![false; 6] };
        assert_eq!(flatten_bits(&z), vec![false; 6]);
        assert_eq!(unflatten_bits(&flatten_bits(&g), 2, 2).unwrap(), g);
        assert!(unflatten_bits(&[true; 3], 2, 2).is_err());
    }

    #[test]
    fn key_examples() {
        let mut b = vec![false; 16];
        b[4] = true;
        b[7] = true;
        assert_eq!(key_from_bits(&b, BitOrder::Little).unwrap(), BitKey(144));
        assert_eq!(key_from_bits(&[false; 16], BitOrder::Little).unwrap(), BitKey(0));
        assert_eq!(key_from_bits(&[true; 16], BitOrder::Little).unwrap(), BitKey(65535));
        assert_eq!(key_from_bits(&[true; 16], BitOrder::Big).unwrap(), BitKey(65535));
        // Big order reads the vector as a binary numeral, most significant first.
        assert_eq!(key_from_bits(&[true, false, false, true, true], BitOrder::Big).unwrap(), BitKey(0b10011));
        assert_eq!(key_from_bits(&[true; 64], BitOrder::Little).unwrap(), BitKey(u64::MAX));
        assert!(key_from_bits(&[false; 65], BitOrder::Little).is_err());
    }

    #[test]
    fn bits_from_key_inverts() {
        for order in [BitOrder::Little, BitOrder::Big] {
            let bits = bits_from_key(BitKey(144), 16, order).unwrap();
            assert_eq!(key_from_bits(&bits, order).unwrap(), BitKey(144));
        }
        assert!(bits_from_key(BitKey(16), 4, BitOrder::Little).is_err());
    }

    #[test]
    fn attention_key_example() {
        let cfg = GcmlConfig::new(0.5, 2, 2, BitOrder::Little).unwrap();
        assert_eq!(attention_key(&cam(2, 2, &[2.0, 0.0, 0.0, 3.0]), &cfg).unwrap(), BitKey(9));
        for tau in [0.01, 0.5, 1.0] {
            let cfg = cfg.with_tau(tau).unwrap();
            assert_eq!(attention_key(&cam(2, 2, &[5.0; 4]), &cfg).unwrap(), BitKey(0));
        }
        let bad = GcmlConfig::new(0.5, 4, 4, BitOrder::Little).unwrap();
        assert!(matches!(attention_key(&cam(2, 2, &[1.0; 4]), &bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn attention_key_matches_stepwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
            let tau = rng.random_range(0.0f32..=1.0);
            let order = if rng.random_bool(0.5) { BitOrder::Little } else { BitOrder::Big };
            let cfg = GcmlConfig::new(tau, h, w, order).unwrap();

            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut expected = 0u64;
            for (i, &x) in v.iter().enumerate() {
                let n = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
                if n >= tau as f64 {
                    let pos = if order == BitOrder::Little { i } else { h * w - 1 - i };
                    expected += 1u64 << pos;
                }
            }
            assert_eq!(attention_key(&cam(h, w, &v), &cfg).unwrap(), BitKey(expected));
        }
    }

    #[test]
    fn config_limits() {
        assert!(GcmlConfig::new(0.5, 8, 8, BitOrder::Little).is_ok());
        assert!(matches!(GcmlConfig::new(0.5, 9, 8, BitOrder::Little), Err(Error::InvalidConfig(_))));
        assert!(GcmlConfig::new(1.5, 2, 2, BitOrder::Little).is_err());
        assert!(GcmlConfig::new(-0.1, 2, 2, BitOrder::Little).is_err());
        let cfg = GcmlConfig::new(0.5, 4, 4, BitOrder::Little).unwrap();
        assert!(cfg.key_fits(BitKey(65535)));
        assert!(!cfg.key_fits(BitKey(65536)));
        assert_eq!(cfg.with_grid(2, 8).unwrap().grid(), (2, 8));
        assert!(cfg.with_grid(3, 5).is_err());
        let full = GcmlConfig::new(0.5, 8, 8, BitOrder::Little).unwrap();
        assert!(full.key_fits(BitKey(u64::MAX)));
    }
}
