//! Blockwise 4-bit NormalFloat quantization.
//!
//! Each block of `block_size` consecutive weights is scaled by its absolute
//! maximum into `[-1, 1]` and every value is rounded to the nearest of 16
//! levels placed at quantiles of a standard normal. Codes are packed two per
//! byte, low nibble first.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// The 16 NF4 levels, strictly increasing, with exact `-1`, `0` and `1`.
#[allow(clippy::excessive_precision)]
pub const NF4_LEVELS: [f64; 16] = [
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
];

const ZERO_CODE: u8 = 7;

/// Decision thresholds between neighbouring levels.
fn midpoints() -> [f64; 15] {
    let mut m = [0.0; 15];
    for (i, v) in m.iter_mut().enumerate() {
        *v = (NF4_LEVELS[i] + NF4_LEVELS[i + 1]) / 2.0;
    }
    m
}

/// Index of the level nearest to `x` (ties go to the lower level).
pub fn nearest_level(x: f64) -> u8 {
    let mids = midpoints();
    mids.partition_point(|&m| x > m) as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeight<F> {
    codes: Vec<u8>,
    block_scales: Vec<F>,
    block_size: usize,
    shape: Vec<usize>,
}

impl<F: Real> QuantizedWeight<F> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn block_scales(&self) -> &[F] {
        &self.block_scales
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unpacked 4-bit code of element `i`.
    pub fn code(&self, i: usize) -> u8 {
        let byte = self.codes[i / 2];
        if i.is_multiple_of(2) {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    pub fn codes(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }

    pub fn packed_bytes(&self) -> &[u8] {
        &self.codes
    }
}

pub fn quantize_nf4<F: Real>(w: &Tensor<F>, block_size: usize) -> Result<QuantizedWeight<F>> {
    if block_size < 2 {
        return Err(Error::Config(format!("NF4 block size must be >= 2, got {block_size}")));
    }
    if w.is_empty() {
        return Err(Error::Input("cannot quantize an empty matrix".into()));
    }
    let data = w.data();
    let mut codes = vec![0u8; data.len().div_ceil(2)];
    let mut scales = Vec::with_capacity(data.len().div_ceil(block_size));
    for (b, block) in data.chunks(block_size).enumerate() {
        let absmax = block.iter().fold(F::zero(), |m, v| m.max(v.abs()));
        scales.push(absmax);
        let scale = absmax.as_f64();
        for (j, &v) in block.iter().enumerate() {
            let code = if scale == 0.0 {
                ZERO_CODE
            } else {
                nearest_level(v.as_f64() / scale)
            };
            let i = b * block_size + j;
            if i.is_multiple_of(2) {
                codes[i / 2] |= code;
            } else {
                codes[i / 2] |= code << 4;
            }
        }
    }
    Ok(QuantizedWeight {
        codes,
        block_scales: scales,
        block_size,
        shape: w.shape().to_vec(),
    })
}

pub fn dequantize_nf4<F: Real>(q: &QuantizedWeight<F>) -> Tensor<F> {
    let n = q.len();
    let data = (0..n)
        .map(|i| F::of(NF4_LEVELS[q.code(i) as usize]) * q.block_scales[i / q.block_size])
        .collect();
    Tensor::from_parts(q.shape.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codebook_shape() {
        assert!(NF4_LEVELS.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(NF4_LEVELS[0], -1.0);
        assert_eq!(NF4_LEVELS[15], 1.0);
        assert_eq!(NF4_LEVELS[ZERO_CODE as usize], 0.0);
    }

    #[test]
    fn nearest_level_hits_levels_exactly() {
        for (i, &l) in NF4_LEVELS.iter().enumerate() {
            assert_eq!(nearest_level(l) as usize, i);
        }
        assert_eq!(nearest_level(-5.0), 0);
        assert_eq!(nearest_level(5.0), 15);
    }

    #[test]
    fn constant_and_zero_blocks_round_trip() {
        let w = Tensor::<f64>::new(vec![2, 4], vec![0.3; 8]).unwrap();
        let q = quantize_nf4(&w, 4).unwrap();
        assert_eq!(dequantize_nf4(&q), w);

        let w = Tensor::<f64>::new(vec![2, 4], vec![-1.7; 8]).unwrap();
        let q = quantize_nf4(&w, 4).unwrap();
        assert_eq!(dequantize_nf4(&q), w);

        let w = Tensor::<f32>::zeros(&[3, 3]);
        let q = quantize_nf4(&w, 4).unwrap();
        assert_eq!(dequantize_nf4(&q), w);
    }

    #[test]
    fn errors() {
        let w = Tensor::<f64>::zeros(&[0, 4]);
        assert!(matches!(quantize_nf4(&w, 64), Err(Error::Input(_))));
        let w = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(quantize_nf4(&w, 1), Err(Error::Config(_))));
    }

    #[test]
    fn ragged_last_block() {
        let w = Tensor::<f64>::new(vec![5], vec![1.0, -0.5, 0.25, 2.0, -3.0]).unwrap();
        let q = quantize_nf4(&w, 2).unwrap();
        assert_eq!(q.block_scales(), &[1.0, 2.0, 3.0]);
        let d = dequantize_nf4(&q);
        assert_eq!(d.data()[4], -3.0);
        assert_eq!(d.data()[3], 2.0);
    }
}
