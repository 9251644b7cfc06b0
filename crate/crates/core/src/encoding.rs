//! Frequency encoding of low-dimensional inputs.

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// `[x, sin(2^0 x), cos(2^0 x), ..., sin(2^(L-1) x), cos(2^(L-1) x)]`.
///
/// Inputs are expected pre-normalized (positions to `[-1, 1]`, time to
/// `[0, 1]`), so the frequencies carry no extra factor of pi. The raw input is
/// always included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEnc {
    pub num_freqs: usize,
}

impl PosEnc {
    pub const fn new(num_freqs: usize) -> Self {
        Self { num_freqs }
    }

    pub const fn out_dim(&self, d: usize) -> usize {
        d * (1 + 2 * self.num_freqs)
    }

    pub fn encode<T: Real>(&self, x: &[T], out: &mut [T]) {
        let d = x.len();
        debug_assert_eq!(out.len(), self.out_dim(d));
        out[..d].copy_from_slice(x);
        let mut freq = T::one();
        for k in 0..self.num_freqs {
            let base = d * (1 + 2 * k);
            for (i, &xi) in x.iter().enumerate() {
                let (s, c) = (xi * freq).sin_cos();
                out[base + i] = s;
                out[base + d + i] = c;
            }
            freq = freq + freq;
        }
    }

    pub fn encode_vec<T: Real>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_dim(x.len())];
        self.encode(x, &mut out);
        out
    }

    /// Adds `upstream . d encode / d x` into `dx`.
    pub fn backward<T: Real>(&self, x: &[T], upstream: &[T], dx: &mut [T]) {
        let d = x.len();
        for i in 0..d {
            dx[i] += upstream[i];
        }
        let mut freq = T::one();
        for k in 0..self.num_freqs {
            let base = d * (1 + 2 * k);
            for (i, &xi) in x.iter().enumerate() {
                let (s, c) = (xi * freq).sin_cos();
                dx[i] += freq * (c * upstream[base + i] - s * upstream[base + d + i]);
            }
            freq = freq + freq;
        }
    }
}
