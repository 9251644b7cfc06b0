//! Training objective: photometric error plus four regularizers.
//!
//! Per-sample quantities are stored flat with `offsets[r]..offsets[r + 1]`
//! delimiting ray `r`, samples in increasing ray depth.

use serde::{Deserialize, Serialize};

use crate::canonical::Stage;
use crate::error::{Error, Result};
use crate::real::{Real, Vec3};

pub const DEFAULT_TOP_N: usize = 8;
pub const ENTROPY_CLAMP: f64 = 1e-6;
pub const TV_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ptc: f64,
    pub bg: f64,
    pub d_norm: f64,
    pub d_tv: f64,
}

impl LossWeights {
    pub const COARSE: Self = Self {
        ptc: 0.1,
        bg: 0.01,
        d_norm: 0.1,
        d_tv: 1.0,
    };
    pub const FINE: Self = Self {
        ptc: 0.01,
        bg: 0.001,
        d_norm: 0.01,
        d_tv: 1.0,
    };

    pub fn preset(stage: Stage) -> Self {
        match stage {
            Stage::Coarse => Self::COARSE,
            Stage::Fine => Self::FINE,
        }
    }

    /// Preset with the smaller deformation-norm weight used for large motion.
    pub fn large_motion(stage: Stage) -> Self {
        let mut w = Self::preset(stage);
        w.d_norm = match stage {
            Stage::Coarse => 0.01,
            Stage::Fine => 0.001,
        };
        w
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ptc", self.ptc), ("bg", self.bg), ("d_norm", self.d_norm), ("d_tv", self.d_tv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::OutOfRange(format!("loss weight {name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photo: f64,
    pub ptc: f64,
    pub bg: f64,
    pub d_norm: f64,
    pub d_tv: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.photo + w.ptc * self.ptc + w.bg * self.bg + w.d_norm * self.d_norm + w.d_tv * self.d_tv
    }

    pub fn is_finite(&self) -> bool {
        [self.photo, self.ptc, self.bg, self.d_norm, self.d_tv].iter().all(|v| v.is_finite())
    }
}

fn sq_err<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// `(1/|R|) sum_r |C_hat_r - C_r|^2`.
pub fn photometric<T: Real>(pred: &[Vec3<T>], target: &[Vec3<T>]) -> Result<T> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("photometric loss of an empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            expected: pred.len(),
            got: target.len(),
            context: "photometric targets",
        });
    }
    let mut total = T::zero();
    for (p, t) in pred.iter().zip(target) {
        total += sq_err(*p, *t);
    }
    Ok(total / T::lit(pred.len() as f64))
}

pub fn photometric_grad<T: Real>(pred: &[Vec3<T>], target: &[Vec3<T>], scale: T, out: &mut [Vec3<T>]) {
    let s = scale * T::lit(2.0 / pred.len() as f64);
    for ((o, p), t) in out.iter_mut().zip(pred).zip(target) {
        for c in 0..3 {
            o[c] += s * (p[c] - t[c]);
        }
    }
}

/// Indices (relative to the ray) of the `n` largest weights; ties go to the
/// nearer sample.
pub fn top_n(weights: &[impl Real], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Point-color loss: for each ray, mean squared error between the pre-gate
/// colors of its `n_top` heaviest samples and the ray target, then averaged
/// over the rays in the batch. Rays without samples add nothing.
pub fn point_color<T: Real>(
    weights: &[T],
    colors: &[Vec3<T>],
    offsets: &[usize],
    targets: &[Vec3<T>],
    n_top: usize,
) -> T {
    let rays = targets.len();
    let mut total = T::zero();
    for r in 0..rays {
        let (a, b) = (offsets[r], offsets[r + 1]);
        if a == b {
            continue;
        }
        let sel = top_n(&weights[a..b], n_top);
        let mut s = T::zero();
        for &k in &sel {
            s += sq_err(colors[a + k], targets[r]);
        }
        total += s / T::lit(sel.len() as f64);
    }
    total / T::lit(rays.max(1) as f64)
}

pub fn point_color_grad<T: Real>(
    weights: &[T],
    colors: &[Vec3<T>],
    offsets: &[usize],
    targets: &[Vec3<T>],
    n_top: usize,
    scale: T,
    out: &mut [Vec3<T>],
) {
    let rays = targets.len();
    for r in 0..rays {
        let (a, b) = (offsets[r], offsets[r + 1]);
        if a == b {
            continue;
        }
        let sel = top_n(&weights[a..b], n_top);
        let s = scale * T::lit(2.0 / (sel.len() * rays) as f64);
        for &k in &sel {
            for c in 0..3 {
                out[a + k][c] += s * (colors[a + k][c] - targets[r][c]);
            }
        }
    }
}

fn clamp_t<T: Real>(t: T) -> (T, bool) {
    let lo = T::lit(ENTROPY_CLAMP);
    let hi = T::one() - lo;
    if t < lo {
        (lo, true)
    } else if t > hi {
        (hi, true)
    } else {
        (t, false)
    }
}

/// Mean binary entropy of the final transmittance.
pub fn background_entropy<T: Real>(t_final: &[T]) -> T {
    let mut total = T::zero();
    for &t in t_final {
        let (t, _) = clamp_t(t);
        total -= t * t.ln() + (T::one() - t) * (T::one() - t).ln();
    }
    total / T::lit(t_final.len().max(1) as f64)
}

/// Zero where the clamp is active.
pub fn background_entropy_grad<T: Real>(t_final: &[T], scale: T, out: &mut [T]) {
    let s = scale / T::lit(t_final.len().max(1) as f64);
    for (o, &t) in out.iter_mut().zip(t_final) {
        let (tc, clamped) = clamp_t(t);
        if !clamped {
            *o += s * ((T::one() - tc) / tc).ln();
        }
    }
}

/// `(1/|R|) sum_r sum_k |dp_k|_1`.
pub fn deformation_norm<T: Real>(delta: &[Vec3<T>], rays: usize) -> T {
    let mut total = T::zero();
    for d in delta {
        total += d[0].abs() + d[1].abs() + d[2].abs();
    }
    total / T::lit(rays.max(1) as f64)
}

#[inline]
fn sign0<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Subgradient with `sign(0) = 0`.
pub fn deformation_norm_grad<T: Real>(delta: &[Vec3<T>], rays: usize, scale: T, out: &mut [Vec3<T>]) {
    let s = scale / T::lit(rays.max(1) as f64);
    for (o, d) in out.iter_mut().zip(delta) {
        for c in 0..3 {
            o[c] += s * sign0(d[c]);
        }
    }
}
