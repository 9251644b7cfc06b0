//! Pinhole rays, uniform sampling inside a box, and alpha compositing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Aabb;
use crate::real::{dot3, Real, Vec3};

/// Pinhole camera. Looks down its local -z axis with +y up; pixel `(i, j)`
/// has its center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major camera-to-world transform.
    pub c2w: [[f64; 4]; 4],
}

pub fn check_pose(c2w: &[[f64; 4]; 4]) -> Result<()> {
    if c2w.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPose("non-finite entry".into()));
    }
    for r in 0..3 {
        for s in 0..3 {
            let dot: f64 = (0..3).map(|k| c2w[k][r] * c2w[k][s]).sum();
            let want = if r == s { 1.0 } else { 0.0 };
            if (dot - want).abs() > 1e-4 {
                return Err(Error::InvalidPose(format!(
                    "rotation columns {r},{s} have dot product {dot:.6}, expected {want}"
                )));
            }
        }
    }
    let last = c2w[3];
    if last[0].abs() > 1e-4 || last[1].abs() > 1e-4 || last[2].abs() > 1e-4 || (last[3] - 1.0).abs() > 1e-4 {
        return Err(Error::InvalidPose(format!("bottom row {last:?} is not [0, 0, 0, 1]")));
    }
    Ok(())
}

impl Camera {
    pub fn new(width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64, c2w: [[f64; 4]; 4]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image size {width}x{height}")));
        }
        if !(fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidArgument(format!("focal lengths ({fx}, {fy}) must be positive")));
        }
        check_pose(&c2w)?;
        Ok(Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            c2w,
        })
    }

    /// Principal point at the image center, square pixels.
    pub fn from_fov(width: usize, height: usize, camera_angle_x: f64, c2w: [[f64; 4]; 4]) -> Result<Self> {
        if !(camera_angle_x > 0.0 && camera_angle_x < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!("camera_angle_x {camera_angle_x}")));
        }
        let f = 0.5 * width as f64 / (0.5 * camera_angle_x).tan();
        Self::new(width, height, f, f, 0.5 * width as f64, 0.5 * height as f64, c2w)
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// World ray through continuous image coordinates `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
        let dc = [(u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0];
        let mut d = [0.0; 3];
        for (r, out) in d.iter_mut().enumerate() {
            *out = (0..3).map(|k| self.c2w[r][k] * dc[k]).sum();
        }
        let n = dot3(d, d).sqrt();
        (self.origin(), [d[0] / n, d[1] / n, d[2] / n])
    }

    pub fn pixel_ray(&self, i: usize, j: usize) -> ([f64; 3], [f64; 3]) {
        self.ray_through(i as f64 + 0.5, j as f64 + 0.5)
    }

    /// Image coordinates of a world point, `None` when it is behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let o = self.origin();
        let rel = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
        // Inverse rotation is the transpose.
        let mut q = [0.0; 3];
        for (c, out) in q.iter_mut().enumerate() {
            *out = (0..3).map(|k| self.c2w[k][c] * rel[k]).sum();
        }
        if q[2] >= 0.0 {
            return None;
        }
        let z = -q[2];
        Some((self.cx + self.fx * q[0] / z, self.cy - self.fy * q[1] / z))
    }

    pub fn rays(&self, time: f64) -> Vec<Ray<f64>> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for j in 0..self.height {
            for i in 0..self.width {
                let (o, d) = self.pixel_ray(i, j);
                out.push(Ray::new(o, d, time));
            }
        }
        out
    }
}

/// `r(w) = o + w d` at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T = f32> {
    pub o: Vec3<T>,
    pub d: Vec3<T>,
    pub t: T,
    /// Target color; zero for inference rays.
    pub target: Vec3<T>,
}

impl<T: Real> Ray<T> {
    pub fn new(o: [f64; 3], d: [f64; 3], t: f64) -> Self {
        Self {
            o: o.map(T::lit),
            d: d.map(T::lit),
            t: T::lit(t),
            target: [T::zero(); 3],
        }
    }

    pub fn with_target(mut self, target: [f64; 3]) -> Self {
        self.target = target.map(T::lit);
        self
    }

    #[inline]
    pub fn at(&self, w: T) -> Vec3<T> {
        [self.o[0] + w * self.d[0], self.o[1] + w * self.d[1], self.o[2] + w * self.d[2]]
    }

    pub fn cast<U: Real>(&self) -> Ray<U> {
        Ray {
            o: self.o.map(|v| U::lit(v.as_f64())),
            d: self.d.map(|v| U::lit(v.as_f64())),
            t: U::lit(self.t.as_f64()),
            target: self.target.map(|v| U::lit(v.as_f64())),
        }
    }
}

/// Entry and exit ray parameters from the slab test, `w_near` clamped at 0.
pub fn intersect_box<T: Real>(o: Vec3<T>, d: Vec3<T>, bbox: &Aabb) -> Option<(T, T)> {
    let mut near = T::neg_infinity();
    let mut far = T::infinity();
    for a in 0..3 {
        let lo = T::lit(bbox.min[a]);
        let hi = T::lit(bbox.max[a]);
        if d[a] == T::zero() {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let inv = T::one() / d[a];
        let (mut t0, mut t1) = ((lo - o[a]) * inv, (hi - o[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        near = near.max(t0);
        far = far.min(t1);
    }
    let near = near.max(T::zero());
    (far > near).then_some((near, far))
}

/// Uniformly spaced samples along one ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples<T> {
    pub w: Vec<T>,
    pub delta: Vec<T>,
}

impl<T> Samples<T> {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Left endpoints `w_near + (k + offset) * step` of each interval inside the
/// box; the last spacing is truncated at `w_far`. `offset` in `[0, 1)` is the
/// optional jitter, 0 by default.
pub fn sample_points<T: Real>(o: Vec3<T>, d: Vec3<T>, bbox: &Aabb, step: T, offset: T) -> Samples<T> {
    let mut s = Samples { w: Vec::new(), delta: Vec::new() };
    sample_points_into(o, d, bbox, step, offset, &mut s.w, &mut s.delta);
    s
}

pub fn sample_points_into<T: Real>(
    o: Vec3<T>,
    d: Vec3<T>,
    bbox: &Aabb,
    step: T,
    offset: T,
    w_out: &mut Vec<T>,
    delta_out: &mut Vec<T>,
) {
    debug_assert!(step > T::zero());
    let Some((near, far)) = intersect_box(o, d, bbox) else {
        return;
    };
    let mut k = 0usize;
    loop {
        let w = near + (T::lit(k as f64) + offset) * step;
        if w >= far {
            break;
        }
        w_out.push(w);
        delta_out.push(step.min(far - w));
        k += 1;
    }
}

/// Per-ray compositing result.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite<T> {
    pub rgb: Vec3<T>,
    pub t_final: T,
    /// `T_k * alpha_k` per sample.
    pub weights: Vec<T>,
}

#[inline]
pub fn alpha<T: Real>(sigma: T, delta: T) -> T {
    -(-sigma * delta).exp_m1()
}

/// `C = sum_k T_k alpha_k c_k + T_final * background`.
pub fn composite<T: Real>(sigma: &[T], color: &[Vec3<T>], delta: &[T], background: Vec3<T>) -> Composite<T> {
    let mut weights = Vec::with_capacity(sigma.len());
    let (rgb, t_final) = composite_into(sigma, color, delta, background, &mut weights);
    Composite { rgb, t_final, weights }
}

pub fn composite_into<T: Real>(
    sigma: &[T],
    color: &[Vec3<T>],
    delta: &[T],
    background: Vec3<T>,
    weights: &mut Vec<T>,
) -> (Vec3<T>, T) {
    let mut trans = T::one();
    let mut rgb = [T::zero(); 3];
    for k in 0..sigma.len() {
        let a = alpha(sigma[k], delta[k]);
        let w = trans * a;
        weights.push(w);
        for c in 0..3 {
            rgb[c] += w * color[k][c];
        }
        trans = trans * (T::one() - a);
    }
    for c in 0..3 {
        rgb[c] += trans * background[c];
    }
    (rgb, trans)
}

/// Reverse pass of [`composite`]. `d_rgb` and `d_tfinal` are the upstream
/// gradients; writes `dL/dsigma_k` and `dL/dc_k`.
#[allow(clippy::too_many_arguments)]
pub fn composite_backward<T: Real>(
    sigma: &[T],
    color: &[Vec3<T>],
    delta: &[T],
    background: Vec3<T>,
    weights: &[T],
    t_final: T,
    d_rgb: Vec3<T>,
    d_tfinal: T,
    d_sigma: &mut [T],
    d_color: &mut [Vec3<T>],
) {
    let n = sigma.len();
    // Forward sweep stores T_{k+1} in d_sigma; no division, so opaque samples are safe.
    let mut trans = T::one();
    for k in 0..n {
        trans = trans * (-sigma[k] * delta[k]).exp();
        d_sigma[k] = trans;
    }
    let g_bg = dot3(d_rgb, background) + d_tfinal;
    let mut suffix = t_final * g_bg;
    for k in (0..n).rev() {
        let gc = dot3(d_rgb, color[k]);
        d_sigma[k] = delta[k] * (d_sigma[k] * gc - suffix);
        suffix += weights[k] * gc;
        for c in 0..3 {
            d_color[k][c] = weights[k] * d_rgb[c];
        }
    }
}

/// Masks density and color by the occlusion weight.
#[inline]
pub fn occlusion_gate<T: Real>(sigma: T, color: Vec3<T>, occ: T) -> (T, Vec3<T>) {
    (sigma * occ, [color[0] * occ, color[1] * occ, color[2] * occ])
}

/// Returns `(d_sigma, d_color, d_occ)`.
#[inline]
pub fn occlusion_gate_backward<T: Real>(sigma: T, color: Vec3<T>, occ: T, d_sigma_p: T, d_color_p: Vec3<T>) -> (T, Vec3<T>, T) {
    (
        d_sigma_p * occ,
        [d_color_p[0] * occ, d_color_p[1] * occ, d_color_p[2] * occ],
        d_sigma_p * sigma + dot3(d_color_p, color),
    )
}

/// Anything that yields gated density and color at a world point and time.
pub trait Field {
    fn query(&self, p: [f64; 3], t: f64, d: [f64; 3]) -> (f64, [f64; 3]);
}

/// Point-by-point renderer sharing [`composite`] with the batched model path.
pub fn render_field<F: Field + ?Sized>(
    field: &F,
    ray: &Ray<f64>,
    bbox: &Aabb,
    step: f64,
    background: [f64; 3],
) -> Composite<f64> {
    let s = sample_points(ray.o, ray.d, bbox, step, 0.0);
    let mut sigma = Vec::with_capacity(s.len());
    let mut color = Vec::with_capacity(s.len());
    for &w in &s.w {
        let (sg, c) = field.query(ray.at(w), ray.t, ray.d);
        sigma.push(sg);
        color.push(c);
    }
    composite(&sigma, &color, &s.delta, background)
}
