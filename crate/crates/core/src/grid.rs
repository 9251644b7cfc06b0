//! Dense vertex-sampled voxel grids.
//!
//! Values live on grid vertices: the bbox corners coincide with the outermost
//! vertices, so an axis with `n` vertices has `n - 1` cells. Storage is
//! channels-last, `((i * ny + j) * nz + k) * nc + c`, which keeps the feature
//! vector of a vertex contiguous for interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{Real, Vec3};

/// Axis-aligned box in world units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(min[a].is_finite() && max[a].is_finite()) || max[a] <= min[a] {
                return Err(Error::InvalidBox(format!(
                    "axis {a}: min {} must be below max {}",
                    min[a], max[a]
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    /// Closed-box membership test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn contains_t<T: Real>(&self, p: Vec3<T>) -> bool {
        self.contains([p[0].as_f64(), p[1].as_f64(), p[2].as_f64()])
    }

    pub fn expanded(&self, margin: [f64; 3]) -> Self {
        Self {
            min: [
                self.min[0] - margin[0],
                self.min[1] - margin[1],
                self.min[2] - margin[2],
            ],
            max: [
                self.max[0] + margin[0],
                self.max[1] + margin[1],
                self.max[2] + margin[2],
            ],
        }
    }

    /// Intersection with another box, `None` when the overlap is empty.
    pub fn intersect(&self, other: &Aabb) -> Option<Aabb> {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            min[a] = self.min[a].max(other.min[a]);
            max[a] = self.max[a].min(other.max[a]);
        }
        Aabb::new(min, max).ok()
    }

    /// Maps `p` to `[-1, 1]^3` (unclamped).
    pub fn normalize<T: Real>(&self, p: Vec3<T>) -> Vec3<T> {
        let mut out = [T::zero(); 3];
        for a in 0..3 {
            let scale = T::lit(2.0 / (self.max[a] - self.min[a]));
            out[a] = (p[a] - T::lit(self.min[a])) * scale - T::one();
        }
        out
    }

    /// Derivative of [`Aabb::normalize`] per axis.
    pub fn normalize_scale<T: Real>(&self) -> Vec3<T> {
        let e = self.extent();
        [T::lit(2.0 / e[0]), T::lit(2.0 / e[1]), T::lit(2.0 / e[2])]
    }
}

/// The eight interpolation taps for one query point, kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    /// Element offset of channel 0 at each corner; corner index is `dx*4 + dy*2 + dz`.
    pub offsets: [usize; 8],
    pub weights: [T; 8],
    frac: Vec3<T>,
    /// `d frac / d p` per axis, zero on axes where the query was clamped.
    dfrac: Vec3<T>,
    pub inside: bool,
}

impl<T: Real> Stencil<T> {
    /// Derivative of each corner weight with respect to `p`.
    #[inline]
    fn weight_grads(&self) -> [Vec3<T>; 8] {
        let one = T::one();
        let [fx, fy, fz] = self.frac;
        let g = |b: usize, f: T| if b == 1 { f } else { one - f };
        let s = |b: usize| if b == 1 { one } else { -one };
        let mut out = [[T::zero(); 3]; 8];
        for (corner, o) in out.iter_mut().enumerate() {
            let (bx, by, bz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
            o[0] = s(bx) * g(by, fy) * g(bz, fz) * self.dfrac[0];
            o[1] = g(bx, fx) * s(by) * g(bz, fz) * self.dfrac[1];
            o[2] = g(bx, fx) * g(by, fy) * s(bz) * self.dfrac[2];
        }
        out
    }
}

/// N-channel dense 3D grid with a same-shaped gradient buffer.
#[derive(Clone, Debug)]
pub struct DenseGrid<T = f32> {
    res: [usize; 3],
    channels: usize,
    bbox: Aabb,
    pub values: Vec<T>,
    pub grads: Vec<T>,
    inv_cell: Vec3<T>,
    origin: Vec3<T>,
}

impl<T: Real> DenseGrid<T> {
    pub fn zeros(res: [usize; 3], channels: usize, bbox: Aabb) -> Result<Self> {
        Self::filled(res, channels, bbox, T::zero())
    }

    pub fn filled(res: [usize; 3], channels: usize, bbox: Aabb, value: T) -> Result<Self> {
        let bbox = Aabb::new(bbox.min, bbox.max)?;
        if res.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGrid(format!(
                "resolution {res:?} needs at least 2 vertices per axis"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidGrid("channel count must be positive".into()));
        }
        let len = res[0] * res[1] * res[2] * channels;
        let e = bbox.extent();
        let inv_cell = [
            T::lit((res[0] - 1) as f64 / e[0]),
            T::lit((res[1] - 1) as f64 / e[1]),
            T::lit((res[2] - 1) as f64 / e[2]),
        ];
        Ok(Self {
            res,
            channels,
            bbox,
            values: vec![value; len],
            grads: vec![T::zero(); len],
            inv_cell,
            origin: [T::lit(bbox.min[0]), T::lit(bbox.min[1]), T::lit(bbox.min[2])],
        })
    }

    /// Builds a grid by evaluating `f` at each vertex's world position.
    pub fn from_fn(
        res: [usize; 3],
        channels: usize,
        bbox: Aabb,
        mut f: impl FnMut([f64; 3], &mut [T]),
    ) -> Result<Self> {
        let mut grid = Self::zeros(res, channels, bbox)?;
        for i in 0..res[0] {
            for j in 0..res[1] {
                for k in 0..res[2] {
                    let p = grid.vertex_position([i, j, k]);
                    let off = grid.offset([i, j, k]);
                    f(p, &mut grid.values[off..off + channels]);
                }
            }
        }
        Ok(grid)
    }

    pub fn from_values(res: [usize; 3], channels: usize, bbox: Aabb, values: Vec<T>) -> Result<Self> {
        let mut grid = Self::zeros(res, channels, bbox)?;
        if values.len() != grid.values.len() {
            return Err(Error::Dimension {
                expected: grid.values.len(),
                got: values.len(),
                context: "grid values",
            });
        }
        grid.values = values;
        Ok(grid)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn num_vertices(&self) -> usize {
        self.res[0] * self.res[1] * self.res[2]
    }

    /// World-space size of one cell.
    pub fn cell_size(&self) -> [f64; 3] {
        let e = self.bbox.extent();
        [
            e[0] / (self.res[0] - 1) as f64,
            e[1] / (self.res[1] - 1) as f64,
            e[2] / (self.res[2] - 1) as f64,
        ]
    }

    #[inline]
    pub fn offset(&self, ijk: [usize; 3]) -> usize {
        ((ijk[0] * self.res[1] + ijk[1]) * self.res[2] + ijk[2]) * self.channels
    }

    pub fn vertex(&self, ijk: [usize; 3]) -> &[T] {
        let off = self.offset(ijk);
        &self.values[off..off + self.channels]
    }

    pub fn vertex_position(&self, ijk: [usize; 3]) -> [f64; 3] {
        let e = self.bbox.extent();
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = self.bbox.min[a] + e[a] * ijk[a] as f64 / (self.res[a] - 1) as f64;
        }
        p
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        self.bbox.contains_t(p)
    }

    /// Interpolation taps for `p`; coordinates outside the box are clamped.
    #[inline]
    pub fn stencil(&self, p: Vec3<T>) -> Stencil<T> {
        let mut u = [T::zero(); 3];
        for a in 0..3 {
            u[a] = (p[a] - self.origin[a]) * self.inv_cell[a];
        }
        self.stencil_from_coords(u)
    }

    /// Taps from continuous vertex coordinates (`0..=n-1` per axis).
    #[inline]
    fn stencil_from_coords(&self, u: Vec3<T>) -> Stencil<T> {
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        let mut dfrac = [T::zero(); 3];
        let mut inside = true;
        for a in 0..3 {
            let hi = T::lit((self.res[a] - 1) as f64);
            let mut ua = u[a];
            if ua < T::zero() || ua > hi || ua.is_nan() {
                inside = false;
                ua = if ua > hi { hi } else { T::zero() };
            } else {
                dfrac[a] = self.inv_cell[a];
            }
            let cell = ua.floor().to_usize().unwrap_or(0).min(self.res[a] - 2);
            base[a] = cell;
            frac[a] = ua - T::lit(cell as f64);
        }
        let sy = self.res[2] * self.channels;
        let sx = self.res[1] * sy;
        let sz = self.channels;
        let o = self.offset(base);
        let one = T::one();
        let g = |b: usize, f: T| if b == 1 { f } else { one - f };
        let mut offsets = [0usize; 8];
        let mut weights = [T::zero(); 8];
        for corner in 0..8 {
            let (bx, by, bz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
            offsets[corner] = o + bx * sx + by * sy + bz * sz;
            weights[corner] = g(bx, frac[0]) * g(by, frac[1]) * g(bz, frac[2]);
        }
        Stencil {
            offsets,
            weights,
            frac,
            dfrac,
            inside,
        }
    }

    /// Trilinear interpolation; writes `channels` values into `out`.
    #[inline]
    pub fn gather(&self, st: &Stencil<T>, out: &mut [T]) {
        let nc = self.channels;
        out[..nc].iter_mut().for_each(|o| *o = T::zero());
        for corner in 0..8 {
            let w = st.weights[corner];
            let v = &self.values[st.offsets[corner]..st.offsets[corner] + nc];
            for (o, &x) in out[..nc].iter_mut().zip(v) {
                *o += w * x;
            }
        }
    }

    pub fn interp_into(&self, p: Vec3<T>, out: &mut [T]) -> Stencil<T> {
        let st = self.stencil(p);
        self.gather(&st, out);
        st
    }

    pub fn interp(&self, p: Vec3<T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.channels];
        self.interp_into(p, &mut out);
        out
    }

    /// Spatial gradient of the interpolated field contracted with `upstream`.
    #[inline]
    pub fn spatial_grad(&self, st: &Stencil<T>, upstream: &[T]) -> Vec3<T> {
        let nc = self.channels;
        let wg = st.weight_grads();
        let mut out = [T::zero(); 3];
        for corner in 0..8 {
            let v = &self.values[st.offsets[corner]..st.offsets[corner] + nc];
            let dot: T = v.iter().zip(upstream).map(|(&a, &b)| a * b).sum();
            for a in 0..3 {
                out[a] += wg[corner][a] * dot;
            }
        }
        out
    }

    /// Adds `upstream * weight` at each tap into `grads` (a buffer shaped like `values`).
    #[inline]
    pub fn scatter(grads: &mut [T], channels: usize, st: &Stencil<T>, upstream: &[T]) {
        for corner in 0..8 {
            let w = st.weights[corner];
            let g = &mut grads[st.offsets[corner]..st.offsets[corner] + channels];
            for (gi, &u) in g.iter_mut().zip(upstream) {
                *gi += w * u;
            }
        }
    }

    /// Accumulates into `self.grads` and returns the gradient with respect to `p`.
    pub fn interp_backward(&mut self, p: Vec3<T>, upstream: &[T]) -> Vec3<T> {
        let st = self.stencil(p);
        let dp = self.spatial_grad(&st, upstream);
        Self::scatter(&mut self.grads, self.channels, &st, upstream);
        dp
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn num_tv_cells(&self) -> usize {
        (self.res[0] - 1) * (self.res[1] - 1) * (self.res[2] - 1)
    }

    /// Isotropic total variation averaged over cells whose three forward
    /// differences all exist, summed over channels. `eps` is added once per
    /// difference term inside the square root.
    pub fn tv_loss(&self, eps: T) -> T {
        let [nx, ny, nz] = self.res;
        let nc = self.channels;
        let (sx, sy, sz) = (ny * nz * nc, nz * nc, nc);
        let eps3 = eps * T::lit(3.0);
        let mut total = T::zero();
        for i in 0..nx - 1 {
            for j in 0..ny - 1 {
                let mut row = T::zero();
                for k in 0..nz - 1 {
                    let o = self.offset([i, j, k]);
                    for c in 0..nc {
                        let v = self.values[o + c];
                        let dx = self.values[o + sx + c] - v;
                        let dy = self.values[o + sy + c] - v;
                        let dz = self.values[o + sz + c] - v;
                        row += (dx * dx + dy * dy + dz * dz + eps3).sqrt();
                    }
                }
                total += row;
            }
        }
        total / T::lit(self.num_tv_cells() as f64)
    }

    /// Adds `upstream * d tv_loss / d values` into `self.grads`.
    pub fn tv_backward(&mut self, eps: T, upstream: T) {
        let [nx, ny, nz] = self.res;
        let nc = self.channels;
        let (sx, sy, sz) = (ny * nz * nc, nz * nc, nc);
        let eps3 = eps * T::lit(3.0);
        let scale = upstream / T::lit(self.num_tv_cells() as f64);
        if scale == T::zero() {
            return;
        }
        for i in 0..nx - 1 {
            for j in 0..ny - 1 {
                for k in 0..nz - 1 {
                    let o = ((i * ny + j) * nz + k) * nc;
                    for c in 0..nc {
                        let v = self.values[o + c];
                        let dx = self.values[o + sx + c] - v;
                        let dy = self.values[o + sy + c] - v;
                        let dz = self.values[o + sz + c] - v;
                        let g = scale / (dx * dx + dy * dy + dz * dz + eps3).sqrt();
                        self.grads[o + sx + c] += g * dx;
                        self.grads[o + sy + c] += g * dy;
                        self.grads[o + sz + c] += g * dz;
                        self.grads[o + c] -= g * (dx + dy + dz);
                    }
                }
            }
        }
    }

    /// [`DenseGrid::tv_loss`] and [`DenseGrid::tv_backward`] in one sweep.
    pub fn tv_loss_backward(&mut self, eps: T, upstream: T) -> T {
        let [nx, ny, nz] = self.res;
        let nc = self.channels;
        let (sx, sy, sz) = (ny * nz * nc, nz * nc, nc);
        let eps3 = eps * T::lit(3.0);
        let cells = T::lit(self.num_tv_cells() as f64);
        let scale = upstream / cells;
        let mut total = T::zero();
        for i in 0..nx - 1 {
            for j in 0..ny - 1 {
                let mut row = T::zero();
                for k in 0..nz - 1 {
                    let o = ((i * ny + j) * nz + k) * nc;
                    for c in 0..nc {
                        let v = self.values[o + c];
                        let dx = self.values[o + sx + c] - v;
                        let dy = self.values[o + sy + c] - v;
                        let dz = self.values[o + sz + c] - v;
                        let n = (dx * dx + dy * dy + dz * dz + eps3).sqrt();
                        row += n;
                        let g = scale / n;
                        self.grads[o + sx + c] += g * dx;
                        self.grads[o + sy + c] += g * dy;
                        self.grads[o + sz + c] += g * dz;
                        self.grads[o + c] -= g * (dx + dy + dz);
                    }
                }
                total += row;
            }
        }
        total / cells
    }

    /// Resamples onto a finer lattice over the same box. Gradients start at zero.
    pub fn upscale(&self, new_res: [usize; 3]) -> Result<Self> {
        if new_res.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGrid(format!(
                "upscale target {new_res:?} needs at least 2 vertices per axis"
            )));
        }
        if (0..3).any(|a| new_res[a] < self.res[a]) {
            return Err(Error::InvalidGrid(format!(
                "upscale target {new_res:?} is coarser than {:?}",
                self.res
            )));
        }
        let mut out = Self::zeros(new_res, self.channels, self.bbox)?;
        let nc = self.channels;
        let mut buf = vec![T::zero(); nc];
        for i in 0..new_res[0] {
            for j in 0..new_res[1] {
                for k in 0..new_res[2] {
                    // Lattice-to-lattice mapping keeps vertex-aligned cases exact.
                    let mut u = [T::zero(); 3];
                    for (a, &idx) in [i, j, k].iter().enumerate() {
                        u[a] = T::lit(idx as f64 * (self.res[a] - 1) as f64 / (new_res[a] - 1) as f64);
                    }
                    let st = self.stencil_from_coords(u);
                    self.gather(&st, &mut buf);
                    let off = out.offset([i, j, k]);
                    out.values[off..off + nc].copy_from_slice(&buf);
                }
            }
        }
        Ok(out)
    }

    /// Samples this grid (clamped) at the vertices of a new lattice over `bbox`.
    pub fn resample(&self, bbox: Aabb, res: [usize; 3]) -> Result<Self> {
        let nc = self.channels;
        let mut buf = vec![T::zero(); nc];
        let (src, e) = (self.bbox, self.bbox.extent());
        let same_box = bbox == src;
        let mut out = Self::zeros(res, nc, bbox)?;
        for i in 0..res[0] {
            for j in 0..res[1] {
                for k in 0..res[2] {
                    // Vertex coordinates in f64; on the same box the mapping is
                    // lattice to lattice, so equal resolutions copy exactly.
                    let mut u = [T::zero(); 3];
                    let p = out.vertex_position([i, j, k]);
                    for (a, &idx) in [i, j, k].iter().enumerate() {
                        let n = (self.res[a] - 1) as f64;
                        u[a] = T::lit(if same_box {
                            idx as f64 * n / (res[a] - 1) as f64
                        } else {
                            (p[a] - src.min[a]) / e[a] * n
                        });
                    }
                    let st = self.stencil_from_coords(u);
                    self.gather(&st, &mut buf);
                    let off = out.offset([i, j, k]);
                    out.values[off..off + nc].copy_from_slice(&buf);
                }
            }
        }
        Ok(out)
    }

    /// Converts precision, dropping gradients.
    pub fn cast<U: Real>(&self) -> DenseGrid<U> {
        let values = self.values.iter().map(|v| U::lit(v.as_f64())).collect();
        DenseGrid::<U>::from_values(self.res, self.channels, self.bbox, values)
            .expect("shape preserved")
    }
}

/// Destination for interpolation gradients.
pub trait GridGradSink<T> {
    fn add(&mut self, st: &Stencil<T>, upstream: &[T]);
}

/// Scatters straight into a gradient buffer.
pub struct DirectSink<'a, T> {
    pub grads: &'a mut [T],
    pub channels: usize,
}

impl<T: Real> GridGradSink<T> for DirectSink<'_, T> {
    #[inline]
    fn add(&mut self, st: &Stencil<T>, upstream: &[T]) {
        DenseGrid::scatter(self.grads, self.channels, st, upstream);
    }
}

/// Records scatters so that work done on separate threads can be replayed
/// into the shared buffer in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct GridGradLog<T> {
    channels: usize,
    stencils: Vec<Stencil<T>>,
    upstream: Vec<T>,
}

impl<T: Real> GridGradLog<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            stencils: Vec::new(),
            upstream: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.stencils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stencils.is_empty()
    }

    pub fn apply(&self, grads: &mut [T]) {
        for (st, up) in self.stencils.iter().zip(self.upstream.chunks_exact(self.channels)) {
            DenseGrid::scatter(grads, self.channels, st, up);
        }
    }
}

impl<T: Real> GridGradSink<T> for GridGradLog<T> {
    fn add(&mut self, st: &Stencil<T>, upstream: &[T]) {
        self.stencils.push(*st);
        self.upstream.extend_from_slice(&upstream[..self.channels]);
    }
}

/// Per-axis vertex counts proportional to the box edges with a product no
/// larger than `expected_voxels`.
///
/// Each axis gets `floor(edge * s)` with `s = cbrt(expected / volume)`, at
/// least 2; axes are then incremented greedily in order of largest fractional
/// remainder while the product stays within budget.
pub fn resolution_from_voxel_count(bbox: &Aabb, expected_voxels: usize) -> Result<[usize; 3]> {
    let bbox = Aabb::new(bbox.min, bbox.max)?;
    if expected_voxels < 8 {
        return Err(Error::InvalidArgument(format!(
            "expected voxel count {expected_voxels} is below the minimum of 8"
        )));
    }
    let e = bbox.extent();
    let volume = e[0] * e[1] * e[2];
    let s = (expected_voxels as f64 / volume).cbrt();
    let mut res = [0usize; 3];
    let mut rem = [0.0f64; 3];
    for a in 0..3 {
        let ideal = e[a] * s;
        // Absorb rounding noise from the cube root before flooring.
        let fl = (ideal * (1.0 + 1e-12)).floor();
        res[a] = (fl as usize).max(2);
        rem[a] = ideal - fl;
    }
    while res.iter().product::<usize>() > expected_voxels {
        // Only reachable when the lower bound of 2 forced an axis up.
        let a = (0..3)
            .filter(|&a| res[a] > 2)
            .max_by(|&x, &y| res[x].cmp(&res[y]))
            .ok_or_else(|| Error::InvalidArgument("voxel budget too small".into()))?;
        res[a] -= 1;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| rem[y].partial_cmp(&rem[x]).unwrap_or(std::cmp::Ordering::Equal));
    for &a in &order {
        let mut trial = res;
        trial[a] += 1;
        if trial.iter().product::<usize>() <= expected_voxels && rem[a] > 0.0 {
            res = trial;
        }
    }
    Ok(res)
}
