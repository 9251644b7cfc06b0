//! The full differentiable chain for a batch of rays:
//! sample, filter, warp, filter again, look up canonical radiance, gate by
//! occlusion, composite.

use rayon::prelude::*;

use crate::canonical::{CanonicalField, CanonicalOutput};
use crate::deform::{DeformOutput, DeformationField};
use crate::error::Result;
use crate::grid::{Aabb, DenseGrid, GridGradLog};
use crate::real::{Real, Vec3};
use crate::render::{
    composite_backward, composite_into, occlusion_gate, occlusion_gate_backward, sample_points_into, Field, Ray,
};

/// Max-alpha grid used to skip samples. A point counts as occupied when any
/// of its eight surrounding vertices reaches the threshold; points outside
/// the grid box are empty.
#[derive(Clone, Debug)]
pub struct Occupancy<T = f32> {
    pub alpha: DenseGrid<T>,
    pub threshold: f64,
}

impl<T: Real> Occupancy<T> {
    pub fn occupied(&self, p: Vec3<T>) -> bool {
        if !self.alpha.contains(p) {
            return false;
        }
        let th = T::lit(self.threshold);
        let st = self.alpha.stencil(p);
        st.offsets.iter().any(|&o| self.alpha.values[o] >= th)
    }

    pub fn occupied_fraction(&self) -> f64 {
        let th = T::lit(self.threshold);
        self.alpha.values.iter().filter(|&&a| a >= th).count() as f64 / self.alpha.values.len() as f64
    }

    pub fn cast<U: Real>(&self) -> Occupancy<U> {
        Occupancy {
            alpha: self.alpha.cast(),
            threshold: self.threshold,
        }
    }
}

/// Empty-space filters built from a trained coarse model.
#[derive(Clone, Debug, Default)]
pub struct Filters<T = f32> {
    /// Empty at every training time; tested on observation-space samples.
    pub deform: Option<Occupancy<T>>,
    /// Empty at the canonical time; tested on warped points.
    pub canonical: Option<Occupancy<T>>,
}

impl<T: Real> Filters<T> {
    pub fn is_empty(&self) -> bool {
        self.deform.is_none() && self.canonical.is_none()
    }

    pub fn cast<U: Real>(&self) -> Filters<U> {
        Filters {
            deform: self.deform.as_ref().map(|o| o.cast()),
            canonical: self.canonical.as_ref().map(|o| o.cast()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub deform: DeformationField<T>,
    pub canonical: CanonicalField<T>,
    /// Rays are sampled inside this box.
    pub bbox: Aabb,
    pub step: f64,
    pub background: [f64; 3],
    pub use_occlusion: bool,
    pub filters: Filters<T>,
}

/// Forward state for a batch of rays.
///
/// Two sample levels: warped samples survived the observation-space filter
/// and carry a deformation; composited samples additionally survived the
/// canonical filter and carry density and color.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub rays: usize,
    /// Samples on the rays before any filtering.
    pub raw_samples: usize,
    /// `warp_offsets[r]..warp_offsets[r + 1]` are the warped samples of ray `r`.
    pub warp_offsets: Vec<usize>,
    /// Composited samples of ray `r`.
    pub comp_offsets: Vec<usize>,
    /// Index of each composited sample among the warped samples.
    pub comp_src: Vec<usize>,
    pub spacing: Vec<T>,
    pub sigma_gated: Vec<T>,
    pub color_gated: Vec<Vec3<T>>,
    pub weights: Vec<T>,
    pub rgb: Vec<Vec3<T>>,
    pub t_final: Vec<T>,
    warp: DeformOutput<T>,
    canon: CanonicalOutput<T>,
}

impl<T: Real> Batch<T> {
    pub fn warped_samples(&self) -> usize {
        self.warp.len()
    }

    pub fn composited_samples(&self) -> usize {
        self.canon.len()
    }

    /// Offset of each warped sample.
    pub fn delta(&self) -> &[Vec3<T>] {
        &self.warp.delta
    }

    pub fn occ(&self) -> &[T] {
        &self.warp.occ
    }

    /// Pre-gate density of each composited sample.
    pub fn sigma(&self) -> &[T] {
        &self.canon.sigma
    }

    /// Pre-gate color of each composited sample.
    pub fn color(&self) -> &[Vec3<T>] {
        &self.canon.color
    }
}

/// Upstream gradients for [`Model::backward`].
#[derive(Clone, Debug)]
pub struct Upstream<T> {
    pub d_rgb: Vec<Vec3<T>>,
    pub d_tfinal: Vec<T>,
    /// Per composited sample, on the pre-gate color.
    pub d_color: Vec<Vec3<T>>,
    /// Per warped sample, on the offset.
    pub d_delta: Vec<Vec3<T>>,
}

impl<T: Real> Upstream<T> {
    pub fn zeros(batch: &Batch<T>) -> Self {
        Self {
            d_rgb: vec![[T::zero(); 3]; batch.rays],
            d_tfinal: vec![T::zero(); batch.rays],
            d_color: vec![[T::zero(); 3]; batch.composited_samples()],
            d_delta: vec![[T::zero(); 3]; batch.warped_samples()],
        }
    }
}

/// Parameter gradients from one batch, merged into a model in a fixed order.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub deform_net: Vec<T>,
    pub color_net: Option<Vec<T>>,
    pub deform_grid: GridGradLog<T>,
    pub density: GridGradLog<T>,
    pub color: GridGradLog<T>,
}

impl<T: Real> Gradients<T> {
    pub fn apply(&self, model: &mut Model<T>) {
        for (g, d) in model.deform.net.grads.iter_mut().zip(&self.deform_net) {
            *g += *d;
        }
        if let (Some(net), Some(src)) = (model.canonical.color_net.as_mut(), &self.color_net) {
            for (g, d) in net.grads.iter_mut().zip(src) {
                *g += *d;
            }
        }
        self.deform_grid.apply(&mut model.deform.grid.grads);
        self.density.apply(&mut model.canonical.density.grads);
        self.color.apply(&mut model.canonical.color.grads);
    }
}

impl<T: Real> Model<T> {
    pub fn background_t(&self) -> Vec3<T> {
        self.background.map(T::lit)
    }

    /// Warp and shade every sample of `rays`. `jitter`, when given, holds a
    /// per-ray offset in `[0, 1)` of one step.
    pub fn forward(&self, rays: &[Ray<T>], jitter: Option<&[T]>) -> Result<Batch<T>> {
        let n = rays.len();
        let step = T::lit(self.step);
        let mut w = Vec::new();
        let mut spacing_all = Vec::new();
        let mut points = Vec::new();
        let mut times = Vec::new();
        let mut spacing = Vec::new();
        let mut warp_offsets = Vec::with_capacity(n + 1);
        warp_offsets.push(0);
        let mut raw_samples = 0;
        for (r, ray) in rays.iter().enumerate() {
            w.clear();
            spacing_all.clear();
            let off = jitter.map_or(T::zero(), |j| j[r]);
            sample_points_into(ray.o, ray.d, &self.bbox, step, off, &mut w, &mut spacing_all);
            raw_samples += w.len();
            for (&wk, &dk) in w.iter().zip(&spacing_all) {
                let p = ray.at(wk);
                if let Some(f) = &self.filters.deform {
                    if !f.occupied(p) {
                        continue;
                    }
                }
                points.push(p);
                times.push(ray.t);
                spacing.push(dk);
            }
            warp_offsets.push(points.len());
        }

        let warp = self.deform.forward(&points, &times)?;

        let mut comp_offsets = Vec::with_capacity(n + 1);
        comp_offsets.push(0);
        let mut comp_src = Vec::new();
        let mut cpoints = Vec::new();
        let mut cdirs = Vec::new();
        let mut cspacing = Vec::new();
        for r in 0..n {
            for i in warp_offsets[r]..warp_offsets[r + 1] {
                let pp = warp.p_prime[i];
                if let Some(f) = &self.filters.canonical {
                    if !f.occupied(pp) {
                        continue;
                    }
                }
                comp_src.push(i);
                cpoints.push(pp);
                cdirs.push(rays[r].d);
                cspacing.push(spacing[i]);
            }
            comp_offsets.push(comp_src.len());
        }

        let canon = self.canonical.forward(&cpoints, &cdirs)?;
        let m = comp_src.len();
        let mut sigma_gated = Vec::with_capacity(m);
        let mut color_gated = Vec::with_capacity(m);
        for (k, &i) in comp_src.iter().enumerate() {
            if self.use_occlusion {
                let (s, c) = occlusion_gate(canon.sigma[k], canon.color[k], warp.occ[i]);
                sigma_gated.push(s);
                color_gated.push(c);
            } else {
                sigma_gated.push(canon.sigma[k]);
                color_gated.push(canon.color[k]);
            }
        }

        let bg = self.background_t();
        let mut weights = Vec::with_capacity(m);
        let mut rgb = Vec::with_capacity(n);
        let mut t_final = Vec::with_capacity(n);
        for r in 0..n {
            let (a, b) = (comp_offsets[r], comp_offsets[r + 1]);
            let (c, t) = composite_into(&sigma_gated[a..b], &color_gated[a..b], &cspacing[a..b], bg, &mut weights);
            rgb.push(c);
            t_final.push(t);
        }

        Ok(Batch {
            rays: n,
            raw_samples,
            warp_offsets,
            comp_offsets,
            comp_src,
            spacing: cspacing,
            sigma_gated,
            color_gated,
            weights,
            rgb,
            t_final,
            warp,
            canon,
        })
    }

    pub fn backward(&self, batch: &Batch<T>, up: &Upstream<T>) -> Gradients<T> {
        let bg = self.background_t();
        let m = batch.composited_samples();
        let mut d_sig_g = vec![T::zero(); m];
        let mut d_col_g = vec![[T::zero(); 3]; m];
        for r in 0..batch.rays {
            let (a, b) = (batch.comp_offsets[r], batch.comp_offsets[r + 1]);
            composite_backward(
                &batch.sigma_gated[a..b],
                &batch.color_gated[a..b],
                &batch.spacing[a..b],
                bg,
                &batch.weights[a..b],
                batch.t_final[r],
                up.d_rgb[r],
                up.d_tfinal[r],
                &mut d_sig_g[a..b],
                &mut d_col_g[a..b],
            );
        }

        let nw = batch.warped_samples();
        let mut d_occ = vec![T::zero(); nw];
        let mut d_sigma = vec![T::zero(); m];
        let mut d_color = vec![[T::zero(); 3]; m];
        for (k, &i) in batch.comp_src.iter().enumerate() {
            let (ds, dc) = if self.use_occlusion {
                let (ds, dc, dw) =
                    occlusion_gate_backward(batch.canon.sigma[k], batch.canon.color[k], batch.warp.occ[i], d_sig_g[k], d_col_g[k]);
                d_occ[i] = dw;
                (ds, dc)
            } else {
                (d_sig_g[k], d_col_g[k])
            };
            d_sigma[k] = ds;
            d_color[k] = [dc[0] + up.d_color[k][0], dc[1] + up.d_color[k][1], dc[2] + up.d_color[k][2]];
        }

        let mut density = GridGradLog::new(1);
        let mut color = GridGradLog::new(self.canonical.color.channels());
        let mut color_net = self.canonical.color_net.as_ref().map(|n| vec![T::zero(); n.num_params()]);
        let dpp = self.canonical.backward_with(
            &batch.canon,
            &d_sigma,
            &d_color,
            color_net.as_deref_mut(),
            &mut density,
            &mut color,
        );

        // p' = p + dp, so the offset head sees the warped-point gradient plus
        // any direct penalty on the offset.
        let mut d_pprime = up.d_delta.clone();
        for (k, &i) in batch.comp_src.iter().enumerate() {
            for a in 0..3 {
                d_pprime[i][a] += dpp[k][a];
            }
        }
        let mut deform_net = vec![T::zero(); self.deform.net.num_params()];
        let mut deform_grid = GridGradLog::new(self.deform.grid.channels());
        self.deform
            .backward_with(&batch.warp, &d_pprime, &d_occ, &mut deform_net, &mut deform_grid);

        Gradients {
            deform_net,
            color_net,
            deform_grid,
            density,
            color,
        }
    }

    /// Renders the canonical field with no warp and no gate, using the same
    /// sampling and filters as [`Model::forward`].
    pub fn render_static(&self, rays: &[Ray<T>]) -> Result<Vec<Vec3<T>>> {
        let step = T::lit(self.step);
        let bg = self.background_t();
        let mut out = Vec::with_capacity(rays.len());
        let (mut w, mut dl) = (Vec::new(), Vec::new());
        let mut weights = Vec::new();
        for ray in rays {
            w.clear();
            dl.clear();
            sample_points_into(ray.o, ray.d, &self.bbox, step, T::zero(), &mut w, &mut dl);
            let mut pts = Vec::new();
            let mut sp = Vec::new();
            for (&wk, &dk) in w.iter().zip(&dl) {
                let p = ray.at(wk);
                let keep = self.filters.deform.as_ref().is_none_or(|f| f.occupied(p))
                    && self.filters.canonical.as_ref().is_none_or(|f| f.occupied(p));
                if keep {
                    pts.push(p);
                    sp.push(dk);
                }
            }
            let dirs = vec![ray.d; pts.len()];
            let c = self.canonical.forward(&pts, &dirs)?;
            weights.clear();
            let (rgb, _) = composite_into(&c.sigma, &c.color, &sp, bg, &mut weights);
            out.push(rgb);
        }
        Ok(out)
    }

    /// Chunked inference returning `(rgb, t_final)` per ray and the number of
    /// field evaluations (warps plus canonical lookups); chunks run in
    /// parallel and are reassembled in order.
    pub fn render(&self, rays: &[Ray<T>], chunk: usize) -> Result<(Vec<Vec3<T>>, Vec<T>, usize)> {
        let parts: Vec<Result<(Vec<Vec3<T>>, Vec<T>, usize)>> = rays
            .par_chunks(chunk.max(1))
            .map(|c| {
                let b = self.forward(c, None)?;
                let e = b.warped_samples() + b.composited_samples();
                Ok((b.rgb, b.t_final, e))
            })
            .collect();
        let mut rgb = Vec::with_capacity(rays.len());
        let mut tf = Vec::with_capacity(rays.len());
        let mut evaluated = 0;
        for p in parts {
            let (c, t, e) = p?;
            rgb.extend(c);
            tf.extend(t);
            evaluated += e;
        }
        Ok((rgb, tf, evaluated))
    }

    pub fn zero_grad(&mut self) {
        self.deform.zero_grad();
        self.canonical.zero_grad();
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            deform: self.deform.cast(),
            canonical: self.canonical.cast(),
            bbox: self.bbox,
            step: self.step,
            background: self.background,
            use_occlusion: self.use_occlusion,
            filters: self.filters.cast(),
        }
    }

    /// Gated density and color at one observation-space point.
    pub fn query_point(&self, p: Vec3<T>, t: T, d: Vec3<T>) -> Result<(T, Vec3<T>)> {
        let w = self.deform.deform(p, t)?;
        let c = self.canonical.forward(&[w.p_prime], &[d])?;
        let (s, col) = (c.sigma[0], c.color[0]);
        Ok(if self.use_occlusion { occlusion_gate(s, col, w.occ) } else { (s, col) })
    }
}

impl Field for Model<f64> {
    fn query(&self, p: [f64; 3], t: f64, d: [f64; 3]) -> (f64, [f64; 3]) {
        self.query_point(p, t, d).expect("single-point query")
    }
}
