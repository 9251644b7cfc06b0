//! Canonical-space radiance: a density grid with softplus post-activation and
//! a color grid that is either read directly (coarse) or decoded by a small
//! view-dependent network (fine).

use serde::{Deserialize, Serialize};

use crate::encoding::PosEnc;
use crate::error::{Error, Result};
use crate::grid::{Aabb, DenseGrid, DirectSink, GridGradSink, Stencil};
use crate::mlp::{Activation, Mlp, MlpCache, MlpSpec};
use crate::real::{sigmoid, softplus, softplus_inv, Real, Vec3};

pub const COARSE_COLOR_CHANNELS: usize = 3;
pub const FINE_COLOR_FEATURES: usize = 12;
pub const COLOR_WIDTH: usize = 128;
pub const COLOR_HIDDEN_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

pub fn color_net_spec(pos_enc: PosEnc, dir_enc: PosEnc, features: usize) -> MlpSpec {
    MlpSpec {
        input_dim: pos_enc.out_dim(3) + dir_enc.out_dim(3) + features,
        hidden_width: COLOR_WIDTH,
        hidden_layers: COLOR_HIDDEN_LAYERS,
        heads: vec![Activation::Sigmoid; 3],
    }
}

/// Grid logit offset `b` such that an all-zero density grid gives per-sample
/// opacity `alpha_init` at spacing `step`.
pub fn density_shift_for_alpha(alpha_init: f64, step: f64) -> Result<f64> {
    if !(alpha_init > 0.0 && alpha_init < 1.0) {
        return Err(Error::OutOfRange(format!("alpha_init {alpha_init} must lie in (0, 1)")));
    }
    if !(step > 0.0) {
        return Err(Error::OutOfRange(format!("reference step {step} must be positive")));
    }
    let sigma = -(-alpha_init).ln_1p() / step;
    Ok(softplus_inv(sigma))
}

#[derive(Clone, Debug)]
pub struct CanonicalField<T = f32> {
    pub density: DenseGrid<T>,
    pub color: DenseGrid<T>,
    /// Present in the fine stage only.
    pub color_net: Option<Mlp<T>>,
    pub density_shift: T,
    pub frame: Aabb,
    pub pos_enc: PosEnc,
    pub dir_enc: PosEnc,
}

#[derive(Clone, Debug)]
pub struct CanonicalOutput<T> {
    pub sigma: Vec<T>,
    pub color: Vec<Vec3<T>>,
    /// Pre-activation density; `None` for points outside the density box.
    logits: Vec<Option<T>>,
    dens_st: Vec<Stencil<T>>,
    color_st: Vec<Stencil<T>>,
    normalized: Vec<Vec3<T>>,
    cache: Option<MlpCache<T>>,
}

impl<T: Real> CanonicalOutput<T> {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }
}

pub fn check_unit<T: Real>(d: Vec3<T>) -> Result<()> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).as_f64().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("direction {d:?} is not unit length (|d| = {n})")));
    }
    Ok(())
}

impl<T: Real> CanonicalField<T> {
    pub fn coarse(density: DenseGrid<T>, color: DenseGrid<T>, density_shift: T, frame: Aabb) -> Result<Self> {
        if density.channels() != 1 || color.channels() != COARSE_COLOR_CHANNELS {
            return Err(Error::InvalidArgument(
                "coarse canonical field needs 1 density and 3 color channels".into(),
            ));
        }
        Ok(Self {
            density,
            color,
            color_net: None,
            density_shift,
            frame,
            pos_enc: PosEnc::new(5),
            dir_enc: PosEnc::new(4),
        })
    }

    pub fn fine(
        density: DenseGrid<T>,
        color: DenseGrid<T>,
        color_net: Mlp<T>,
        density_shift: T,
        frame: Aabb,
        pos_enc: PosEnc,
        dir_enc: PosEnc,
    ) -> Result<Self> {
        if density.channels() != 1 {
            return Err(Error::InvalidArgument("density grid must have 1 channel".into()));
        }
        let expected = color_net_spec(pos_enc, dir_enc, color.channels());
        if color_net.spec() != &expected {
            return Err(Error::InvalidArgument(format!(
                "color network shape {:?} does not match {:?}",
                color_net.spec(),
                expected
            )));
        }
        Ok(Self {
            density,
            color,
            color_net: Some(color_net),
            density_shift,
            frame,
            pos_enc,
            dir_enc,
        })
    }

    pub fn stage(&self) -> Stage {
        if self.color_net.is_some() {
            Stage::Fine
        } else {
            Stage::Coarse
        }
    }

    /// Density at one canonical point. Zero outside the density box.
    pub fn density_at(&self, p: Vec3<T>) -> T {
        if !self.density.contains(p) {
            return T::zero();
        }
        let st = self.density.stencil(p);
        let mut v = [T::zero()];
        self.density.gather(&st, &mut v);
        softplus(v[0] + self.density_shift)
    }

    pub fn color_at(&self, p: Vec3<T>, d: Vec3<T>) -> Result<Vec3<T>> {
        check_unit(d)?;
        Ok(self.forward(&[p], &[d])?.color[0])
    }

    pub fn forward(&self, points: &[Vec3<T>], dirs: &[Vec3<T>]) -> Result<CanonicalOutput<T>> {
        if points.len() != dirs.len() {
            return Err(Error::Dimension {
                expected: points.len(),
                got: dirs.len(),
                context: "canonical directions",
            });
        }
        let n = points.len();
        let mut sigma = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        let mut dens_st = Vec::with_capacity(n);
        let mut v = [T::zero()];
        for &p in points {
            let st = self.density.stencil(p);
            if st.inside {
                self.density.gather(&st, &mut v);
                let z = v[0] + self.density_shift;
                sigma.push(softplus(z));
                logits.push(Some(z));
            } else {
                sigma.push(T::zero());
                logits.push(None);
            }
            dens_st.push(st);
        }

        let nc = self.color.channels();
        let mut color_st = Vec::with_capacity(n);
        let mut color = Vec::with_capacity(n);
        let mut normalized = Vec::new();
        let mut cache = None;
        match &self.color_net {
            None => {
                let mut c = [T::zero(); 3];
                for &p in points {
                    let st = self.color.stencil(p);
                    self.color.gather(&st, &mut c);
                    color.push([sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])]);
                    color_st.push(st);
                }
            }
            Some(net) => {
                let np = self.pos_enc.out_dim(3);
                let nd = self.dir_enc.out_dim(3);
                let dim = net.input_dim();
                let mut input = vec![T::zero(); n * dim];
                normalized.reserve(n);
                for ((row, &p), d) in input.chunks_exact_mut(dim).zip(points).zip(dirs) {
                    let pn = self.frame.normalize(p);
                    self.pos_enc.encode(&pn, &mut row[..np]);
                    self.dir_enc.encode(d, &mut row[np..np + nd]);
                    let st = self.color.stencil(p);
                    self.color.gather(&st, &mut row[np + nd..np + nd + nc]);
                    color_st.push(st);
                    normalized.push(pn);
                }
                if n > 0 {
                    let c = net.forward(input, n)?;
                    color.extend(c.output().chunks_exact(3).map(|r| [r[0], r[1], r[2]]));
                    cache = Some(c);
                }
            }
        }
        Ok(CanonicalOutput {
            sigma,
            color,
            logits,
            dens_st,
            color_st,
            normalized,
            cache,
        })
    }

    /// Reverse pass; returns the gradient with respect to each query point.
    pub fn backward_with<S1: GridGradSink<T>, S2: GridGradSink<T>>(
        &self,
        out: &CanonicalOutput<T>,
        d_sigma: &[T],
        d_color: &[Vec3<T>],
        net_grads: Option<&mut [T]>,
        density_sink: &mut S1,
        color_sink: &mut S2,
    ) -> Vec<Vec3<T>> {
        let n = out.len();
        let mut dp = vec![[T::zero(); 3]; n];
        for i in 0..n {
            let Some(z) = out.logits[i] else { continue };
            let dz = [d_sigma[i] * sigmoid(z)];
            let st = &out.dens_st[i];
            density_sink.add(st, &dz);
            dp[i] = self.density.spatial_grad(st, &dz);
        }
        match &self.color_net {
            None => {
                for i in 0..n {
                    let c = out.color[i];
                    let dl = [
                        d_color[i][0] * c[0] * (T::one() - c[0]),
                        d_color[i][1] * c[1] * (T::one() - c[1]),
                        d_color[i][2] * c[2] * (T::one() - c[2]),
                    ];
                    let st = &out.color_st[i];
                    color_sink.add(st, &dl);
                    let g = self.color.spatial_grad(st, &dl);
                    for a in 0..3 {
                        dp[i][a] += g[a];
                    }
                }
            }
            Some(net) => {
                let Some(cache) = &out.cache else { return dp };
                let grads = net_grads.expect("fine stage needs a color-network gradient buffer");
                let up: Vec<T> = d_color.iter().flat_map(|c| c.iter().copied()).collect();
                let dx = net.backward_into(cache, &up, grads);
                let np = self.pos_enc.out_dim(3);
                let nd = self.dir_enc.out_dim(3);
                let dim = net.input_dim();
                let scale = self.frame.normalize_scale::<T>();
                for i in 0..n {
                    let row = &dx[i * dim..(i + 1) * dim];
                    let feat = &row[np + nd..];
                    let st = &out.color_st[i];
                    color_sink.add(st, feat);
                    let g = self.color.spatial_grad(st, feat);
                    let mut dn = [T::zero(); 3];
                    self.pos_enc.backward(&out.normalized[i], &row[..np], &mut dn);
                    for a in 0..3 {
                        dp[i][a] += g[a] + dn[a] * scale[a];
                    }
                }
            }
        }
        dp
    }

    /// Single-point reverse pass into this field's own gradient buffers.
    pub fn backward_point(&mut self, p: Vec3<T>, d: Vec3<T>, d_sigma: T, d_color: Vec3<T>) -> Result<Vec3<T>> {
        let out = self.forward(&[p], &[d])?;
        let mut dens = std::mem::take(&mut self.density.grads);
        let mut col = std::mem::take(&mut self.color.grads);
        let mut net_grads = self.color_net.as_mut().map(|n| std::mem::take(&mut n.grads));
        let dp = self.backward_with(
            &out,
            &[d_sigma],
            &[d_color],
            net_grads.as_deref_mut(),
            &mut DirectSink {
                grads: &mut dens,
                channels: 1,
            },
            &mut DirectSink {
                grads: &mut col,
                channels: self.color.channels(),
            },
        );
        self.density.grads = dens;
        self.color.grads = col;
        if let (Some(net), Some(g)) = (self.color_net.as_mut(), net_grads) {
            net.grads = g;
        }
        Ok(dp[0])
    }

    pub fn zero_grad(&mut self) {
        self.density.zero_grad();
        self.color.zero_grad();
        if let Some(net) = &mut self.color_net {
            net.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> CanonicalField<U> {
        CanonicalField {
            density: self.density.cast(),
            color: self.color.cast(),
            color_net: self.color_net.as_ref().map(|n| n.cast()),
            density_shift: U::lit(self.density_shift.as_f64()),
            frame: self.frame,
            pos_enc: self.pos_enc,
            dir_enc: self.dir_enc,
        }
    }
}
