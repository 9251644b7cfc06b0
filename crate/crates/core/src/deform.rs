//! Observation-to-canonical warp: a feature grid decoded by a light MLP into a
//! point offset and an occlusion weight.

use crate::encoding::PosEnc;
use crate::error::{Error, Result};
use crate::grid::{Aabb, DenseGrid, DirectSink, GridGradSink, Stencil};
use crate::mlp::{Activation, Mlp, MlpCache, MlpSpec};
use crate::real::{add3, Real, Vec3};

/// Channels of the deformation feature grid; fills the network's feature slot.
pub const DEFORM_FEATURES: usize = 44;
pub const DEFORM_WIDTH: usize = 64;
pub const DEFORM_HIDDEN_LAYERS: usize = 4;
/// Initial bias of the occlusion head, `sigmoid(3) ~ 0.95`.
pub const OCCLUSION_BIAS_INIT: f64 = 3.0;

pub fn deformation_net_spec(pos_enc: PosEnc, time_enc: PosEnc, features: usize) -> MlpSpec {
    MlpSpec {
        input_dim: pos_enc.out_dim(3) + time_enc.out_dim(1) + features,
        hidden_width: DEFORM_WIDTH,
        hidden_layers: DEFORM_HIDDEN_LAYERS,
        heads: vec![
            Activation::Linear,
            Activation::Linear,
            Activation::Linear,
            Activation::Sigmoid,
        ],
    }
}

#[derive(Clone, Debug)]
pub struct DeformationField<T = f32> {
    pub grid: DenseGrid<T>,
    pub net: Mlp<T>,
    /// Normalized time of the canonical frame. Queries at exactly this time bypass the network.
    pub t_can: T,
    /// Box that maps positions to `[-1, 1]` before encoding. Stays fixed when
    /// the feature grid is re-fitted to a tighter box, so network weights remain valid.
    pub frame: Aabb,
    pub pos_enc: PosEnc,
    pub time_enc: PosEnc,
}

/// Result of warping one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deformed<T> {
    pub p_prime: Vec3<T>,
    pub delta: Vec3<T>,
    pub occ: T,
}

/// Batched warp with everything needed for the reverse pass.
#[derive(Clone, Debug)]
pub struct DeformOutput<T> {
    pub p_prime: Vec<Vec3<T>>,
    pub delta: Vec<Vec3<T>>,
    pub occ: Vec<T>,
    /// Rows that went through the network (time differs from `t_can`).
    active: Vec<usize>,
    stencils: Vec<Stencil<T>>,
    normalized: Vec<Vec3<T>>,
    cache: Option<MlpCache<T>>,
}

impl<T: Real> DeformOutput<T> {
    pub fn len(&self) -> usize {
        self.p_prime.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_prime.is_empty()
    }

    /// Number of points evaluated by the network.
    pub fn network_rows(&self) -> usize {
        self.active.len()
    }
}

impl<T: Real> DeformationField<T> {
    /// Random network with a zeroed offset head (identity warp) and the
    /// occlusion head biased towards "visible".
    pub fn new(grid: DenseGrid<T>, t_can: T, frame: Aabb, pos_enc: PosEnc, time_enc: PosEnc, seed: u64) -> Result<Self> {
        let spec = deformation_net_spec(pos_enc, time_enc, grid.channels());
        let mut net = Mlp::init(spec, seed)?;
        let last = net.layers().len() - 1;
        let outputs = net.output_dim();
        for (i, w) in net.weight_mut(last).iter_mut().enumerate() {
            if i % outputs < 3 {
                *w = T::zero();
            }
        }
        let bias = net.bias_mut(last);
        bias[..3].iter_mut().for_each(|b| *b = T::zero());
        bias[3] = T::lit(OCCLUSION_BIAS_INIT);
        Self::from_parts(grid, net, t_can, frame, pos_enc, time_enc)
    }

    pub fn from_parts(
        grid: DenseGrid<T>,
        net: Mlp<T>,
        t_can: T,
        frame: Aabb,
        pos_enc: PosEnc,
        time_enc: PosEnc,
    ) -> Result<Self> {
        let expected = deformation_net_spec(pos_enc, time_enc, grid.channels());
        if net.spec() != &expected {
            return Err(Error::InvalidArgument(format!(
                "deformation network shape {:?} does not match {:?}",
                net.spec(),
                expected
            )));
        }
        Ok(Self {
            grid,
            net,
            t_can,
            frame,
            pos_enc,
            time_enc,
        })
    }

    #[inline]
    pub fn is_canonical(&self, t: T) -> bool {
        t == self.t_can
    }

    fn fill_row(&self, p: Vec3<T>, t: T, row: &mut [T]) -> (Stencil<T>, Vec3<T>) {
        let np = self.pos_enc.out_dim(3);
        let nt = self.time_enc.out_dim(1);
        let pn = self.frame.normalize(p);
        self.pos_enc.encode(&pn, &mut row[..np]);
        self.time_enc.encode(&[t], &mut row[np..np + nt]);
        let st = self.grid.stencil(p);
        self.grid.gather(&st, &mut row[np + nt..]);
        (st, pn)
    }

    pub fn forward(&self, points: &[Vec3<T>], times: &[T]) -> Result<DeformOutput<T>> {
        if points.len() != times.len() {
            return Err(Error::Dimension {
                expected: points.len(),
                got: times.len(),
                context: "deformation times",
            });
        }
        let n = points.len();
        let active: Vec<usize> = (0..n).filter(|&i| !self.is_canonical(times[i])).collect();
        let dim = self.net.input_dim();
        let mut input = vec![T::zero(); active.len() * dim];
        let mut stencils = Vec::with_capacity(active.len());
        let mut normalized = Vec::with_capacity(active.len());
        for (row, &i) in input.chunks_exact_mut(dim).zip(&active) {
            let (st, pn) = self.fill_row(points[i], times[i], row);
            stencils.push(st);
            normalized.push(pn);
        }
        let mut p_prime = points.to_vec();
        let mut delta = vec![[T::zero(); 3]; n];
        let mut occ = vec![T::one(); n];
        let cache = if active.is_empty() {
            None
        } else {
            let cache = self.net.forward(input, active.len())?;
            let out = cache.output();
            for (r, &i) in active.iter().enumerate() {
                let o = &out[r * 4..r * 4 + 4];
                delta[i] = [o[0], o[1], o[2]];
                p_prime[i] = add3(points[i], delta[i]);
                occ[i] = o[3];
            }
            Some(cache)
        };
        Ok(DeformOutput {
            p_prime,
            delta,
            occ,
            active,
            stencils,
            normalized,
            cache,
        })
    }

    pub fn deform(&self, p: Vec3<T>, t: T) -> Result<Deformed<T>> {
        let out = self.forward(&[p], &[t])?;
        Ok(Deformed {
            p_prime: out.p_prime[0],
            delta: out.delta[0],
            occ: out.occ[0],
        })
    }

    /// Reverse pass of [`DeformationField::forward`].
    ///
    /// `d_pprime` is the gradient with respect to each warped point and
    /// `d_occ` with respect to each occlusion weight. Network gradients go to
    /// `net_grads`, feature-grid gradients to `sink`. Returns the gradient with
    /// respect to the input points.
    pub fn backward_with<S: GridGradSink<T>>(
        &self,
        out: &DeformOutput<T>,
        d_pprime: &[Vec3<T>],
        d_occ: &[T],
        net_grads: &mut [T],
        sink: &mut S,
    ) -> Vec<Vec3<T>> {
        let mut dp = d_pprime.to_vec();
        let Some(cache) = &out.cache else {
            return dp;
        };
        let mut up = Vec::with_capacity(out.active.len() * 4);
        for &i in &out.active {
            up.extend_from_slice(&d_pprime[i]);
            up.push(d_occ[i]);
        }
        let dx = self.net.backward_into(cache, &up, net_grads);
        let np = self.pos_enc.out_dim(3);
        let nt = self.time_enc.out_dim(1);
        let scale = self.frame.normalize_scale::<T>();
        for (r, &i) in out.active.iter().enumerate() {
            let row = &dx[r * self.net.input_dim()..(r + 1) * self.net.input_dim()];
            let feat = &row[np + nt..];
            let st = &out.stencils[r];
            sink.add(st, feat);
            let g = self.grid.spatial_grad(st, feat);
            let mut dn = [T::zero(); 3];
            self.pos_enc.backward(&out.normalized[r], &row[..np], &mut dn);
            for a in 0..3 {
                dp[i][a] += g[a] + dn[a] * scale[a];
            }
        }
        dp
    }

    /// Single-point reverse pass accumulating into this field's own buffers.
    pub fn deform_backward(&mut self, p: Vec3<T>, t: T, d_pprime: Vec3<T>, d_occ: T) -> Result<Vec3<T>> {
        let out = self.forward(&[p], &[t])?;
        let mut net_grads = std::mem::take(&mut self.net.grads);
        let mut grid_grads = std::mem::take(&mut self.grid.grads);
        let dp = {
            let mut sink = DirectSink {
                grads: &mut grid_grads,
                channels: self.grid.channels(),
            };
            self.backward_with(&out, &[d_pprime], &[d_occ], &mut net_grads, &mut sink)
        };
        self.net.grads = net_grads;
        self.grid.grads = grid_grads;
        Ok(dp[0])
    }

    pub fn zero_grad(&mut self) {
        self.grid.zero_grad();
        self.net.zero_grad();
    }

    pub fn cast<U: Real>(&self) -> DeformationField<U> {
        DeformationField {
            grid: self.grid.cast(),
            net: self.net.cast(),
            t_can: U::lit(self.t_can.as_f64()),
            frame: self.frame,
            pos_enc: self.pos_enc,
            time_enc: self.time_enc,
        }
    }
}
