//! Shared fixtures, brute-force oracles and the finite-difference suite.
#![allow(dead_code)]

use ndvg::canonical::{color_net_spec, CanonicalField};
use ndvg::deform::{deformation_net_spec, DeformationField};
use ndvg::grid::{DirectSink, GridGradLog};
use ndvg::loss::{self, TV_EPS};
use ndvg::model::{Filters, Model, Upstream};
use ndvg::real::Vec3;
use ndvg::render::{composite, composite_backward, occlusion_gate, occlusion_gate_backward, Ray};
use ndvg::{Aabb, DenseGrid, Mlp, PosEnc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn random_grid(rng: &mut ChaCha8Rng, res: [usize; 3], nc: usize, bbox: Aabb, lo: f64, hi: f64) -> DenseGrid<f64> {
    DenseGrid::from_fn(res, nc, bbox, |_, out| {
        for o in out {
            *o = rng.random_range(lo..hi);
        }
    })
    .unwrap()
}

pub fn scene_box() -> Aabb {
    Aabb::new([-1.0, -0.8, -0.9], [0.9, 1.0, 0.8]).unwrap()
}

/// Small fine-stage model with every parameter random, so offsets and
/// occlusion weights are non-trivial.
pub fn random_model(seed: u64, use_occlusion: bool) -> Model<f64> {
    let mut r = rng(seed);
    let bbox = scene_box();
    let (pe, te) = (PosEnc::new(2), PosEnc::new(2));
    let g = random_grid(&mut r, [4, 5, 4], 6, bbox, -0.5, 0.5);
    let net = Mlp::init_with(deformation_net_spec(pe, te, 6), &mut r).unwrap();
    let deform = DeformationField::from_parts(g, net, 0.0, bbox, pe, te).unwrap();
    let density = random_grid(&mut r, [5, 5, 5], 1, bbox, -1.0, 2.0);
    let color = random_grid(&mut r, [5, 4, 5], 4, bbox, -1.0, 1.0);
    let (cpe, cde) = (PosEnc::new(2), PosEnc::new(1));
    let cnet = Mlp::init_with(color_net_spec(cpe, cde, 4), &mut r).unwrap();
    let canonical = CanonicalField::fine(density, color, cnet, 0.0, bbox, cpe, cde).unwrap();
    Model {
        deform,
        canonical,
        bbox,
        step: 0.15,
        background: [0.2, 0.5, 0.9],
        use_occlusion,
        filters: Filters::default(),
    }
}

/// Coarse-stage counterpart of [`random_model`].
pub fn random_coarse_model(seed: u64) -> Model<f64> {
    let mut m = random_model(seed, true);
    let mut r = rng(seed ^ 0xc0a5);
    let bbox = scene_box();
    let color = random_grid(&mut r, [5, 4, 5], 3, bbox, -1.0, 1.0);
    m.canonical = CanonicalField::coarse(m.canonical.density.clone(), color, -0.5, bbox).unwrap();
    m
}

/// Rays from a sphere of radius 3 aimed near the origin, at random times in
/// `(0.05, 1)` and with random targets.
pub fn random_rays(rng: &mut ChaCha8Rng, n: usize) -> Vec<Ray<f64>> {
    (0..n)
        .map(|_| {
            let o = unit([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .map(|v| 3.0 * v);
            let aim = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
            let d = unit([aim[0] - o[0], aim[1] - o[1], aim[2] - o[2]]);
            let target = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            Ray::new(o, d, rng.random_range(0.05..1.0)).with_target(target)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Denominator floor for relative errors, as a fraction of the largest
/// gradient in the group being checked. Central differences of an O(1) loss
/// carry roundoff near `eps * |f| / h` (about 1e-10 here), so entries far
/// below the group scale are compared against the scale instead.
pub const REL_FLOOR: f64 = 1e-3;
/// Absolute part of the floor, a few hundred times the roundoff level.
pub const ABS_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` in coordinate `i`. When the one-sided slopes
/// disagree, a ReLU or cell-boundary kink lies inside the interval and the
/// estimate is redone with a step small enough to miss it.
pub fn central_diff(x: &mut [f64], i: usize, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    let mut eval = |x: &mut [f64], v: f64| {
        x[i] = v;
        let r = f(x);
        x[i] = orig;
        r
    };
    let (up, mid, dn) = (eval(x, orig + FD_STEP), eval(x, orig), eval(x, orig - FD_STEP));
    let (right, left) = ((up - mid) / FD_STEP, (mid - dn) / FD_STEP);
    let central = (up - dn) / (2.0 * FD_STEP);
    if (right - left).abs() <= KINK_RATIO * central.abs().max(1.0) {
        return central;
    }
    let h = FD_STEP * 1e-2;
    (eval(x, orig + h) - eval(x, orig - h)) / (2.0 * h)
}

/// Slope jump, relative to the slope, that marks a kink. Smooth functions
/// give `h * f''`, well below this.
pub const KINK_RATIO: f64 = 1e-4;

/// Worst relative error between `analytic[i]` and the central difference of
/// `f` in coordinate `i` of `x`, over `indices`.
pub fn fd_worst(x: &mut [f64], indices: &[usize], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let floor = ABS_FLOOR.max(REL_FLOOR * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs())));
    let mut worst = 0.0f64;
    for &i in indices {
        let n = central_diff(x, i, &mut f);
        worst = worst.max(rel_err(analytic[i], n, floor));
    }
    worst
}

/// Up to `n` indices, half where the analytic gradient is largest and the
/// rest random.
pub fn pick(rng: &mut ChaCha8Rng, analytic: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..analytic.len()).collect();
    idx.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
    let mut out: Vec<usize> = idx.iter().copied().take(n / 2).collect();
    while out.len() < n.min(analytic.len()) {
        let i = rng.random_range(0..analytic.len());
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn flat3(v: &[Vec3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|c| c.iter().copied()).collect()
}

fn unflat3(v: &[f64]) -> Vec<Vec3<f64>> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

// ---------------------------------------------------------------------------
// Per-operation gradient checks. Each returns the worst relative error.

pub fn grad_interp(seed: u64) -> f64 {
    let mut r = rng(seed);
    let bbox = scene_box();
    let mut g = random_grid(&mut r, [4, 3, 5], 3, bbox, -1.0, 1.0);
    let up: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let p = [r.random_range(-0.95..0.85), r.random_range(-0.75..0.95), r.random_range(-0.85..0.75)];
    let dp = g.interp_backward(p, &up);
    let analytic = g.grads.clone();
    let mut vals = g.values.clone();
    let idx: Vec<usize> = (0..vals.len()).collect();
    let shape = g.clone();
    let mut worst = fd_worst(&mut vals, &idx, &analytic, |v| {
        let mut h = shape.clone();
        h.values = v.to_vec();
        dot(&h.interp(p), &up)
    });
    let mut pv = p.to_vec();
    worst = worst.max(fd_worst(&mut pv, &[0, 1, 2], &dp, |q| dot(&shape.interp([q[0], q[1], q[2]]), &up)));
    worst
}

pub fn grad_tv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut g = random_grid(&mut r, [4, 5, 3], 2, scene_box(), -1.0, 1.0);
    g.tv_backward(TV_EPS, 1.0);
    let analytic = g.grads.clone();
    let mut vals = g.values.clone();
    let idx: Vec<usize> = (0..vals.len()).collect();
    fd_worst(&mut vals, &idx, &analytic, |v| {
        let mut h = g.clone();
        h.values = v.to_vec();
        h.tv_loss(TV_EPS)
    })
}

pub fn grad_mlp(seed: u64) -> f64 {
    let mut r = rng(seed);
    let spec = ndvg::MlpSpec {
        input_dim: 5,
        hidden_width: 7,
        hidden_layers: 3,
        heads: vec![ndvg::Activation::Linear, ndvg::Activation::Sigmoid, ndvg::Activation::Linear],
    };
    let net = Mlp::<f64>::init_with(spec, &mut r).unwrap();
    let rows = 4;
    let input: Vec<f64> = (0..rows * 5).map(|_| r.random_range(-1.0..1.0)).collect();
    let up: Vec<f64> = (0..rows * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let cache = net.forward(input.clone(), rows).unwrap();
    let mut grads = vec![0.0; net.num_params()];
    let dx = net.backward_into(&cache, &up, &mut grads);
    let loss = |n: &Mlp<f64>, x: &[f64]| dot(n.forward(x.to_vec(), rows).unwrap().output(), &up);
    let mut params = net.params.clone();
    let idx: Vec<usize> = (0..params.len()).collect();
    let mut worst = fd_worst(&mut params, &idx, &grads, |p| {
        let mut n = net.clone();
        n.params = p.to_vec();
        loss(&n, &input)
    });
    let mut x = input.clone();
    let idx: Vec<usize> = (0..x.len()).collect();
    worst = worst.max(fd_worst(&mut x, &idx, &dx, |x| loss(&net, x)));
    worst
}

pub fn grad_posenc(seed: u64) -> f64 {
    let mut r = rng(seed);
    let pe = PosEnc::new(4);
    let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let up: Vec<f64> = (0..pe.out_dim(3)).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut dx = vec![0.0; 3];
    pe.backward(&x, &up, &mut dx);
    let mut xv = x.clone();
    fd_worst(&mut xv, &[0, 1, 2], &dx, |x| dot(&pe.encode_vec(x), &up))
}

pub fn grad_deform(seed: u64) -> f64 {
    let m = random_model(seed, true);
    let d = &m.deform;
    let mut r = rng(seed + 100);
    let n = 6;
    let pts: Vec<Vec3<f64>> = (0..n)
        .map(|_| [r.random_range(-0.9..0.8), r.random_range(-0.7..0.9), r.random_range(-0.8..0.7)])
        .collect();
    let times: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
    let up_p: Vec<Vec3<f64>> = (0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
    let up_o: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |f: &DeformationField<f64>, p: &[Vec3<f64>]| {
        let o = f.forward(p, &times).unwrap();
        dot(&flat3(&o.p_prime), &flat3(&up_p)) + dot(&o.occ, &up_o)
    };
    let out = d.forward(&pts, &times).unwrap();
    let mut net_g = vec![0.0; d.net.num_params()];
    let mut grid_g = vec![0.0; d.grid.values.len()];
    let dp = d.backward_with(
        &out,
        &up_p,
        &up_o,
        &mut net_g,
        &mut DirectSink {
            grads: &mut grid_g,
            channels: d.grid.channels(),
        },
    );
    let mut worst = 0.0f64;
    let mut params = d.net.params.clone();
    let idx = pick(&mut r, &net_g, 40);
    worst = worst.max(fd_worst(&mut params, &idx, &net_g, |p| {
        let mut f = d.clone();
        f.net.params = p.to_vec();
        loss(&f, &pts)
    }));
    let mut vals = d.grid.values.clone();
    let idx = pick(&mut r, &grid_g, 40);
    worst = worst.max(fd_worst(&mut vals, &idx, &grid_g, |v| {
        let mut f = d.clone();
        f.grid.values = v.to_vec();
        loss(&f, &pts)
    }));
    let mut pv = flat3(&pts);
    let idx: Vec<usize> = (0..pv.len()).collect();
    worst = worst.max(fd_worst(&mut pv, &idx, &flat3(&dp), |p| loss(d, &unflat3(p))));
    worst
}

/// Density and color paths of the canonical field, coarse and fine.
pub fn grad_canonical(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for fine in [false, true] {
        let m = if fine { random_model(seed, true) } else { random_coarse_model(seed) };
        let c = &m.canonical;
        let mut r = rng(seed + 200);
        let n = 6;
        let pts: Vec<Vec3<f64>> = (0..n)
            .map(|_| [r.random_range(-0.9..0.8), r.random_range(-0.7..0.9), r.random_range(-0.8..0.7)])
            .collect();
        let dirs: Vec<Vec3<f64>> = (0..n)
            .map(|_| unit([r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]))
            .collect();
        let up_s: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let up_c: Vec<Vec3<f64>> = (0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let loss = |f: &CanonicalField<f64>, p: &[Vec3<f64>]| {
            let o = f.forward(p, &dirs).unwrap();
            dot(&o.sigma, &up_s) + dot(&flat3(&o.color), &flat3(&up_c))
        };
        let out = c.forward(&pts, &dirs).unwrap();
        let mut net_g = c.color_net.as_ref().map(|n| vec![0.0; n.num_params()]);
        let mut dens_g = vec![0.0; c.density.values.len()];
        let mut col_g = vec![0.0; c.color.values.len()];
        let dp = c.backward_with(
            &out,
            &up_s,
            &up_c,
            net_g.as_deref_mut(),
            &mut DirectSink {
                grads: &mut dens_g,
                channels: 1,
            },
            &mut DirectSink {
                grads: &mut col_g,
                channels: c.color.channels(),
            },
        );
        let mut vals = c.density.values.clone();
        let idx = pick(&mut r, &dens_g, 30);
        worst = worst.max(fd_worst(&mut vals, &idx, &dens_g, |v| {
            let mut f = c.clone();
            f.density.values = v.to_vec();
            loss(&f, &pts)
        }));
        let mut vals = c.color.values.clone();
        let idx = pick(&mut r, &col_g, 30);
        worst = worst.max(fd_worst(&mut vals, &idx, &col_g, |v| {
            let mut f = c.clone();
            f.color.values = v.to_vec();
            loss(&f, &pts)
        }));
        if let Some(ng) = &net_g {
            let mut params = c.color_net.as_ref().unwrap().params.clone();
            let idx = pick(&mut r, ng, 40);
            worst = worst.max(fd_worst(&mut params, &idx, ng, |p| {
                let mut f = c.clone();
                f.color_net.as_mut().unwrap().params = p.to_vec();
                loss(&f, &pts)
            }));
        }
        let mut pv = flat3(&pts);
        let idx: Vec<usize> = (0..pv.len()).collect();
        worst = worst.max(fd_worst(&mut pv, &idx, &flat3(&dp), |p| loss(c, &unflat3(p))));
    }
    worst
}

pub fn grad_gate(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut x: Vec<f64> = (0..5).map(|_| r.random_range(0.05..2.0)).collect();
    x[4] = r.random_range(0.05..1.0);
    let up: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let f = |x: &[f64]| {
        let (s, c) = occlusion_gate(x[0], [x[1], x[2], x[3]], x[4]);
        up[0] * s + up[1] * c[0] + up[2] * c[1] + up[3] * c[2]
    };
    let (ds, dc, dw) = occlusion_gate_backward(x[0], [x[1], x[2], x[3]], x[4], up[0], [up[1], up[2], up[3]]);
    let analytic = [ds, dc[0], dc[1], dc[2], dw];
    fd_worst(&mut x, &[0, 1, 2, 3, 4], &analytic, f)
}

pub fn grad_composite(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(3..12);
    let delta: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.2)).collect();
    let bg = [0.3, 0.6, 0.1];
    let d_rgb = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
    let d_t = r.random_range(-1.0..1.0);
    // x = sigma followed by flattened colors.
    let mut x: Vec<f64> = (0..n).map(|_| r.random_range(0.0..8.0)).collect();
    x.extend((0..3 * n).map(|_| r.random_range(0.0..1.0)));
    let f = |x: &[f64]| {
        let c = composite(&x[..n], &unflat3(&x[n..]), &delta, bg);
        dot(&c.rgb, &d_rgb) + c.t_final * d_t
    };
    let c = composite(&x[..n], &unflat3(&x[n..]), &delta, bg);
    let mut ds = vec![0.0; n];
    let mut dc = vec![[0.0; 3]; n];
    composite_backward(&x[..n], &unflat3(&x[n..]), &delta, bg, &c.weights, c.t_final, d_rgb, d_t, &mut ds, &mut dc);
    let mut analytic = ds;
    analytic.extend(flat3(&dc));
    let idx: Vec<usize> = (0..x.len()).collect();
    fd_worst(&mut x, &idx, &analytic, f)
}

/// Photometric, point-color, background-entropy and offset-norm losses with
/// respect to their direct inputs.
pub fn grad_losses(seed: u64) -> f64 {
    let mut r = rng(seed);
    let rays = 5;
    let targets: Vec<Vec3<f64>> = (0..rays).map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect();
    let mut worst = 0.0f64;

    let mut pred = flat3(&(0..rays).map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect::<Vec<_>>());
    let mut g = vec![[0.0; 3]; rays];
    loss::photometric_grad(&unflat3(&pred), &targets, 1.0, &mut g);
    let idx: Vec<usize> = (0..pred.len()).collect();
    worst = worst.max(fd_worst(&mut pred, &idx, &flat3(&g), |p| loss::photometric(&unflat3(p), &targets).unwrap()));

    let mut offsets = vec![0usize];
    for _ in 0..rays {
        offsets.push(offsets.last().unwrap() + r.random_range(0..14));
    }
    let m = *offsets.last().unwrap();
    let weights: Vec<f64> = (0..m).map(|_| r.random_range(0.0..1.0)).collect();
    let mut colors = flat3(&(0..m).map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)]).collect::<Vec<_>>());
    let mut g = vec![[0.0; 3]; m];
    loss::point_color_grad(&weights, &unflat3(&colors), &offsets, &targets, 8, 1.0, &mut g);
    let idx: Vec<usize> = (0..colors.len()).collect();
    worst = worst.max(fd_worst(&mut colors, &idx, &flat3(&g), |c| {
        loss::point_color(&weights, &unflat3(c), &offsets, &targets, 8)
    }));

    let mut t: Vec<f64> = (0..rays).map(|_| r.random_range(0.01..0.99)).collect();
    let mut g = vec![0.0; rays];
    loss::background_entropy_grad(&t, 1.0, &mut g);
    let idx: Vec<usize> = (0..rays).collect();
    worst = worst.max(fd_worst(&mut t, &idx, &g, |t| loss::background_entropy(t)));

    let mut d = flat3(&(0..m.max(1)).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect::<Vec<_>>());
    let mut g = vec![[0.0; 3]; m.max(1)];
    loss::deformation_norm_grad(&unflat3(&d), rays, 1.0, &mut g);
    let idx: Vec<usize> = (0..d.len()).collect();
    worst = worst.max(fd_worst(&mut d, &idx, &flat3(&g), |d| loss::deformation_norm(&unflat3(d), rays)));
    worst
}

/// Scalar training objective of a model on `rays`, with the loss weights
/// of the coarse preset plus the TV term on the deformation grid.
pub fn chain_loss(m: &Model<f64>, rays: &[Ray<f64>]) -> f64 {
    let w = loss::LossWeights::COARSE;
    let b = m.forward(rays, None).unwrap();
    let targets: Vec<Vec3<f64>> = rays.iter().map(|r| r.target).collect();
    loss::photometric(&b.rgb, &targets).unwrap()
        + w.ptc * loss::point_color(&b.weights, b.color(), &b.comp_offsets, &targets, 8)
        + w.bg * loss::background_entropy(&b.t_final)
        + w.d_norm * loss::deformation_norm(b.delta(), rays.len())
        + w.d_tv * m.deform.grid.tv_loss(TV_EPS)
}

/// Analytic gradient of [`chain_loss`], left in the model's buffers.
pub fn chain_backward(m: &mut Model<f64>, rays: &[Ray<f64>]) {
    let w = loss::LossWeights::COARSE;
    m.zero_grad();
    let b = m.forward(rays, None).unwrap();
    let targets: Vec<Vec3<f64>> = rays.iter().map(|r| r.target).collect();
    let mut up = Upstream::zeros(&b);
    loss::photometric_grad(&b.rgb, &targets, 1.0, &mut up.d_rgb);
    loss::point_color_grad(&b.weights, b.color(), &b.comp_offsets, &targets, 8, w.ptc, &mut up.d_color);
    loss::background_entropy_grad(&b.t_final, w.bg, &mut up.d_tfinal);
    loss::deformation_norm_grad(b.delta(), rays.len(), w.d_norm, &mut up.d_delta);
    let g = m.backward(&b, &up);
    g.apply(m);
    m.deform.grid.tv_backward(TV_EPS, w.d_tv);
}

/// Full render chain: every parameter class of a random model, through
/// sampling, warp, canonical lookup, gate, compositing and all losses.
pub fn grad_full_chain(seed: u64) -> f64 {
    let mut r = rng(seed + 300);
    let mut m = random_model(seed, true);
    let rays = random_rays(&mut r, 4);
    chain_backward(&mut m, &rays);
    let base = m.clone();
    let mut worst = 0.0f64;
    type Get = fn(&mut Model<f64>) -> &mut Vec<f64>;
    let groups: [(Get, Get); 5] = [
        (|m| &mut m.deform.grid.values, |m| &mut m.deform.grid.grads),
        (|m| &mut m.deform.net.params, |m| &mut m.deform.net.grads),
        (|m| &mut m.canonical.density.values, |m| &mut m.canonical.density.grads),
        (|m| &mut m.canonical.color.values, |m| &mut m.canonical.color.grads),
        (
            |m| &mut m.canonical.color_net.as_mut().unwrap().params,
            |m| &mut m.canonical.color_net.as_mut().unwrap().grads,
        ),
    ];
    for (vals, grads) in groups {
        let analytic = grads(&mut m).clone();
        let mut x = vals(&mut m).clone();
        let idx = pick(&mut r, &analytic, 16);
        worst = worst.max(fd_worst(&mut x, &idx, &analytic, |v| {
            let mut mm = base.clone();
            *vals(&mut mm) = v.to_vec();
            chain_loss(&mm, &rays)
        }));
    }
    worst
}

/// Runs `check` for seeds `0..SEEDS` and returns the worst error.
pub fn over_seeds(check: fn(u64) -> f64) -> f64 {
    (0..SEEDS).map(check).fold(0.0, f64::max)
}

pub const PER_OP_CHECKS: [(&str, fn(u64) -> f64); 9] = [
    ("interp", grad_interp),
    ("tv", grad_tv),
    ("mlp", grad_mlp),
    ("posenc", grad_posenc),
    ("deform", grad_deform),
    ("density+color", grad_canonical),
    ("occlusion gate", grad_gate),
    ("composite", grad_composite),
    ("losses", grad_losses),
];

// ---------------------------------------------------------------------------
// Brute-force oracles.

/// Trilinear interpolation written out over all eight corners.
pub fn interp_oracle(g: &DenseGrid<f64>, p: [f64; 3]) -> Vec<f64> {
    let res = g.resolution();
    let b = g.bbox();
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for a in 0..3 {
        let u = ((p[a] - b.min[a]) / (b.max[a] - b.min[a]) * (res[a] - 1) as f64).clamp(0.0, (res[a] - 1) as f64);
        let i = (u.floor() as usize).min(res[a] - 2);
        i0[a] = i;
        f[a] = u - i as f64;
    }
    let nc = g.channels();
    let mut out = vec![0.0; nc];
    for dx in 0..2 {
        for dy in 0..2 {
            for dz in 0..2 {
                let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                    * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                let v = g.vertex([i0[0] + dx, i0[1] + dy, i0[2] + dz]);
                for c in 0..nc {
                    out[c] += w * v[c];
                }
            }
        }
    }
    out
}

/// Direct product-formula compositing.
pub fn composite_oracle(sigma: &[f64], color: &[[f64; 3]], delta: &[f64], bg: [f64; 3]) -> ([f64; 3], f64, Vec<f64>) {
    let mut w = Vec::new();
    let mut rgb = [0.0; 3];
    for k in 0..sigma.len() {
        let t: f64 = (0..k).map(|j| (-sigma[j] * delta[j]).exp()).product();
        let wk = t * (1.0 - (-sigma[k] * delta[k]).exp());
        for c in 0..3 {
            rgb[c] += wk * color[k][c];
        }
        w.push(wk);
    }
    let t_final: f64 = (0..sigma.len()).map(|j| (-sigma[j] * delta[j]).exp()).product();
    for c in 0..3 {
        rgb[c] += t_final * bg[c];
    }
    (rgb, t_final, w)
}

/// Total variation by explicit loops.
pub fn tv_oracle(g: &DenseGrid<f64>, eps: f64) -> f64 {
    let [nx, ny, nz] = g.resolution();
    let mut s = 0.0;
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                for c in 0..g.channels() {
                    let v = g.vertex([i, j, k])[c];
                    let dx = g.vertex([i + 1, j, k])[c] - v;
                    let dy = g.vertex([i, j + 1, k])[c] - v;
                    let dz = g.vertex([i, j, k + 1])[c] - v;
                    s += (dx * dx + dy * dy + dz * dz + 3.0 * eps).sqrt();
                }
            }
        }
    }
    s / ((nx - 1) * (ny - 1) * (nz - 1)) as f64
}

/// Slab intersection by explicit per-axis intervals.
pub fn slab_oracle(o: [f64; 3], d: [f64; 3], b: &Aabb) -> Option<(f64, f64)> {
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[a] - o[a]) / d[a];
        let t2 = (b.max[a] - o[a]) / d[a];
        near = near.max(t1.min(t2));
        far = far.min(t1.max(t2));
    }
    let near = near.max(0.0);
    (far > near).then_some((near, far))
}

pub fn psnr_oracle(a: &ndvg::image::Image, b: &ndvg::image::Image) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for (p, q) in a.data.iter().zip(&b.data) {
        for c in 0..3 {
            s += (p[c] as f64 - q[c] as f64).powi(2);
            n += 1.0;
        }
    }
    -10.0 * (s / n).log10()
}

/// SSIM with a full 2D Gaussian window at every valid position.
pub fn ssim_oracle(a: &ndvg::image::Image, b: &ndvg::image::Image) -> f64 {
    let (win, sigma) = (11usize, 1.5f64);
    let h = (win / 2) as f64;
    let mut w2 = vec![0.0; win * win];
    for y in 0..win {
        for x in 0..win {
            w2[y * win + x] = (-((x as f64 - h).powi(2) + (y as f64 - h).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = w2.iter().sum();
    w2.iter_mut().for_each(|v| *v /= z);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for c in 0..3 {
        for y0 in 0..=a.height - win {
            for x0 in 0..=a.width - win {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in 0..win {
                    for x in 0..win {
                        let w = w2[y * win + x];
                        let pa = a.get(x0 + x, y0 + y)[c] as f64;
                        let pb = b.get(x0 + x, y0 + y)[c] as f64;
                        ma += w * pa;
                        mb += w * pb;
                        saa += w * pa * pa;
                        sbb += w * pb * pb;
                        sab += w * pa * pb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

/// Adam written from the published update rule.
pub fn adam_oracle(grads: &[f64], lr: f64, p0: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut m, mut v, mut p) = (0.0, 0.0, p0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        out.push(p);
    }
    out
}

/// Deterministic merge of per-chunk gradient logs, for checks that need one.
pub fn merged(logs: &[GridGradLog<f64>], len: usize) -> Vec<f64> {
    let mut g = vec![0.0; len];
    for l in logs {
        l.apply(&mut g);
    }
    g
}
