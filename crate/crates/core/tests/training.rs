mod common;

use ndvg::canonical::CanonicalField;
use ndvg::checkpoint::Checkpoint;
use ndvg::dataset::Dataset;
use ndvg::deform::DeformationField;
use ndvg::loss::LossWeights;
use ndvg::model::{Filters, Model};
use ndvg::real::Vec3;
use ndvg::render::alpha;
use ndvg::scene::{gen_scene, GenOptions};
use ndvg::train::*;
use ndvg::{Aabb, DenseGrid, PosEnc, TrainConfig};
use rand::Rng;

fn tiny_options() -> GenOptions {
    GenOptions {
        width: 32,
        height: 32,
        train_views: 6,
        test_views: 2,
        times: 3,
        quadrature: 256,
        ..GenOptions::default()
    }
}

fn tiny_data(scene: &str) -> (tempfile::TempDir, TrainData) {
    let dir = tempfile::tempdir().unwrap();
    gen_scene(scene, 0, &tiny_options()).unwrap().write(dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    (dir, TrainData::from_dataset(&ds).unwrap())
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        coarse_iters: 200,
        fine_iters: 100,
        batch_rays: 256,
        coarse_deform_voxels: 4096,
        fine_deform_voxels: 8000,
        coarse_canonical_voxels: 8000,
        fine_canonical_voxels: 27_000,
        coarse_samples: 32,
        fine_samples: 48,
        alpha_init: 1e-4,
        ..TrainConfig::default()
    }
}

const PE: PosEnc = PosEnc::new(2);
const TE: PosEnc = PosEnc::new(2);

/// Deformation with `dp = velocity * t` at every point, and full occupancy.
fn drifting_deform(bbox: Aabb, velocity: [f32; 3]) -> DeformationField<f32> {
    let grid = DenseGrid::zeros([21, 21, 21], 2, bbox).unwrap();
    let mut d = DeformationField::new(grid, 0.0, bbox, PE, TE, 0).unwrap();
    d.net.params.iter_mut().for_each(|p| *p = 0.0);
    let np = PE.out_dim(3);
    let layers = d.net.layers().len();
    // Hidden unit 0 carries the raw time through every ReLU layer.
    d.net.weight_mut(0)[np * 64] = 1.0;
    for l in 1..layers - 1 {
        d.net.weight_mut(l)[0] = 1.0;
    }
    let out = d.net.weight_mut(layers - 1);
    out[..3].copy_from_slice(&velocity);
    d.net.bias_mut(layers - 1)[3] = 1000.0;
    d
}

/// Coarse model whose canonical field is an opaque ball.
fn ball_model(center: [f64; 3], radius: f64, velocity: [f32; 3]) -> Model<f32> {
    let bbox = Aabb::cube(1.0);
    let density = DenseGrid::from_fn([21, 21, 21], 1, bbox, |p, out| {
        let r2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
        out[0] = if r2 <= radius * radius { 50.0 } else { -50.0 };
    })
    .unwrap();
    let color = DenseGrid::zeros([3, 3, 3], 3, bbox).unwrap();
    Model {
        deform: drifting_deform(bbox, velocity),
        canonical: CanonicalField::coarse(density, color, 0.0, bbox).unwrap(),
        bbox,
        step: 0.1,
        background: [1.0; 3],
        use_occlusion: true,
        filters: Filters::default(),
    }
}

fn same_params(a: &Model<f32>, b: &Model<f32>) -> bool {
    a.deform.grid.values == b.deform.grid.values
        && a.deform.net.params == b.deform.net.params
        && a.canonical.density.values == b.canonical.density.values
        && a.canonical.color.values == b.canonical.color.values
        && a.canonical.color_net.as_ref().map(|n| &n.params) == b.canonical.color_net.as_ref().map(|n| &n.params)
}

#[test]
fn zero_iterations_write_initial_checkpoints() {
    let (_d, data) = tiny_data("translating-sphere");
    let cfg = TrainConfig {
        coarse_iters: 0,
        fine_iters: 0,
        ..tiny_config()
    };
    let out = tempfile::tempdir().unwrap();
    let result = train(&data, &cfg, Some(out.path())).unwrap();
    let init = init_coarse(&data, &cfg).unwrap();
    let coarse = Checkpoint::load(&out.path().join("coarse.ckpt")).unwrap();
    assert_eq!(coarse.iteration, 0);
    assert!(same_params(&coarse.model, &init));
    assert!(same_params(&result.coarse, &init));

    let expect_fine = Trainer::new(&data, cfg.clone(), None).unwrap().prepare_fine(&init).unwrap();
    let fine = Checkpoint::load(&out.path().join("fine.ckpt")).unwrap();
    assert!(same_params(&fine.model, &expect_fine));
    let csv = std::fs::read_to_string(out.path().join("loss.csv")).unwrap();
    assert_eq!(csv.trim(), LOSS_CSV_HEADER);
}

#[test]
fn static_scene_keeps_offsets_small() {
    let (_d, data) = tiny_data("static");
    let out = train(&data, &tiny_config(), None).unwrap();
    let mut r = common::rng(1);
    let b = data.bbox;
    let pts: Vec<Vec3<f32>> = (0..2000)
        .map(|_| std::array::from_fn(|a| r.random_range(b.min[a]..b.max[a]) as f32))
        .collect();
    let m = mean_offset(&out.fine, &pts, &data.distinct_times()).unwrap();
    assert!(m < 1e-2, "mean |dp| = {m}");
}

#[test]
fn heavy_offset_prior_collapses_the_warp() {
    let (_d, data) = tiny_data("translating-sphere");
    let cfg = tiny_config();
    let mut m = init_coarse(&data, &cfg).unwrap();
    let last = m.deform.net.layers().len() - 1;
    m.deform.net.bias_mut(last)[..3].copy_from_slice(&[0.05, -0.04, 0.03]);
    let mut r = common::rng(2);
    let b = data.bbox;
    let pts: Vec<Vec3<f32>> = (0..1000)
        .map(|_| std::array::from_fn(|a| r.random_range(b.min[a]..b.max[a]) as f32))
        .collect();
    let times = data.distinct_times();
    assert!(mean_offset(&m, &pts, &times).unwrap() > 0.03);

    let w = LossWeights {
        d_norm: 1e3,
        ..LossWeights::COARSE
    };
    let mut opt = Optimizer::for_model(&m);
    let mut sampler = RaySampler::new(0);
    let views: Vec<usize> = (0..data.views.len()).collect();
    for _ in 0..300 {
        let (rays, _) = sampler.draw(&data, &views, 128, false);
        optimize_step(&mut m, &mut opt, &rays, None, &w, &cfg, cfg.lr_grid, cfg.lr_net).unwrap();
    }
    let after = mean_offset(&m, &pts, &times).unwrap();
    assert!(after < 1e-3, "mean |dp| = {after}");
}

#[test]
fn fine_init_with_same_grid_reproduces_deformation() {
    let (_d, data) = tiny_data("translating-sphere");
    let cfg = tiny_config();
    let mut coarse = init_coarse(&data, &cfg).unwrap();
    let mut r = common::rng(3);
    coarse.deform.grid.values.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    coarse.deform.net.params.iter_mut().for_each(|v| *v += r.random_range(-0.05..0.05));
    let res = coarse.deform.grid.resolution();
    let fine = init_fine_from_coarse(&coarse, coarse.bbox, res, [9, 9, 9], 0.05, 0).unwrap();
    assert_eq!(fine.deform.grid.values, coarse.deform.grid.values);
    assert_eq!(fine.deform.net.params, coarse.deform.net.params);

    let b = data.bbox;
    let pts: Vec<Vec3<f32>> = (0..500)
        .map(|_| std::array::from_fn(|a| r.random_range(b.min[a]..b.max[a]) as f32))
        .collect();
    for t in [0.0f32, 0.3, 0.9] {
        let times = vec![t; pts.len()];
        let a = coarse.deform.forward(&pts, &times).unwrap();
        let c = fine.deform.forward(&pts, &times).unwrap();
        for i in 0..pts.len() {
            for k in 0..3 {
                assert!((a.p_prime[i][k] - c.p_prime[i][k]).abs() < 1e-6);
            }
            assert!((a.occ[i] - c.occ[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn fine_init_resamples_onto_shrunk_box() {
    let (_d, data) = tiny_data("translating-sphere");
    let cfg = tiny_config();
    let mut coarse = init_coarse(&data, &cfg).unwrap();
    // Constant grid stays constant.
    coarse.deform.grid.values.iter_mut().for_each(|v| *v = 0.25);
    let small = Aabb::new([-0.5, -0.4, -0.3], [0.4, 0.5, 0.2]).unwrap();
    let fine = init_fine_from_coarse(&coarse, small, [5, 6, 4], [5, 5, 5], 0.05, 0).unwrap();
    assert!(fine.deform.grid.values.iter().all(|&v| v == 0.25));
    assert_eq!(*fine.deform.grid.bbox(), small);

    let mut r = common::rng(4);
    coarse.deform.grid.values.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    let fine = init_fine_from_coarse(&coarse, small, [5, 6, 4], [5, 5, 5], 0.05, 0).unwrap();
    let oracle = coarse.deform.grid.cast::<f64>();
    let g = &fine.deform.grid;
    for i in 0..5 {
        for j in 0..6 {
            for k in 0..4 {
                let want = common::interp_oracle(&oracle, g.vertex_position([i, j, k]));
                for (a, b) in g.vertex([i, j, k]).iter().zip(&want) {
                    assert!((*a as f64 - b).abs() < 1e-6);
                }
            }
        }
    }
    assert_eq!(fine.canonical.color.channels(), 12);
    assert!(fine.canonical.color_net.is_some());
    assert!(init_fine_from_coarse(&fine, small, [5, 5, 5], [5, 5, 5], 0.05, 0).is_err());
}

#[test]
fn empty_mask_modes() {
    // Canonical ball at the origin; observation points drift by +0.5 x at t = 1.
    let m = ball_model([0.0; 3], 0.25, [0.5, 0.0, 0.0]);
    let pts = [[0.0f32, 0.0, 0.0], [-0.5, 0.0, 0.0], [0.0, 0.8, 0.0]];
    let times = [0.0, 1.0];
    let deform = empty_mask(&m, &pts, &times, 1e-3, 0.1, MaskMode::Deform).unwrap();
    let canonical = empty_mask(&m, &pts, &times, 1e-3, 0.1, MaskMode::Canonical).unwrap();
    // Opaque at the canonical time: valid in both.
    assert!(deform[0] && canonical[0]);
    // Empty at t_can but occupied at t = 1.
    assert!(deform[1] && !canonical[1]);
    // Empty at every time.
    assert!(!deform[2] && !canonical[2]);
}

#[test]
fn bbox_spans_the_sweep_of_a_moving_ball() {
    let m = ball_model([0.0; 3], 0.15, [0.6, 0.0, 0.0]);
    let still = compute_scene_bbox(&m, &[0.0], 1e-3, 0.1).unwrap();
    let times: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
    let swept = compute_scene_bbox(&m, &times, 1e-3, 0.1).unwrap();
    // Points at p reach the ball when p + 0.6 t is inside it.
    assert!(swept.min[0] <= still.min[0] - 0.6 + 1e-6);
    assert!((swept.max[0] - still.max[0]).abs() < 1e-9);
    for a in 1..3 {
        assert!((swept.min[a] - still.min[a]).abs() < 1e-9 && (swept.max[a] - still.max[a]).abs() < 1e-9);
    }
}

#[test]
fn scene_bbox_matches_vertex_loop() {
    let m: Model<f32> = common::random_model(5, true).cast();
    let times = [0.0, 0.4, 0.8];
    let (thresh, dref) = (0.05, 0.5);
    let got = compute_scene_bbox(&m, &times, thresh, dref).unwrap();

    let g = &m.deform.grid;
    let [nx, ny, nz] = g.resolution();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let p = g.vertex_position([i, j, k]);
                let hit = times.iter().any(|&t| {
                    let w = m.deform.deform(p.map(|v| v as f32), t as f32).unwrap();
                    let s = m.canonical.density_at(w.p_prime) * w.occ;
                    alpha(s, dref as f32) as f64 > thresh
                });
                if hit {
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    let cell = g.cell_size();
    let bb = g.bbox();
    for a in 0..3 {
        assert_eq!(got.min[a], (lo[a] - cell[a]).max(bb.min[a]));
        assert_eq!(got.max[a], (hi[a] + cell[a]).min(bb.max[a]));
    }
}

#[test]
fn empty_scene_is_reported() {
    let m = ball_model([0.0; 3], 0.15, [0.0; 3]);
    let mut empty = m.clone();
    empty.canonical.density.values.iter_mut().for_each(|v| *v = -50.0);
    assert!(matches!(compute_scene_bbox(&empty, &[0.0], 1e-3, 0.1), Err(ndvg::Error::EmptyScene { .. })));
}

#[test]
fn thread_count_does_not_change_a_step() {
    let (_d, data) = tiny_data("translating-sphere");
    let cfg = tiny_config();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let mut m = init_coarse(&data, &cfg).unwrap();
            let mut opt = Optimizer::for_model(&m);
            let mut sampler = RaySampler::new(9);
            let views: Vec<usize> = (0..data.views.len()).collect();
            for _ in 0..3 {
                let (rays, _) = sampler.draw(&data, &views, 1000, false);
                optimize_step(&mut m, &mut opt, &rays, None, &LossWeights::COARSE, &cfg, 0.1, 1e-3).unwrap();
            }
            m
        })
    };
    assert!(same_params(&run(1), &run(3)));
}
