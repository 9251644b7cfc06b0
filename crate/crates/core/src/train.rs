//! Two-stage optimization: a coarse view-independent model that bounds the
//! scene and seeds a finer view-dependent one.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::canonical::{color_net_spec, density_shift_for_alpha, CanonicalField, Stage, FINE_COLOR_FEATURES};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::deform::{DeformationField, DEFORM_FEATURES};
use crate::encoding::PosEnc;
use crate::error::{Error, Result};
use crate::grid::{resolution_from_voxel_count, Aabb, DenseGrid};
use crate::loss::{self, LossTerms, LossWeights, TV_EPS};
use crate::mlp::Mlp;
use crate::model::{Filters, Gradients, Model, Occupancy, Upstream};
use crate::optim::{decayed_lr, Adam};
use crate::real::{Real, Vec3};
use crate::render::{alpha, Ray};

pub const LOSS_CSV_HEADER: &str = "iter,photo,ptc,bg,d_norm,d_tv,total,psnr_train";
pub const DEFORM_POS_ENC: PosEnc = PosEnc::new(5);
pub const DEFORM_TIME_ENC: PosEnc = PosEnc::new(5);
pub const COLOR_POS_ENC: PosEnc = PosEnc::new(5);
pub const COLOR_DIR_ENC: PosEnc = PosEnc::new(4);

/// Every training pixel as a ray, grouped by view.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub rays: Vec<Ray<f32>>,
    pub views: Vec<Range<usize>>,
    pub times: Vec<f64>,
    pub bbox: Aabb,
    pub background: [f64; 3],
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.train.is_empty() {
            return Err(Error::InvalidArgument("dataset has no training views".into()));
        }
        let mut rays = Vec::new();
        let mut views = Vec::new();
        let mut times = Vec::new();
        for v in &ds.train {
            let start = rays.len();
            for (r, px) in v.camera.rays(v.time).into_iter().zip(&v.image.data) {
                rays.push(r.with_target(px.map(f64::from)).cast());
            }
            views.push(start..rays.len());
            times.push(v.time);
        }
        Ok(Self {
            rays,
            views,
            times,
            bbox: ds.bbox,
            background: ds.background,
        })
    }

    /// Distinct view times in increasing order.
    pub fn distinct_times(&self) -> Vec<f64> {
        let mut t = self.times.clone();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

/// Indices of the frames admitted at `iter`: those within
/// `(iter / ramp_end) * max_dist` of the canonical time. When no frame sits
/// exactly at `t_can` the nearest ones stand in for it.
pub fn progressive_time_window(iter: usize, ramp_end: usize, times: &[f64], t_can: f64) -> Vec<usize> {
    let dist: Vec<f64> = times.iter().map(|t| (t - t_can).abs()).collect();
    let max = dist.iter().copied().fold(0.0, f64::max);
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let frac = if ramp_end == 0 { 1.0 } else { (iter as f64 / ramp_end as f64).min(1.0) };
    let radius = (frac * max).max(min);
    (0..times.len()).filter(|&i| dist[i] <= radius).collect()
}

/// `1 - exp(-sigma' delta_ref)` of the gated density after warping `points`
/// to time `t`.
pub fn warped_alpha(model: &Model<f32>, points: &[Vec3<f32>], t: f64, delta_ref: f64) -> Result<Vec<f32>> {
    let chunks: Vec<Result<Vec<f32>>> = points
        .par_chunks(8192)
        .map(|c| {
            let times = vec![t as f32; c.len()];
            let w = model.deform.forward(c, &times)?;
            Ok(w.p_prime
                .iter()
                .zip(&w.occ)
                .map(|(&pp, &occ)| {
                    let s = model.canonical.density_at(pp);
                    let s = if model.use_occlusion { s * occ } else { s };
                    alpha(s, delta_ref as f32)
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(points.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn vertices(lattice: &DenseGrid<f32>) -> Vec<Vec3<f32>> {
    let [nx, ny, nz] = lattice.resolution();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                out.push(lattice.vertex_position([i, j, k]).map(|v| v as f32));
            }
        }
    }
    out
}

/// Max over `times` of the warped alpha at every vertex of the deformation grid.
pub fn max_alpha_grid(model: &Model<f32>, times: &[f64], delta_ref: f64) -> Result<DenseGrid<f32>> {
    let lattice = &model.deform.grid;
    let pts = vertices(lattice);
    let mut best = vec![0.0f32; pts.len()];
    for &t in times {
        for (b, a) in best.iter_mut().zip(warped_alpha(model, &pts, t, delta_ref)?) {
            *b = b.max(a);
        }
    }
    DenseGrid::from_values(lattice.resolution(), 1, *lattice.bbox(), best)
}

/// Tight box around the vertices of `alpha` that exceed `threshold`, grown
/// by one cell and clipped to `clip`.
pub fn bbox_from_alpha(alpha: &DenseGrid<f32>, threshold: f64, clip: &Aabb) -> Result<Aabb> {
    let [nx, ny, nz] = alpha.resolution();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                if (alpha.vertex([i, j, k])[0] as f64) > threshold {
                    let p = alpha.vertex_position([i, j, k]);
                    for a in 0..3 {
                        lo[a] = lo[a].min(p[a]);
                        hi[a] = hi[a].max(p[a]);
                    }
                }
            }
        }
    }
    if lo[0] > hi[0] {
        return Err(Error::EmptyScene { threshold });
    }
    let cell = alpha.cell_size();
    let grown = Aabb {
        min: std::array::from_fn(|a| lo[a] - cell[a]),
        max: std::array::from_fn(|a| hi[a] + cell[a]),
    };
    grown.intersect(clip).ok_or(Error::EmptyScene { threshold })
}

/// Smallest box covering every vertex of the coarse deformation grid whose
/// alpha exceeds `threshold` at any training time.
pub fn compute_scene_bbox(model: &Model<f32>, times: &[f64], threshold: f64, delta_ref: f64) -> Result<Aabb> {
    let a = max_alpha_grid(model, times, delta_ref)?;
    bbox_from_alpha(&a, threshold, model.deform.grid.bbox())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Empty only if transparent at every training time.
    Deform,
    /// Empty if transparent in the canonical field.
    Canonical,
}

/// Exact per-point validity: `true` keeps the point.
pub fn empty_mask(
    model: &Model<f32>,
    points: &[Vec3<f32>],
    times: &[f64],
    threshold: f64,
    delta_ref: f64,
    mode: MaskMode,
) -> Result<Vec<bool>> {
    let th = threshold as f32;
    match mode {
        MaskMode::Deform => {
            let mut keep = vec![false; points.len()];
            for &t in times {
                for (k, a) in keep.iter_mut().zip(warped_alpha(model, points, t, delta_ref)?) {
                    *k |= a >= th;
                }
            }
            Ok(keep)
        }
        MaskMode::Canonical => Ok(points
            .iter()
            .map(|&p| alpha(model.canonical.density_at(p), delta_ref as f32) >= th)
            .collect()),
    }
}

/// Canonical alpha on the vertices of the density grid.
pub fn canonical_alpha_grid(model: &Model<f32>, delta_ref: f64) -> Result<DenseGrid<f32>> {
    let d = &model.canonical.density;
    let vals = vertices(d)
        .iter()
        .map(|&p| alpha(model.canonical.density_at(p), delta_ref as f32))
        .collect();
    DenseGrid::from_values(d.resolution(), 1, *d.bbox(), vals)
}

fn voxels(bbox: &Aabb, budget: usize, half: bool) -> Result<[usize; 3]> {
    let r = resolution_from_voxel_count(bbox, budget)?;
    Ok(if half { r.map(|n| n.div_ceil(2).max(2)) } else { r })
}

/// Untrained coarse model over the dataset box.
pub fn init_coarse(data: &TrainData, cfg: &TrainConfig) -> Result<Model<f32>> {
    let bbox = data.bbox;
    let step = bbox.diagonal() / cfg.coarse_samples as f64;
    let g = DenseGrid::zeros(resolution_from_voxel_count(&bbox, cfg.coarse_deform_voxels)?, DEFORM_FEATURES, bbox)?;
    let deform = DeformationField::new(g, cfg.canonical_time as f32, bbox, DEFORM_POS_ENC, DEFORM_TIME_ENC, cfg.seed)?;
    let res = resolution_from_voxel_count(&bbox, cfg.coarse_canonical_voxels)?;
    let shift = density_shift_for_alpha(cfg.alpha_init, step)? as f32;
    let canonical = CanonicalField::coarse(DenseGrid::zeros(res, 1, bbox)?, DenseGrid::zeros(res, 3, bbox)?, shift, bbox)?;
    Ok(Model {
        deform,
        canonical,
        bbox,
        step,
        background: data.background,
        use_occlusion: cfg.use_occlusion,
        filters: Filters::default(),
    })
}

/// Fine model seeded from a coarse one: deformation grid and density
/// resampled onto `bbox`, deformation network copied, fresh color features
/// and color network. The deformation network's input frame is unchanged.
pub fn init_fine_from_coarse(
    coarse: &Model<f32>,
    bbox: Aabb,
    deform_res: [usize; 3],
    canonical_res: [usize; 3],
    step: f64,
    seed: u64,
) -> Result<Model<f32>> {
    if coarse.canonical.stage() != Stage::Coarse {
        return Err(Error::InvalidArgument("fine initialization needs a coarse model".into()));
    }
    let d = &coarse.deform;
    let deform = DeformationField::from_parts(
        d.grid.resample(bbox, deform_res)?,
        d.net.clone(),
        d.t_can,
        d.frame,
        d.pos_enc,
        d.time_enc,
    )?;
    let density = coarse.canonical.density.resample(bbox, canonical_res)?;
    let color = DenseGrid::zeros(canonical_res, FINE_COLOR_FEATURES, bbox)?;
    let net = Mlp::init(color_net_spec(COLOR_POS_ENC, COLOR_DIR_ENC, FINE_COLOR_FEATURES), seed.wrapping_add(1))?;
    let canonical = CanonicalField::fine(
        density,
        color,
        net,
        coarse.canonical.density_shift,
        bbox,
        COLOR_POS_ENC,
        COLOR_DIR_ENC,
    )?;
    Ok(Model {
        deform,
        canonical,
        bbox,
        step,
        background: coarse.background,
        use_occlusion: coarse.use_occlusion,
        filters: Filters::default(),
    })
}

/// Per-group Adam state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub deform_grid: Adam<f32>,
    pub deform_net: Adam<f32>,
    pub density: Adam<f32>,
    pub color: Adam<f32>,
    pub color_net: Option<Adam<f32>>,
}

impl Optimizer {
    pub fn for_model(m: &Model<f32>) -> Self {
        Self {
            deform_grid: Adam::new(m.deform.grid.values.len()),
            deform_net: Adam::new(m.deform.net.num_params()),
            density: Adam::new(m.canonical.density.values.len()),
            color: Adam::new(m.canonical.color.values.len()),
            color_net: m.canonical.color_net.as_ref().map(|n| Adam::new(n.num_params())),
        }
    }

    pub fn step(&mut self, m: &mut Model<f32>, lr_grid: f64, lr_net: f64) -> Result<()> {
        let g = &mut m.deform.grid;
        self.deform_grid.step("deformation grid", &mut g.values, &mut g.grads, lr_grid)?;
        let n = &mut m.deform.net;
        self.deform_net.step("deformation network", &mut n.params, &mut n.grads, lr_net)?;
        let d = &mut m.canonical.density;
        self.density.step("density grid", &mut d.values, &mut d.grads, lr_grid)?;
        let c = &mut m.canonical.color;
        self.color.step("color grid", &mut c.values, &mut c.grads, lr_grid)?;
        if let (Some(a), Some(n)) = (self.color_net.as_mut(), m.canonical.color_net.as_mut()) {
            a.step("color network", &mut n.params, &mut n.grads, lr_net)?;
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub terms: LossTerms,
    pub total: f64,
    pub raw_samples: usize,
    pub warped_samples: usize,
    pub composited_samples: usize,
}

impl StepStats {
    /// Field evaluations: one warp per warped sample plus one canonical
    /// lookup per composited sample.
    pub fn evaluated(&self) -> usize {
        self.warped_samples + self.composited_samples
    }
}

struct ChunkResult {
    terms: LossTerms,
    grads: Gradients<f32>,
    raw: usize,
    warped: usize,
    composited: usize,
}

fn chunk_objective(
    model: &Model<f32>,
    rays: &[Ray<f32>],
    jitter: Option<&[f32]>,
    w: &LossWeights,
    n_top: usize,
    batch: usize,
) -> Result<ChunkResult> {
    let b = model.forward(rays, jitter)?;
    let targets: Vec<Vec3<f32>> = rays.iter().map(|r| r.target).collect();
    let s = rays.len() as f32 / batch as f32;
    let c = rays.len();
    let mut up = Upstream::zeros(&b);
    let photo = loss::photometric(&b.rgb, &targets)?;
    loss::photometric_grad(&b.rgb, &targets, s, &mut up.d_rgb);
    let ptc = loss::point_color(&b.weights, b.color(), &b.comp_offsets, &targets, n_top);
    if w.ptc > 0.0 {
        loss::point_color_grad(&b.weights, b.color(), &b.comp_offsets, &targets, n_top, s * w.ptc as f32, &mut up.d_color);
    }
    let bg = loss::background_entropy(&b.t_final);
    if w.bg > 0.0 {
        loss::background_entropy_grad(&b.t_final, s * w.bg as f32, &mut up.d_tfinal);
    }
    let d_norm = loss::deformation_norm(b.delta(), c);
    if w.d_norm > 0.0 {
        loss::deformation_norm_grad(b.delta(), c, s * w.d_norm as f32, &mut up.d_delta);
    }
    let grads = model.backward(&b, &up);
    let s = s as f64;
    Ok(ChunkResult {
        terms: LossTerms {
            photo: photo as f64 * s,
            ptc: ptc as f64 * s,
            bg: bg as f64 * s,
            d_norm: d_norm as f64 * s,
            d_tv: 0.0,
        },
        grads,
        raw: b.raw_samples,
        warped: b.warped_samples(),
        composited: b.composited_samples(),
    })
}

/// Forward, backward and one Adam update on `rays`. Chunks run in parallel;
/// their gradients are merged in chunk order, so the result does not depend
/// on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn optimize_step(
    model: &mut Model<f32>,
    opt: &mut Optimizer,
    rays: &[Ray<f32>],
    jitter: Option<&[f32]>,
    w: &LossWeights,
    cfg: &TrainConfig,
    lr_grid: f64,
    lr_net: f64,
) -> Result<StepStats> {
    let chunk = cfg.chunk_rays.max(1);
    let n = rays.len();
    let parts: Vec<Result<ChunkResult>> = {
        let m = &*model;
        rays.par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| {
                let j = jitter.map(|j| &j[i * chunk..i * chunk + c.len()]);
                chunk_objective(m, c, j, w, cfg.n_top, n)
            })
            .collect()
    };
    let mut st = StepStats::default();
    for p in parts {
        let p = p?;
        st.terms.photo += p.terms.photo;
        st.terms.ptc += p.terms.ptc;
        st.terms.bg += p.terms.bg;
        st.terms.d_norm += p.terms.d_norm;
        st.raw_samples += p.raw;
        st.warped_samples += p.warped;
        st.composited_samples += p.composited;
        p.grads.apply(model);
    }
    st.terms.d_tv = model.deform.grid.tv_loss_backward(TV_EPS as f32, w.d_tv as f32) as f64;
    st.total = st.terms.total(w);
    if !st.terms.is_finite() {
        model.zero_grad();
        return Err(Error::NonFinite(format!("loss terms {:?}", st.terms)));
    }
    opt.step(model, lr_grid, lr_net)?;
    Ok(st)
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub psnr_train: f64,
}

pub fn psnr_from_photo(photo: f64) -> f64 {
    -10.0 * (photo / 3.0).log10()
}

pub fn loss_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let t = &r.terms;
        writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:.6}",
            r.iter, t.photo, t.ptc, t.bg, t.d_norm, t.d_tv, r.total, r.psnr_train
        )
        .expect("string write");
    }
    s
}

/// Summary of a finished stage.
#[derive(Clone, Debug, Default)]
pub struct StageStats {
    pub iterations: usize,
    pub mean_evaluated: f64,
    pub mean_raw: f64,
}

/// Draws `batch_rays` training rays from the admissible views.
pub struct RaySampler {
    rng: ChaCha8Rng,
}

impl RaySampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn draw(&mut self, data: &TrainData, views: &[usize], count: usize, jitter: bool) -> (Vec<Ray<f32>>, Option<Vec<f32>>) {
        let mut prefix = Vec::with_capacity(views.len() + 1);
        prefix.push(0usize);
        for &v in views {
            prefix.push(prefix.last().unwrap() + data.views[v].len());
        }
        let total = *prefix.last().unwrap();
        let rays = (0..count)
            .map(|_| {
                let u = self.rng.random_range(0..total);
                let k = prefix.partition_point(|&p| p <= u) - 1;
                data.rays[data.views[views[k]].start + (u - prefix[k])]
            })
            .collect();
        let jitter = jitter.then(|| (0..count).map(|_| self.rng.random_range(0.0..1.0f32)).collect());
        (rays, jitter)
    }
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn coarse(&self) -> PathBuf {
        self.root.join("coarse.ckpt")
    }

    pub fn fine(&self) -> PathBuf {
        self.root.join("fine.ckpt")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    fn write_log(&self, rows: &[LogRow]) -> Result<()> {
        let p = self.loss_csv();
        std::fs::write(&p, loss_csv(rows)).map_err(|e| Error::io(&p, e))
    }
}

/// Drives both stages and keeps the loss trace.
pub struct Trainer<'a> {
    pub data: &'a TrainData,
    pub cfg: TrainConfig,
    pub log: Vec<LogRow>,
    pub out: Option<OutputDir>,
    iter: usize,
}

fn lr_pair(cfg: &TrainConfig, i: usize, total: usize) -> (f64, f64) {
    (
        decayed_lr(cfg.lr_grid, cfg.lr_decay, i, total),
        decayed_lr(cfg.lr_net, cfg.lr_decay, i, total),
    )
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainData, cfg: TrainConfig, out: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if !data.times.iter().any(|&t| t == cfg.canonical_time) {
            log::warn!("no training frame at the canonical time {}", cfg.canonical_time);
        }
        Ok(Self {
            data,
            cfg,
            log: Vec::new(),
            out: out.map(OutputDir::new).transpose()?,
            iter: 0,
        })
    }

    fn weights(&self, stage: Stage) -> LossWeights {
        if self.cfg.large_motion {
            LossWeights::large_motion(stage)
        } else {
            LossWeights::preset(stage)
        }
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    fn save(&self, stage: Stage, iteration: usize, model: &Model<f32>) -> Result<()> {
        if let Some(out) = &self.out {
            let path = match stage {
                Stage::Coarse => out.coarse(),
                Stage::Fine => out.fine(),
            };
            Checkpoint::new(stage, iteration as u64, model.clone(), self.meta()).save(&path)?;
            out.write_log(&self.log)?;
        }
        Ok(())
    }

    fn record(&mut self, st: &StepStats) {
        self.iter += 1;
        let row = LogRow {
            iter: self.iter,
            terms: st.terms,
            total: st.total,
            psnr_train: psnr_from_photo(st.terms.photo),
        };
        if self.iter % 100 == 0 {
            info!("iter {} loss {:.5} psnr {:.2}", row.iter, row.total, row.psnr_train);
        }
        self.log.push(row);
    }

    /// Coarse stage from a fresh model, with the progressive time window.
    pub fn train_coarse(&mut self) -> Result<(Model<f32>, StageStats)> {
        let cfg = self.cfg.clone();
        let mut model = init_coarse(self.data, &cfg)?;
        self.save(Stage::Coarse, 0, &model)?;
        let stats = self.run_stage(&mut model, Stage::Coarse)?;
        self.save(Stage::Coarse, cfg.coarse_iters, &model)?;
        Ok((model, stats))
    }

    /// Builds the fine model: scene box and filters from the coarse model,
    /// unless the coarse stage never ran.
    pub fn prepare_fine(&self, coarse: &Model<f32>) -> Result<Model<f32>> {
        let cfg = &self.cfg;
        let scene = self.data.bbox;
        let step = scene.diagonal() / cfg.fine_samples as f64;
        let times = self.data.distinct_times();
        let (bbox, deform_alpha) = if cfg.coarse_iters == 0 {
            (scene, None)
        } else {
            let a = max_alpha_grid(coarse, &times, step)?;
            (bbox_from_alpha(&a, cfg.alpha_thresh, coarse.deform.grid.bbox())?, Some(a))
        };
        info!("fine box {:?} .. {:?}", bbox.min, bbox.max);
        let half = cfg.progressive_upscale;
        let mut fine = init_fine_from_coarse(
            coarse,
            bbox,
            voxels(&bbox, cfg.fine_deform_voxels, half)?,
            voxels(&bbox, cfg.fine_canonical_voxels, half)?,
            step,
            cfg.seed,
        )?;
        if cfg.use_filter {
            if let Some(alpha) = deform_alpha {
                fine.filters = Filters {
                    deform: Some(Occupancy {
                        alpha,
                        threshold: cfg.alpha_thresh,
                    }),
                    canonical: Some(Occupancy {
                        alpha: canonical_alpha_grid(coarse, step)?,
                        threshold: cfg.alpha_thresh,
                    }),
                };
            }
        }
        Ok(fine)
    }

    pub fn train_fine(&mut self, coarse: &Model<f32>) -> Result<(Model<f32>, StageStats)> {
        let mut model = self.prepare_fine(coarse)?;
        self.save(Stage::Fine, 0, &model)?;
        let stats = self.run_stage(&mut model, Stage::Fine)?;
        self.save(Stage::Fine, self.cfg.fine_iters, &model)?;
        Ok((model, stats))
    }

    fn upscale(&self, model: &mut Model<f32>, opt: &mut Optimizer) -> Result<()> {
        let cfg = &self.cfg;
        let grow = |g: &DenseGrid<f32>, budget: usize| -> Result<Option<DenseGrid<f32>>> {
            let target = resolution_from_voxel_count(g.bbox(), budget)?;
            let r = g.resolution();
            let next: [usize; 3] = std::array::from_fn(|a| (2 * r[a]).min(target[a]).max(r[a]));
            Ok(if next == r { None } else { Some(g.upscale(next)?) })
        };
        if let Some(g) = grow(&model.deform.grid, cfg.fine_deform_voxels)? {
            opt.deform_grid = Adam::new(g.values.len());
            model.deform.grid = g;
        }
        if let Some(g) = grow(&model.canonical.density, cfg.fine_canonical_voxels)? {
            opt.density = Adam::new(g.values.len());
            model.canonical.density = g;
        }
        if let Some(g) = grow(&model.canonical.color, cfg.fine_canonical_voxels)? {
            opt.color = Adam::new(g.values.len());
            model.canonical.color = g;
        }
        debug!("grids now {:?} / {:?}", model.deform.grid.resolution(), model.canonical.density.resolution());
        Ok(())
    }

    fn run_stage(&mut self, model: &mut Model<f32>, stage: Stage) -> Result<StageStats> {
        let cfg = self.cfg.clone();
        let w = self.weights(stage);
        let (iters, stream) = match stage {
            Stage::Coarse => (cfg.coarse_iters, 2),
            Stage::Fine => (cfg.fine_iters, 3),
        };
        let ramp_end = (cfg.progressive_frac * cfg.coarse_iters as f64).round() as usize;
        let all: Vec<usize> = (0..self.data.views.len()).collect();
        let mut sampler = RaySampler::new(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(stream));
        let mut opt = Optimizer::for_model(model);
        let upscale_at = [iters / 3, 2 * iters / 3];
        let mut stats = StageStats::default();
        for i in 0..iters {
            if stage == Stage::Fine && cfg.progressive_upscale && i > 0 && upscale_at.contains(&i) {
                self.upscale(model, &mut opt)?;
            }
            let views = match stage {
                Stage::Coarse => progressive_time_window(i, ramp_end, &self.data.times, cfg.canonical_time),
                Stage::Fine => all.clone(),
            };
            let (rays, jitter) = sampler.draw(self.data, &views, cfg.batch_rays, cfg.jitter);
            let (lr_grid, lr_net) = lr_pair(&cfg, i, iters);
            let st = optimize_step(model, &mut opt, &rays, jitter.as_deref(), &w, &cfg, lr_grid, lr_net)?;
            stats.mean_evaluated += st.evaluated() as f64;
            stats.mean_raw += st.raw_samples as f64;
            self.record(&st);
        }
        stats.iterations = iters;
        if iters > 0 {
            stats.mean_evaluated /= iters as f64;
            stats.mean_raw /= iters as f64;
        }
        Ok(stats)
    }
}

/// Both stages back to back.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub coarse: Model<f32>,
    pub fine: Model<f32>,
    pub log: Vec<LogRow>,
    pub coarse_stats: StageStats,
    pub fine_stats: StageStats,
}

pub fn train(data: &TrainData, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutput> {
    let mut t = Trainer::new(data, cfg.clone(), out)?;
    let (coarse, coarse_stats) = t.train_coarse()?;
    let (fine, fine_stats) = t.train_fine(&coarse)?;
    Ok(TrainOutput {
        coarse,
        fine,
        log: t.log,
        coarse_stats,
        fine_stats,
    })
}

/// Mean `|dp|` of the model's warp over `points` at each of `times`.
pub fn mean_offset(model: &Model<f32>, points: &[Vec3<f32>], times: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for &t in times {
        let tt = vec![t as f32; points.len()];
        let w = model.deform.forward(points, &tt)?;
        for d in &w.delta {
            total += (d[0].as_f64().powi(2) + d[1].as_f64().powi(2) + d[2].as_f64().powi(2)).sqrt();
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}
