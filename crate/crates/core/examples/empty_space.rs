//! Coarse training, then the scene box and empty-space filters derived from
//! it, and how many samples the filters skip.
//!
//! cargo run --release --example empty_space

use ndvg::dataset::Dataset;
use ndvg::scene::{gen_scene, GenOptions};
use ndvg::train::{compute_scene_bbox, TrainData, Trainer};
use ndvg::TrainConfig;

fn main() -> ndvg::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| ndvg::Error::io(std::path::Path::new("tmp"), e))?;
    let opts = GenOptions {
        width: 32,
        height: 32,
        train_views: 10,
        test_views: 2,
        times: 5,
        quadrature: 256,
        ..GenOptions::default()
    };
    gen_scene("translating-sphere", 0, &opts)?.write(dir.path())?;
    let data = TrainData::from_dataset(&Dataset::load(dir.path())?)?;
    let cfg = TrainConfig {
        coarse_iters: 400,
        fine_iters: 0,
        batch_rays: 512,
        coarse_deform_voxels: 24 * 24 * 24,
        fine_deform_voxels: 32 * 32 * 32,
        coarse_canonical_voxels: 32 * 32 * 32,
        fine_canonical_voxels: 48 * 48 * 48,
        coarse_samples: 48,
        fine_samples: 64,
        alpha_init: 1e-4,
        large_motion: true,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&data, cfg.clone(), None)?;
    let (coarse, _) = trainer.train_coarse()?;

    let delta_ref = data.bbox.diagonal() / cfg.fine_samples as f64;
    println!("dataset box {:.2?} .. {:.2?}", data.bbox.min, data.bbox.max);
    for th in [1e-2, 1e-3, 1e-4] {
        let b = compute_scene_bbox(&coarse, &data.distinct_times(), th, delta_ref)?;
        println!("alpha > {th:e}: box {:.2?} .. {:.2?}", b.min, b.max);
    }

    let fine = trainer.prepare_fine(&coarse)?;
    let f = &fine.filters;
    let frac = |o: &Option<ndvg::model::Occupancy>| o.as_ref().map_or(1.0, |o| o.occupied_fraction());
    println!(
        "occupied lattice fraction: deform {:.3}, canonical {:.3}",
        frac(&f.deform),
        frac(&f.canonical)
    );
    let rays: Vec<_> = data.rays.iter().step_by(7).copied().collect();
    let with = fine.forward(&rays, None)?;
    let mut bare = fine.clone();
    bare.filters = Default::default();
    let without = bare.forward(&rays, None)?;
    println!(
        "samples on {} rays: {} raw; {} warped and {} composited with filters, {} without",
        rays.len(),
        with.raw_samples,
        with.warped_samples(),
        with.composited_samples(),
        without.warped_samples()
    );
    Ok(())
}
