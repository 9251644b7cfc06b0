//! Generates a toy dynamic scene, trains both stages and scores held-out views.
//!
//! cargo run --release --example train_toy -- [scene] [key=value ...]

use std::time::Instant;

use ndvg::dataset::Dataset;
use ndvg::eval::evaluate;
use ndvg::scene::{gen_scene, GenOptions};
use ndvg::train::{init_coarse, TrainData, Trainer};
use ndvg::TrainConfig;

fn main() -> ndvg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NDVG_LOG", "info")).init();
    let args: Vec<String> = std::env::args().collect();
    let scene = args.get(1).map_or("translating-sphere", |s| s.as_str());

    let dir = tempfile::tempdir().map_err(|e| ndvg::Error::io(std::path::Path::new("tmp"), e))?;
    let t0 = Instant::now();
    gen_scene(scene, 0, &GenOptions::default())?.write(dir.path())?;
    let ds = Dataset::load(dir.path())?;
    println!("generated {} train / {} test views in {:.1?}", ds.train.len(), ds.test.len(), t0.elapsed());

    let mut cfg = TrainConfig {
        coarse_iters: 300,
        fine_iters: 600,
        batch_rays: 1024,
        coarse_deform_voxels: 32 * 32 * 32,
        fine_deform_voxels: 48 * 48 * 48,
        coarse_canonical_voxels: 48 * 48 * 48,
        fine_canonical_voxels: 96 * 96 * 96,
        coarse_samples: 64,
        alpha_init: 1e-4,
        fine_samples: 128,
        ..TrainConfig::default()
    };
    let pairs: Vec<(&str, &str)> = args.iter().skip(2).filter_map(|a| a.split_once('=')).collect();
    cfg.apply(pairs)?;
    let data = TrainData::from_dataset(&ds)?;
    let untrained = init_coarse(&data, &cfg)?;
    println!("untrained: test PSNR {:.2}", evaluate(&untrained, &ds.test, 256)?.mean_psnr());
    let mut trainer = Trainer::new(&data, cfg, None)?;
    let t0 = Instant::now();
    let (coarse_model, cs) = trainer.train_coarse()?;
    let tc = t0.elapsed();
    let ev = evaluate(&coarse_model, &ds.test, 256)?;
    println!("coarse: {tc:.1?} ({:.1} evals/iter), test PSNR {:.2}", cs.mean_evaluated, ev.mean_psnr());
    let t0 = Instant::now();
    let (fine_model, fs) = trainer.train_fine(&coarse_model)?;
    let tf = t0.elapsed();
    let ev = evaluate(&fine_model, &ds.test, 256)?;
    println!(
        "fine: {tf:.1?} ({:.1} evals/iter, {:.1} raw), test PSNR {:.2} SSIM {:.3}",
        fs.mean_evaluated,
        fs.mean_raw,
        ev.mean_psnr(),
        ev.mean_ssim()
    );
    Ok(())
}
