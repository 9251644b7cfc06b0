//! Trains a small model briefly, writes a checkpoint, reloads it and renders
//! a novel view from a hand-made camera.
//!
//! cargo run --release --example checkpoint_render

use ndvg::checkpoint::Checkpoint;
use ndvg::dataset::Dataset;
use ndvg::eval::render_image;
use ndvg::render::Camera;
use ndvg::scene::{gen_scene, look_at, GenOptions};
use ndvg::train::{TrainData, Trainer};
use ndvg::TrainConfig;

fn main() -> ndvg::Result<()> {
    let dir = std::env::temp_dir().join("ndvg-ckpt-example");
    let opts = GenOptions {
        width: 32,
        height: 32,
        train_views: 8,
        test_views: 2,
        times: 4,
        quadrature: 256,
        ..GenOptions::default()
    };
    gen_scene("bouncing-ball", 1, &opts)?.write(&dir.join("data"))?;
    let ds = Dataset::load(&dir.join("data"))?;
    let data = TrainData::from_dataset(&ds)?;
    let cfg = TrainConfig {
        coarse_iters: 300,
        fine_iters: 0,
        batch_rays: 512,
        coarse_deform_voxels: 16 * 16 * 16,
        coarse_canonical_voxels: 32 * 32 * 32,
        coarse_samples: 48,
        alpha_init: 1e-4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&data, cfg, Some(&dir.join("run")))?;
    trainer.train_coarse()?;

    let path = dir.join("run").join("coarse.ckpt");
    let ck = Checkpoint::load(&path)?;
    println!("{}: {:?} stage, iteration {}", path.display(), ck.stage, ck.iteration);

    let cam = Camera::from_fov(64, 64, 0.69, look_at([2.5, 3.0, 1.2], [0.0; 3]))?;
    for t in [0.0, 0.25, 0.5] {
        let out = dir.join(format!("novel-{t:.2}.png"));
        render_image(&ck.model, &cam, t, 1024)?.save_png(&out)?;
        println!("t = {t}: {}", out.display());
    }
    Ok(())
}
