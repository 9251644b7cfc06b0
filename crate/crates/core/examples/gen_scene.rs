//! Renders a built-in analytic scene into a dataset directory.
//!
//! cargo run --release --example gen_scene -- [scene] [out_dir]

use std::path::PathBuf;

use ndvg::dataset::Dataset;
use ndvg::scene::{gen_scene, GenOptions, SCENE_NAMES};

fn main() -> ndvg::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "bouncing-ball".into());
    let out = args.next().map_or_else(|| std::env::temp_dir().join("ndvg-scene"), PathBuf::from);
    println!("built-in scenes: {}", SCENE_NAMES.join(", "));

    let opts = GenOptions {
        train_views: 12,
        test_views: 4,
        times: 6,
        ..GenOptions::default()
    };
    let g = gen_scene(&name, 0, &opts)?;
    for p in &g.scene.primitives {
        println!("  {:?} at t=0: {:?}, at t=1: {:?}", p.shape, p.center_at(0.0), p.center_at(1.0));
    }
    g.write(&out)?;

    // The written directory loads like any other dataset.
    let ds = Dataset::load(&out)?;
    let times: Vec<String> = ds.train_times().iter().map(|t| format!("{t:.2}")).collect();
    println!("{}: {} train / {} test views, times [{}]", out.display(), ds.train.len(), ds.test.len(), times.join(" "));
    println!("scene box {:?} .. {:?}", ds.bbox.min, ds.bbox.max);
    Ok(())
}
