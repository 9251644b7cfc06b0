//! Ray sampling and alpha compositing, first by hand on one ray and then
//! for a whole image of an analytic scene.
//!
//! cargo run --release --example volume_rendering

use ndvg::render::{composite, intersect_box, sample_points, Camera};
use ndvg::scene::{look_at, render_ground_truth, SyntheticScene};
use ndvg::Aabb;

fn main() -> ndvg::Result<()> {
    let cube = Aabb::new([0.0; 3], [1.0; 3])?;
    let (o, d) = ([0.5, 0.5, -1.0], [0.0, 0.0, 1.0]);
    let (near, far) = intersect_box(o, d, &cube).expect("ray hits the cube");
    let s = sample_points(o, d, &cube, 0.25, 0.0);
    println!("slab [{near}, {far}], samples at {:?}", s.w);

    // Three samples with optical depths 0.5, 1 and 2 over a black background.
    let c = composite(
        &[0.5, 1.0, 2.0],
        &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        &[1.0; 3],
        [0.0; 3],
    );
    println!("weights {:.4?}, transmittance left {:.4}", c.weights, c.t_final);
    println!("sum of weights + T = {}", c.weights.iter().sum::<f64>() + c.t_final);

    let scene = SyntheticScene::builtin("occluder")?;
    let cam = Camera::from_fov(96, 96, 0.69, look_at([0.0, -4.0, 1.5], [0.0; 3]))?;
    let out = std::env::temp_dir().join("ndvg-occluder.png");
    for t in [0.0, 0.5, 1.0] {
        let img = render_ground_truth(&scene, &cam, t, &scene.bbox, scene.background, 512)?;
        let path = out.with_file_name(format!("ndvg-occluder-{t:.1}.png"));
        img.save_png(&path)?;
        println!("t = {t}: {}", path.display());
    }
    Ok(())
}
