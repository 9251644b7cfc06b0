//! Dense voxel grids: trilinear lookup and its gradient, total variation,
//! and upscaling.
//!
//! cargo run --release --example grid_ops

use ndvg::{resolution_from_voxel_count, Aabb, DenseGrid};

fn main() -> ndvg::Result<()> {
    let bbox = Aabb::cube(1.0);
    // Vertex values of f(x, y, z) = 2x + 3y - z, reproduced exactly inside cells.
    let mut g = DenseGrid::<f64>::from_fn([5, 5, 5], 1, bbox, |p, out| out[0] = 2.0 * p[0] + 3.0 * p[1] - p[2])?;
    let p = [0.13, -0.42, 0.77];
    println!("interp {:.6} vs f(p) {:.6}", g.interp(p)[0], 2.0 * p[0] + 3.0 * p[1] - p[2]);

    let dp = g.interp_backward(p, &[1.0]);
    let touched = g.grads.iter().filter(|v| **v != 0.0).count();
    println!("d/dp = {dp:.4?}; {touched} vertex gradients, summing to {:.6}", g.grads.iter().sum::<f64>());

    let flat = DenseGrid::<f64>::filled([4, 4, 4], 1, bbox, 0.5)?;
    println!("TV of a constant grid {:.4e}, of the ramp {:.4}", flat.tv_loss(1e-6), g.tv_loss(1e-6));

    let fine = g.upscale([9, 9, 9])?;
    println!("upscaled to {:?}; value at p {:.6}", fine.resolution(), fine.interp(p)[0]);

    let long = Aabb::new([-2.0, -0.5, -0.5], [2.0, 0.5, 0.5])?;
    println!("1e6 voxels over a 4x1x1 box -> {:?}", resolution_from_voxel_count(&long, 1_000_000)?);
    Ok(())
}
