//! Warping observation-space points into the canonical frame, and how the
//! occlusion weight gates what the canonical field contributes.
//!
//! cargo run --release --example deformation

use ndvg::deform::DeformationField;
use ndvg::render::occlusion_gate;
use ndvg::train::{DEFORM_POS_ENC, DEFORM_TIME_ENC};
use ndvg::{Aabb, DenseGrid};

fn main() -> ndvg::Result<()> {
    let bbox = Aabb::cube(1.0);
    let grid = DenseGrid::<f32>::zeros([8, 8, 8], 6, bbox)?;
    let mut field = DeformationField::new(grid, 0.0, bbox, DEFORM_POS_ENC, DEFORM_TIME_ENC, 7)?;
    println!("network: {} parameters, input {}", field.net.num_params(), field.net.input_dim());

    let p = [0.2f32, -0.1, 0.4];
    for t in [0.0f32, 0.5] {
        let w = field.deform(p, t)?;
        println!("fresh field, t = {t}: p' = {:?}, occ = {:.4}", w.p_prime, w.occ);
    }

    // Give the offset head a time-independent bias and look again.
    let last = field.net.layers().len() - 1;
    field.net.bias_mut(last)[..3].copy_from_slice(&[0.1, 0.0, -0.05]);
    field.net.bias_mut(last)[3] = -2.0;
    for t in [0.0f32, 0.5] {
        let w = field.deform(p, t)?;
        let (sigma, color) = occlusion_gate(8.0, [0.9, 0.4, 0.1], w.occ);
        println!("t = {t}: p' = {:.3?}, occ = {:.3}, gated sigma {sigma:.3}, color {color:.3?}", w.p_prime, w.occ);
    }
    println!("at the canonical time the network is skipped: identity warp, full occupancy");
    Ok(())
}
