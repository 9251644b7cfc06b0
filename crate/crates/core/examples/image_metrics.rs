//! PSNR and SSIM between images, and the metrics CSV written by `eval`.
//!
//! cargo run --release --example image_metrics

use ndvg::eval::{Evaluation, ViewScore};
use ndvg::image::{psnr, ssim, Image};

fn main() -> ndvg::Result<()> {
    let (w, h) = (48, 48);
    let reference = Image::from_data(
        w,
        h,
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f32 / w as f32, (i / w) as f32 / h as f32);
                [x, y, 0.5 * (x + y)]
            })
            .collect(),
    )?;
    let mut views = Vec::new();
    for (name, shift) in [("offset-0.01", 0.01f32), ("offset-0.05", 0.05), ("offset-0.10", 0.1)] {
        let img = Image::from_data(w, h, reference.data.iter().map(|p| p.map(|v| (v + shift).min(1.0))).collect())?;
        views.push(ViewScore {
            name: name.into(),
            psnr: psnr(&img, &reference)?,
            ssim: ssim(&img, &reference)?,
        });
    }
    println!("identical images: PSNR {} (capped), SSIM {}", psnr(&reference, &reference)?, ssim(&reference, &reference)?);
    let ev = Evaluation { views };
    print!("{}", ev.to_csv());
    println!("mean PSNR {:.4} / mean SSIM {:.4}", ev.mean_psnr(), ev.mean_ssim());
    Ok(())
}
