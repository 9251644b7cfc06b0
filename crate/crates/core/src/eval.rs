//! Rendering whole views and scoring them against reference images.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::View;
use crate::error::{Error, Result};
use crate::image::{psnr, ssim, Image};
use crate::model::Model;
use crate::render::{Camera, Ray};

/// Renders every pixel of `camera` at time `t`.
pub fn render_image(model: &Model<f32>, camera: &Camera, t: f64, chunk: usize) -> Result<Image> {
    let rays: Vec<Ray<f32>> = camera.rays(t).iter().map(|r| r.cast()).collect();
    let (rgb, _, _) = model.render(&rays, chunk)?;
    Image::from_data(camera.width, camera.height, rgb.into_iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub views: Vec<ViewScore>,
}

impl Evaluation {
    pub fn mean_psnr(&self) -> f64 {
        self.views.iter().map(|v| v.psnr).sum::<f64>() / self.views.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.views.iter().map(|v| v.ssim).sum::<f64>() / self.views.len().max(1) as f64
    }

    /// `frame,psnr,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim\n");
        for v in &self.views {
            writeln!(s, "{},{:.6},{:.6}", v.name, v.psnr, v.ssim).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate(model: &Model<f32>, views: &[View], chunk: usize) -> Result<Evaluation> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to evaluate".into()));
    }
    let mut out = Vec::with_capacity(views.len());
    for v in views {
        let img = render_image(model, &v.camera, v.time, chunk)?;
        let ssim = if img.width >= crate::image::SSIM_WINDOW && img.height >= crate::image::SSIM_WINDOW {
            ssim(&img, &v.image)?
        } else {
            f64::NAN
        };
        out.push(ViewScore {
            name: v.name.clone(),
            psnr: psnr(&img, &v.image)?,
            ssim,
        });
    }
    Ok(Evaluation { views: out })
}
