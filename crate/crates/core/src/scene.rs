//! Analytic dynamic scenes used as ground truth.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Manifest, ManifestFrame, Split, TEST_MANIFEST, TRAIN_MANIFEST};
use crate::error::{Error, Result};
use crate::grid::Aabb;
use crate::image::Image;
use crate::real::sigmoid;
use crate::render::{render_field, Camera, Field, Ray};

pub const SCENE_NAMES: [&str; 4] = ["translating-sphere", "bouncing-ball", "occluder", "static"];
/// Peak density inside a primitive.
pub const SIGMA_MAX: f64 = 30.0;
/// Width of the smooth density falloff at a primitive surface.
pub const SOFTNESS: f64 = 0.02;
pub const MIN_QUADRATURE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Cuboid { half: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Static,
    /// `center + t * velocity`.
    Linear { velocity: [f64; 3] },
    /// `center + sin(2 pi t) * amplitude`.
    Sinusoid { amplitude: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub motion: Motion,
    pub color: [f64; 3],
}

impl Primitive {
    pub fn center_at(&self, t: f64) -> [f64; 3] {
        let c = self.center;
        match self.motion {
            Motion::Static => c,
            Motion::Linear { velocity: v } => [c[0] + t * v[0], c[1] + t * v[1], c[2] + t * v[2]],
            Motion::Sinusoid { amplitude: a } => {
                let s = (2.0 * std::f64::consts::PI * t).sin();
                [c[0] + s * a[0], c[1] + s * a[1], c[2] + s * a[2]]
            }
        }
    }

    /// Signed distance, negative inside.
    pub fn sdf(&self, p: [f64; 3], t: f64) -> f64 {
        let c = self.center_at(t);
        let q = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        match self.shape {
            Shape::Sphere { radius } => (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt() - radius,
            Shape::Cuboid { half } => {
                let d: [f64; 3] = std::array::from_fn(|a| q[a].abs() - half[a]);
                let outside = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = d[0].max(d[1]).max(d[2]).min(0.0);
                outside + inside
            }
        }
    }

    pub fn density(&self, p: [f64; 3], t: f64) -> f64 {
        SIGMA_MAX * sigmoid(-self.sdf(p, t) / SOFTNESS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub bbox: Aabb,
}

impl Field for SyntheticScene {
    /// Densities add; color is the density-weighted mean of the primitives.
    fn query(&self, p: [f64; 3], t: f64, _d: [f64; 3]) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut c = [0.0; 3];
        for prim in &self.primitives {
            let s = prim.density(p, t);
            sigma += s;
            for a in 0..3 {
                c[a] += s * prim.color[a];
            }
        }
        if sigma > 0.0 {
            c.iter_mut().for_each(|v| *v /= sigma);
        }
        (sigma, c)
    }
}

impl SyntheticScene {
    pub fn builtin(name: &str) -> Result<Self> {
        let sphere = |r: f64, center, motion, color| Primitive {
            shape: Shape::Sphere { radius: r },
            center,
            motion,
            color,
        };
        let primitives = match name {
            "translating-sphere" => vec![sphere(
                0.3,
                [-0.45, 0.0, 0.0],
                Motion::Linear {
                    velocity: [0.9, 0.0, 0.0],
                },
                [0.9, 0.35, 0.2],
            )],
            "bouncing-ball" => vec![sphere(
                0.3,
                [0.0, 0.0, 0.0],
                Motion::Sinusoid {
                    amplitude: [0.0, 0.0, 0.4],
                },
                [0.2, 0.8, 0.3],
            )],
            // A box sweeps through space that is empty at other times, past a static sphere.
            "occluder" => vec![
                sphere(0.3, [0.0, 0.35, 0.0], Motion::Static, [0.2, 0.4, 0.9]),
                Primitive {
                    shape: Shape::Cuboid { half: [0.18; 3] },
                    center: [-0.55, -0.3, 0.0],
                    motion: Motion::Linear {
                        velocity: [1.1, 0.0, 0.0],
                    },
                    color: [0.3, 0.9, 0.3],
                },
            ],
            "static" => vec![
                sphere(0.3, [-0.3, 0.0, 0.0], Motion::Static, [0.9, 0.25, 0.25]),
                Primitive {
                    shape: Shape::Cuboid { half: [0.2; 3] },
                    center: [0.35, 0.1, 0.0],
                    motion: Motion::Static,
                    color: [0.9, 0.85, 0.2],
                },
            ],
            other => return Err(Error::UnknownScene(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            primitives,
            background: [0.0; 3],
            bbox: Aabb::cube(1.0),
        })
    }
}

/// Dense-quadrature image of an analytic field.
pub fn render_ground_truth<F: Field + Sync>(
    field: &F,
    camera: &Camera,
    t: f64,
    bbox: &Aabb,
    background: [f64; 3],
    quadrature: usize,
) -> Result<Image> {
    if quadrature < MIN_QUADRATURE {
        return Err(Error::OutOfRange(format!(
            "quadrature {quadrature} below the minimum {MIN_QUADRATURE}"
        )));
    }
    let step = bbox.diagonal() / quadrature as f64;
    let data: Vec<[f32; 3]> = (0..camera.width * camera.height)
        .into_par_iter()
        .map(|i| {
            let (o, d) = camera.pixel_ray(i % camera.width, i / camera.width);
            let c = render_field(field, &Ray::new(o, d, t), bbox, step, background);
            c.rgb.map(|v| v as f32)
        })
        .collect();
    Image::from_data(camera.width, camera.height, data)
}

/// Camera at `position` looking at `target` with world +z up.
pub fn look_at(position: [f64; 3], target: [f64; 3]) -> [[f64; 4]; 4] {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let norm = |a: [f64; 3]| {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        [a[0] / n, a[1] / n, a[2] / n]
    };
    let f = norm(sub(target, position));
    let right = norm(cross(f, [0.0, 0.0, 1.0]));
    let up = cross(right, f);
    let mut m = [[0.0; 4]; 4];
    for r in 0..3 {
        m[r] = [right[r], up[r], -f[r], position[r]];
    }
    m[3] = [0.0, 0.0, 0.0, 1.0];
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOptions {
    pub width: usize,
    pub height: usize,
    pub train_views: usize,
    pub test_views: usize,
    /// Distinct time steps, spread evenly over `[0, 1]`.
    pub times: usize,
    pub quadrature: usize,
    pub radius: f64,
    pub elevation: f64,
    pub camera_angle_x: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            train_views: 30,
            test_views: 10,
            times: 10,
            quadrature: 512,
            radius: 4.0,
            elevation: 0.45,
            camera_angle_x: 0.6911112070083618,
        }
    }
}

/// One rendered view of a generated scene.
#[derive(Clone, Debug)]
pub struct GeneratedView {
    pub frame: ManifestFrame,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub scene: SyntheticScene,
    pub train: Vec<GeneratedView>,
    pub test: Vec<GeneratedView>,
    pub options: GenOptions,
}

fn time_of(k: usize, times: usize) -> f64 {
    if times <= 1 {
        0.0
    } else {
        (k % times) as f64 / (times - 1) as f64
    }
}

impl GenOptions {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.train_views == 0 || self.times == 0 {
            return Err(Error::OutOfRange("sizes, view counts and time steps must be positive".into()));
        }
        if self.quadrature < MIN_QUADRATURE {
            return Err(Error::OutOfRange(format!("quadrature must be at least {MIN_QUADRATURE}")));
        }
        Ok(())
    }

    pub fn camera(&self, azimuth: f64) -> Result<Camera> {
        let (ce, se) = (self.elevation.cos(), self.elevation.sin());
        let pos = [self.radius * ce * azimuth.cos(), self.radius * ce * azimuth.sin(), self.radius * se];
        Camera::from_fov(self.width, self.height, self.camera_angle_x, look_at(pos, [0.0; 3]))
    }
}

/// Renders a built-in scene from cameras on a circle. Training view `i` sits
/// at time `(i mod times) / (times - 1)`, so view 0 is the canonical frame;
/// test views sit halfway between training azimuths. The seed only rotates
/// the camera ring.
pub fn gen_scene(name: &str, seed: u64, options: &GenOptions) -> Result<Generated> {
    options.validate()?;
    let scene = SyntheticScene::builtin(name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 2.0 * std::f64::consts::PI;
    let phase = rng.random_range(0.0..tau / options.train_views as f64);
    let make = |count: usize, shift: f64, dir: &str| -> Result<Vec<GeneratedView>> {
        (0..count)
            .map(|i| {
                let az = phase + tau * (i as f64 + shift) / count as f64;
                let cam = options.camera(az)?;
                let t = time_of(i, options.times);
                let image = render_ground_truth(&scene, &cam, t, &scene.bbox, scene.background, options.quadrature)?;
                Ok(GeneratedView {
                    frame: ManifestFrame {
                        file_path: format!("./{dir}/r_{i:03}"),
                        transform_matrix: cam.c2w,
                        time: t,
                        split: None,
                    },
                    image,
                })
            })
            .collect()
    };
    let train = make(options.train_views, 0.0, "train")?;
    let test = make(options.test_views, 0.5, "test")?;
    Ok(Generated {
        scene,
        train,
        test,
        options: options.clone(),
    })
}

impl Generated {
    fn manifest(&self, views: &[GeneratedView]) -> Manifest {
        Manifest {
            camera_angle_x: Some(self.options.camera_angle_x),
            w: Some(self.options.width),
            h: Some(self.options.height),
            aabb: Some([self.scene.bbox.min, self.scene.bbox.max]),
            background: Some(self.scene.background),
            frames: views.iter().map(|v| v.frame.clone()).collect(),
            ..Default::default()
        }
    }

    /// Writes PNGs and both manifests under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (views, sub, manifest) in [(&self.train, "train", TRAIN_MANIFEST), (&self.test, "test", TEST_MANIFEST)] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            for v in views.iter() {
                v.image.save_png(&dir.join(&v.frame.file_path).with_extension("png"))?;
            }
            self.manifest(views).save(&dir.join(manifest))?;
        }
        Ok(())
    }

    pub fn views(&self, split: Split) -> &[GeneratedView] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}
