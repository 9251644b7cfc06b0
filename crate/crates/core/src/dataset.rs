//! Posed image sequences in the `transforms_{train,test}.json` layout.
//!
//! ```json
//! {
//!   "camera_angle_x": 0.69,
//!   "w": 64, "h": 64,
//!   "aabb": [[-1, -1, -1], [1, 1, 1]],
//!   "background": [0, 0, 0],
//!   "frames": [
//!     {"file_path": "./train/r_000", "transform_matrix": [[...4x4...]], "time": 0.0}
//!   ]
//! }
//! ```
//!
//! Only `frames` and, per frame, `file_path`, `transform_matrix` and `time`
//! are required, plus one of `camera_angle_x` / `fl_x`. `file_path` may omit
//! the `.png` extension. A frame may carry `"split": "test"` to override the
//! split implied by the file it was read from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::grid::Aabb;
use crate::image::Image;
use crate::render::{check_pose, Camera};

pub const TRAIN_MANIFEST: &str = "transforms_train.json";
pub const TEST_MANIFEST: &str = "transforms_test.json";
pub const DEFAULT_NEAR: f64 = 2.0;
pub const DEFAULT_FAR: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("split must be train or test, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_angle_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb: Option<[[f64; 3]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<[f64; 3]>,
    pub frames: Vec<ManifestFrame>,
}

fn require(obj: &Value, key: &str, path: &Path, context: &str) -> Result<()> {
    if obj.get(key).is_none() {
        return Err(Error::MissingKey {
            path: path.to_path_buf(),
            key: format!("{context}{key}"),
        });
    }
    Ok(())
}

impl Manifest {
    /// Parses and validates one manifest file. Frames without a split tag get `default_split`.
    pub fn load(path: &Path, default_split: Split) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Manifest {
            path: path.to_path_buf(),
            message: m,
        };
        let value: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if !value.is_object() {
            return Err(bad("top level must be an object".into()));
        }
        require(&value, "frames", path, "")?;
        if value.get("camera_angle_x").is_none() && value.get("fl_x").is_none() {
            return Err(Error::MissingKey {
                path: path.to_path_buf(),
                key: "camera_angle_x".into(),
            });
        }
        let frames = value["frames"].as_array().ok_or_else(|| bad("`frames` must be an array".into()))?;
        for (i, f) in frames.iter().enumerate() {
            for key in ["file_path", "transform_matrix", "time"] {
                require(f, key, path, &format!("frames[{i}]."))?;
            }
        }
        let mut m: Manifest = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        for f in &mut m.frames {
            f.split.get_or_insert(default_split);
        }
        m.validate(path)?;
        Ok(m)
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: "no frames".into(),
            });
        }
        for (i, f) in self.frames.iter().enumerate() {
            if !(0.0..=1.0).contains(&f.time) {
                return Err(Error::OutOfRange(format!(
                    "{}: frame {i} ({}) has time {} outside [0, 1]",
                    path.display(),
                    f.file_path,
                    f.time
                )));
            }
            check_pose(&f.transform_matrix)
                .map_err(|e| Error::InvalidPose(format!("{}: frame {i} ({}): {e}", path.display(), f.file_path)))?;
        }
        if let Some([lo, hi]) = self.aabb {
            Aabb::new(lo, hi)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn camera(&self, frame: &ManifestFrame, width: usize, height: usize) -> Result<Camera> {
        match (self.fl_x, self.camera_angle_x) {
            (Some(fx), _) => Camera::new(
                width,
                height,
                fx,
                self.fl_y.unwrap_or(fx),
                self.cx.unwrap_or(0.5 * width as f64),
                self.cy.unwrap_or(0.5 * height as f64),
                frame.transform_matrix,
            ),
            (None, Some(a)) => Camera::from_fov(width, height, a, frame.transform_matrix),
            (None, None) => Err(Error::InvalidArgument("no intrinsics".into())),
        }
    }
}

/// One posed image.
#[derive(Clone, Debug)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub time: f64,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub bbox: Aabb,
    pub background: [f64; 3],
}

fn image_path(root: &Path, file: &str) -> PathBuf {
    let p = root.join(file);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

/// Box around every camera frustum between `near` and `far`.
pub fn frustum_bbox(cameras: &[&Camera], near: f64, far: f64) -> Result<Aabb> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for cam in cameras {
        let (w, h) = (cam.width as f64, cam.height as f64);
        for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h), (0.5 * w, 0.5 * h)] {
            let (o, d) = cam.ray_through(u, v);
            for s in [near, far] {
                for a in 0..3 {
                    let x = o[a] + s * d[a];
                    lo[a] = lo[a].min(x);
                    hi[a] = hi[a].max(x);
                }
            }
        }
    }
    Aabb::new(lo, hi)
}

impl Dataset {
    /// Loads `transforms_train.json` and, when present, `transforms_test.json` from `root`.
    pub fn load(root: &Path) -> Result<Self> {
        let train_path = root.join(TRAIN_MANIFEST);
        let train_m = Manifest::load(&train_path, Split::Train)?;
        let test_path = root.join(TEST_MANIFEST);
        let test_m = if test_path.exists() {
            Some(Manifest::load(&test_path, Split::Test)?)
        } else {
            None
        };
        let background = train_m.background.unwrap_or([1.0; 3]);
        let mut ds = Dataset {
            root: root.to_path_buf(),
            train: Vec::new(),
            test: Vec::new(),
            bbox: Aabb::cube(1.0),
            background,
        };
        for (m, mpath) in std::iter::once((&train_m, &train_path)).chain(test_m.as_ref().map(|m| (m, &test_path))) {
            for f in &m.frames {
                let ipath = image_path(root, &f.file_path);
                let image = Image::load_png(&ipath, background)?;
                if let (Some(w), Some(h)) = (m.w, m.h) {
                    if (w, h) != (image.width, image.height) {
                        return Err(Error::Manifest {
                            path: mpath.clone(),
                            message: format!(
                                "{} is {}x{}, manifest declares {w}x{h}",
                                ipath.display(),
                                image.width,
                                image.height
                            ),
                        });
                    }
                }
                let camera = m.camera(f, image.width, image.height)?;
                let view = View {
                    name: f.file_path.clone(),
                    camera,
                    time: f.time,
                    image,
                };
                match f.split.unwrap_or(Split::Train) {
                    Split::Train => ds.train.push(view),
                    Split::Test => ds.test.push(view),
                }
            }
        }
        if ds.train.is_empty() {
            return Err(Error::Manifest {
                path: train_path,
                message: "no training frames".into(),
            });
        }
        ds.bbox = match train_m.aabb {
            Some([lo, hi]) => Aabb::new(lo, hi)?,
            None => {
                let cams: Vec<&Camera> = ds.train.iter().map(|v| &v.camera).collect();
                frustum_bbox(
                    &cams,
                    train_m.near.unwrap_or(DEFAULT_NEAR),
                    train_m.far.unwrap_or(DEFAULT_FAR),
                )?
            }
        };
        Ok(ds)
    }

    pub fn views(&self, split: Split) -> &[View] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Distinct training times in increasing order.
    pub fn train_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.train.iter().map(|v| v.time).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}
