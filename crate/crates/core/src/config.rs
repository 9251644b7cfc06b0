//! Training configuration and its flat `key = value` file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub coarse_iters: usize,
    pub fine_iters: usize,
    /// Rays per optimizer step.
    pub batch_rays: usize,
    /// Expected voxel counts; per-axis resolution follows the box shape.
    pub coarse_deform_voxels: usize,
    pub fine_deform_voxels: usize,
    pub coarse_canonical_voxels: usize,
    pub fine_canonical_voxels: usize,
    /// Samples per scene-box diagonal; sets the marching step.
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub lr_grid: f64,
    pub lr_net: f64,
    /// Learning rates reach `lr * lr_decay` at the end of each stage.
    pub lr_decay: f64,
    /// Opacity of an untouched density grid.
    pub alpha_init: f64,
    /// Alpha below which a point counts as empty.
    pub alpha_thresh: f64,
    /// Fraction of the coarse stage over which the time window opens.
    pub progressive_frac: f64,
    /// Fine stage starts at half resolution and doubles at 1/3 and 2/3.
    pub progressive_upscale: bool,
    pub canonical_time: f64,
    pub use_occlusion: bool,
    pub use_filter: bool,
    /// Lighter offset prior for scenes with large motion.
    pub large_motion: bool,
    pub n_top: usize,
    /// Rays per parallel work item.
    pub chunk_rays: usize,
    /// Random start offset within one step per ray.
    pub jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coarse_iters: 10_000,
            fine_iters: 20_000,
            batch_rays: 8192,
            coarse_deform_voxels: 1_664_000,
            fine_deform_voxels: 190 * 190 * 190,
            coarse_canonical_voxels: 1_024_000,
            fine_canonical_voxels: 160 * 160 * 160,
            coarse_samples: 128,
            fine_samples: 192,
            lr_grid: 0.1,
            lr_net: 1e-3,
            lr_decay: 0.1,
            alpha_init: 1e-6,
            alpha_thresh: 1e-3,
            progressive_frac: 0.2,
            progressive_upscale: true,
            canonical_time: 0.0,
            use_occlusion: true,
            use_filter: true,
            large_motion: false,
            n_top: crate::loss::DEFAULT_TOP_N,
            chunk_rays: 256,
            jitter: false,
        }
    }
}

impl TrainConfig {
    /// The 5k/10k iteration schedule used for half-resolution data.
    pub fn half_resolution() -> Self {
        Self {
            coarse_iters: 5_000,
            fine_iters: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_rays", self.batch_rays),
            ("coarse_deform_voxels", self.coarse_deform_voxels),
            ("fine_deform_voxels", self.fine_deform_voxels),
            ("coarse_canonical_voxels", self.coarse_canonical_voxels),
            ("fine_canonical_voxels", self.fine_canonical_voxels),
            ("coarse_samples", self.coarse_samples),
            ("fine_samples", self.fine_samples),
            ("n_top", self.n_top),
            ("chunk_rays", self.chunk_rays),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let rates = [("lr_grid", self.lr_grid), ("lr_net", self.lr_net), ("lr_decay", self.lr_decay)];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{k} = {v} must be positive")));
        }
        for (k, v) in [("alpha_init", self.alpha_init), ("alpha_thresh", self.alpha_thresh)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{k} = {v} must lie in (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.progressive_frac) {
            return Err(Error::Config("progressive_frac must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.canonical_time) {
            return Err(Error::Config("canonical_time must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Applies `key = value` overrides. Values parse as JSON when possible
    /// and as bare strings otherwise.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        let obj = v.as_object_mut().expect("config serializes to an object");
        for (key, raw) in pairs {
            let slot = obj
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        }
        *self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The file format accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, val) in v.as_object().expect("object") {
            out.push_str(&format!("{k} = {val}\n"));
        }
        out
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim(), v.trim()));
    }
    Ok(out)
}
