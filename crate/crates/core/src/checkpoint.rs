//! Binary model snapshots.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then every tensor as little-endian `f32` at the byte offset recorded in
//! the header (relative to the start of the data block).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical::{CanonicalField, Stage};
use crate::deform::DeformationField;
use crate::encoding::PosEnc;
use crate::error::{Error, Result};
use crate::grid::{Aabb, DenseGrid};
use crate::mlp::{Mlp, MlpSpec};
use crate::model::{Filters, Model, Occupancy};

pub const MAGIC: &[u8; 8] = b"NDVGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    /// Set for grids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Aabb>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: Stage,
    iteration: u64,
    bbox: Aabb,
    step: f64,
    background: [f64; 3],
    use_occlusion: bool,
    t_can: f64,
    deform_frame: Aabb,
    deform_pos_enc: PosEnc,
    deform_time_enc: PosEnc,
    deform_net: MlpSpec,
    canonical_frame: Aabb,
    canonical_pos_enc: PosEnc,
    canonical_dir_enc: PosEnc,
    density_shift: f64,
    color_net: Option<MlpSpec>,
    deform_filter_threshold: Option<f64>,
    canonical_filter_threshold: Option<f64>,
    tensors: Vec<TensorEntry>,
    /// Free-form metadata, usually the training configuration.
    meta: serde_json::Value,
}

/// A model plus where it stands in training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    pub model: Model<f32>,
    pub meta: serde_json::Value,
}

struct Writer {
    tensors: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: &str, shape: Vec<usize>, bbox: Option<Aabb>, values: &[f32]) {
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            dtype: "f32".into(),
            offset: self.data.len(),
            bbox,
        });
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn grid(&mut self, name: &str, g: &DenseGrid<f32>) {
        let r = g.resolution();
        self.push(name, vec![r[0], r[1], r[2], g.channels()], Some(*g.bbox()), &g.values);
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(stage: Stage, iteration: u64, model: Model<f32>, meta: serde_json::Value) -> Self {
        Self {
            stage,
            iteration,
            model,
            meta,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut w = Writer {
            tensors: Vec::new(),
            data: Vec::new(),
        };
        w.grid("deform.grid", &m.deform.grid);
        w.push("deform.net", vec![m.deform.net.num_params()], None, &m.deform.net.params);
        w.grid("canonical.density", &m.canonical.density);
        w.grid("canonical.color", &m.canonical.color);
        if let Some(net) = &m.canonical.color_net {
            w.push("canonical.color_net", vec![net.num_params()], None, &net.params);
        }
        if let Some(f) = &m.filters.deform {
            w.grid("filter.deform", &f.alpha);
        }
        if let Some(f) = &m.filters.canonical {
            w.grid("filter.canonical", &f.alpha);
        }
        let header = Header {
            version: FORMAT_VERSION,
            stage: self.stage,
            iteration: self.iteration,
            bbox: m.bbox,
            step: m.step,
            background: m.background,
            use_occlusion: m.use_occlusion,
            t_can: m.deform.t_can as f64,
            deform_frame: m.deform.frame,
            deform_pos_enc: m.deform.pos_enc,
            deform_time_enc: m.deform.time_enc,
            deform_net: m.deform.net.spec().clone(),
            canonical_frame: m.canonical.frame,
            canonical_pos_enc: m.canonical.pos_enc,
            canonical_dir_enc: m.canonical.dir_enc,
            density_shift: m.canonical.density_shift as f64,
            color_net: m.canonical.color_net.as_ref().map(|n| n.spec().clone()),
            deform_filter_threshold: m.filters.deform.as_ref().map(|f| f.threshold),
            canonical_filter_threshold: m.filters.canonical.as_ref().map(|f| f.threshold),
            tensors: w.tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + w.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.version)));
        }
        let data = &bytes[data_start..];
        let find = |name: &str| header.tensors.iter().find(|t| t.name == name);
        let read = |e: &TensorEntry| -> Result<Vec<f32>> {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if end > data.len() {
                return Err(bad(format!("tensor {} runs past the end of the file", e.name)));
            }
            Ok(data[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let grid = |name: &str| -> Result<DenseGrid<f32>> {
            let e = find(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if e.shape.len() != 4 {
                return Err(bad(format!("grid {name} must have 4 dimensions")));
            }
            let bbox = e.bbox.ok_or_else(|| bad(format!("grid {name} has no box")))?;
            DenseGrid::from_values([e.shape[0], e.shape[1], e.shape[2]], e.shape[3], bbox, read(e)?)
        };
        let net = |name: &str, spec: MlpSpec| -> Result<Mlp<f32>> {
            let e = find(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            Mlp::from_params(spec, read(e)?)
        };

        let deform = DeformationField::from_parts(
            grid("deform.grid")?,
            net("deform.net", header.deform_net.clone())?,
            header.t_can as f32,
            header.deform_frame,
            header.deform_pos_enc,
            header.deform_time_enc,
        )?;
        let density = grid("canonical.density")?;
        let color = grid("canonical.color")?;
        let shift = header.density_shift as f32;
        let canonical = match (&header.color_net, header.stage) {
            (Some(spec), Stage::Fine) => CanonicalField::fine(
                density,
                color,
                net("canonical.color_net", spec.clone())?,
                shift,
                header.canonical_frame,
                header.canonical_pos_enc,
                header.canonical_dir_enc,
            )?,
            (None, Stage::Coarse) => CanonicalField::coarse(density, color, shift, header.canonical_frame)?,
            _ => return Err(bad("color network presence does not match the stage")),
        };
        let filter = |name: &str, th: Option<f64>| -> Result<Option<Occupancy<f32>>> {
            th.map(|threshold| Ok(Occupancy { alpha: grid(name)?, threshold })).transpose()
        };
        let filters = Filters {
            deform: filter("filter.deform", header.deform_filter_threshold)?,
            canonical: filter("filter.canonical", header.canonical_filter_threshold)?,
        };
        Ok(Self {
            stage: header.stage,
            iteration: header.iteration,
            model: Model {
                deform,
                canonical,
                bbox: header.bbox,
                step: header.step,
                background: header.background,
                use_occlusion: header.use_occlusion,
                filters,
            },
            meta: header.meta,
        })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(tmp, e))?;
        f.sync_all().map_err(|e| Error::io(tmp, e))?;
        drop(f);
        fs::rename(tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
