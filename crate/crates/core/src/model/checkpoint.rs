//! `GLCK` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GLCK"  u16 version=1
//! u32 metadata length, metadata (UTF-8 key-value text: spec, palette, provenance)
//! u32 tensor count, then per tensor:
//!     u16 name length, name, u8 rank, u32 × rank dims, f32 × product(dims)
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::params::ModelParams;
use super::spec::{ModelSpec, Profile};
use crate::codec::{framed, put_f32s, put_u16, put_u32, seal, Reader};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::nn::{ParamSet, Tensor};
use crate::palette::{color_hex, parse_color_hex, ClassInfo, Palette};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// How a set of weights came to be.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub palette: Palette,
    pub provenance: Provenance,
}

fn spec_to_kv(spec: &ModelSpec, doc: &mut KvDoc) {
    doc.push("model.profile", spec.profile.as_str())
        .push("model.depth", spec.depth)
        .push("model.base_filters", spec.base_filters)
        .push("model.head_filters", spec.head_filters)
        .push("model.classes", spec.classes)
        .push("model.channels", spec.channels)
        .push("model.groups", spec.groups)
        .push("model.patch_size", spec.patch_size);
}

/// Read a [`ModelSpec`] from `model.*` keys.
pub fn spec_from_kv(doc: &KvDoc) -> Result<ModelSpec> {
    let spec = ModelSpec {
        depth: doc.parse_value("model.depth")?,
        base_filters: doc.parse_value("model.base_filters")?,
        head_filters: doc.parse_value("model.head_filters")?,
        classes: doc.parse_value("model.classes")?,
        channels: doc.parse_value("model.channels")?,
        groups: doc.parse_value("model.groups")?,
        patch_size: doc.parse_value("model.patch_size")?,
        profile: Profile::parse(doc.require("model.profile")?)?,
    };
    if spec.depth > 6
        || spec.base_filters == 0
        || (spec.base_filters << spec.depth) > 4096
        || spec.head_filters > 4096
        || spec.channels > 64
        || spec.classes > 255
        || spec.patch_size > 4096
    {
        return Err(Error::config("model dimensions out of supported range"));
    }
    spec.validate()?;
    Ok(spec)
}

impl Checkpoint {
    pub fn metadata(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        spec_to_kv(&self.params.spec, &mut doc);
        doc.push("palette.count", self.palette.len());
        for (i, c) in self.palette.classes().iter().enumerate() {
            doc.push(format!("palette.{i}.name"), &c.name)
                .push(format!("palette.{i}.color"), color_hex(c.color));
        }
        doc.push("provenance.seed", self.provenance.seed)
            .push("provenance.epochs", self.provenance.epochs);
        doc
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u16(&mut out, CHECKPOINT_VERSION);
        let meta = self.metadata().to_string();
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.params.tensors.len() as u32);
        for (name, t) in &self.params.tensors {
            put_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        seal(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = framed(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut r = Reader::at(body, 6);
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos();
        let meta_raw = r.bytes(meta_len, "metadata")?;
        let meta_text =
            std::str::from_utf8(meta_raw).map_err(|e| Error::format(meta_at, format!("metadata is not UTF-8: {e}")))?;
        let meta = KvDoc::parse(meta_text)?;
        let spec = spec_from_kv(&meta)?;
        let count: usize = meta.parse_value("palette.count")?;
        if count != spec.classes {
            return Err(Error::Palette(format!(
                "{count} palette entries for {} classes",
                spec.classes
            )));
        }
        let mut classes = Vec::with_capacity(count);
        for i in 0..count {
            classes.push(ClassInfo {
                name: meta.require(&format!("palette.{i}.name"))?.to_string(),
                color: parse_color_hex(meta.require(&format!("palette.{i}.color"))?)?,
            });
        }
        let palette = Palette::new(classes)?;
        let provenance = Provenance {
            seed: meta.parse_value("provenance.seed")?,
            epochs: meta.parse_value("provenance.epochs")?,
        };

        let expected = spec.param_shapes();
        let n_tensors = r.u32("tensor count")? as usize;
        let mut tensors = ParamSet::new();
        for _ in 0..n_tensors {
            let at = r.pos();
            let name_len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.bytes(name_len, "tensor name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dim")? as usize);
            }
            let want = expected_shape(&expected, &name)
                .ok_or_else(|| Error::format(at, format!("unexpected tensor `{name}`")))?;
            if shape != want {
                return Err(Error::format(
                    at,
                    format!("tensor `{name}` has shape {shape:?}, expected {want:?}"),
                ));
            }
            let n = shape.iter().product();
            let data = r.f32s(n, &name)?;
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::format(at, format!("duplicate tensor `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.pos(), "trailing bytes after tensors"));
        }
        if let Some(missing) = expected.keys().find(|k| !tensors.contains_key(*k)) {
            return Err(Error::format(r.pos(), format!("missing tensor `{missing}`")));
        }
        Ok(Checkpoint {
            params: ModelParams { spec, tensors },
            palette,
            provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Shape a tensor named `name` must have; `<conv>.mask` tensors are optional
/// per-channel dropout masks.
fn expected_shape(expected: &BTreeMap<String, Vec<usize>>, name: &str) -> Option<Vec<usize>> {
    if let Some(s) = expected.get(name) {
        return Some(s.clone());
    }
    let conv = name.strip_suffix(".mask")?;
    expected.get(&format!("{conv}.bias")).cloned()
}
