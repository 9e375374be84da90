//! Model checkpoints.
//!
//! Layout (little-endian): magic `KDCK`, u32 version, u32 length + model
//! config text, u32 entry count, then entries. Each entry is a u8
//! kind, a u32 length + name, and a payload:
//!
//! | kind | payload |
//! |------|---------|
//! | 0 parameter | `KTNS` tensor |
//! | 1 buffer (batch-norm running statistics) | `KTNS` tensor |
//! | 2 parent reference | u32 length + parameter name of the parent kernel |
//! | 3 fused child kernel | `KTNS` tensor |
//!
//! A parent kernel is written once under its own name; child layers only
//! contribute adapter parameters and a reference.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::topology::{Model, ModelConfig, SlotKind};

const MAGIC: &[u8; 4] = b"KDCK";
const VERSION: u32 = 1;

const PARAM: u8 = 0;
const BUFFER: u8 = 1;
const PARENT_REF: u8 = 2;
const FUSED: u8 = 3;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_entry(out: &mut Vec<u8>, kind: u8, name: &str) {
    out.push(kind);
    put_str(out, name);
}

fn bn_prefix(model: &Model, gamma: crate::params::ParamId) -> String {
    let name = model.store.name(gamma);
    name.strip_suffix(".gamma").unwrap_or(name).to_string()
}

/// Serialises a model. Baseline layers cannot be checkpointed.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut count = 0u32;
    for (_, p) in model.store.iter() {
        put_entry(&mut entries, PARAM, &p.name);
        p.value.write_to(&mut entries)?;
        count += 1;
    }
    for bn in model.bn_slots() {
        let prefix = bn_prefix(model, bn.gamma);
        for (suffix, t) in [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)] {
            put_entry(&mut entries, BUFFER, &format!("{prefix}.{suffix}"));
            t.write_to(&mut entries)?;
            count += 1;
        }
    }
    for slot in model.slots() {
        match &slot.kind {
            SlotKind::Child(c) => {
                put_entry(&mut entries, PARENT_REF, &slot.label);
                put_str(&mut entries, model.store.name(c.parent));
                count += 1;
                if let Some(w) = &c.fused_weight {
                    put_entry(&mut entries, FUSED, &slot.label);
                    w.write_to(&mut entries)?;
                    count += 1;
                }
            }
            SlotKind::Copy { parent, .. } => {
                put_entry(&mut entries, PARENT_REF, &slot.label);
                put_str(&mut entries, model.store.name(*parent));
                count += 1;
            }
            SlotKind::Pool(_) | SlotKind::Dynamic(_) => {
                return Err(Error::State("baseline layers cannot be checkpointed".into()))
            }
            SlotKind::Full { .. } => {}
        }
    }
    let mut out = Vec::with_capacity(entries.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &model.config.to_text());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&entries);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format { offset: start as u64, msg: format!("{what} is not UTF-8") })
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let mut rest = &self.bytes[self.pos..];
        let before = rest.len();
        let t = Tensor::read_from(&mut rest, self.pos as u64)?;
        self.pos += before - rest.len();
        Ok(t)
    }
}

/// Rebuilds a model from checkpoint bytes. The model is returned in eval
/// mode; fused kernels present in the file are restored.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad checkpoint magic, expected KDCK".into() });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported checkpoint version {version}") });
    }
    let cfg_at = c.pos;
    let config = ModelConfig::parse(&c.string("config")?)
        .map_err(|e| Error::Format { offset: cfg_at as u64, msg: format!("embedded config: {e}") })?;
    let mut model = Model::build(&config, 0)?;
    model.set_mode(Mode::Eval);
    let count = c.u32("entry count")?;
    let mut seen = vec![false; model.store.len()];
    for _ in 0..count {
        let at = c.pos;
        let kind = c.take(1, "entry kind")?[0];
        let name = c.string("entry name")?;
        match kind {
            PARAM => {
                let t = c.tensor()?;
                let id = model
                    .store
                    .id_of(&name)
                    .ok_or_else(|| Error::Format { offset: at as u64, msg: format!("unknown parameter {name:?}") })?;
                if t.shape() != model.store.get(id).shape() {
                    return Err(Error::Format {
                        offset: at as u64,
                        msg: format!(
                            "parameter {name:?} has shape {:?}, model expects {:?}",
                            t.shape(),
                            model.store.get(id).shape()
                        ),
                    });
                }
                *model.store.get_mut(id) = t;
                seen[id.0] = true;
            }
            BUFFER => {
                let t = c.tensor()?;
                let (prefix, which) = name.rsplit_once('.').unwrap_or(("", ""));
                let gamma = model.store.id_of(&format!("{prefix}.gamma"));
                let slot = model.bn_slots_mut().into_iter().find(|bn| Some(bn.gamma) == gamma);
                let target = match (slot, which) {
                    (Some(bn), "running_mean") => &mut bn.running_mean,
                    (Some(bn), "running_var") => &mut bn.running_var,
                    _ => return Err(Error::Format { offset: at as u64, msg: format!("unknown buffer {name:?}") }),
                };
                if target.shape() != t.shape() {
                    return Err(Error::Format {
                        offset: at as u64,
                        msg: format!("buffer {name:?} has the wrong shape"),
                    });
                }
                *target = t;
            }
            PARENT_REF => {
                let parent = c.string("parent name")?;
                let dangling =
                    || Error::Format { offset: at as u64, msg: format!("{name} refers to missing parent {parent:?}") };
                let pid = model.store.id_of(&parent).ok_or_else(dangling)?;
                let slot = model.slots().find(|s| s.label == name);
                match slot.and_then(|s| if s.tag == crate::topology::SlotTag::Shared { s.kernel_param() } else { None })
                {
                    Some(expected) if expected == pid => {}
                    _ => return Err(dangling()),
                }
            }
            FUSED => {
                let t = c.tensor()?;
                let child = model.stages.iter_mut().flat_map(|s| s.slots.iter_mut()).find(|s| s.label == name);
                match child.map(|s| &mut s.kind) {
                    Some(SlotKind::Child(ch)) if model.store.get(ch.parent).shape() == t.shape() => {
                        ch.fused_weight = Some(t)
                    }
                    _ => {
                        return Err(Error::Format {
                            offset: at as u64,
                            msg: format!("fused kernel for unknown child {name:?}"),
                        })
                    }
                }
            }
            other => return Err(Error::Format { offset: at as u64, msg: format!("unknown entry kind {other}") }),
        }
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes after last entry"));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("parameter {:?} missing from checkpoint", model.store.name(crate::params::ParamId(i))),
        });
    }
    Ok(model)
}

/// Writes atomically: a temporary file in the same directory is renamed
/// over `path`.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&crate::io::read(path)?)
}
