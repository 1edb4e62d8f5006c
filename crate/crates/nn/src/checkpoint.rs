//! Binary checkpoint container.
//!
//! Layout (all integers little-endian): magic `P2CK` | u32 version |
//! string stage | string metadata | u32 store count | stores. A string is
//! u32 byte length + UTF-8 bytes. A store is: string name | u32 param count
//! | per param: string name | u8 kind (0 trainable, 1 buffer) | u32 ndim |
//! u32 dims | f32 payload.

use std::io::{Read, Write};

use crate::graph::{Param, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"P2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub stage: String,
    /// Free-form metadata, typically the JSON config the networks were
    /// built from.
    pub metadata: String,
    pub stores: Vec<(String, ParamStore)>,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| NnError::Truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String, NnError> {
    let len = get_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| NnError::Truncated)?;
    String::from_utf8(buf).map_err(|_| NnError::Corrupt("non-UTF-8 string".into()))
}

impl Checkpoint {
    pub fn store(&self, name: &str) -> Result<&ParamStore, NnError> {
        self.stores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| NnError::Corrupt(format!("checkpoint has no store named {name:?}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NnError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_str(w, &self.stage)?;
        put_str(w, &self.metadata)?;
        put_u32(w, self.stores.len() as u32)?;
        for (name, store) in &self.stores {
            put_str(w, name)?;
            put_u32(w, store.len() as u32)?;
            for p in store.params() {
                put_str(w, &p.name)?;
                w.write_all(&[match p.kind {
                    ParamKind::Trainable => 0,
                    ParamKind::Buffer => 1,
                }])?;
                put_u32(w, p.value.ndim() as u32)?;
                for &d in p.value.shape() {
                    put_u32(w, d as u32)?;
                }
                let mut bytes = Vec::with_capacity(p.value.len() * 4);
                for v in p.value.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&bytes)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| NnError::Truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::BadMagic);
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::UnsupportedVersion(version));
        }
        let stage = get_str(r)?;
        let metadata = get_str(r)?;
        let n_stores = get_u32(r)?;
        let mut stores = Vec::new();
        for _ in 0..n_stores {
            let name = get_str(r)?;
            let count = get_u32(r)?;
            let mut params = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let pname = get_str(r)?;
                let mut kind = [0u8; 1];
                r.read_exact(&mut kind).map_err(|_| NnError::Truncated)?;
                let kind = match kind[0] {
                    0 => ParamKind::Trainable,
                    1 => ParamKind::Buffer,
                    k => return Err(NnError::Corrupt(format!("unknown parameter kind {k}"))),
                };
                let ndim = get_u32(r)? as usize;
                let shape = (0..ndim).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                let len: usize = shape.iter().product();
                let mut bytes = vec![0u8; len * 4];
                r.read_exact(&mut bytes).map_err(|_| NnError::Truncated)?;
                let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                params.push(Param { name: pname, kind, value: Tensor::new(shape, data) });
            }
            stores.push((name, ParamStore::from_params(params)));
        }
        Ok(Self { stage, metadata, stores })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

/// Copies a loaded store into a freshly built network store, checking that
/// names and shapes line up.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<(), NnError> {
    if target.len() != loaded.len() {
        return Err(NnError::Mismatch(format!(
            "expected {} parameters, checkpoint has {}",
            target.len(),
            loaded.len()
        )));
    }
    for (a, b) in target.params().iter().zip(loaded.params()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(NnError::Mismatch(format!(
                "parameter {} {:?} vs checkpoint {} {:?}",
                a.name,
                a.value.shape(),
                b.name,
                b.value.shape()
            )));
        }
    }
    target.copy_from(loaded);
    Ok(())
}
