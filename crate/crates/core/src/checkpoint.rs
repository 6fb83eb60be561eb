//! `ACNK1` tensor container: the magic bytes, then for each tensor a
//! little-endian u32 name length, the UTF-8 name, four u64 dimensions and
//! the values as f32.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 5] = b"ACNK1";

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.get(..MAGIC.len()) != Some(MAGIC.as_slice()) {
        return Err(bad("missing ACNK1 magic"));
    }
    let mut pos = MAGIC.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated record"))?;
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    loop {
        let Ok(len) = take(4) else { break };
        let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(u64::from_le_bytes(take(8)?.try_into().unwrap())).map_err(|_| bad("dimension overflow"))?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        let raw = take(count.checked_mul(4).ok_or_else(|| bad("shape overflow"))?)?;
        let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

/// All parameters followed by all buffers, in store order.
pub fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    let params = store.names().iter().cloned().zip(store.values().iter().cloned());
    let bufs = store.buffer_names().iter().cloned().zip(store.buffers().iter().cloned());
    params.chain(bufs).collect()
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(&store_tensors(store))).map_err(|e| Error::io(path, e))
}

/// Loads tensors into `store`, requiring exactly the store's names and shapes.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(store, decode(&bytes)?)
}

pub fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let expected = store_tensors(store);
    if tensors.len() != expected.len() {
        return Err(Error::Mismatch(format!(
            "checkpoint holds {} tensors but the configured model has {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((name, t), (want, w)) in tensors.iter().zip(&expected) {
        if name != want || t.shape() != w.shape() {
            return Err(Error::Mismatch(format!(
                "checkpoint tensor `{name}` {} does not match model tensor `{want}` {}",
                t.shape(),
                w.shape()
            )));
        }
    }
    let n = store.len();
    let mut it = tensors.into_iter().map(|(_, t)| t);
    store.set_values(it.by_ref().take(n).collect())?;
    for (i, t) in it.enumerate() {
        *store.buffer_mut_at(i) = t;
    }
    Ok(())
}
