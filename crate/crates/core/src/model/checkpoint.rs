//! Named-tensor checkpoint files.
//!
//! Layout: `STYN`, version (u32), entry count (u32), then per entry the name
//! length (u32), UTF-8 name, rank (u32), dims (u32 each) and the values as
//! f32, everything little-endian. The architecture travels in a `key = value`
//! sidecar next to the checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{ParamStore, Tensor};
use crate::config::KeyValues;
use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::network::StyleNet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STYN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sidecar holding the architecture of the checkpoint at `path`.
pub fn config_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

pub fn write_tensors(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let u32_of = |n: usize| -> Result<[u8; 4]> {
        u32::try_from(n)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::invalid(format!("{n} does not fit the checkpoint format")))
    };
    buf.extend_from_slice(&u32_of(entries.len())?);
    for (name, t) in entries {
        buf.extend_from_slice(&u32_of(name.len())?);
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&u32_of(t.rank())?);
        for &d in t.shape() {
            buf.extend_from_slice(&u32_of(d)?);
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "entry name is not UTF-8"))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("entry `{name}` is too large")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::format(path, "entry too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if out.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::format(path, format!("entry `{name}` appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last entry"));
    }
    Ok(out)
}

/// Every stored tensor of `store`, in store order.
pub fn store_entries(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

/// Moves the entries named like `store`'s tensors into it, checking shapes.
/// Entries not belonging to the store stay in `entries`.
pub fn load_store(store: &mut ParamStore, entries: &mut BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    for (_, p) in store.iter_mut() {
        let t = entries
            .remove(&p.name)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{}`", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::format(
                path,
                format!("tensor `{}` has shape {:?}, architecture needs {:?}", p.name, t.shape(), p.value.shape()),
            ));
        }
        p.value = t;
    }
    Ok(())
}

impl StyleNet {
    /// Writes the weights to `path` and the architecture to its sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.config.to_key_values().save(config_path(path))?;
        write_tensors(path, &store_entries(&self.store))
    }

    /// Reads a checkpoint written by [`StyleNet::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = read_tensors(path)?;
        let net = Self::load_with(path, &mut entries)?;
        if let Some(extra) = entries.keys().next() {
            return Err(Error::format(path, format!("unexpected tensor `{extra}`")));
        }
        Ok(net)
    }

    /// Builds the sidecar's architecture and fills it from `entries`, leaving
    /// unrelated entries behind.
    pub fn load_with(path: &Path, entries: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        let mut kv = KeyValues::load(config_path(path))?;
        let config = ModelConfig::from_key_values(&mut kv)?;
        kv.finish()?;
        let mut net = Self::new(config, 0)?;
        load_store(&mut net.store, entries, path)?;
        Ok(net)
    }
}
