//! Parameter checkpoints: a flat little-endian binary blob plus a text
//! manifest with one line per tensor.
//!
//! ```text
//! # mpfer-params v1
//! <name>\t<dtype>\t<d0,d1,...>\t<byte offset>
//! ```

use std::fs;
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "params.manifest";
const HEADER: &str = "# mpfer-params v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ManifestEntry {
    fn line(&self) -> String {
        let dims: Vec<String> = self.shape.iter().map(usize::to_string).collect();
        format!("{}\t{}\t{}\t{}", self.name, self.dtype, dims.join(","), self.offset)
    }

    fn parse(line: &str) -> Option<Self> {
        let mut it = line.split('\t');
        let name = it.next()?.to_string();
        let dtype = it.next()?.to_string();
        let dims = it.next()?;
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse().ok())
                .collect::<Option<Vec<usize>>>()?
        };
        let offset = it.next()?.parse().ok()?;
        if it.next().is_some() || name.is_empty() {
            return None;
        }
        Some(ManifestEntry {
            name,
            dtype,
            shape,
            offset,
        })
    }
}

/// Writes `params.bin` and `params.manifest` into `dir`.
pub fn save_checkpoint<T: Real>(dir: &Path, store: &ParamStore<T>) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.scalar_count() * T::BYTES);
    let mut entries = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        if name.contains(['\t', '\n']) {
            return Err(Error::invalid(format!("parameter name {name:?}")));
        }
        entries.push(ManifestEntry {
            name: name.to_string(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &x in t.data() {
            x.write_le(&mut blob);
        }
    }
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    for e in &entries {
        manifest.push_str(&e.line());
        manifest.push('\n');
    }
    let bin = dir.join(PARAMS_FILE);
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join(MANIFEST_FILE);
    fs::write(&man, manifest).map_err(|e| Error::io(&man, e))?;
    Ok(entries)
}

/// Reads a checkpoint written by [`save_checkpoint`] into a fresh store.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<ParamStore<T>> {
    let man = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
    let bin = dir.join(PARAMS_FILE);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let parse_err = |message: String| Error::Parse {
        path: man.clone(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(parse_err("missing header".into()));
    }
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for (i, line) in lines.enumerate() {
        let e = ManifestEntry::parse(line).ok_or_else(|| parse_err(format!("line {}", i + 2)))?;
        if e.dtype != T::DTYPE {
            return Err(parse_err(format!("{}: dtype {} (expected {})", e.name, e.dtype, T::DTYPE)));
        }
        if e.offset != expected_offset {
            return Err(parse_err(format!("{}: offset {} (expected {})", e.name, e.offset, expected_offset)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * T::BYTES;
        if end > blob.len() {
            return Err(parse_err(format!("{}: data past end of {}", e.name, PARAMS_FILE)));
        }
        let data = blob[e.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        store.add(e.name, Tensor::from_vec(&e.shape, data)?)?;
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(parse_err(format!("{} has trailing bytes", PARAMS_FILE)));
    }
    Ok(store)
}
