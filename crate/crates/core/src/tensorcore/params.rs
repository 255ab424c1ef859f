use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use regex::Regex;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in insertion order, each with a trainable flag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter; new parameters are trainable.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Marks exactly the parameters whose names match `pattern` trainable.
    pub fn set_trainable_matching(&mut self, pattern: &Regex) {
        for (name, flag) in self.names.iter().zip(&mut self.trainable) {
            *flag = pattern.is_match(name);
        }
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.trainable.iter_mut().for_each(|f| *f = on);
    }

    /// Keeps only parameters whose name starts with one of `prefixes`.
    pub fn retain_prefixes(&self, prefixes: &[&str]) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, v) in self.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                out.insert(name, v.clone());
            }
        }
        out
    }

    /// Copies every parameter of `other` into `self`.
    pub fn merge(&mut self, other: &ParamStore) {
        for (name, v) in other.iter() {
            self.insert(name, v.clone());
        }
    }

    /// Writes the binary checkpoint and a `<path>.manifest` listing.
    ///
    /// Each record is: name length (u32), UTF-8 name, rank (u32), dims
    /// (u64 each), payload (f64 each), all little-endian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        let mut manifest = String::new();
        for (name, v) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(v.shape().len() as u32).to_le_bytes());
            for &d in v.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in v.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            let dims: Vec<String> = v.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name}\t{}\n", dims.join("x")));
        }
        fs::write(path, buf)?;
        let mut m = fs::File::create(manifest_path(path))?;
        m.write_all(manifest.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let mut store = ParamStore::new();
        while r.pos < bytes.len() {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::MalformedHeader("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    s.into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedPayload { expected: self.pos + n, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Gradients aligned with a [`ParamStore`]'s parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads { grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    pub fn add_to(&mut self, i: usize, g: &Tensor) {
        self.grads[i].add_assign(g);
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| g.scale_assign(s));
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore, name: &str) -> Option<&'a Tensor> {
        store.index_of(name).map(|i| &self.grads[i])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.0]).unwrap());
        s.insert("kappa", Tensor::scalar(10.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        s.save(&p).unwrap();
        let back = ParamStore::load(&p).unwrap();
        assert_eq!(back, s);
        let manifest = fs::read_to_string(manifest_path(&p)).unwrap();
        assert_eq!(manifest, "a.w\t2x3\nkappa\t1x1\n");
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[4, 4]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        s.save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ParamStore::load(&p), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn trainable_filter() {
        let mut s = ParamStore::new();
        s.insert("stage0.block0.ln1.gamma", Tensor::zeros(&[1, 2]));
        s.insert("stage0.block0.attn.wq", Tensor::zeros(&[2, 2]));
        s.set_trainable_matching(&Regex::new(r"\.ln\d\.(gamma|beta)$").unwrap());
        assert!(s.is_trainable(0));
        assert!(!s.is_trainable(1));
    }
}
