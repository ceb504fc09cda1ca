use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NWCKPT01";

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub(crate) value: Arc<Tensor>,
    pub trainable: bool,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

/// Named parameters, each TRAINABLE or FROZEN, with per-parameter Adam state.
///
/// Every store carries a process-unique id so a tape can route gradients back
/// to the store a parameter came from. Clones share the id.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    id: u64,
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
    pub(crate) step: u64,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParameterStore {
    fn eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name && a.trainable == b.trainable && a.value == b.value
            })
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: BTreeMap::new(),
            step: 0,
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.params.push(Parameter {
            name: name.to_string(),
            value: Arc::new(value),
            trainable,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count over all parameters.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count over TRAINABLE parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].grad.as_deref()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64], scale: f64) {
        let p = &mut self.params[id.0];
        let slot = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, x) in slot.iter_mut().zip(g) {
            *s += scale * x;
        }
    }

    /// Adds `delta` to element `index` of the named parameter.
    pub fn nudge(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::config("parameter", format!("no parameter named {name}")))?;
        let data = self.value_mut(id).data_mut();
        let len = data.len();
        let slot = data
            .get_mut(index)
            .ok_or_else(|| Error::config("parameter", format!("{name} has {len} elements, not {}", index + 1)))?;
        *slot += delta;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Global L2 norm of the populated trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales trainable gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| p.trainable) {
                if let Some(g) = p.grad.as_mut() {
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
    }

    /// Copies values (not tags or optimizer state) from `other` by name.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            let src = other.value(src);
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    src.shape()
                )));
            }
            p.value = Arc::new(src.clone());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values; tags and metadata excluded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u32).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.shape().len() as u32).to_le_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Serializes to the named-tensor container:
    ///
    /// ```text
    /// "NWCKPT01"
    /// u32 n_meta, then per entry: u32 len, key bytes, u32 len, value bytes
    /// u32 n_tensors, then per tensor:
    ///   u32 len, name bytes, u8 tag (1 = TRAINABLE, 0 = FROZEN),
    ///   u32 ndim, u64 dims.., f64 values..
    /// ```
    /// All integers and floats little-endian.
    pub fn to_bytes(&self, meta: &BTreeMap<String, String>) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.total_count());
        out.extend_from_slice(MAGIC);
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        for (k, v) in meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for d in p.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let mut store = ParameterStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                t => return Err(Error::Checkpoint(format!("bad tag {t} for {name}"))),
            };
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name} is too large"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            store.add(&name, Tensor::new(shape, data)?, trainable);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &BTreeMap<String, String>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_keeps_tags_and_meta() {
        let mut s = ParameterStore::new();
        s.add("a", Tensor::matrix(2, 2, &[1.0, -2.5, 3.0, 1e-300]).unwrap(), true);
        s.add("b", Tensor::scalar(7.0), false);
        let meta = BTreeMap::from([("kind".to_string(), "test".to_string())]);
        let bytes = s.to_bytes(&meta);
        let (back, m) = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(m, meta);
        assert!(back.is_trainable(back.id("a").unwrap()));
        assert!(!back.is_trainable(back.id("b").unwrap()));
        assert_eq!(back.to_bytes(&meta), bytes);
    }

    #[test]
    fn truncated_or_garbled_checkpoints_fail() {
        let mut s = ParameterStore::new();
        s.add("a", Tensor::vector(&[1.0, 2.0]), true);
        let bytes = s.to_bytes(&BTreeMap::new());
        assert!(ParameterStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ParameterStore::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ParameterStore::from_bytes(&extra).is_err());
    }

    #[test]
    fn hash_ignores_tags() {
        let mut s = ParameterStore::new();
        let a = s.add("a", Tensor::vector(&[1.0, 2.0]), true);
        let h = s.content_hash();
        s.set_trainable(a, false);
        assert_eq!(s.content_hash(), h);
        s.value_mut(a).data_mut()[0] = 1.5;
        assert_ne!(s.content_hash(), h);
    }

    #[test]
    fn counts() {
        let mut s = ParameterStore::new();
        s.add("w", Tensor::zeros(&[3, 4]), true);
        s.add("f", Tensor::zeros(&[10]), false);
        assert_eq!(s.total_count(), 22);
        assert_eq!(s.trainable_count(), 12);
    }
}
