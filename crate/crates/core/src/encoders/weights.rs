//! Frozen encoder weights and the `PFW1` weight-file container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "PFW1"
//! embed_dim layers heads mlp_ratio patch_size image_size channels vocab_hash_buckets max_text_len
//! tensor_count
//! repeated: name_len name_bytes rank extent*rank f32*product(extents)
//! crc32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::EncoderConfig;
use crate::numerics::{SeededRng, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PFW1";
const INIT_STD: f64 = 0.02;

/// Immutable named tensor map for both towers.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    config: EncoderConfig,
    tensors: BTreeMap<String, Arc<Tensor>>,
    checksum: u32,
}

/// Expected tensor names and shapes for a config, in canonical order.
pub fn tensor_layout(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let h = config.mlp_hidden();
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    push("visual.patch_proj.weight".into(), vec![config.patch_dim(), d]);
    push("visual.patch_proj.bias".into(), vec![1, d]);
    push("visual.pos_embed".into(), vec![config.patches(), d]);
    push("visual.cls_token".into(), vec![1, d]);
    for tower in ["visual", "text"] {
        for l in 0..config.layers {
            let p = format!("{tower}.layers.{l}");
            push(format!("{p}.ln1.gain"), vec![1, d]);
            push(format!("{p}.ln1.bias"), vec![1, d]);
            push(format!("{p}.attn.qkv.weight"), vec![d, 3 * d]);
            push(format!("{p}.attn.qkv.bias"), vec![1, 3 * d]);
            push(format!("{p}.attn.out.weight"), vec![d, d]);
            push(format!("{p}.attn.out.bias"), vec![1, d]);
            push(format!("{p}.ln2.gain"), vec![1, d]);
            push(format!("{p}.ln2.bias"), vec![1, d]);
            push(format!("{p}.mlp.fc1.weight"), vec![d, h]);
            push(format!("{p}.mlp.fc1.bias"), vec![1, h]);
            push(format!("{p}.mlp.fc2.weight"), vec![h, d]);
            push(format!("{p}.mlp.fc2.bias"), vec![1, d]);
        }
        push(format!("{tower}.ln_final.gain"), vec![1, d]);
        push(format!("{tower}.ln_final.bias"), vec![1, d]);
        push(format!("{tower}.proj"), vec![d, d]);
    }
    push("text.token_embed".into(), vec![config.vocab_hash_buckets, d]);
    push("text.pos_embed".into(), vec![config.max_text_len, d]);
    out
}

fn init_value(name: &str, rng: &mut SeededRng) -> f64 {
    if name.ends_with(".gain") {
        1.0
    } else if name.ends_with(".bias") {
        0.0
    } else {
        // stored as f32 so a save/load round trip is exact
        (rng.normal() * INIT_STD) as f32 as f64
    }
}

impl EncoderWeights {
    /// Deterministic Gaussian init (std 0.02, layernorm gains 1, biases 0).
    pub fn init_frozen(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = SeededRng::new(seed).substream("encoder-init");
        let mut tensors = BTreeMap::new();
        for (name, shape) in tensor_layout(config) {
            let mut rng = root.substream(&name);
            let n = shape.iter().product();
            let data = (0..n).map(|_| init_value(&name, &mut rng)).collect();
            tensors.insert(name, Arc::new(Tensor::new(shape, data)?));
        }
        Self::from_tensors(config.clone(), tensors)
    }

    pub fn from_tensors(config: EncoderConfig, tensors: BTreeMap<String, Arc<Tensor>>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in tensor_layout(&config) {
            let t = tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        let mut w = EncoderWeights {
            config,
            tensors,
            checksum: 0,
        };
        w.checksum = w.compute_checksum();
        Ok(w)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Checksum recorded when the weights were built or loaded.
    pub fn recorded_checksum(&self) -> u32 {
        self.checksum
    }

    /// CRC32 of the canonical tensor bytes, recomputed from current values.
    pub fn compute_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in &self.tensors {
            let mut buf = Vec::new();
            write_record(&mut buf, name, t);
            h.update(&buf);
        }
        h.finalize()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_weight_file(path, &self.config, &self.tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, tensors) = read_weight_file(path)?;
        Self::from_tensors(config, tensors)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn write_record(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.shape().len());
    for &e in t.shape() {
        put_u32(buf, e);
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn config_fields(c: &EncoderConfig) -> [usize; 9] {
    [
        c.embed_dim,
        c.layers,
        c.heads,
        c.mlp_ratio,
        c.patch_size,
        c.image_size,
        super::CHANNELS,
        c.vocab_hash_buckets,
        c.max_text_len,
    ]
}

/// Writes an arbitrary tensor map; names are not checked against the config.
pub fn write_weight_file(
    path: impl AsRef<Path>,
    config: &EncoderConfig,
    tensors: &BTreeMap<String, Arc<Tensor>>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in config_fields(config) {
        put_u32(&mut buf, v);
    }
    put_u32(&mut buf, tensors.len());
    for (name, t) in tensors {
        write_record(&mut buf, name, t);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("unexpected end of data at byte {}", self.pos)));
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

pub fn read_weight_file(path: impl AsRef<Path>) -> Result<(EncoderConfig, BTreeMap<String, Arc<Tensor>>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Format(format!("{} is too short for a weight file", path.display())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if &body[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected PFW1".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let mut f = [0usize; 9];
    for v in f.iter_mut() {
        *v = r.u32()?;
    }
    if f[6] != super::CHANNELS {
        return Err(Error::Format(format!("unsupported channel count {}", f[6])));
    }
    let config = EncoderConfig {
        embed_dim: f[0],
        layers: f[1],
        heads: f[2],
        mlp_ratio: f[3],
        patch_size: f[4],
        image_size: f[5],
        vocab_hash_buckets: f[7],
        max_text_len: f[8],
    };
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(name, Arc::new(Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((config, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            image_size: 8,
            vocab_hash_buckets: 64,
            max_text_len: 12,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = EncoderWeights::init_frozen(&small(), 1).unwrap();
        let b = EncoderWeights::init_frozen(&small(), 1).unwrap();
        let c = EncoderWeights::init_frozen(&small(), 2).unwrap();
        assert_eq!(a.recorded_checksum(), b.recorded_checksum());
        assert_ne!(a.recorded_checksum(), c.recorded_checksum());
    }

    #[test]
    fn init_conventions() {
        let w = EncoderWeights::init_frozen(&small(), 5).unwrap();
        assert!(w.get("visual.layers.0.ln1.gain").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(w.get("text.layers.1.mlp.fc1.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let proj = w.get("visual.patch_proj.weight").unwrap();
        let n = proj.len() as f64;
        let std = (proj.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() < 0.004, "{std}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pfw");
        let w = EncoderWeights::init_frozen(&small(), 3).unwrap();
        w.save(&path).unwrap();
        let back = EncoderWeights::load(&path).unwrap();
        assert_eq!(back.recorded_checksum(), w.recorded_checksum());
        assert_eq!(back.config(), w.config());
        for name in w.names() {
            assert_eq!(back.get(name).unwrap(), w.get(name).unwrap());
        }
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pfw");
        EncoderWeights::init_frozen(&small(), 3).unwrap().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 37]).unwrap();
        assert!(matches!(EncoderWeights::load(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn renamed_tensor_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pfw");
        let w = EncoderWeights::init_frozen(&small(), 3).unwrap();
        let mut map: BTreeMap<String, Arc<Tensor>> =
            w.names().map(|n| (n.to_string(), w.get(n).unwrap().clone())).collect();
        let t = map.remove("text.proj").unwrap();
        map.insert("text.projection".into(), t);
        write_weight_file(&path, w.config(), &map).unwrap();
        match EncoderWeights::load(&path) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "text.proj"),
            other => panic!("expected missing tensor, got {other:?}"),
        }
    }

    #[test]
    fn wrong_shape_is_reported() {
        let w = EncoderWeights::init_frozen(&small(), 3).unwrap();
        let mut map: BTreeMap<String, Arc<Tensor>> =
            w.names().map(|n| (n.to_string(), w.get(n).unwrap().clone())).collect();
        map.insert("visual.cls_token".into(), Arc::new(Tensor::zeros(1, 3)));
        assert!(matches!(
            EncoderWeights::from_tensors(small(), map),
            Err(Error::TensorShape { .. })
        ));
    }
}
