//! Checkpoint file: one line of UTF-8 JSON manifest, then the raw
//! little-endian payloads of every tensor it lists. Offsets are relative to
//! the first payload byte. Model parameters come first, optimizer moments
//! after; `checkpoint_hash` covers the model section only, so a bundle keeps
//! its identity whether or not optimizer state travels with it.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LatentStats, ModelBundle};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::optim::AdamW;

pub const FORMAT: &str = "lumen-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: Config,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub step: u64,
    pub latent_stats: Option<LatentStats>,
    /// Present when optimizer moments follow the model tensors.
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub bundle: ModelBundle,
    pub optimizer: Option<AdamW>,
}

impl ModelBundle {
    /// Hash of every parameter's bytes in store order.
    pub fn checkpoint_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.tensor.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn save_checkpoint(bundle: &ModelBundle, optimizer: Option<&AdamW>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: &str, t: &Tensor<f32>, payload: &mut Vec<u8>| {
        let bytes = t.to_le_bytes();
        tensors.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            byte_offset: payload.len() as u64,
            byte_len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    };
    for (_, p) in bundle.store.iter() {
        push(&p.name, &p.tensor, &mut payload);
    }
    let checkpoint_hash = hex::encode(Sha256::digest(&payload));
    if let Some(opt) = optimizer {
        for (name, t) in opt.state_tensors(&bundle.store) {
            push(&name, &t, &mut payload);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: bundle.config.clone(),
        config_hash: bundle.config_hash(),
        checkpoint_hash,
        step: bundle.step,
        latent_stats: bundle.latent_stats,
        optimizer_step: optimizer.map(|o| o.step),
        tensors,
    };
    let tmp = path.with_extension("partial");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        serde_json::to_writer(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        f.write_all(&payload)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

fn read_manifest_from(r: &mut impl BufRead, path: &Path) -> Result<Manifest> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_slice(&line)
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            m.format,
            m.version
        )));
    }
    Ok(m)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest_from(&mut BufReader::new(f), path)
}

/// Rebuild the bundle from its stored config and restore every tensor.
/// Fails on a missing, extra or misshapen tensor, or a hash mismatch.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let manifest = read_manifest_from(&mut r, path)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut bundle = ModelBundle::new(manifest.config.clone())?;
    if bundle.config_hash() != manifest.config_hash {
        return Err(bad("config hash mismatch".into()));
    }
    let mut optim_tensors = Vec::new();
    let mut seen = vec![false; bundle.store.len()];
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(bad(format!("{}: dtype {}", e.name, e.dtype)));
        }
        let (lo, hi) = (e.byte_offset as usize, (e.byte_offset + e.byte_len) as usize);
        let bytes = payload
            .get(lo..hi)
            .ok_or_else(|| bad(format!("{}: payload truncated", e.name)))?;
        let t = Tensor::<f32>::from_le_bytes(&e.shape, bytes).map_err(|err| bad(format!("{}: {err}", e.name)))?;
        if e.name.starts_with("optim.") {
            optim_tensors.push((e.name.clone(), t));
            continue;
        }
        let id = bundle
            .store
            .id(&e.name)
            .ok_or_else(|| bad(format!("unexpected tensor {}", e.name)))?;
        if bundle.store.tensor(id).shape() != t.shape() {
            return Err(bad(format!("{}: shape {:?}", e.name, t.shape())));
        }
        bundle.store.set_tensor(id, t)?;
        seen[id.0] = true;
    }
    if let Some((_, p)) = bundle.store.iter().find(|(id, _)| !seen[id.0]) {
        return Err(bad(format!("missing tensor {}", p.name)));
    }
    if bundle.checkpoint_hash() != manifest.checkpoint_hash {
        return Err(bad("checkpoint hash mismatch".into()));
    }
    bundle.latent_stats = manifest.latent_stats;
    bundle.step = manifest.step;
    let optimizer = match manifest.optimizer_step {
        Some(step) => Some(AdamW::from_state(
            bundle.config.train.adamw(),
            step,
            &bundle.store,
            &optim_tensors,
        )?),
        None => None,
    };
    Ok(Checkpoint {
        manifest,
        bundle,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;
    use crate::pipeline::tests::tiny_config;
    use crate::pipeline::{train_codec, train_step, TrainData};

    fn trained() -> (ModelBundle, AdamW) {
        let mut b = ModelBundle::new(tiny_config()).unwrap();
        let samples = generate_dataset(4, 16, 5);
        train_codec(&mut b, &samples).unwrap();
        let data = TrainData::prepare(&mut b, &samples).unwrap();
        let mut opt = AdamW::new(b.config.train.adamw());
        train_step(&mut b, &data, &mut opt).unwrap();
        (b, opt)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (b, opt) = trained();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        save_checkpoint(&b, Some(&opt), &p1).unwrap();
        let ck = load_checkpoint(&p1).unwrap();
        for ((_, x), (_, y)) in b.store.iter().zip(ck.bundle.store.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.tensor.to_le_bytes(), y.tensor.to_le_bytes());
            assert_eq!(x.trainable, y.trainable);
        }
        assert_eq!(ck.bundle.latent_stats, b.latent_stats);
        assert_eq!(ck.bundle.step, 1);
        assert_eq!(ck.optimizer.as_ref(), Some(&opt));
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ck.bundle, ck.optimizer.as_ref(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn manifest_describes_payload() {
        let (b, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&b, None, &p).unwrap();
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.checkpoint_hash, b.checkpoint_hash());
        assert_eq!(m.config_hash, b.config.hash());
        assert_eq!(m.optimizer_step, None);
        let bytes = std::fs::read(&p).unwrap();
        let start = bytes.iter().position(|&c| c == b'\n').unwrap() + 1;
        let last = m.tensors.last().unwrap();
        assert_eq!(bytes.len() - start, (last.byte_offset + last.byte_len) as usize);
        let mut off = 0;
        for e in &m.tensors {
            assert_eq!(e.byte_offset, off);
            assert_eq!(e.byte_len, 4 * e.shape.iter().product::<usize>() as u64);
            off += e.byte_len;
        }
    }

    #[test]
    fn corrupt_payload_detected() {
        let (b, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&b, None, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        std::fs::write(&p, &bytes[..n - 8]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        std::fs::write(&p, b"not json\n").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
