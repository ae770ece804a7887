//! On-disk network format: a TOML manifest next to a raw little-endian blob.
//!
//! The manifest records the format tag, the input shape, the layer specs, an
//! optional seed and, for every parameter and buffer tensor, its shape and
//! byte offset into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerSpec, Network};

pub const FORMAT_TAG: &str = "LFPCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub role: TensorRole,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub input_shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded network and the seed it was stored with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub seed: Option<u64>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Write `net` to `path` (manifest) and `path` with extension `.bin` (blob).
pub fn save(net: &Network, path: &Path, seed: Option<u64>) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let all = net
        .params()
        .into_iter()
        .map(|t| (TensorRole::Param, t))
        .chain(net.buffers().into_iter().map(|t| (TensorRole::Buffer, t)));
    for (role, t) in all {
        tensors.push(TensorEntry {
            role,
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad path {}", path.display())))?
            .into(),
        input_shape: net.input_shape().to_vec(),
        seed,
        layers: net.specs().to_vec(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "format tag {:?}, expected {FORMAT_TAG:?}",
            manifest.format
        )));
    }
    let blob = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut net = Network::new(&manifest.input_shape, manifest.layers)?;

    let n_params = net.params().len();
    let n_buffers = net.buffers().len();
    if manifest.tensors.len() != n_params + n_buffers {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, network has {}",
            manifest.tensors.len(),
            n_params + n_buffers
        )));
    }
    for (entry, t) in manifest.tensors[..n_params].iter().zip(net.params_mut()) {
        let shape = t.shape().to_vec();
        fill(entry, TensorRole::Param, &shape, t.data_mut(), &bytes)?;
    }
    for (entry, t) in manifest.tensors[n_params..].iter().zip(net.buffers_mut()) {
        let shape = t.shape().to_vec();
        fill(entry, TensorRole::Buffer, &shape, t.data_mut(), &bytes)?;
    }
    Ok(Checkpoint {
        network: net,
        seed: manifest.seed,
    })
}

fn fill(entry: &TensorEntry, role: TensorRole, shape: &[usize], out: &mut [f64], bytes: &[u8]) -> Result<()> {
    if entry.role != role || entry.shape != shape {
        return Err(Error::Checkpoint(format!(
            "tensor entry {:?} {:?} does not match network {:?} {:?}",
            entry.role, entry.shape, role, shape
        )));
    }
    let end = entry.offset + out.len() * 8;
    let src = bytes.get(entry.offset..end).ok_or(Error::Truncated {
        needed: end,
        have: bytes.len(),
    })?;
    for (v, chunk) in out.iter_mut().zip(src.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ActivationKind;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let specs = vec![
            LayerSpec::Conv2d { c_in: 1, c_out: 2, k: 3, stride: 1, pad: 1, bias: true },
            LayerSpec::BatchNorm { features: 2, eps: 1e-5, momentum: 0.1 },
            LayerSpec::act(ActivationKind::LeakyRelu(0.1)),
            LayerSpec::ResidualSum {
                branch: vec![LayerSpec::Conv2d { c_in: 2, c_out: 2, k: 1, stride: 1, pad: 0, bias: false }],
            },
            LayerSpec::Flatten,
            LayerSpec::dense(32, 3),
        ];
        let mut net = Network::build(&[1, 4, 4], specs, 7).unwrap();
        for b in net.buffers_mut() {
            b.data_mut()[0] = 0.123456789;
        }
        let path = dir.path().join("net.toml");
        save(&net, &path, Some(7)).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.seed, Some(7));
        assert_eq!(back.network, net);
    }

    #[test]
    fn rejects_wrong_tag_and_short_blob() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::mlp(2, &[3], 2, ActivationKind::Relu, 1).unwrap();
        let path = dir.path().join("m.toml");
        save(&net, &path, None).unwrap();
        let blob = path.with_extension("bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&path), Err(Error::Truncated { .. })));
        let text = fs::read_to_string(&path).unwrap().replace(FORMAT_TAG, "LFPCKPT0");
        fs::write(&path, text).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
