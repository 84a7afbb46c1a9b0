//! Checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u32 header length, JSON header,
//! then all tensor data as little-endian f32 in header order. The header
//! records a SHA-256 of the payload so loads detect corruption and the
//! pipeline can assert that frozen backbones stayed frozen.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::nn::Params;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MVDFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CkptHeader {
    pub format_version: u32,
    /// Model family tag, e.g. "vae", "encoder", "pose", "apm", "jcdm".
    pub kind: String,
    pub seed: u64,
    pub train_steps: u64,
    /// Free-form hyperparameter record.
    pub hyper: serde_json::Value,
    /// Hex SHA-256 of the raw payload bytes.
    pub param_checksum: String,
    pub tensors: Vec<TensorEntry>,
    /// Small named constants that ride along (scales, fixtures).
    pub extras: BTreeMap<String, Vec<f32>>,
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub header: CkptHeader,
    tensors: Vec<(String, ArrayD<f32>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialise `params` (plus `extras`) to `path`.
pub fn save(
    path: &Path,
    kind: &str,
    seed: u64,
    train_steps: u64,
    hyper: serde_json::Value,
    params: &Params<f32>,
    extras: BTreeMap<String, Vec<f32>>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, value) in params.iter() {
        let len = value.len();
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
            len,
        });
        let std = value.as_standard_layout();
        for &v in std.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    let mut h = Sha256::new();
    h.update(&payload);
    let checksum = hex(&h.finalize());

    let header = CkptHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        seed,
        train_steps,
        hyper,
        param_checksum: checksum,
        tensors: entries,
        extras,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header encode: {e}")))?;

    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read and verify a checkpoint.
pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let header_len = u32::from_le_bytes(len4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("checkpoint header decode: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut h = Sha256::new();
    h.update(&payload);
    let digest = hex(&h.finalize());
    if digest != header.param_checksum {
        return Err(Error::Format(format!(
            "{}: payload checksum mismatch",
            path.display()
        )));
    }

    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total * 4 {
        return Err(Error::Format(format!(
            "payload length {} != expected {}",
            payload.len(),
            total * 4
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let want: usize = entry.shape.iter().product();
        if want != entry.len {
            return Err(Error::Format(format!(
                "tensor {}: shape/len mismatch",
                entry.name
            )));
        }
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "tensor {}: out of payload bounds",
                entry.name
            )));
        }
        let vals: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
            .map_err(|e| Error::Format(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name.clone(), arr));
    }
    Ok(Checkpoint { header, tensors })
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn extra(&self, name: &str) -> Option<&[f32]> {
        self.header.extras.get(name).map(|v| v.as_slice())
    }

    /// Copy every tensor into `params`; names and shapes must match the
    /// registered set exactly (both directions).
    pub fn restore_into(&self, params: &mut Params<f32>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, value) in &self.tensors {
            let id = params.lookup(name).ok_or_else(|| {
                Error::Format(format!("checkpoint tensor {name} not in model"))
            })?;
            if params.value(id).shape() != value.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {:?} != model shape {:?}",
                    value.shape(),
                    params.value(id).shape()
                )));
            }
            params.set_value(id, value.clone());
        }
        Ok(())
    }

    pub fn param_checksum(&self) -> &str {
        &self.header.param_checksum
    }
}

/// Checksum of a parameter store as it would be serialised — used to
/// assert that frozen backbones stay bitwise frozen through training.
pub fn params_checksum(params: &Params<f32>) -> String {
    let mut h = Sha256::new();
    for (_, value) in params.iter() {
        let std = value.as_standard_layout();
        for &v in std.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn demo_params() -> Params<f32> {
        let mut p = Params::new(9);
        p.add("enc.w", &[3, 4], Init::Normal { std: 0.3 });
        p.add("enc.b", &[3], Init::Zeros);
        p.add("head.gamma", &[7], Init::Ones);
        p
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("m.ckpt");
        let p = demo_params();
        let mut extras = BTreeMap::new();
        extras.insert("latent_scale".to_string(), vec![0.73]);
        save(
            &path,
            "vae",
            9,
            1234,
            serde_json::json!({"width": 16}),
            &p,
            extras,
        )
        .expect("save");

        let ck = load(&path).expect("load");
        assert_eq!(ck.header.kind, "vae");
        assert_eq!(ck.header.seed, 9);
        assert_eq!(ck.header.train_steps, 1234);
        assert_eq!(ck.extra("latent_scale"), Some(&[0.73f32][..]));
        // [DERIVED] tensors round-trip bitwise.
        for (name, value) in p.iter() {
            let got = ck.tensor(name).expect("tensor present");
            assert_eq!(
                got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        // Restoring into a freshly initialised store reproduces values.
        let mut p2 = Params::new(1);
        p2.add("enc.w", &[3, 4], Init::Zeros);
        p2.add("enc.b", &[3], Init::Zeros);
        p2.add("head.gamma", &[7], Init::Zeros);
        ck.restore_into(&mut p2).expect("restore");
        assert_eq!(params_checksum(&p2), params_checksum(&p));
        assert_eq!(ck.param_checksum(), params_checksum(&p));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("m.ckpt");
        save(
            &path,
            "vae",
            0,
            0,
            serde_json::Value::Null,
            &demo_params(),
            BTreeMap::new(),
        )
        .expect("save");
        let mut bytes = fs::read(&path).expect("read");
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&path, &bytes).expect("write");
        let err = load(&path).expect_err("corrupted");
        assert!(format!("{err}").contains("checksum"));
    }

    #[test]
    fn wrong_magic_and_missing_file() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("bogus.ckpt");
        fs::write(&path, b"NOTACKPTxxxxxxx").expect("write");
        let err = load(&path).expect_err("bad magic");
        assert!(format!("{err}").contains("magic"));

        let err = load(&dir.path().join("absent.ckpt")).expect_err("missing");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("m.ckpt");
        save(
            &path,
            "vae",
            0,
            0,
            serde_json::Value::Null,
            &demo_params(),
            BTreeMap::new(),
        )
        .expect("save");
        let ck = load(&path).expect("load");
        let mut other = Params::new(2);
        other.add("enc.w", &[4, 3], Init::Zeros); // transposed shape
        other.add("enc.b", &[3], Init::Zeros);
        other.add("head.gamma", &[7], Init::Zeros);
        assert!(ck.restore_into(&mut other).is_err());
    }
}
