//! Checkpoint files: a plain-text manifest followed by raw little-endian f64
//! arrays.
//!
//! ```text
//! multigoal-checkpoint 1
//! tensor conv1.weight f64 16,3,3,16 offset=0 count=2304
//! ...
//! checksum sha256 <hex>
//! end
//! <payload>
//! ```
//!
//! The checksum covers every byte of the file except the checksum line itself.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::{param_shapes, ParameterSet};
use super::tensor::Tensor;
use super::{NetworkConfig, QNetError};

const MAGIC: &str = "multigoal-checkpoint 1";
const END: &[u8] = b"end\n";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub fn encode_checkpoint(params: &ParameterSet) -> Vec<u8> {
    let mut header = format!("{MAGIC}\n");
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    for (name, t) in params.tensors() {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "tensor {name} f64 {} offset={} count={}\n",
            dims.join(","),
            payload.len(),
            t.len()
        ));
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = digest(header.as_bytes(), &payload);
    let mut out = header.into_bytes();
    out.extend_from_slice(format!("checksum sha256 {digest}\n").as_bytes());
    out.extend_from_slice(END);
    out.extend_from_slice(&payload);
    out
}

fn digest(header: &[u8], payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(header);
    h.update(END);
    h.update(payload);
    hex::encode(h.finalize())
}

/// Verifies the checksum and returns every stored tensor in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, QNetError> {
    let bad = |m: &str| QNetError::Manifest(m.to_string());
    let end = bytes
        .windows(END.len() + 1)
        .position(|w| w[0] == b'\n' && &w[1..] == END)
        .ok_or_else(|| bad("missing end marker"))?
        + 1;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let payload = &bytes[end + END.len()..];
    let mut lines: Vec<&str> = header.lines().collect();
    let ck_pos = lines
        .iter()
        .position(|l| l.starts_with("checksum "))
        .ok_or_else(|| bad("missing checksum"))?;
    let stored = lines
        .remove(ck_pos)
        .trim_start_matches("checksum sha256 ")
        .to_string();
    let rest: String = lines.iter().map(|l| format!("{l}\n")).collect();
    if digest(rest.as_bytes(), payload) != stored {
        return Err(QNetError::ChecksumMismatch);
    }
    if lines.first() != Some(&MAGIC) {
        return Err(bad("unknown format"));
    }
    let mut out = Vec::new();
    for line in &lines[1..] {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 || f[0] != "tensor" || f[2] != "f64" {
            return Err(bad(&format!("bad manifest line `{line}`")));
        }
        let shape = f[3]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(line))?;
        let offset: usize = f[4]
            .strip_prefix("offset=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(line))?;
        let count: usize = f[5]
            .strip_prefix("count=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(line))?;
        if shape.iter().product::<usize>() != count || offset + 8 * count > payload.len() {
            return Err(bad(&format!("inconsistent extent in `{line}`")));
        }
        let data = payload[offset..offset + 8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((f[1].to_string(), Tensor::from_vec(&shape, data)));
    }
    Ok(out)
}

pub fn save_checkpoint(params: &ParameterSet, path: &Path) -> Result<(), QNetError> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

/// Loads a checkpoint whose names and shapes must match `cfg` exactly.
pub fn load_checkpoint(path: &Path, cfg: &NetworkConfig) -> Result<ParameterSet, QNetError> {
    restore(decode_checkpoint(&std::fs::read(path)?)?, cfg)
}

pub fn restore(
    stored: Vec<(String, Tensor)>,
    cfg: &NetworkConfig,
) -> Result<ParameterSet, QNetError> {
    let expected = param_shapes(cfg);
    let names: Vec<&str> = stored.iter().map(|(n, _)| n.as_str()).collect();
    let wanted: Vec<&str> = expected.iter().map(|(n, _)| *n).collect();
    if names != wanted {
        return Err(QNetError::ShapeMismatch {
            what: format!("tensor set {names:?}"),
            expected: vec![wanted.len()],
            got: vec![names.len()],
        });
    }
    let mut params = ParameterSet::zeros(cfg);
    for (((name, t), (_, shape)), (_, slot)) in
        stored.into_iter().zip(&expected).zip(params.tensors_mut())
    {
        if &t.shape != shape {
            return Err(QNetError::ShapeMismatch {
                what: name,
                expected: shape.clone(),
                got: t.shape,
            });
        }
        *slot = t;
    }
    Ok(params)
}

pub fn manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>, QNetError> {
    let mut offset = 0;
    Ok(decode_checkpoint(bytes)?
        .into_iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name,
                shape: t.shape.clone(),
                offset,
            };
            offset += 8 * t.len();
            e
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::Fusion;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        for fusion in [Fusion::Concatenation, Fusion::GatedAttention] {
            let cfg = NetworkConfig::tiny(fusion);
            let p = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ck.bin");
            save_checkpoint(&p, &path).unwrap();
            assert!(load_checkpoint(&path, &cfg).unwrap().bitwise_eq(&p));
        }
    }

    #[test]
    fn corrupted_payload_detected() {
        let cfg = NetworkConfig::tiny(Fusion::Concatenation);
        let p = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let mut bytes = encode_checkpoint(&p);
        let n = bytes.len();
        bytes[n - 3] ^= 0x10;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(QNetError::ChecksumMismatch)
        ));
        let mut bytes = encode_checkpoint(&p);
        bytes[30] ^= 0x01;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(QNetError::ChecksumMismatch)
        ));
    }

    #[test]
    fn mismatched_config_rejected() {
        let p = ParameterSet::init(
            &NetworkConfig::tiny(Fusion::Concatenation),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let stored = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert!(matches!(
            restore(stored.clone(), &NetworkConfig::tiny(Fusion::GatedAttention)),
            Err(QNetError::ShapeMismatch { .. })
        ));
        let mut bigger = NetworkConfig::tiny(Fusion::Concatenation);
        bigger.hidden += 1;
        assert!(matches!(
            restore(stored, &bigger),
            Err(QNetError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn manifest_lists_offsets() {
        let cfg = NetworkConfig::tiny(Fusion::GatedAttention);
        let p = ParameterSet::zeros(&cfg);
        let m = manifest(&encode_checkpoint(&p)).unwrap();
        assert_eq!(m[0].name, "conv1.weight");
        assert_eq!(m[1].offset, 8 * p.conv1_w.len());
        assert!(m.iter().any(|e| e.name == "gate.weight"));
        let text = String::from_utf8_lossy(&encode_checkpoint(&p)).to_string();
        assert!(text.contains("checksum sha256 "));
    }
}
