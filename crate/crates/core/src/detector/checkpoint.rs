//! Checkpoint format: a magic tag, a JSON header describing the
//! architecture, then the raw little-endian f64 parameter arrays in layer
//! order (weights then bias per layer). Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorError, DetectorParams, GRID};

const MAGIC: &[u8; 4] = b"BFCK";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub arch: String,
    pub num_classes: usize,
    pub grid: usize,
    pub tau: f64,
}

impl CheckpointHeader {
    pub fn new(num_classes: usize, tau: f64) -> Self {
        Self {
            version: 1,
            arch: "tiny-v1".into(),
            num_classes,
            grid: GRID,
            tau,
        }
    }
}

pub fn save_checkpoint(
    path: &Path,
    params: &DetectorParams,
    header: &CheckpointHeader,
) -> Result<(), DetectorError> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for layer in params.layers() {
        for v in layer.w.iter().chain(layer.b.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DetectorParams, CheckpointHeader), DetectorError> {
    let buf = fs::read(path)?;
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err(DetectorError::Checkpoint("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() < 8 + hlen {
        return Err(DetectorError::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&buf[8..8 + hlen])
        .map_err(|e| DetectorError::Checkpoint(e.to_string()))?;
    if header.version != 1 || header.arch != "tiny-v1" || header.grid != GRID {
        return Err(DetectorError::Checkpoint(format!(
            "unsupported checkpoint: version {} arch {} grid {}",
            header.version, header.arch, header.grid
        )));
    }
    let mut params = DetectorParams::init(header.num_classes, 0).zeros_like();
    let expected = params.num_params();
    let body = &buf[8 + hlen..];
    if body.len() != expected * 8 {
        return Err(DetectorError::Checkpoint(format!(
            "expected {expected} params, file holds {}",
            body.len() / 8
        )));
    }
    let mut off = 0;
    for layer in params.layers_mut() {
        for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
            *v = f64::from_le_bytes(body[off..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params = DetectorParams::init(4, 123);
        let header = CheckpointHeader::new(4, 0.25);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.bfck");
        save_checkpoint(&p, &params, &header).unwrap();
        let (back, h2) = load_checkpoint(&p).unwrap();
        assert_eq!(back, params);
        assert_eq!(h2.num_classes, 4);
        assert_eq!(h2.tau, 0.25);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bfck");
        std::fs::write(&p, b"nope").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
