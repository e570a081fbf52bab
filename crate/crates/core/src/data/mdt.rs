//! The MDT container: a minimal bit-exact on-disk format for multi-modal
//! cases.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "MDTC"
//! version u16      currently 1
//! mlen    u32      manifest byte length
//! manifest  UTF-8 JSON: {case_id, modalities, shape: [D,H,W],
//!                        spacing: [mm; 3], has_mask}
//! payload   per modality, in manifest order: D·H·W little-endian f32
//! mask      if has_mask: D·H·W raw bytes, each 0 or 1
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Case;

pub const MAGIC: [u8; 4] = *b"MDTC";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    case_id: String,
    modalities: Vec<String>,
    shape: [usize; 3],
    spacing: [f64; 3],
    has_mask: bool,
}

/// Serializes a case; the round trip through [`load_case`] is bitwise exact.
pub fn save_case(path: &Path, case: &Case) -> Result<()> {
    let (d, h, w) = case.shape();
    let manifest = Manifest {
        case_id: case.case_id.clone(),
        modalities: case.modality_names.clone(),
        shape: [d, h, w],
        spacing: case.spacing,
        has_mask: case.mask.is_some(),
    };
    let mjson = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(mjson.len() as u32).to_le_bytes())?;
    out.write_all(&mjson)?;
    let mut buf = Vec::with_capacity(d * h * w * 4);
    for volume in &case.volumes {
        buf.clear();
        for v in volume.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    if let Some(mask) = &case.mask {
        out.write_all(mask)?;
    }
    out.flush()?;
    Ok(())
}

fn read_exact_or(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated container: {what}"))
        } else {
            Error::Io(e)
        }
    })
}

/// Loads a case saved by [`save_case`]. Malformed files produce distinct
/// diagnostics: wrong magic, unsupported version, bad manifest, truncation.
pub fn load_case(path: &Path) -> Result<Case> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut reader, &mut magic, "missing 4-byte magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}: expected `MDTC`"
        )));
    }
    let mut v = [0u8; 2];
    read_exact_or(&mut reader, &mut v, "missing version")?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let mut l = [0u8; 4];
    read_exact_or(&mut reader, &mut l, "missing manifest length")?;
    let mlen = u32::from_le_bytes(l) as usize;
    let mut mjson = vec![0u8; mlen];
    read_exact_or(&mut reader, &mut mjson, "manifest shorter than declared")?;
    let manifest: Manifest = serde_json::from_slice(&mjson)
        .map_err(|e| Error::Format(format!("bad manifest JSON: {e}")))?;

    let [d, h, w] = manifest.shape;
    let numel = d
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Format(format!("bad shape {:?} in manifest", manifest.shape)))?;
    let mut volumes = Vec::with_capacity(manifest.modalities.len());
    let mut buf = vec![0u8; numel * 4];
    for name in &manifest.modalities {
        read_exact_or(
            &mut reader,
            &mut buf,
            &format!("payload for modality `{name}` shorter than manifest shape {:?}", manifest.shape),
        )?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        volumes.push(Tensor::new(vec![d, h, w], data).expect("length follows from numel"));
    }
    let mask = if manifest.has_mask {
        let mut m = vec![0u8; numel];
        read_exact_or(&mut reader, &mut m, "mask payload missing or short")?;
        Some(m)
    } else {
        None
    };
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format(
            "trailing bytes after declared payload".into(),
        ));
    }
    Case::new(
        manifest.case_id,
        manifest.modalities,
        volumes,
        mask,
        manifest.spacing,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_modality_names;

    fn sample_case() -> Case {
        let mut s = 99u64;
        let volumes = (0..4)
            .map(|_| {
                Tensor::from_fn(vec![2, 64, 64], |_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                    (s >> 11) as f32 / (1u64 << 53) as f32 * 3.0 - 1.0
                })
            })
            .collect();
        let mask = (0..2 * 64 * 64).map(|i| u8::from(i % 7 == 0)).collect();
        Case::new(
            "trip".into(),
            default_modality_names(4),
            volumes,
            Some(mask),
            [5.0, 1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.mdt");
        let case = sample_case();
        save_case(&path, &case).unwrap();
        let loaded = load_case(&path).unwrap();
        assert_eq!(loaded.case_id, case.case_id);
        assert_eq!(loaded.modality_names, case.modality_names);
        assert_eq!(loaded.spacing, case.spacing);
        assert_eq!(loaded.mask, case.mask);
        for (a, b) in loaded.volumes.iter().zip(&case.volumes) {
            assert_eq!(a.shape(), b.shape());
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_magic_names_the_expected_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.mdt");
        save_case(&path, &sample_case()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = load_case(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("MDTC"), "diagnostic was: {msg}");
    }

    #[test]
    fn truncated_payload_names_the_short_modality() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.mdt");
        save_case(&path, &sample_case()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // keep the manifest and 3 of the 4 modality payloads
        let keep = bytes.len() - 2 * 64 * 64 - 2 * 64 * 64 * 4;
        std::fs::write(&path, &bytes[..keep]).unwrap();
        let err = load_case(&path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("truncated") && msg.contains("MTT"),
            "diagnostic was: {msg}"
        );
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.mdt");
        save_case(&path, &sample_case()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        let msg = load_case(&path).unwrap_err().to_string();
        assert!(msg.contains("version"), "diagnostic was: {msg}");
    }

    #[test]
    fn missing_mask_bytes_are_a_distinct_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.mdt");
        save_case(&path, &sample_case()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let msg = load_case(&path).unwrap_err().to_string();
        assert!(msg.contains("mask"), "diagnostic was: {msg}");
    }

    #[test]
    fn cases_without_masks_round_trip_too() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nomask.mdt");
        let mut case = sample_case();
        case.mask = None;
        save_case(&path, &case).unwrap();
        let loaded = load_case(&path).unwrap();
        assert_eq!(loaded.mask, None);
        assert_eq!(loaded.volumes.len(), 4);
    }
}
