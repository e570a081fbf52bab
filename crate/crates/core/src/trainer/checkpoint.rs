//! Weight checkpoints: the MDT payload convention with a parameter-name
//! manifest, magic `MDTW`.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic    4 bytes  "MDTW"
//! version  u16      currently 1
//! mlen     u32      manifest byte length
//! manifest UTF-8 JSON: {network_config, params: [{name, shape}],
//!                       bn_channels: [usize]}
//! payload  per parameter, manifest order: little-endian f32
//! buffers  per batchnorm buffer: running mean then running variance, f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};

pub const MAGIC: [u8; 4] = *b"MDTW";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    network_config: NetworkConfig,
    params: Vec<ParamEntry>,
    bn_channels: Vec<usize>,
}

fn write_f32s(out: &mut impl Write, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_f32s(reader: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    reader.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated checkpoint: {what}"))
        } else {
            Error::Io(e)
        }
    })?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes weights and batchnorm running statistics; loading reproduces the
/// network bitwise.
pub fn save_checkpoint(path: &Path, net: &Network<f32>) -> Result<()> {
    let manifest = Manifest {
        network_config: net.config().clone(),
        params: net
            .params
            .iter()
            .map(|(_, name, v)| ParamEntry {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
        bn_channels: net.bn.iter().map(|b| b.running_mean.len()).collect(),
    };
    let mjson = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(mjson.len() as u32).to_le_bytes())?;
    out.write_all(&mjson)?;
    for (_, _, v) in net.params.iter() {
        write_f32s(&mut out, v.data())?;
    }
    for b in &net.bn {
        write_f32s(&mut out, &b.running_mean)?;
        write_f32s(&mut out, &b.running_var)?;
    }
    out.flush()?;
    Ok(())
}

/// Rebuilds the network named by the stored config and fills every parameter
/// and running statistic from the payload. Unknown or missing parameter
/// names, shape changes and truncation each get a distinct diagnostic.
pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint: missing magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}: expected `MDTW`"
        )));
    }
    let mut v = [0u8; 2];
    reader
        .read_exact(&mut v)
        .map_err(|_| Error::Format("truncated checkpoint: missing version".into()))?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut l = [0u8; 4];
    reader
        .read_exact(&mut l)
        .map_err(|_| Error::Format("truncated checkpoint: missing manifest length".into()))?;
    let mut mjson = vec![0u8; u32::from_le_bytes(l) as usize];
    reader
        .read_exact(&mut mjson)
        .map_err(|_| Error::Format("truncated checkpoint: manifest shorter than declared".into()))?;
    let manifest: Manifest = serde_json::from_slice(&mjson)
        .map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;

    let mut net = Network::<f32>::new(manifest.network_config, 0)?;
    if manifest.params.len() != net.params.len() {
        return Err(Error::Format(format!(
            "checkpoint stores {} parameters, network defines {}",
            manifest.params.len(),
            net.params.len()
        )));
    }
    for entry in &manifest.params {
        let id = net.params.id_by_name(&entry.name).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint parameter `{}` does not exist in this network",
                entry.name
            ))
        })?;
        if net.params.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint parameter `{}` has shape {:?}, network expects {:?}",
                entry.name,
                entry.shape,
                net.params.value(id).shape()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let data = read_f32s(
            &mut reader,
            numel,
            &format!("payload for parameter `{}`", entry.name),
        )?;
        net.params.value_mut(id).data_mut().copy_from_slice(&data);
    }
    if manifest.bn_channels.len() != net.bn.len() {
        return Err(Error::Format(format!(
            "checkpoint stores {} batchnorm buffers, network defines {}",
            manifest.bn_channels.len(),
            net.bn.len()
        )));
    }
    for (i, (&ch, buf)) in manifest.bn_channels.iter().zip(net.bn.iter_mut()).enumerate() {
        if ch != buf.running_mean.len() {
            return Err(Error::Format(format!(
                "batchnorm buffer {i} has {ch} channels in the checkpoint, network expects {}",
                buf.running_mean.len()
            )));
        }
        buf.running_mean = read_f32s(&mut reader, ch, &format!("running mean of buffer {i}"))?;
        buf.running_var = read_f32s(&mut reader, ch, &format!("running variance of buffer {i}"))?;
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format(
            "trailing bytes after declared checkpoint payload".into(),
        ));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Fusion, NetworkConfig};
    use crate::tensor::Tensor;

    fn trained_ish_network() -> Network<f32> {
        let config = NetworkConfig {
            base_width: 4,
            depth: 2,
            input_spatial: (16, 16),
            ..NetworkConfig::with_streams(2, Fusion::Hyperdense)
        };
        let mut net = Network::<f32>::new(config, 3).unwrap();
        // make the running statistics non-trivial so the round trip is honest
        let inputs: Vec<Tensor<f32>> = (0..2)
            .map(|m| Tensor::from_fn(vec![2, 1, 16, 16], |i| ((i + m) % 17) as f32 / 17.0))
            .collect();
        net.forward(&inputs, true).unwrap();
        net
    }

    #[test]
    fn round_trip_reproduces_weights_stats_and_predictions_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mdtw");
        let mut net = trained_ish_network();
        save_checkpoint(&path, &net).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();

        for ((_, name, a), (_, _, b)) in net.params.iter().zip(loaded.params.iter()) {
            assert!(
                a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {name} differs after reload"
            );
        }
        for (a, b) in net.bn.iter().zip(&loaded.bn) {
            assert_eq!(a.running_mean, b.running_mean);
            assert_eq!(a.running_var, b.running_var);
        }
        let inputs: Vec<Tensor<f32>> = (0..2)
            .map(|m| Tensor::from_fn(vec![1, 1, 16, 16], |i| ((i * 3 + m) % 11) as f32 / 11.0))
            .collect();
        let ya = net.predict(&inputs).unwrap();
        let yb = loaded.predict(&inputs).unwrap();
        assert!(ya
            .data()
            .iter()
            .zip(yb.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    fn load_error(path: &std::path::Path) -> String {
        match load_checkpoint(path) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected loading to fail"),
        }
    }

    #[test]
    fn bad_magic_and_truncation_have_distinct_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mdtw");
        save_checkpoint(&path, &trained_ish_network()).unwrap();

        let good = std::fs::read(&path).unwrap();
        let mut bad = good.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        let msg = load_error(&path);
        assert!(msg.contains("MDTW"), "diagnostic was: {msg}");

        std::fs::write(&path, &good[..good.len() - 8]).unwrap();
        let msg = load_error(&path);
        assert!(msg.contains("truncated"), "diagnostic was: {msg}");
    }
}
