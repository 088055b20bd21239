//! Binary checkpoints.
//!
//! Layout: `b"CBND"`, format version (u32 LE), metadata length (u64 LE), the
//! metadata as UTF-8 JSON, then raw little-endian floats. The payload holds
//! `W` then `b` for every dense layer in parameter order (head last), followed
//! by `gamma, beta, running_mean, running_var` of every batch-norm layer in
//! the same order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Element, FloatFormat};
use crate::nn::{Architecture, Network, TrainConfig, UnitId};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CBND";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub seed: u64,
    pub format: FloatFormat,
    /// Residual units whose branch was deleted.
    #[serde(default)]
    pub lesioned_units: Vec<UnitId>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub epoch: usize,
}

/// A loaded network in whichever format the checkpoint was written in.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyNetwork {
    F32(Network<f32>),
    F64(Network<f64>),
}

impl AnyNetwork {
    pub fn format(&self) -> FloatFormat {
        match self {
            AnyNetwork::F32(_) => FloatFormat::Binary32,
            AnyNetwork::F64(_) => FloatFormat::Binary64,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        match self {
            AnyNetwork::F32(n) => n.architecture(),
            AnyNetwork::F64(n) => n.architecture(),
        }
    }
}

fn payload_scalars<T: Element>(net: &Network<T>) -> usize {
    net.dense_layers().iter().map(|l| l.scalar_count()).sum()
}

pub fn save_checkpoint<T: Element>(net: &Network<T>, path: &Path) -> Result<()> {
    save_checkpoint_with(net, None, 0, path)
}

/// Writes `net` atomically (temporary file in the target directory, then
/// rename), recording the training configuration and epoch alongside.
pub fn save_checkpoint_with<T: Element>(
    net: &Network<T>,
    train: Option<&TrainConfig>,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    let meta = CheckpointMeta {
        architecture: net.architecture().clone(),
        seed: net.seed(),
        format: T::FORMAT,
        lesioned_units: net.lesioned_units(),
        train: train.cloned(),
        epoch,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Internal(format!("metadata encoding: {e}")))?;
    let mut buf = Vec::with_capacity(16 + json.len() + payload_scalars(net) * T::FORMAT.width());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let layers = net.dense_layers();
    for layer in &layers {
        for &v in layer.w.as_slice().iter().chain(layer.b.as_slice()) {
            v.write_le(&mut buf);
        }
    }
    for bn in layers.iter().filter_map(|l| l.bn.as_ref()) {
        for &v in bn
            .gamma
            .iter()
            .chain(&bn.beta)
            .chain(&bn.running_mean)
            .chain(&bn.running_var)
        {
            v.write_le(&mut buf);
        }
    }

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(&buf).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyNetwork> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, payload) = parse_header(&bytes, path)?;
    Ok(match meta.format {
        FloatFormat::Binary32 => AnyNetwork::F32(restore(&meta, payload, path)?),
        FloatFormat::Binary64 => AnyNetwork::F64(restore(&meta, payload, path)?),
    })
}

/// Loads a checkpoint that must have been written in format `T`.
pub fn load_checkpoint_as<T: Element>(path: &Path) -> Result<Network<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, payload) = parse_header(&bytes, path)?;
    if meta.format != T::FORMAT {
        return Err(Error::format(
            path,
            format!(
                "checkpoint stores {}, expected {}",
                meta.format.name(),
                T::FORMAT.name()
            ),
        ));
    }
    restore(&meta, payload, path)
}

/// Reads only the metadata block.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes, path)?.0)
}

fn parse_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointMeta, &'a [u8])> {
    if bytes.len() < 16 {
        return Err(Error::format(
            path,
            format!("file is {} bytes, shorter than the 16-byte header", bytes.len()),
        ));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic at offset 0 (expected CBND)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version == 0 || version > CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            Error::format(
                path,
                format!(
                    "metadata length {meta_len} at offset 8 exceeds file size {}",
                    bytes.len()
                ),
            )
        })?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..meta_end])
        .map_err(|e| Error::format(path, format!("invalid metadata JSON at offset 16: {e}")))?;
    meta.architecture
        .validate()
        .map_err(|e| Error::format(path, format!("metadata architecture: {e}")))?;
    Ok((meta, &bytes[meta_end..]))
}

fn restore<T: Element>(meta: &CheckpointMeta, payload: &[u8], path: &Path) -> Result<Network<T>> {
    let mut net = Network::<T>::build(&meta.architecture, meta.seed)?;
    for &unit in &meta.lesioned_units {
        net = net
            .delete_unit(unit)
            .map_err(|e| Error::format(path, format!("lesioned unit list: {e}")))?;
    }
    let width = T::FORMAT.width();
    let expected = payload_scalars(&net) * width;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, architecture requires {expected}", payload.len()),
        ));
    }
    let mut values = payload.chunks_exact(width).map(T::read_le);
    let mut fill = |dst: &mut [T]| -> Result<()> {
        for d in dst {
            let v = values.next().expect("length checked");
            if !v.is_finite() {
                return Err(Error::format(path, "non-finite parameter in payload"));
            }
            *d = v;
        }
        Ok(())
    };
    let mut layers = net.dense_layers_mut();
    for layer in layers.iter_mut() {
        fill(layer.w.as_mut_slice())?;
        fill(layer.b.as_mut_slice())?;
    }
    for bn in layers.iter_mut().filter_map(|l| l.bn.as_mut()) {
        fill(&mut bn.gamma)?;
        fill(&mut bn.beta)?;
        fill(&mut bn.running_mean)?;
        fill(&mut bn.running_var)?;
    }
    drop(layers);
    net.bump_version();
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Matrix;
    use crate::nn::{Block, Mode, Residual};

    fn sample_net() -> Network<f32> {
        let arch = Architecture::new(
            3,
            2,
            vec![
                Block::plain("t", 1, 4).with_batch_norm(true),
                Block::residual("r", 4, 4, Residual::Affine { scale: 2.0, shift: 0.1 }).with_batch_norm(true),
            ],
        )
        .unwrap();
        let mut net = Network::build(&arch, 9).unwrap();
        net.layer_mut(0).bn.as_mut().unwrap().running_var[1] = 0.37;
        net.delete_unit(UnitId { block: 1, unit: 0 }).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cbnd");
        let net = sample_net();
        save_checkpoint(&net, &path).unwrap();
        let AnyNetwork::F32(back) = load_checkpoint(&path).unwrap() else {
            panic!("format changed");
        };
        assert_eq!(back.stages(), net.stages());
        assert_eq!(back.head(), net.head());
        assert_eq!(back.checksum(), net.checksum());
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.0]).unwrap();
        let a = crate::nn::forward(&net, &x, Mode::Eval).unwrap();
        let b = crate::nn::forward(&back, &x, Mode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn binary64_round_trip_and_format_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net64.cbnd");
        let net = Network::<f64>::build(&Architecture::fc(2, 3, 2, 3).unwrap(), 4).unwrap();
        save_checkpoint_with(&net, Some(&TrainConfig::default()), 7, &path).unwrap();
        assert_eq!(load_checkpoint_as::<f64>(&path).unwrap().stages(), net.stages());
        assert!(matches!(load_checkpoint_as::<f32>(&path), Err(Error::Format { .. })));
        assert_eq!(read_checkpoint_meta(&path).unwrap().epoch, 7);
    }

    fn corrupt(edit: impl FnOnce(&mut Vec<u8>)) -> Result<AnyNetwork> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cbnd");
        save_checkpoint(&sample_net(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        edit(&mut bytes);
        std::fs::write(&path, &bytes).unwrap();
        load_checkpoint(&path)
    }

    #[test]
    fn rejects_damaged_files() {
        assert!(matches!(corrupt(|b| b[0] = b'X'), Err(Error::Format { .. })));
        assert!(matches!(
            corrupt(|b| b[4..8].copy_from_slice(&2u32.to_le_bytes())),
            Err(Error::Version { found: 2, supported: 1 })
        ));
        assert!(matches!(
            corrupt(|b| b.truncate(b.len() - 3)),
            Err(Error::Format { .. })
        ));
        assert!(matches!(corrupt(|b| b.push(0)), Err(Error::Format { .. })));
        assert!(matches!(corrupt(|b| b[16] = b'#'), Err(Error::Format { .. })));
        assert!(matches!(corrupt(|b| b.clear()), Err(Error::Format { .. })));
        let msg = corrupt(|b| b.truncate(b.len() - 4)).unwrap_err().to_string();
        assert!(msg.contains("c.cbnd") && msg.contains("bytes"), "{msg}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/x.cbnd")),
            Err(Error::Io { .. })
        ));
    }
}
