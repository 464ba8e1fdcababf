//! Checkpoint layout: `"STPC"`, u32 version, u64 length + JSON model config,
//! u32 record count, then per record a u32 length + UTF-8 name followed by a
//! tensor container. Records are sorted by name.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Codebook, ModelConfig, StainPidr};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STPC";
pub const CHECKPOINT_VERSION: u32 = 1;

const CODEBOOK_NAME: &str = "codebook.entries";
const MAX_CONFIG_BYTES: u64 = 1 << 20;
const MAX_NAME_BYTES: u32 = 1 << 12;

fn records(model: &StainPidr) -> BTreeMap<&str, &Tensor> {
    let mut all: BTreeMap<&str, &Tensor> = model.params().iter().collect();
    all.insert(CODEBOOK_NAME, model.codebook().entries());
    all
}

pub fn write_checkpoint<W: Write>(out: &mut W, model: &StainPidr) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(model.config())?;
    out.write_all(&(config.len() as u64).to_le_bytes())?;
    out.write_all(&config)?;
    let recs = records(model);
    out.write_all(&(recs.len() as u32).to_le_bytes())?;
    for (name, tensor) in recs {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        write_tensor(out, tensor)?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Reads a checkpoint and checks every tensor against the shapes its config implies.
pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<StainPidr> {
    let bad = |m: String| Error::Checkpoint(m);
    if &read_array::<4, _>(input)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_array(input)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(read_array(input)?);
    if len > MAX_CONFIG_BYTES {
        return Err(bad(format!("config block of {len} bytes")));
    }
    let mut config = vec![0u8; len as usize];
    input.read_exact(&mut config)?;
    let config: ModelConfig = serde_json::from_slice(&config)?;
    // a freshly initialized model supplies the expected names and shapes
    let mut model = StainPidr::new(config)?;

    let count = u32::from_le_bytes(read_array(input)?) as usize;
    let expected = records(&model).len();
    if count != expected {
        return Err(bad(format!("{count} tensors, expected {expected}")));
    }
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let n = u32::from_le_bytes(read_array(input)?);
        if n > MAX_NAME_BYTES {
            return Err(bad(format!("tensor name of {n} bytes")));
        }
        let mut name = vec![0u8; n as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        if previous.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(bad(format!("tensor {name} out of order")));
        }
        let tensor = read_tensor(input)?;
        let slot = if name == CODEBOOK_NAME {
            model.codebook_mut().entries_mut()
        } else {
            model
                .params_mut()
                .get_mut(&name)
                .ok_or_else(|| bad(format!("unexpected tensor {name}")))?
        };
        if slot.shape() != tensor.shape() {
            return Err(bad(format!("{name} has shape {:?}, expected {:?}", tensor.shape(), slot.shape())));
        }
        slot.data_mut().copy_from_slice(tensor.data());
        previous = Some(name);
    }
    let entries = model.codebook().entries().clone();
    *model.codebook_mut() = Codebook::from_entries(entries)?;
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &StainPidr) -> Result<()> {
    let path = path.as_ref();
    let run = || -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut out, model)?;
        out.flush()?;
        Ok(())
    };
    run().map_err(|e| e.at(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<StainPidr> {
    let path = path.as_ref();
    let run = || -> Result<StainPidr> { read_checkpoint(&mut BufReader::new(File::open(path)?)) };
    run().map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StainPidr {
        StainPidr::new(ModelConfig {
            image_size: 16,
            feature_channels: 8,
            codebook_size: 4,
            attention_heads: 2,
            seed: 7,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let mut model = small();
        model.codebook_mut().entries_mut().data_mut()[0] = 0.5;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        assert_eq!(&buf[..4], b"STPC");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());
        assert_eq!(back.codebook().entries().data(), model.codebook().entries().data());
    }

    #[test]
    fn rejects_corruption() {
        let model = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(read_checkpoint(&mut wrong_magic.as_slice()).is_err());
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());

        // same tensors under a config that implies other shapes
        let mut other = Vec::new();
        let cfg = serde_json::to_vec(&ModelConfig {
            codebook_size: 5,
            ..model.config().clone()
        })
        .unwrap();
        other.extend_from_slice(&buf[..8]);
        other.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        other.extend_from_slice(&cfg);
        let old_len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        other.extend_from_slice(&buf[16 + old_len..]);
        assert!(matches!(read_checkpoint(&mut other.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stpc");
        let model = small();
        save_checkpoint(&path, &model).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), model);
        assert!(load_checkpoint(dir.path().join("missing")).is_err());
    }
}
