//! Binary checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"ORTHOPRT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     header length H in bytes, u32 little-endian
//! 16      H     UTF-8 JSON header: {config, n_classes, seed, tensors: [{name, shape}]}
//! 16+H    ...   tensor payloads in header order, each product(shape) f64 little-endian
//! ```
//!
//! Nothing follows the last tensor; trailing bytes are rejected.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_model, DualBranchModel, EncoderConfig};
use crate::error::{Error, Result};
use crate::ndnum::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ORTHOPRT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    n_classes: usize,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(model: &DualBranchModel) -> Vec<(String, &Tensor)> {
    model
        .branches()
        .into_iter()
        .flat_map(|b| b.parameter_names().into_iter().zip(b.parameters()))
        .collect()
}

pub fn write_checkpoint<W: Write>(model: &DualBranchModel, mut w: W) -> Result<()> {
    let tensors = named_tensors(model);
    let header = Header {
        config: model.config.clone(),
        n_classes: model.n_classes,
        seed: model.seed,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<DualBranchModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;

    // init_model fixes the structure; the payload then overwrites every value.
    let mut model = init_model(&header.config, header.n_classes, header.seed)?;
    let expected: Vec<(String, Vec<usize>)> = named_tensors(&model)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
    }
    let mut buf = [0u8; 8];
    for branch in [&mut model.branch_a, &mut model.branch_b] {
        for t in branch.parameters_mut() {
            for v in t.data_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &DualBranchModel, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DualBranchModel> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let mut m = init_model(&EncoderConfig::desk(6), 4, 21).unwrap();
        m.branch_b.prototypes.data_mut()[3] = -0.0;
        m.branch_a.layers[0].bias.as_mut().unwrap().data_mut()[0] = 1e-300;
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        for (x, y) in named_tensors(&m).iter().zip(named_tensors(&back)) {
            let xb: Vec<u64> = x.1.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(back, m);
    }

    #[test]
    fn layout_header_fields() {
        let m = init_model(&EncoderConfig::desk(3), 2, 0).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + h + 8 * m.num_parameters());
        // first payload value is a.layer0.weight[0]
        let first = f64::from_le_bytes(bytes[16 + h..24 + h].try_into().unwrap());
        assert_eq!(first, m.branch_a.layers[0].weight.data()[0]);
    }

    #[test]
    fn rejects_corruption() {
        let m = init_model(&EncoderConfig::desk(3), 2, 0).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
        let short = &bytes[..bytes.len() - 1];
        assert!(read_checkpoint(short).is_err());
    }
}
