//! Checkpoint container.
//!
//! ```text
//! magic      8 bytes   "MXLSTMv1"
//! header_len u64 LE
//! header     UTF-8 JSON, header_len bytes
//! payload    f64 LE, every tensor row-major, in header order
//! ```
//!
//! The header records the format version, the full model configuration, the
//! meaning of each output unit, and for every tensor its name, shape and
//! offset (in f64 elements) into the payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MXLSTMv1";
const FORMAT: &str = "mxlstm-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    output_layout: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(mut w: impl Write, weights: &ModelWeights) -> Result<()> {
    let mut offset = 0;
    let tensors = weights
        .names()
        .iter()
        .zip(weights.params())
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                offset,
                len: t.len(),
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: weights.config().clone(),
        output_layout: weights.variant().output_layout().iter().map(|s| s.to_string()).collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for t in weights.params() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelWeights> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for a checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} v{}",
            header.format, header.version
        )));
    }
    let expected_layout = header.config.variant.output_layout();
    if header.output_layout.len() != expected_layout.len()
        || header.output_layout.iter().zip(expected_layout).any(|(a, b)| a != b)
    {
        return Err(Error::Checkpoint("output layout does not match the variant".into()));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut named = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let end = t.offset.checked_add(t.len).filter(|&e| e <= values.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("tensor `{}` runs past the payload", t.name)));
        };
        if t.shape[0].checked_mul(t.shape[1]) != Some(t.len) {
            return Err(Error::Checkpoint(format!("tensor `{}` shape does not match its length", t.name)));
        }
        let m = DenseMatrix::from_vec(t.shape[0], t.shape[1], values[t.offset..end].to_vec())?;
        named.push((t.name, m));
    }
    ModelWeights::from_named(header.config, named)
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub fn save_checkpoint(path: impl AsRef<Path>, weights: &ModelWeights) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(&mut f, weights)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let f = fs::File::open(path.as_ref())?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelVariant;
    use crate::tensor::RngState;

    fn model(variant: ModelVariant) -> ModelWeights {
        let cfg = ModelConfig {
            variant,
            hidden_size: 5,
            embedding_size: 3,
            grid_cells: 3,
            grid_size: 3.7,
            frustum_aperture_deg: 33.3,
            frustum_depth: 1.9,
            anchor_distance: 0.45,
        };
        let mut w = ModelWeights::init(cfg, &mut RngState::new(11)).unwrap();
        // awkward values that a lossy encoding would not preserve
        w.params_mut()[0].data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        w.params_mut()[0].data_mut()[1] = -0.1 - 0.2;
        w
    }

    #[test]
    fn round_trip_is_bitwise() {
        for v in ModelVariant::ALL {
            let w = model(v);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &w).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back.config(), w.config());
            assert_eq!(back.names(), w.names());
            for (a, b) in back.params().iter().zip(w.params()) {
                let bits = |m: &DenseMatrix| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let w = model(ModelVariant::Full);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &w).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
        let short = &buf[..buf.len() - 8];
        assert!(read_checkpoint(short).is_err());
        assert!(read_checkpoint(&buf[..4]).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = std::env::temp_dir().join(format!("mxlstm-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let w = model(ModelVariant::Pace);
        save_checkpoint(&path, &w).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), w);
        fs::remove_dir_all(dir).unwrap();
    }
}
