//! Binary checkpoint serialization.
//!
//! Format: magic `ATDPT1`, then little-endian `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u64`
//! dimensions, and the row-major `f64` payload.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelParams, TransformerConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"ATDPT1";

pub type NamedTensor = (String, Vec<usize>, Vec<f64>);

/// Write named tensors atomically (temp file then rename).
pub fn save_tensors(path: &Path, tensors: &[(String, Vec<usize>, &[f64])]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, dims, data) in tensors {
            let expected: usize = dims.iter().product();
            if expected != data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: dims {dims:?} do not match {} values",
                    data.len()
                )));
            }
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[dims.len() as u8])?;
            for &dim in dims {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in *data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = fs::File::open(path).map_err(|_| {
        Error::MissingCheckpoint(path.display().to_string())
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf)?;
    let count = u32::from_le_bytes(u32_buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16_buf = [0u8; 2];
        r.read_exact(&mut u16_buf)?;
        let name_len = u16::from_le_bytes(u16_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf)?;
        let mut dims = Vec::with_capacity(rank_buf[0] as usize);
        for _ in 0..rank_buf[0] {
            let mut u64_buf = [0u8; 8];
            r.read_exact(&mut u64_buf)?;
            dims.push(u64::from_le_bytes(u64_buf) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = vec![0.0f64; len];
        let mut f64_buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut f64_buf)?;
            *v = f64::from_le_bytes(f64_buf);
        }
        out.push((name, dims, data));
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    let shapes = ModelParams::named_shapes(&params.cfg);
    let tensors: Vec<(String, Vec<usize>, &[f64])> = shapes
        .into_iter()
        .zip(params.tensors())
        .map(|((name, dims), data)| (name, dims, data.as_slice()))
        .collect();
    save_tensors(path, &tensors)
}

/// Load parameters and validate names and shapes against the expected layout
/// for `cfg`.
pub fn load_params(path: &Path, cfg: TransformerConfig) -> Result<ModelParams> {
    let tensors = load_tensors(path)?;
    let shapes = ModelParams::named_shapes(&cfg);
    if tensors.len() != shapes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            shapes.len(),
            tensors.len()
        )));
    }
    let mut params = ModelParams::zeros_like(cfg);
    for (((name, dims, data), (want_name, want_dims)), dst) in tensors
        .into_iter()
        .zip(shapes)
        .zip(params.tensors_mut())
    {
        if name != want_name || dims != want_dims {
            return Err(Error::Checkpoint(format!(
                "{}: expected tensor {want_name} {want_dims:?}, found {name} {dims:?}",
                path.display()
            )));
        }
        dst.copy_from_slice(&data);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::transformer::forward;

    #[test]
    fn params_round_trip_is_stable() {
        let dir = std::env::temp_dir().join("atdpt-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = TransformerConfig::new(2, 2, 8, 3, 4, 3);
        let mut rng = substream(9700, &[]);
        let params = ModelParams::init(cfg, &mut rng);

        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save_params(&p1, &params).unwrap();
        let loaded = load_params(&p1, cfg).unwrap();
        assert_eq!(loaded, params);
        save_params(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let reloaded = load_params(&p2, cfg).unwrap();
        assert_eq!(loaded, reloaded);

        // forward from a loaded checkpoint is bit-identical across loads
        let tokens = vec![0.5; 2 * cfg.input_width];
        let a = forward(&loaded, &tokens, 2).unwrap();
        let b = forward(&reloaded, &tokens, 2).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn named_tensors_round_trip() {
        let dir = std::env::temp_dir().join("atdpt-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tensors.ckpt");
        let data = vec![1.5f64, -2.25, 0.0, 1e10, -0.125, 3.0];
        save_tensors(&path, &[("stats".into(), vec![2, 3], &data)]).unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].0, "stats");
        assert_eq!(loaded[0].1, vec![2, 3]);
        assert_eq!(loaded[0].2, data);
    }

    #[test]
    fn shape_mismatch_and_missing_file_are_errors() {
        let dir = std::env::temp_dir().join("atdpt-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mismatch.ckpt");
        let cfg = TransformerConfig::new(1, 1, 4, 2, 2, 2);
        let mut rng = substream(9710, &[]);
        save_params(&path, &ModelParams::init(cfg, &mut rng)).unwrap();

        let other = TransformerConfig::new(1, 1, 4, 2, 3, 2);
        assert!(load_params(&path, other).is_err());
        assert!(load_params(&dir.join("nope.ckpt"), cfg).is_err());

        // corrupt magic
        let bad = dir.join("bad.ckpt");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_params(&bad, cfg).is_err());

        // dims that disagree with the payload are rejected at save time
        let err = save_tensors(&bad, &[("t".into(), vec![3], &[1.0, 2.0][..])]);
        assert!(err.is_err());
    }
}
