use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::{AdamConfig, OptimizerState};
use super::layers::Parameters;
use super::{GradError, Result, Tensor};

const MAGIC: &[u8; 4] = b"VCKP";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Everything a training run needs to resume: parameters, optimizer
/// moments, and a free-form manifest (structured text describing the run's
/// configuration, stored verbatim).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub optimizer: Option<OptimizerState>,
    pub manifest: String,
}

fn corrupt(detail: impl Into<String>) -> GradError {
    GradError::Checkpoint(detail.into())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn write_tensor_body(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&[DTYPE_F64])?;
    write_u32(w, t.shape.len() as u32)?;
    for &d in &t.shape {
        write_u64(w, d as u64)?;
    }
    for &v in &t.values {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(corrupt(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| corrupt("non-utf8 string"))
}

fn read_tensor_body(r: &mut impl Read) -> Result<Tensor> {
    let dtype = read_exact::<1>(r)?[0];
    if dtype != DTYPE_F64 {
        return Err(corrupt(format!("unsupported dtype {dtype}")));
    }
    let ndim = read_u32(r)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(corrupt(format!("unreasonable rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let d = read_u64(r)? as usize;
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| corrupt("tensor too large"))?;
        shape.push(d);
    }
    let mut values = Vec::with_capacity(numel);
    for _ in 0..numel {
        values.push(read_f64(r)?);
    }
    Tensor::new(shape, values).map_err(|e| corrupt(format!("bad tensor: {e}")))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_string(&mut w, &ckpt.manifest)?;

    write_u64(&mut w, ckpt.params.entries.len() as u64)?;
    for (p, entry) in &ckpt.params.entries {
        write_string(&mut w, p)?;
        w.write_all(&[entry.trainable as u8])?;
        write_tensor_body(&mut w, &entry.tensor)?;
    }

    match &ckpt.optimizer {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            write_u64(&mut w, opt.step)?;
            write_f64(&mut w, opt.config.learning_rate)?;
            write_f64(&mut w, opt.config.beta1)?;
            write_f64(&mut w, opt.config.beta2)?;
            write_f64(&mut w, opt.config.epsilon)?;
            // Moment maps always share a key set.
            write_u64(&mut w, opt.first_moment.len() as u64)?;
            for (p, m) in &opt.first_moment {
                let v = opt
                    .second_moment
                    .get(p)
                    .ok_or_else(|| corrupt(format!("missing second moment for {p}")))?;
                write_string(&mut w, p)?;
                write_tensor_body(&mut w, m)?;
                write_tensor_body(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic, not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let manifest = read_string(&mut r)?;

    let n = read_u64(&mut r)? as usize;
    let mut params = Parameters::default();
    for _ in 0..n {
        let p = read_string(&mut r)?;
        let trainable = read_exact::<1>(&mut r)?[0] != 0;
        let tensor = read_tensor_body(&mut r)?;
        params.insert(&p, tensor, trainable);
    }

    let has_opt = read_exact::<1>(&mut r)?[0];
    let optimizer = if has_opt == 1 {
        let step = read_u64(&mut r)?;
        let config = AdamConfig {
            learning_rate: read_f64(&mut r)?,
            beta1: read_f64(&mut r)?,
            beta2: read_f64(&mut r)?,
            epsilon: read_f64(&mut r)?,
        };
        let mut opt = OptimizerState::new(config);
        opt.step = step;
        let n_moments = read_u64(&mut r)? as usize;
        for _ in 0..n_moments {
            let p = read_string(&mut r)?;
            let m = read_tensor_body(&mut r)?;
            let v = read_tensor_body(&mut r)?;
            let param = params
                .entries
                .get(&p)
                .ok_or_else(|| corrupt(format!("moments for unknown parameter {p}")))?;
            if param.tensor.shape != m.shape || param.tensor.shape != v.shape {
                return Err(corrupt(format!("moment shape mismatch for {p}")));
            }
            opt.first_moment.insert(p.clone(), m);
            opt.second_moment.insert(p, v);
        }
        Some(opt)
    } else if has_opt == 0 {
        None
    } else {
        return Err(corrupt(format!("bad optimizer flag {has_opt}")));
    };

    // Trailing garbage means a truncated write elsewhere or a concatenation
    // mistake; reject rather than silently ignore.
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after checkpoint payload"));
    }

    Ok(Checkpoint {
        params,
        optimizer,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample_checkpoint() -> Checkpoint {
        let mut params = Parameters::default();
        params.insert(
            "enc.w",
            Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]).unwrap(),
            true,
        );
        params.insert("enc.frozen", Tensor::new(vec![2], vec![4.0, 5.0]).unwrap(), false);
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.step = 42;
        let mut grads = BTreeMap::new();
        grads.insert("enc.w".to_string(), Tensor::new(vec![2, 3], vec![0.01; 6]).unwrap());
        super::super::optimizer_step(&mut params, &grads, &mut opt).unwrap();
        Checkpoint {
            params,
            optimizer: Some(opt),
            manifest: "d_s = 64\nbeta = 1.0\n".to_string(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vckp");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, loaded);
    }

    #[test]
    fn no_optimizer_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("infer.vckp");
        let mut ckpt = sample_checkpoint();
        ckpt.optimizer = None;
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.optimizer, None);
        assert_eq!(ckpt.params, loaded.params);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_ckpt.bin");
        std::fs::write(&path, b"WAVEfmt junk").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vckp");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vckp");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"));
    }
}
