//! Binary checkpoint format (little-endian throughout).
//!
//! ```text
//! header   "SNETCKPT" | version u32 | scalar width u8
//!          current_task u32 | total_tasks_planned u32 | trained_since_freeze u8
//!          config_len u32 | model config (JSON, UTF-8)
//!          layer_count u32 | per layer: out u32, in u32, snapshot_count u32
//! payload  per layer: weights (out·in scalars) | assignment (out·in u8, 255 = free)
//!                     live bias (out scalars) | snapshots (snapshot_count · out scalars)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::masked::{MaskedLinear, TaskRegistry};
use crate::model::{HybridModel, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SNETCKPT";
pub const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn put_scalars<S: Scalar, W: Write>(w: &mut W, values: &[S]) -> Result<()> {
    for &v in values {
        v.write_le(w)?;
    }
    Ok(())
}

fn get_tensor<S: Scalar, R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<S>> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::read_le(r)).collect::<std::io::Result<Vec<S>>>()?;
    Ok(Tensor::new(shape.to_vec(), data)?)
}

pub fn write_checkpoint<S: Scalar, W: Write>(model: &HybridModel<S>, w: &mut W) -> Result<()> {
    let reg = model.registry();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    w.write_all(&[S::WIDTH])?;
    put_u32(w, reg.current_task)?;
    put_u32(w, reg.total_tasks_planned)?;
    w.write_all(&[u8::from(reg.trained_since_freeze)])?;
    let config = serde_json::to_vec(model.config())?;
    put_u32(w, config.len())?;
    w.write_all(&config)?;
    put_u32(w, model.layers().len())?;
    for l in model.layers() {
        put_u32(w, l.out_dim())?;
        put_u32(w, l.in_dim())?;
        put_u32(w, l.bias_snapshots().len())?;
    }
    for l in model.layers() {
        put_scalars(w, l.weights().data())?;
        w.write_all(l.assignment())?;
        put_scalars(w, l.live_bias().data())?;
        for s in l.bias_snapshots() {
            put_scalars(w, s.data())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<S: Scalar, R: Read>(r: &mut R) -> Result<HybridModel<S>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let width = get_u8(r)?;
    if width != S::WIDTH {
        return Err(Error::Checkpoint(format!(
            "stored with {width}-byte scalars, reading as {}-byte",
            S::WIDTH
        )));
    }
    let registry = TaskRegistry {
        current_task: get_u32(r)?,
        total_tasks_planned: get_u32(r)?,
        trained_since_freeze: get_u8(r)? != 0,
    };
    let config_len = get_u32(r)?;
    let mut config = vec![0u8; config_len];
    r.read_exact(&mut config)?;
    let config: ModelConfig = serde_json::from_slice(&config)?;
    let count = get_u32(r)?;
    if count > 4096 {
        return Err(Error::Checkpoint(format!("implausible layer count {count}")));
    }
    let shapes = (0..count)
        .map(|_| Ok((get_u32(r)?, get_u32(r)?, get_u32(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(count);
    for (out, input, snaps) in shapes {
        let weights = get_tensor(r, &[out, input])?;
        let mut assignment = vec![0u8; out * input];
        r.read_exact(&mut assignment)?;
        let live = get_tensor(r, &[out])?;
        let snapshots = (0..snaps).map(|_| get_tensor(r, &[out])).collect::<Result<Vec<_>>>()?;
        layers.push(MaskedLinear::from_parts(weights, assignment, live, snapshots)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    HybridModel::from_parts(config, layers, registry)
}

pub fn save<S: Scalar>(model: &HybridModel<S>, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &std::path::Path) -> Result<HybridModel<S>> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::rng::{SeededRng, Stream};

    fn model() -> HybridModel<f32> {
        let cfg = ModelConfig {
            input_dim: 5,
            hidden_dims: vec![4],
            latent_dim: 2,
            class_count: 3,
            variant: Variant::Vae,
            kl_weight: 0.01,
        };
        let mut m = HybridModel::new(cfg, 3).unwrap();
        m.begin_task(&mut SeededRng::new(0, Stream::WeightInit)).unwrap();
        m.mark_trained();
        m.prune(num_rational::Ratio::new(1, 3)).unwrap();
        m.freeze().unwrap();
        m
    }

    #[test]
    fn roundtrip() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back: HybridModel<f32> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn header_checks() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert!(read_checkpoint::<f64, _>(&mut buf.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f32, _>(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint::<f32, _>(&mut &truncated[..]).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(read_checkpoint::<f32, _>(&mut longer.as_slice()).is_err());
    }

    #[test]
    fn free_marker_is_255() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert!(m.layers()[0].assignment().contains(&255));
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(buf[12], 4);
    }
}
