//! Flat binary tensors and CSV/JSON report tables.
//!
//! Tensor file layout, all little-endian:
//!
//! ```text
//! magic   b"DTNS"
//! version u32 = 1
//! count   u32            number of tensors that follow
//! per tensor:
//!   ndim  u32
//!   dims  u64 × ndim
//!   data  f64 × product(dims), row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LatentState, Trace, Weights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DTNS";
const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[&Tensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated shape: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Format(format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated data: {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    read_tensors(BufReader::new(File::open(path)?))
}

pub fn save_weights(path: &Path, weights: &Weights) -> Result<()> {
    save_tensors(path, &weights.tensors())
}

/// A trace is stored as its step indices (one 1-D tensor) followed by the latents.
pub fn save_trace(path: &Path, trace: &Trace) -> Result<()> {
    let steps = Tensor::vector(trace.iter().map(|s| s.t as f64).collect());
    let mut all = vec![&steps];
    all.extend(trace.iter().map(|s| &s.x));
    save_tensors(path, &all)
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    let mut tensors = load_tensors(path)?.into_iter();
    let steps = tensors.next().ok_or_else(|| Error::Format("empty trace file".into()))?;
    let xs: Vec<Tensor> = tensors.collect();
    if steps.len() != xs.len() {
        return Err(Error::Format(format!("{} step indices for {} latents", steps.len(), xs.len())));
    }
    Ok(steps
        .data()
        .iter()
        .zip(xs)
        .map(|(&t, x)| LatentState { x, t: t as usize })
        .collect())
}

/// Order-sensitive summary used by the frozen golden values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Checksum {
    pub sum: f64,
    pub l2: f64,
}

pub fn checksum(t: &Tensor) -> Checksum {
    Checksum {
        sum: t.data().iter().sum(),
        l2: t.l2(),
    }
}

/// Writes `rows` to `dir/stem.csv` and `dir/stem.json`.
pub fn write_table<T: Serialize>(dir: &Path, stem: &str, rows: &[T]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(dir, stem, &rows)
}

pub fn write_json<T: Serialize + ?Sized>(dir: &Path, stem: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(File::create(dir.join(format!("{stem}.json")))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn round_trip() {
        let mut rng = SeededRng::new(0);
        let a = rng.normal_tensor(&[3, 4]);
        let b = Tensor::vector(vec![-0.0, f64::MIN_POSITIVE, 1e300]);
        let c = Tensor::zeros(&[0, 5]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[&a, &b, &c]).unwrap();
        assert_eq!(buf.len(), 12 + (4 + 16 + 96) + (4 + 8 + 24) + (4 + 16));
        let back = read_tensors(buf.as_slice()).unwrap();
        assert!(back[0].bit_eq(&a) && back[1].bit_eq(&b) && back[2].bit_eq(&c));
    }

    #[test]
    fn layout_is_little_endian() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[&Tensor::vector(vec![1.0])]).unwrap();
        assert_eq!(&buf[..4], b"DTNS");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[1, 0, 0, 0]);
        assert_eq!(&buf[16..24], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&buf[24..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[&Tensor::vector(vec![1.0, 2.0])]).unwrap();
        assert!(matches!(read_tensors(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensors(bad.as_slice()), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_tensors(long.as_slice()), Err(Error::Format(_))));
    }
}
