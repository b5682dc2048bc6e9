//! The "SADM" binary checkpoint format.
//!
//! Little-endian: magic `SADM`, `u32` version, `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and
//! raw `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SADM";
pub const VERSION: u32 = 1;

/// Ordered named tensors as stored on disk.
pub type TensorList = Vec<(String, Tensor<f32>)>;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dim too large in {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<TensorList> {
    let magic = read_exact(&mut r, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let lb = read_exact(&mut r, 2, "name length")?;
        let len = u16::from_le_bytes([lb[0], lb[1]]) as usize;
        let name = String::from_utf8(read_exact(&mut r, len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_exact(&mut r, 1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = read_exact(&mut r, n * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Writes atomically via a temporary sibling file.
pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let f = std::fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(f);
        write_tensors(&mut w, tensors)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TensorList> {
    let f = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(f))
}

pub fn find<'a>(tensors: &'a [(String, Tensor<f32>)], name: &str) -> Result<&'a Tensor<f32>> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorList {
        vec![
            ("a.w".into(), Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, -0.0]).unwrap()),
            ("scalar".into(), Tensor::new(&[], vec![7.0]).unwrap()),
            ("empty".into(), Tensor::new(&[0, 4], vec![]).unwrap()),
        ]
    }

    #[test]
    fn byte_layout_is_exact() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Tensor::new(&[1], vec![1.0f32]).unwrap())]).unwrap();
        let expect: Vec<u8> = [
            b"SADM".to_vec(),
            1u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
            1u16.to_le_bytes().to_vec(),
            b"x".to_vec(),
            vec![1u8],
            1u32.to_le_bytes().to_vec(),
            1.0f32.to_le_bytes().to_vec(),
        ]
        .concat();
        assert_eq!(buf, expect);
    }

    #[test]
    fn round_trip_preserves_bits() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()).unwrap();
        let back = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in sample().iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample()).unwrap();
        assert!(matches!(read_tensors(&buf[..buf.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensors(bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_tensors(extra.as_slice()), Err(Error::Checkpoint(_))));
    }
}
