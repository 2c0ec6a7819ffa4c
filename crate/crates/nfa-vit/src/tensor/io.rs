//! Binary tensor files: magic "NFAT", u8 rank, rank x u32 LE dims, f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NFAT";

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&[t.rank() as u8]).map_err(io_err)?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let p = || path.display().to_string();
    let io_err = |e| Error::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::format(p(), "bad magic, expected NFAT"));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(io_err)?;
    let rank = rank[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        r.read_exact(&mut d).map_err(io_err)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        r.read_exact(&mut buf).map_err(io_err)?;
        data.push(f32::from_le_bytes(buf));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format(p(), "trailing bytes after payload")),
        Err(e) => return Err(Error::io(p(), e)),
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nfat");
        let t = Tensor::from_fn(vec![2, 3, 4], |i| (i as f32).sin());
        write_tensor(&path, &t).unwrap();
        let u = read_tensor(&path).unwrap();
        assert!(t.bitwise_eq(&u));
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nfat");
        std::fs::write(&path, b"WRONG!!!").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
    }
}
