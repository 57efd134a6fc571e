//! FDMP tensor files: magic `FDMP`, u32 version (currently 1), u32 ndim,
//! ndim u64 dims, then the row-major payload as little-endian f64.
//!
//! Checkpoints concatenate named sections: each section is a u32 name length,
//! the UTF-8 name bytes, then one FDMP blob. Sections are read until EOF.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

pub const MAGIC: [u8; 4] = *b"FDMP";
pub const VERSION: u32 = 1;

/// Largest element count accepted when reading; guards against hostile dims.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if magic != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(TensorError::BadVersion(version));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 16 {
        return Err(TensorError::DimOverflow);
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut total: u64 = 1;
    for _ in 0..ndim {
        let d = read_u64(r)?;
        total = total.checked_mul(d).ok_or(TensorError::DimOverflow)?;
        if total > MAX_ELEMENTS {
            return Err(TensorError::DimOverflow);
        }
        dims.push(d as usize);
    }
    let mut data = vec![0.0; total as usize];
    let mut buf = [0u8; 8];
    for x in &mut data {
        read_exact(r, &mut buf)?;
        *x = f64::from_le_bytes(buf);
    }
    Ok(Tensor::from_vec(&dims, data).expect("dims and payload agree by construction"))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    // trailing bytes mean the file is not a single tensor
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(t),
        _ => Err(TensorError::BadArgument {
            what: "tensor file",
            why: "trailing bytes after payload".into(),
        }),
    }
}

/// Writes `(name, tensor)` sections in the given order.
pub fn write_sections<'a>(
    w: &mut impl Write,
    sections: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    for (name, t) in sections {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

/// Reads sections until EOF, preserving order.
pub fn read_sections(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => return Ok(out),
            4 => {}
            n => {
                // partial length prefix: finish the read so EOF mid-prefix errors
                if let Err(e) = read_exact(r, &mut len_buf[n..]) {
                    return Err(e);
                }
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len > 4096 {
            return Err(TensorError::BadArgument {
                what: "section name",
                why: format!("length {name_len} exceeds limit"),
            });
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| TensorError::BadArgument {
            what: "section name",
            why: "not valid UTF-8".into(),
        })?;
        let t = read_tensor(r)?;
        out.push((name, t));
    }
}

pub fn save_sections<'a>(
    path: impl AsRef<Path>,
    sections: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sections(&mut w, sections)?;
    w.flush()?;
    Ok(())
}

pub fn load_sections(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    read_sections(&mut r)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            TensorError::Truncated
        } else {
            TensorError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(t: &Tensor) -> Tensor {
        let mut buf = Vec::new();
        write_tensor(&mut buf, t).unwrap();
        read_tensor(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn roundtrip_preserves_shape_and_bits() {
        let t = Tensor::from_vec(&[2, 3], vec![1.5, -0.25, 1e-300, 0.0, -0.0, 3.25]).unwrap();
        let back = roundtrip(&t);
        assert_eq!(back.dims(), t.dims());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn scalar_roundtrips_with_zero_ndim() {
        let t = Tensor::scalar(7.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        // magic + version + ndim + one f64, no dim words
        assert_eq!(buf.len(), 4 + 4 + 4 + 8);
        assert_eq!(roundtrip(&t).item(), 7.0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::scalar(1.0)).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(TensorError::BadMagic)));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::scalar(1.0)).unwrap();
        buf[4] = 9;
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(TensorError::BadVersion(9))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::from_vec(&[4], vec![1.0; 4]).unwrap()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(TensorError::Truncated)));
    }

    #[test]
    fn hostile_dims_are_rejected_before_allocation() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&u64::MAX.to_le_bytes());
        buf.extend_from_slice(&4u64.to_le_bytes());
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(TensorError::DimOverflow)));
    }

    #[test]
    fn sections_roundtrip_in_order() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::scalar(3.0);
        let mut buf = Vec::new();
        write_sections(&mut buf, [("alpha.w", &a), ("head.b", &b)]).unwrap();
        let back = read_sections(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "alpha.w");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].0, "head.b");
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn empty_section_stream_is_ok() {
        assert!(read_sections(&mut [].as_slice()).unwrap().is_empty());
    }
}
