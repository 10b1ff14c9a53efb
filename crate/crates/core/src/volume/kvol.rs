//! KVOL container: one UTF-8 JSON header line followed by raw little-endian
//! voxels in x-fastest order.
//!
//! ```text
//! {"magic":"KVOL1","dims":[nx,ny,nz],"spacing":[..],"origin":[..],"dtype":"f32"}\n
//! <nx*ny*nz little-endian samples>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Geometry, Mask3D, Volume3D};
use crate::error::{Error, Result};

pub const MAGIC: &str = "KVOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I16,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub magic: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<bool>,
}

impl Header {
    fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, self.origin)
    }

    pub fn is_labels(&self) -> bool {
        self.labels.unwrap_or(false)
    }
}

fn write_header(w: &mut impl Write, header: &Header) -> Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn read_header(r: &mut impl BufRead) -> Result<Header> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("KVOL header is not newline-terminated".into()));
    }
    line.pop();
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| Error::Format(format!("bad KVOL header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Format(format!("bad magic `{}`", header.magic)));
    }
    header.geometry()?;
    Ok(header)
}

fn read_payload(r: &mut impl Read, header: &Header) -> Result<Vec<u8>> {
    let n = header.dims.iter().product::<usize>() * header.dtype.width();
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("KVOL payload shorter than {n} bytes")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after KVOL payload".into()));
    }
    Ok(buf)
}

pub fn write_volume(w: &mut impl Write, vol: &Volume3D, dtype: Dtype) -> Result<()> {
    let g = vol.geometry();
    let header = Header {
        magic: MAGIC.into(),
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        dtype,
        labels: None,
    };
    write_header(w, &header)?;
    let mut buf = Vec::with_capacity(vol.voxels().len() * dtype.width());
    for &v in vol.voxels() {
        match dtype {
            Dtype::F32 => buf.extend_from_slice(&v.to_le_bytes()),
            Dtype::I16 => buf.extend_from_slice(&(v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16).to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_volume(r: &mut impl BufRead) -> Result<Volume3D> {
    let header = read_header(r)?;
    let buf = read_payload(r, &header)?;
    let voxels = match header.dtype {
        Dtype::F32 => buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        Dtype::I16 => buf.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
    };
    Volume3D::new(header.geometry()?, voxels)
}

pub fn write_mask(w: &mut impl Write, mask: &Mask3D) -> Result<()> {
    let g = mask.geometry();
    let header = Header {
        magic: MAGIC.into(),
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        dtype: Dtype::I16,
        labels: Some(true),
    };
    write_header(w, &header)?;
    let buf: Vec<u8> = mask.labels().iter().flat_map(|&l| (l as i16).to_le_bytes()).collect();
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a label file. Accepts either dtype; values must be integral labels.
pub fn read_mask(r: &mut impl BufRead) -> Result<Mask3D> {
    let vol = read_volume(r)?;
    let labels = vol
        .voxels()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=3.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("mask value {v} is not a label in {{0,1,2,3}}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Mask3D::new(*vol.geometry(), labels)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    read_volume(&mut BufReader::new(std::fs::File::open(path)?))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask3D> {
    read_mask(&mut BufReader::new(std::fs::File::open(path)?))
}

pub fn save_volume(path: impl AsRef<Path>, vol: &Volume3D, dtype: Dtype) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_volume(&mut w, vol, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Mask3D) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_mask(&mut w, mask)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom() -> Geometry {
        Geometry::new([3, 2, 2], [0.5, 0.5, 2.0], [-1.0, 2.0, 3.5]).unwrap()
    }

    #[test]
    fn header_layout() {
        let v = Volume3D::filled(geom(), 1.0).unwrap();
        let mut buf = Vec::new();
        write_volume(&mut buf, &v, Dtype::F32).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(header["magic"], "KVOL1");
        assert_eq!(header["dtype"], "f32");
        assert_eq!(buf.len() - nl - 1, 12 * 4);
        assert_eq!(&buf[nl + 1..nl + 5], &1.0f32.to_le_bytes());
    }

    #[test]
    fn mask_roundtrip_and_flag() {
        let mut m = Mask3D::empty(geom()).unwrap();
        m.set(2, 1, 1, 3);
        let mut buf = Vec::new();
        write_mask(&mut buf, &m).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("\"labels\":true"));
        assert_eq!(read_mask(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_files() {
        let v = Volume3D::filled(geom(), 1.0).unwrap();
        let mut buf = Vec::new();
        write_volume(&mut buf, &v, Dtype::I16).unwrap();
        assert!(read_volume(&mut &buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_volume(&mut extra.as_slice()).is_err());
        let bad = String::from_utf8(buf.clone()).unwrap_or_default().replace("KVOL1", "KVOL9");
        assert!(read_volume(&mut bad.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn f32_roundtrip(vals in proptest::collection::vec(-2000.0f32..2000.0, 12)) {
            let v = Volume3D::new(geom(), vals).unwrap();
            let mut buf = Vec::new();
            write_volume(&mut buf, &v, Dtype::F32).unwrap();
            prop_assert_eq!(read_volume(&mut buf.as_slice()).unwrap(), v);
        }
    }
}
