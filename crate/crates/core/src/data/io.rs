//! VSEG1 volume files.
//!
//! Layout: the bytes `VSEG1\n`, a little-endian u32 header length, a JSON
//! header `{shape, spacing, kind, dtype, endianness}`, then the raw voxel
//! array. Masks are stored as uint8, other volumes as float32 when that is
//! lossless and float64 otherwise.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

const MAGIC: &[u8] = b"VSEG1\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    kind: VolumeKind,
    dtype: String,
    endianness: String,
}

pub fn write_volume<W: Write>(mut out: W, v: &Volume) -> Result<()> {
    let dtype = if v.kind() == VolumeKind::BinaryMask && v.data().iter().all(|&x| x == 0.0 || x == 1.0) {
        "uint8"
    } else if v.data().iter().all(|&x| x as f32 as f64 == x || x.is_nan()) {
        "float32"
    } else {
        "float64"
    };
    let header = Header {
        shape: v.shape().to_vec(),
        spacing: v.spacing().to_vec(),
        kind: v.kind(),
        dtype: dtype.into(),
        endianness: "little".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 8 * v.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    match dtype {
        "uint8" => buf.extend(v.data().iter().map(|&x| x as u8)),
        "float32" => {
            for &x in v.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        _ => {
            for &x in v.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_volume<R: Read>(mut input: R) -> Result<Volume> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format("missing VSEG1 magic".into()))?;
    if rest.len() < 4 {
        return Err(Error::Format("truncated header length".into()));
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < hlen {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.endianness != "little" {
        return Err(Error::Format(format!("unsupported endianness {}", header.endianness)));
    }
    let raw = &rest[hlen..];
    let n: usize = header.shape.iter().product();
    let width = match header.dtype.as_str() {
        "uint8" => 1,
        "float32" => 4,
        "float64" => 8,
        other => return Err(Error::Format(format!("unsupported dtype {other}"))),
    };
    if raw.len() != n * width {
        return Err(Error::Format(format!(
            "{} data bytes for {n} {} voxels",
            raw.len(),
            header.dtype
        )));
    }
    let data: Vec<f64> = match width {
        1 => raw.iter().map(|&b| b as f64).collect(),
        4 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        _ => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Volume::with_spacing(&header.shape, &header.spacing, header.kind, data)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut buf = Vec::new();
    write_volume(&mut buf, v)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    read_volume(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn masks_use_one_byte_per_voxel() {
        let m = Volume::new(&[2, 3], VolumeKind::BinaryMask, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_volume(&mut buf, &m).unwrap();
        assert!(buf.ends_with(&[0, 1, 1, 0, 0, 1]));
        assert_eq!(read_volume(&buf[..]).unwrap(), m);
    }

    #[test]
    fn bad_files_are_format_errors() {
        let v = Volume::new(&[4], VolumeKind::Image, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut buf = Vec::new();
        write_volume(&mut buf, &v).unwrap();
        assert!(matches!(read_volume(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(read_volume(&wrong[..]), Err(Error::Format(_))));
        assert!(matches!(read_volume(&buf[..8]), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vseg");
        let v = Volume::with_spacing(&[2, 2, 1], &[0.625, 0.625, 1.25], VolumeKind::Sdf, vec![-1.0, 0.0, 0.5, 1.0])
            .unwrap();
        save_volume(&path, &v).unwrap();
        assert_eq!(load_volume(&path).unwrap(), v);
        assert!(matches!(load_volume(&dir.path().join("missing")), Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            data in prop::collection::vec(-1e6f64..1e6, 1..64),
            spacing in 0.01f64..10.0,
        ) {
            let v = Volume::with_spacing(&[data.len()], &[spacing], VolumeKind::Image, data).unwrap();
            let mut buf = Vec::new();
            write_volume(&mut buf, &v).unwrap();
            let back = read_volume(&buf[..]).unwrap();
            prop_assert_eq!(back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.spacing(), v.spacing());
            prop_assert_eq!(back.kind(), v.kind());
        }
    }
}
