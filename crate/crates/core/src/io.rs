//! Raw volume files with JSON sidecars, sinogram files, and PGM images.
//!
//! A volume `name.vol` holds the little-endian voxel payload in Z-major order;
//! `name.vol.json` holds `{dims, voxel_size_um, dtype, classes}`. Sinograms use
//! the same layout with a float32 payload and their own sidecar keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tomo::SinogramStack;
use crate::volume::{ClassId, Dims, Image2, Volume};

/// Voxel element types that have an on-disk encoding.
pub trait VoxelType: Copy + Default + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Result<Self>;
}

impl VoxelType for u16 {
    const DTYPE: &'static str = "u16";
    const BYTES: usize = 2;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Result<Self> {
        Ok(u16::from_le_bytes([bytes[0], bytes[1]]))
    }
}

impl VoxelType for ClassId {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self.id());
    }

    fn read_le(bytes: &[u8]) -> Result<Self> {
        ClassId::from_u8(bytes[0])
            .ok_or_else(|| Error::Format(format!("label value {} not in class table", bytes[0])))
    }
}

impl VoxelType for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Result<Self> {
        let v = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Format("non-finite float voxel".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
}

/// Contents of a `.vol.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub voxel_size_um: f64,
    pub dtype: String,
    #[serde(default)]
    pub classes: Vec<ClassEntry>,
}

pub fn class_table() -> Vec<ClassEntry> {
    ClassId::ALL
        .iter()
        .map(|c| ClassEntry {
            id: c.id(),
            name: c.name().to_string(),
        })
        .collect()
}

/// Path of the sidecar belonging to a payload path.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn checked_len(dims: [usize; 3], elem: usize) -> Result<usize> {
    dims.iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))
}

pub fn encode_volume<T: VoxelType>(vol: &Volume<T>) -> (String, Vec<u8>) {
    let sidecar = VolumeSidecar {
        dims: vol.dims().as_array(),
        voxel_size_um: vol.voxel_size(),
        dtype: T::DTYPE.to_string(),
        classes: class_table(),
    };
    let mut payload = Vec::with_capacity(vol.data().len() * T::BYTES);
    for &v in vol.data() {
        v.write_le(&mut payload);
    }
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    (json, payload)
}

/// Parses a sidecar + payload pair, validating length, dtype and labels.
pub fn decode_volume<T: VoxelType>(sidecar_json: &str, payload: &[u8]) -> Result<Volume<T>> {
    let sidecar: VolumeSidecar =
        serde_json::from_str(sidecar_json).map_err(|e| Error::Format(format!("sidecar: {e}")))?;
    if sidecar.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype '{}' where '{}' was expected",
            sidecar.dtype,
            T::DTYPE
        )));
    }
    if !sidecar.classes.is_empty() && sidecar.classes != class_table() {
        return Err(Error::Format("class table does not match the 6-class table".into()));
    }
    let expected = checked_len(sidecar.dims, T::BYTES)?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "dims {:?} need {expected} payload bytes, found {}",
            sidecar.dims,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(T::BYTES)
        .map(T::read_le)
        .collect::<Result<Vec<T>>>()?;
    let [nx, ny, nz] = sidecar.dims;
    Volume::new(Dims::new(nx, ny, nz), sidecar.voxel_size_um, data)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn save_volume<T: VoxelType>(vol: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (json, payload) = encode_volume(vol);
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn load_volume<T: VoxelType>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&json, &payload)
}

/// Reads only the dtype recorded in a volume's sidecar.
pub fn peek_dtype(path: impl AsRef<Path>) -> Result<String> {
    let side = sidecar_path(path.as_ref());
    let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: VolumeSidecar =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("sidecar: {e}")))?;
    Ok(sidecar.dtype)
}

/// Contents of a sinogram `.sino.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinogramSidecar {
    pub n_slices: usize,
    pub n_angles: usize,
    pub n_bins: usize,
    pub angle_step_deg: f64,
    pub arc_deg: f64,
    pub voxel_size_um: f64,
}

pub fn encode_sinogram(s: &SinogramStack) -> (String, Vec<u8>) {
    let sidecar = SinogramSidecar {
        n_slices: s.n_slices(),
        n_angles: s.n_angles(),
        n_bins: s.n_bins(),
        angle_step_deg: s.angle_step_deg(),
        arc_deg: s.arc_deg(),
        voxel_size_um: s.voxel_size(),
    };
    let mut payload = Vec::with_capacity(s.data().len() * 4);
    for &v in s.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    (json, payload)
}

pub fn decode_sinogram(sidecar_json: &str, payload: &[u8]) -> Result<SinogramStack> {
    let side: SinogramSidecar =
        serde_json::from_str(sidecar_json).map_err(|e| Error::Format(format!("sidecar: {e}")))?;
    let expected = checked_len([side.n_slices, side.n_angles, side.n_bins], 4)?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "sinogram needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite sinogram sample".into()));
    }
    SinogramStack::from_parts(
        side.n_slices,
        side.n_bins,
        side.angle_step_deg,
        side.arc_deg,
        side.voxel_size_um,
        side.n_angles,
        data,
    )
    .map_err(|e| Error::Format(e.to_string()))
}

pub fn save_sinogram(s: &SinogramStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (json, payload) = encode_sinogram(s);
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn load_sinogram(path: impl AsRef<Path>) -> Result<SinogramStack> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sinogram(&json, &payload)
}

/// 8-bit palette for rendering labels: background black, then increasing gray
/// levels in class-id order.
pub const LABEL_PALETTE: [u8; ClassId::COUNT] = [0, 51, 102, 153, 204, 255];

/// Binary (P5) PGM with maxval 255.
pub fn encode_pgm8(img: &Image2<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Binary (P5) PGM with maxval 65535, big-endian samples.
pub fn encode_pgm16(img: &Image2<u16>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for &v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

const PGM_MAX_PIXELS: usize = 1 << 28;

/// Parses P2 (ASCII) or P5 (binary) PGM. Samples are rescaled to the full
/// 16-bit range when maxval is below 65535.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image2<u16>> {
    let mut pos = 0usize;

    fn skip_ws(bytes: &[u8], pos: &mut usize) {
        while *pos < bytes.len() {
            let b = bytes[*pos];
            if b == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                *pos += 1;
            } else {
                break;
            }
        }
    }

    fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
        skip_ws(bytes, pos);
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(&bytes[start..*pos])
    }

    fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
        let tok = token(bytes, pos)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Format("bad number in PGM".into()))
    }

    let magic = token(bytes, &mut pos)?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(Error::Format("not a PGM (expected P2 or P5)".into())),
    };
    let width = number(bytes, &mut pos)?;
    let height = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n <= PGM_MAX_PIXELS)
        .ok_or_else(|| Error::Format("PGM too large".into()))?;
    let scale = |v: usize| -> Result<u16> {
        if v > maxval {
            return Err(Error::Format(format!("PGM sample {v} exceeds maxval {maxval}")));
        }
        Ok(((v as u64 * 65535 + maxval as u64 / 2) / maxval as u64) as u16)
    };

    let mut data = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("missing raster separator".into()));
        }
        pos += 1;
        let bps = if maxval < 256 { 1 } else { 2 };
        let raster = &bytes[pos..];
        if raster.len() < n * bps {
            return Err(Error::Format("truncated PGM raster".into()));
        }
        for i in 0..n {
            let v = if bps == 1 {
                raster[i] as usize
            } else {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize
            };
            data.push(scale(v)?);
        }
    } else {
        for _ in 0..n {
            data.push(scale(number(bytes, &mut pos)?)?);
        }
    }
    Image2::new(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{GrayVolume, LabelVolume};

    #[test]
    fn gray_volume_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vol");
        let dims = Dims::cube(4);
        let v = GrayVolume::new(dims, 5.55, (0..64).map(|i| i * 1000).collect()).unwrap();
        save_volume(&v, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back: GrayVolume = load_volume(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(peek_dtype(&path).unwrap(), "u16");
    }

    #[test]
    fn short_payload_is_a_format_error() {
        let json = r#"{"dims":[2,2,2],"voxel_size_um":1.0,"dtype":"u16","classes":[]}"#;
        let err = decode_volume::<u16>(json, &[0u8; 14]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let json8 = r#"{"dims":[2,2,2],"voxel_size_um":1.0,"dtype":"u8"}"#;
        assert!(decode_volume::<ClassId>(json8, &[0u8; 7]).is_err());
    }

    #[test]
    fn label_value_outside_class_table_is_rejected() {
        let v = LabelVolume::filled(Dims::cube(2), 1.0, ClassId::Atrium).unwrap();
        let (json, mut payload) = encode_volume(&v);
        payload[3] = 9;
        let err = decode_volume::<ClassId>(&json, &payload).unwrap_err();
        assert!(err.to_string().contains("not in class table"));
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let json = r#"{"dims":[1,1,1],"voxel_size_um":1.0,"dtype":"i64"}"#;
        assert!(decode_volume::<u16>(json, &[0, 0]).is_err());
        let wrong_kind = r#"{"dims":[1,1,1],"voxel_size_um":1.0,"dtype":"u16"}"#;
        assert!(decode_volume::<ClassId>(wrong_kind, &[0]).is_err());
    }

    #[test]
    fn pgm_round_trip_16_bit_and_ascii_8_bit() {
        let img = Image2::new(3, 2, vec![0u16, 1, 2, 65535, 300, 7]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm16(&img)).unwrap(), img);
        let ascii = b"P2\n# comment\n2 1\n255\n0 255\n";
        assert_eq!(decode_pgm(ascii).unwrap().data, vec![0, 65535]);
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00").is_err());
    }
}
