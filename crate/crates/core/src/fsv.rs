//! FSV1 volume files.
//!
//! Layout, little-endian, no padding:
//!
//! ```text
//! "FSV1" | u8 dtype | u8 kind | u8 rank (=3) | rank x u32 extents (D,H,W) | payload
//! ```
//!
//! dtype 0 is float32 (images), 1 is uint8 (masks). kind 0 is an image,
//! 1 a full mask, 2 a bounding-box mask.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::volume::{Dims, LabelMask, MaskKind, Volume};

pub const MAGIC: [u8; 4] = *b"FSV1";
const HEADER_LEN: usize = 4 + 3 + 3 * 4;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;
const KIND_IMAGE: u8 = 0;
const KIND_FULL: u8 = 1;
const KIND_BOX: u8 = 2;

/// Contents of an FSV1 file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Image(Volume),
    Mask(LabelMask),
}

impl VolumeFile {
    pub fn dims(&self) -> Dims {
        match self {
            VolumeFile::Image(v) => v.dims(),
            VolumeFile::Mask(m) => m.dims(),
        }
    }

    pub fn into_image(self) -> Result<Volume> {
        match self {
            VolumeFile::Image(v) => Ok(v),
            VolumeFile::Mask(_) => Err(Error::Invalid("expected an image volume, found a mask".into())),
        }
    }

    pub fn into_mask(self) -> Result<LabelMask> {
        match self {
            VolumeFile::Mask(m) => Ok(m),
            VolumeFile::Image(_) => Err(Error::Invalid("expected a label mask, found an image".into())),
        }
    }
}

fn header(dtype: u8, kind: u8, dims: Dims, payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[dtype, kind, 3]);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

pub fn encode_image(v: &Volume) -> Vec<u8> {
    let mut out = header(DTYPE_F32, KIND_IMAGE, v.dims(), v.voxels().len() * 4);
    for x in v.voxels() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &LabelMask) -> Vec<u8> {
    let kind = match m.kind() {
        MaskKind::Full => KIND_FULL,
        MaskKind::BoundingBox => KIND_BOX,
    };
    let mut out = header(DTYPE_U8, kind, m.dims(), m.labels().len());
    out.extend_from_slice(m.labels());
    out
}

pub fn encode(file: &VolumeFile) -> Vec<u8> {
    match file {
        VolumeFile::Image(v) => encode_image(v),
        VolumeFile::Mask(m) => encode_mask(m),
    }
}

pub fn decode(bytes: &[u8]) -> Result<VolumeFile, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { what: "magic" });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    if bytes.len() < 7 {
        return Err(FormatError::Truncated { what: "header" });
    }
    let (dtype, kind, rank) = (bytes[4], bytes[5], bytes[6]);
    if dtype > DTYPE_U8 {
        return Err(FormatError::UnknownDtype(dtype));
    }
    if kind > KIND_BOX {
        return Err(FormatError::UnknownKind(kind));
    }
    if (kind == KIND_IMAGE) != (dtype == DTYPE_F32) {
        return Err(FormatError::KindMismatch { dtype, kind });
    }
    if rank != 3 {
        return Err(FormatError::BadRank(rank));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { what: "extents" });
    }
    let extents: Vec<u32> = bytes[7..HEADER_LEN]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let elem = if dtype == DTYPE_F32 { 4usize } else { 1 };
    let count = extents
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e as usize))
        .filter(|&n| n > 0)
        .and_then(|n| n.checked_mul(elem).map(|b| (n, b)));
    let Some((count, payload_len)) = count else {
        return Err(FormatError::DimOverflow(extents));
    };
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < payload_len {
        return Err(FormatError::Truncated { what: "payload" });
    }
    if payload.len() > payload_len {
        return Err(FormatError::TrailingBytes(payload.len() - payload_len));
    }
    let dims = [extents[0] as usize, extents[1] as usize, extents[2] as usize];
    if dtype == DTYPE_F32 {
        let voxels: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        debug_assert_eq!(voxels.len(), count);
        Volume::new(dims, voxels)
            .map(VolumeFile::Image)
            .map_err(|e| FormatError::InvalidValue(e.to_string()))
    } else {
        let kind = if kind == KIND_FULL {
            MaskKind::Full
        } else {
            MaskKind::BoundingBox
        };
        LabelMask::new(dims, payload.to_vec(), kind)
            .map(VolumeFile::Mask)
            .map_err(|e| FormatError::InvalidValue(e.to_string()))
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

pub fn write_volume(path: impl AsRef<Path>, file: &VolumeFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(file)).map_err(|e| Error::io(path, e))
}
