//! Single-file NIfTI-1 (`.nii`, optionally `.nii.gz`) and a raw
//! JSON-plus-blob format.
//!
//! NIfTI stores `x` fastest; our grids store the sagittal axis fastest, so
//! `dim[1..=3]` maps to `(sagittal, coronal, axial)`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::Schema;
use crate::volume::{voxel_count, Grid, LabelVolume, Modality, MultiModalRecord, Shape3, Volume, VolumeError};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("bad magic {0:?}; only single-file NIfTI-1 is supported")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("file truncated: need {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("invalid dimensions {0:?}")]
    DimensionOverflow([i16; 8]),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("value {value} at voxel {index} cannot be stored as {datatype:?}")]
    ValueOutOfRange { value: f64, index: usize, datatype: Datatype },
    #[error("gzip support not compiled in (enable the `gzip` feature)")]
    GzipDisabled,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("raw sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    U8,
    I16,
    F32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            c => Err(NiftiError::UnsupportedDatatype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
        }
    }

    fn check(self, v: f64, index: usize) -> Result<(), NiftiError> {
        let ok = match self {
            Datatype::U8 => v.fract() == 0.0 && (0.0..=255.0).contains(&v),
            Datatype::I16 => v.fract() == 0.0 && (-32768.0..=32767.0).contains(&v),
            Datatype::F32 => v.is_finite() && (v as f32).is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(NiftiError::ValueOutOfRange { value: v, index, datatype: self })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// The fields of the 348-byte header this crate interprets. Orientation
/// fields are carried through unchanged but never applied.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub endian: Endian,
}

struct Reader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        self.buf[at..at + N].try_into().unwrap()
    }
    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.bytes(at)),
            Endian::Big => i16::from_be_bytes(self.bytes(at)),
        }
    }
    fn i32(&self, at: usize) -> i32 {
        match self.endian {
            Endian::Little => i32::from_le_bytes(self.bytes(at)),
            Endian::Big => i32::from_be_bytes(self.bytes(at)),
        }
    }
    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.bytes(at)),
            Endian::Big => f32::from_be_bytes(self.bytes(at)),
        }
    }
}

impl NiftiHeader {
    pub fn for_shape(shape: Shape3, spacing: [f64; 3], datatype: Datatype) -> Self {
        let [d, h, w] = shape;
        let mut srow = [[0.0f32; 4]; 3];
        for (a, row) in srow.iter_mut().enumerate() {
            row[a] = spacing[2 - a] as f32;
        }
        Self {
            dim: [3, w as i16, h as i16, d as i16, 1, 1, 1, 1],
            datatype,
            pixdim: [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 6],
            srow,
            magic: MAGIC_SINGLE,
            endian: Endian::Little,
        }
    }

    pub fn parse(buf: &[u8]) -> Result<Self, NiftiError> {
        if buf.len() < HEADER_SIZE {
            return Err(NiftiError::TruncatedFile { expected: HEADER_SIZE, found: buf.len() });
        }
        let dim0_le = i16::from_le_bytes([buf[40], buf[41]]);
        let dim0_be = i16::from_be_bytes([buf[40], buf[41]]);
        let endian = if (1..=7).contains(&dim0_le) {
            Endian::Little
        } else if (1..=7).contains(&dim0_be) {
            Endian::Big
        } else {
            return Err(NiftiError::BadHeader(format!("dim[0] = {dim0_le} is not in 1..=7")));
        };
        let r = Reader { buf, endian };
        let sizeof_hdr = r.i32(0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(NiftiError::BadHeader(format!("sizeof_hdr = {sizeof_hdr}")));
        }
        let magic: [u8; 4] = r.bytes(344);
        if magic != MAGIC_SINGLE {
            return Err(NiftiError::BadMagic(magic));
        }
        let dim: [i16; 8] = std::array::from_fn(|i| r.i16(40 + 2 * i));
        let datatype = Datatype::from_code(r.i16(70))?;
        let bitpix = r.i16(72);
        if bitpix as usize != 8 * datatype.size() {
            return Err(NiftiError::BadHeader(format!("bitpix {bitpix} does not match datatype")));
        }
        let pixdim: [f32; 8] = std::array::from_fn(|i| r.f32(76 + 4 * i));
        let vox_offset = r.f32(108);
        if !(vox_offset >= HEADER_SIZE as f32 && vox_offset < (1u64 << 31) as f32) || vox_offset.fract() != 0.0 {
            return Err(NiftiError::BadHeader(format!("vox_offset {vox_offset}")));
        }
        Ok(Self {
            dim,
            datatype,
            pixdim,
            vox_offset,
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            qform_code: r.i16(252),
            sform_code: r.i16(254),
            quatern: std::array::from_fn(|i| r.f32(256 + 4 * i)),
            srow: std::array::from_fn(|row| std::array::from_fn(|c| r.f32(280 + 16 * row + 4 * c))),
            magic,
            endian,
        })
    }

    /// Grid shape `(axial, coronal, sagittal)`; dimensions past the third must be 1.
    pub fn shape(&self) -> Result<Shape3, NiftiError> {
        let n = self.dim[0] as usize;
        let bad = || NiftiError::DimensionOverflow(self.dim);
        let mut extent = [1usize; 7];
        for (i, e) in extent.iter_mut().enumerate().take(n) {
            let d = self.dim[i + 1];
            if d < 1 {
                return Err(bad());
            }
            *e = d as usize;
        }
        if extent[3..].iter().any(|&e| e != 1) {
            return Err(bad());
        }
        Ok([extent[2], extent[1], extent[0]])
    }

    pub fn spacing(&self) -> [f64; 3] {
        let n = self.dim[0].clamp(0, 3) as usize;
        let s = |i: usize| {
            let v = self.pixdim[i].abs() as f64;
            if i <= n && v > 0.0 && v.is_finite() {
                v
            } else {
                1.0
            }
        };
        [s(3), s(2), s(1)]
    }

    pub fn data_bytes(&self) -> Result<usize, NiftiError> {
        voxel_count(self.shape()?).checked_mul(self.datatype.size()).ok_or(NiftiError::DimensionOverflow(self.dim))
    }

    /// Little-endian header plus the 4-byte extension flag.
    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; VOX_OFFSET];
        let mut put = |at: usize, bytes: &[u8]| b[at..at + bytes.len()].copy_from_slice(bytes);
        put(0, &(HEADER_SIZE as i32).to_le_bytes());
        for (i, d) in self.dim.iter().enumerate() {
            put(40 + 2 * i, &d.to_le_bytes());
        }
        put(70, &self.datatype.code().to_le_bytes());
        put(72, &(8 * self.datatype.size() as i16).to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            put(76 + 4 * i, &p.to_le_bytes());
        }
        put(108, &self.vox_offset.to_le_bytes());
        put(112, &self.scl_slope.to_le_bytes());
        put(116, &self.scl_inter.to_le_bytes());
        put(123, &[10]); // xyzt_units: mm, s
        put(252, &self.qform_code.to_le_bytes());
        put(254, &self.sform_code.to_le_bytes());
        for (i, q) in self.quatern.iter().enumerate() {
            put(256 + 4 * i, &q.to_le_bytes());
        }
        for (row, vals) in self.srow.iter().enumerate() {
            for (c, v) in vals.iter().enumerate() {
                put(280 + 16 * row + 4 * c, &v.to_le_bytes());
            }
        }
        put(344, &self.magic);
        b
    }
}

/// A decoded image: header plus scaled voxel values in grid order.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

/// Decodes an in-memory `.nii`. Allocation never exceeds the declared data
/// size, and that size is checked against the buffer first.
pub fn decode(buf: &[u8]) -> Result<NiftiImage, NiftiError> {
    if buf.len() >= 348 && buf[344..348] == MAGIC_PAIR {
        return Err(NiftiError::BadMagic(MAGIC_PAIR));
    }
    let header = NiftiHeader::parse(buf)?;
    let shape = header.shape()?;
    let offset = header.vox_offset as usize;
    let expected = header.data_bytes()?.checked_add(offset).ok_or(NiftiError::DimensionOverflow(header.dim))?;
    if buf.len() < expected {
        return Err(NiftiError::TruncatedFile { expected, found: buf.len() });
    }
    let raw = &buf[offset..expected];
    let big = header.endian == Endian::Big;
    let mut data: Vec<f64> = match header.datatype {
        Datatype::U8 => raw.iter().map(|&v| v as f64).collect(),
        Datatype::I16 => raw
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if big { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f64
            })
            .collect(),
        Datatype::F32 => raw
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                (if big { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }) as f64
            })
            .collect(),
    };
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope, inter) != (1.0, 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage { spacing: header.spacing(), shape, header, data })
}

/// Encodes values in grid order as a single-file NIfTI-1 byte stream.
pub fn encode(shape: Shape3, spacing: [f64; 3], data: &[f64], datatype: Datatype) -> Result<Vec<u8>, NiftiError> {
    if shape.iter().any(|&d| d > i16::MAX as usize) {
        return Err(NiftiError::DimensionOverflow([3, shape[2] as i16, shape[1] as i16, shape[0] as i16, 1, 1, 1, 1]));
    }
    let header = NiftiHeader::for_shape(shape, spacing, datatype);
    let mut out = header.encode();
    out.reserve(data.len() * datatype.size());
    for (i, &v) in data.iter().enumerate() {
        datatype.check(v, i)?;
        match datatype {
            Datatype::U8 => out.push(v as u8),
            Datatype::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Datatype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(out)
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let bytes = fs::read(path)?;
    if !is_gz(path) {
        return Ok(bytes);
    }
    #[cfg(feature = "gzip")]
    {
        use std::io::Read;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    }
    #[cfg(not(feature = "gzip"))]
    Err(NiftiError::GzipDisabled)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    if !is_gz(path) {
        return Ok(fs::write(path, bytes)?);
    }
    #[cfg(feature = "gzip")]
    {
        use std::io::Write;
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(bytes)?;
        Ok(fs::write(path, enc.finish()?)?)
    }
    #[cfg(not(feature = "gzip"))]
    Err(NiftiError::GzipDisabled)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage, NiftiError> {
    decode(&read_bytes(path.as_ref())?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, NiftiError> {
    let img = read_nifti(path)?;
    Ok(Volume::new(img.shape, img.data)?.with_spacing(img.spacing))
}

/// Reads a label map; every value must be a valid label of `schema`.
pub fn read_label_volume(path: impl AsRef<Path>, schema: Schema) -> Result<LabelVolume, NiftiError> {
    let img = read_nifti(path)?;
    let mut labels = Vec::with_capacity(img.data.len());
    for (index, &v) in img.data.iter().enumerate() {
        if !(v.fract() == 0.0 && (0.0..=255.0).contains(&v)) {
            return Err(NiftiError::ValueOutOfRange { value: v, index, datatype: Datatype::U8 });
        }
        labels.push(v as u8);
    }
    Ok(LabelVolume::new(Grid::new(img.shape, labels)?, schema)?.with_spacing(img.spacing))
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>, datatype: Datatype) -> Result<(), NiftiError> {
    write_bytes(path.as_ref(), &encode(vol.shape(), vol.spacing(), vol.data(), datatype)?)
}

pub fn write_label_volume(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    let data: Vec<f64> = labels.data().iter().map(|&v| v as f64).collect();
    write_bytes(path.as_ref(), &encode(labels.shape(), labels.spacing(), &data, Datatype::U8)?)
}

/// Path of one channel (`<id>_<modality>.nii`) or of the labels (`<id>_seg.nii`).
pub fn record_path(dir: &Path, record_id: &str, part: Option<Modality>) -> PathBuf {
    let suffix = part.map_or("seg", Modality::name);
    dir.join(format!("{record_id}_{suffix}.nii"))
}

/// Writes the four channels as float32 and the labels, if any, as uint8.
pub fn write_record(dir: &Path, record: &MultiModalRecord) -> Result<(), NiftiError> {
    for m in Modality::ALL {
        write_volume(record.channel(m), record_path(dir, &record.record_id, Some(m)), Datatype::F32)?;
    }
    if let Some(labels) = &record.labels {
        write_label_volume(labels, record_path(dir, &record.record_id, None))?;
    }
    Ok(())
}

/// Reads a record written by [`write_record`]; labels are optional.
pub fn read_record(dir: &Path, record_id: &str, schema: Schema) -> Result<MultiModalRecord, NiftiError> {
    let [t1, t2, t1c, flair] = Modality::ALL.map(|m| read_volume(record_path(dir, record_id, Some(m))));
    let seg = record_path(dir, record_id, None);
    let labels = if seg.exists() { Some(read_label_volume(seg, schema)?) } else { None };
    Ok(MultiModalRecord::new(record_id, t1?, t2?, t1c?, flair?, labels)?)
}

/// Record ids in `dir`, found by their `_t1.nii` channel, sorted.
pub fn list_records(dir: &Path) -> Result<Vec<String>, NiftiError> {
    let mut ids: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_t1.nii")).map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}

/// Sidecar of the raw format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub datatype: Datatype,
}

/// Writes `<stem>.json` and `<stem>.raw` (little-endian voxels in grid order).
pub fn write_raw(vol: &Volume, stem: impl AsRef<Path>, datatype: Datatype) -> Result<(), NiftiError> {
    let stem = stem.as_ref();
    let sidecar = RawSidecar { shape: vol.shape(), spacing: vol.spacing(), datatype };
    let bytes = encode(vol.shape(), vol.spacing(), vol.data(), datatype)?;
    fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    fs::write(stem.with_extension("raw"), &bytes[VOX_OFFSET..])?;
    Ok(())
}

pub fn read_raw(stem: impl AsRef<Path>) -> Result<Volume, NiftiError> {
    let stem = stem.as_ref();
    let sidecar: RawSidecar = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    let blob = fs::read(stem.with_extension("raw"))?;
    let mut buf = NiftiHeader::for_shape(sidecar.shape, sidecar.spacing, sidecar.datatype).encode();
    buf.extend_from_slice(&blob);
    let img = decode(&buf)?;
    Ok(Volume::new(img.shape, img.data)?.with_spacing(sidecar.spacing))
}
