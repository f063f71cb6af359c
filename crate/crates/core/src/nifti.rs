//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reading and writing.
//!
//! Only the header fields needed to place a 3D volume in space are
//! interpreted. Writing always produces little-endian files with a 348-byte
//! header, four zero extension bytes and the voxel payload at offset 352.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Geometry, LabelSchema, LabelVolume, ProbVolume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

const UNITS_MM: u8 = 2;

/// Supported on-disk voxel types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    UInt8,
    Int16,
    UInt16,
    Int32,
    Float32,
    Float64,
}

impl DataType {
    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DataType::UInt8,
            4 => DataType::Int16,
            512 => DataType::UInt16,
            8 => DataType::Int32,
            16 => DataType::Float32,
            64 => DataType::Float64,
            other => return Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            DataType::UInt8 => 2,
            DataType::Int16 => 4,
            DataType::UInt16 => 512,
            DataType::Int32 => 8,
            DataType::Float32 => 16,
            DataType::Float64 => 64,
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            DataType::UInt8 => 1,
            DataType::Int16 | DataType::UInt16 => 2,
            DataType::Int32 | DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DataType::Float32 | DataType::Float64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn i16(self, b: &[u8]) -> i16 {
        match self {
            Endian::Little => LittleEndian::read_i16(b),
            Endian::Big => BigEndian::read_i16(b),
        }
    }

    fn i32(self, b: &[u8]) -> i32 {
        match self {
            Endian::Little => LittleEndian::read_i32(b),
            Endian::Big => BigEndian::read_i32(b),
        }
    }

    fn f32(self, b: &[u8]) -> f32 {
        match self {
            Endian::Little => LittleEndian::read_f32(b),
            Endian::Big => BigEndian::read_f32(b),
        }
    }

    fn f32_at(self, b: &[u8], off: usize) -> f32 {
        self.f32(&b[off..off + 4])
    }
}

/// Decoded voxel payload.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    Integer(Vec<i64>),
    Float(Vec<f64>),
}

/// A decoded NIfTI-1 volume before it is given a domain meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub geometry: Geometry,
    pub datatype: DataType,
    pub data: VoxelData,
}

impl NiftiImage {
    /// Interpret as a label map. Float payloads are accepted when every value
    /// is integral.
    pub fn into_labels(self, schema: LabelSchema) -> Result<LabelVolume> {
        let to_u8 = |v: i64| -> Result<u8> {
            u8::try_from(v).map_err(|_| Error::Schema(format!("label value {v} is not a valid id")))
        };
        let labels = match self.data {
            VoxelData::Integer(v) => v.into_iter().map(to_u8).collect::<Result<Vec<_>>>()?,
            VoxelData::Float(v) => v
                .into_iter()
                .map(|f| {
                    if f.fract() != 0.0 || !f.is_finite() {
                        Err(Error::Type(format!("non-integral label value {f}")))
                    } else {
                        to_u8(f as i64)
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        };
        LabelVolume::new(self.geometry, labels, schema)
    }

    /// Interpret as foreground probabilities. Float values outside `[0, 1]`
    /// are clamped; the clamp count is returned and logged. Integer payloads
    /// must be binary.
    pub fn into_probabilities(self) -> Result<(ProbVolume, usize)> {
        match self.data {
            VoxelData::Float(v) => {
                let (p, clamped) = ProbVolume::clamped(self.geometry, v)?;
                if clamped > 0 {
                    log::warn!("clamped {clamped} probability values into [0, 1]");
                }
                Ok((p, clamped))
            }
            VoxelData::Integer(v) => {
                if let Some(bad) = v.iter().find(|&&x| x != 0 && x != 1) {
                    return Err(Error::Type(format!(
                        "integer volume with value {bad} cannot be read as probabilities"
                    )));
                }
                let values = v.into_iter().map(|x| x as f64).collect();
                Ok((ProbVolume::new(self.geometry, values)?, 0))
            }
        }
    }

    /// Interpret as a binary mask; every voxel must be exactly 0 or 1.
    pub fn into_mask(self) -> Result<BinaryMask> {
        let values = match self.data {
            VoxelData::Integer(v) => v
                .into_iter()
                .map(|x| match x {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(Error::Type(format!("mask contains value {other}"))),
                })
                .collect::<Result<Vec<_>>>()?,
            VoxelData::Float(v) => v
                .into_iter()
                .map(|x| {
                    if x == 0.0 {
                        Ok(false)
                    } else if x == 1.0 {
                        Ok(true)
                    } else {
                        Err(Error::Type(format!("mask contains value {x}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        };
        BinaryMask::new(self.geometry, values)
    }
}

/// A volume to be written.
#[derive(Debug, Clone, Copy)]
pub enum VolumeRef<'a> {
    Labels(&'a LabelVolume),
    Probabilities(&'a ProbVolume),
    Mask(&'a BinaryMask),
}

impl<'a> From<&'a LabelVolume> for VolumeRef<'a> {
    fn from(v: &'a LabelVolume) -> Self {
        VolumeRef::Labels(v)
    }
}

impl<'a> From<&'a ProbVolume> for VolumeRef<'a> {
    fn from(v: &'a ProbVolume) -> Self {
        VolumeRef::Probabilities(v)
    }
}

impl<'a> From<&'a BinaryMask> for VolumeRef<'a> {
    fn from(v: &'a BinaryMask) -> Self {
        VolumeRef::Mask(v)
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Read a `.nii`, `.nii.gz` or `.hdr`/`.img` volume.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    let header = parse_header(&bytes)?;
    if header.pair {
        let img = image_path_for(path).ok_or_else(|| {
            Error::Unsupported("`ni1` header must be read through its .hdr path".into())
        })?;
        let payload = read_maybe_gz(&img)?;
        decode_payload(&header, &payload, header.vox_offset)
    } else {
        decode_payload(&header, &bytes, header.vox_offset)
    }
}

pub fn read_labels(path: impl AsRef<Path>, schema: LabelSchema) -> Result<LabelVolume> {
    read_nifti(path)?.into_labels(schema)
}

pub fn read_probabilities(path: impl AsRef<Path>) -> Result<(ProbVolume, usize)> {
    read_nifti(path)?.into_probabilities()
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    read_nifti(path)?.into_mask()
}

/// Decode an uncompressed single-file NIfTI-1 byte buffer.
pub fn decode_nifti(bytes: &[u8]) -> Result<NiftiImage> {
    let header = parse_header(bytes)?;
    if header.pair {
        return Err(Error::Unsupported("two-file `ni1` data in a single buffer".into()));
    }
    decode_payload(&header, bytes, header.vox_offset)
}

fn image_path_for(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".gz").unwrap_or(name);
    let base = stem.strip_suffix(".hdr")?;
    let plain = path.with_file_name(format!("{base}.img"));
    if plain.exists() {
        return Some(plain);
    }
    Some(path.with_file_name(format!("{base}.img.gz")))
}

struct Header {
    endian: Endian,
    dims: [usize; 3],
    datatype: DataType,
    vox_offset: usize,
    slope: f64,
    inter: f64,
    geometry: Geometry,
    pair: bool,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("header truncated at {} of {HEADER_SIZE} bytes", bytes.len()),
        )));
    }
    let dim0_le = LittleEndian::read_i16(&bytes[offsets::DIM..]);
    let dim0_be = BigEndian::read_i16(&bytes[offsets::DIM..]);
    let endian = if (1..=7).contains(&dim0_le) {
        Endian::Little
    } else if (1..=7).contains(&dim0_be) {
        Endian::Big
    } else {
        return Err(Error::format("dim", format!("dim[0] = {dim0_le} is not in 1..=7")));
    };

    let sizeof_hdr = endian.i32(&bytes[offsets::SIZEOF_HDR..]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::format(
            "sizeof_hdr",
            format!("expected {HEADER_SIZE}, found {sizeof_hdr}"),
        ));
    }
    let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
    let pair = if magic == MAGIC_SINGLE {
        false
    } else if magic == MAGIC_PAIR {
        true
    } else {
        return Err(Error::format(
            "magic",
            format!("expected \"n+1\\0\" or \"ni1\\0\", found {magic:?}"),
        ));
    };

    let ndim = endian.i16(&bytes[offsets::DIM..]) as usize;
    let mut dims = [1usize; 3];
    for k in 1..=ndim {
        let d = endian.i16(&bytes[offsets::DIM + 2 * k..]);
        if d < 1 {
            return Err(Error::format("dim", format!("dim[{k}] = {d} is not positive")));
        }
        if k <= 3 {
            dims[k - 1] = d as usize;
        } else if d != 1 {
            return Err(Error::Unsupported(format!(
                "volumes with dim[{k}] = {d}; only 3D volumes are handled"
            )));
        }
    }

    let datatype = DataType::from_code(endian.i16(&bytes[offsets::DATATYPE..]))?;
    let bitpix = endian.i16(&bytes[offsets::BITPIX..]);
    if bitpix as usize != datatype.byte_size() * 8 {
        return Err(Error::format(
            "bitpix",
            format!("{bitpix} does not match datatype {datatype:?}"),
        ));
    }

    let pixdim: Vec<f64> = (0..4)
        .map(|k| endian.f32_at(bytes, offsets::PIXDIM + 4 * k) as f64)
        .collect();
    let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];

    let vox_offset_f = endian.f32_at(bytes, offsets::VOX_OFFSET);
    if !(vox_offset_f.is_finite() && vox_offset_f >= 0.0) {
        return Err(Error::format("vox_offset", format!("invalid value {vox_offset_f}")));
    }
    let vox_offset = vox_offset_f as usize;
    if !pair && vox_offset < HEADER_SIZE {
        return Err(Error::format(
            "vox_offset",
            format!("{vox_offset} lies inside the header"),
        ));
    }

    let slope = endian.f32_at(bytes, offsets::SCL_SLOPE) as f64;
    let inter = endian.f32_at(bytes, offsets::SCL_INTER) as f64;

    let geometry = Geometry::new(dims, spacing)
        .map_err(|e| Error::format("pixdim", e.to_string()))?;
    let (origin, orientation) = placement(bytes, endian, pixdim[0])?;
    let geometry = geometry
        .with_placement(origin, orientation)
        .map_err(|e| Error::format("sform", e.to_string()))?;

    Ok(Header {
        endian,
        dims,
        datatype,
        vox_offset,
        slope,
        inter,
        geometry,
        pair,
    })
}

/// Origin and direction cosines: sform when present, else qform, else identity.
fn placement(bytes: &[u8], endian: Endian, qfac: f64) -> Result<([f64; 3], [[f64; 3]; 3])> {
    let sform_code = endian.i16(&bytes[offsets::SFORM_CODE..]);
    let qform_code = endian.i16(&bytes[offsets::QFORM_CODE..]);
    if sform_code > 0 {
        let mut m = [[0.0; 3]; 3];
        let mut origin = [0.0; 3];
        for (r, row) in m.iter_mut().enumerate() {
            let base = offsets::SROW_X + 16 * r;
            for (c, v) in row.iter_mut().enumerate() {
                *v = endian.f32_at(bytes, base + 4 * c) as f64;
            }
            origin[r] = endian.f32_at(bytes, base + 12) as f64;
        }
        let orientation = orthonormalize(m).ok_or_else(|| {
            Error::format("sform", "affine columns are degenerate or sheared")
        })?;
        Ok((origin, orientation))
    } else if qform_code > 0 {
        let b = endian.f32_at(bytes, offsets::QUATERN_B) as f64;
        let c = endian.f32_at(bytes, offsets::QUATERN_B + 4) as f64;
        let d = endian.f32_at(bytes, offsets::QUATERN_B + 8) as f64;
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if qfac < 0.0 { -1.0 } else { 1.0 };
        let m = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c) * qfac,
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b) * qfac,
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                (a * a + d * d - b * b - c * c) * qfac,
            ],
        ];
        let origin = [
            endian.f32_at(bytes, offsets::QOFFSET_X) as f64,
            endian.f32_at(bytes, offsets::QOFFSET_X + 4) as f64,
            endian.f32_at(bytes, offsets::QOFFSET_X + 8) as f64,
        ];
        let orientation = orthonormalize(m)
            .ok_or_else(|| Error::format("qform", "quaternion does not give a rotation"))?;
        Ok((origin, orientation))
    } else {
        Ok((
            [0.0; 3],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        ))
    }
}

/// Normalize columns and remove float32 round-off by Gram-Schmidt. Returns
/// `None` for zero columns or shear beyond 1e-3.
fn orthonormalize(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let mut cols: [[f64; 3]; 3] = [[0.0; 3]; 3];
    for (c, col) in cols.iter_mut().enumerate() {
        *col = [m[0][c], m[1][c], m[2][c]];
        let n = norm(col);
        if !(n > 0.0 && n.is_finite()) {
            return None;
        }
        col.iter_mut().for_each(|v| *v /= n);
    }
    for a in 0..3 {
        for b in (a + 1)..3 {
            if dot(&cols[a], &cols[b]).abs() > 1e-3 {
                return None;
            }
        }
    }
    for c in 1..3 {
        for p in 0..c {
            let d = dot(&cols[c], &cols[p]);
            let prev = cols[p];
            cols[c].iter_mut().zip(prev).for_each(|(v, q)| *v -= d * q);
        }
        let n = norm(&cols[c]);
        cols[c].iter_mut().for_each(|v| *v /= n);
    }
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = cols[c][r];
        }
    }
    Some(out)
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn decode_payload(header: &Header, bytes: &[u8], offset: usize) -> Result<NiftiImage> {
    let n = header.dims.iter().product::<usize>();
    let size = header.datatype.byte_size();
    let need = offset + n * size;
    if bytes.len() < need {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("payload truncated: need {need} bytes, file has {}", bytes.len()),
        )));
    }
    let raw = &bytes[offset..need];
    let e = header.endian;
    let chunks = raw.chunks_exact(size);
    let mut data = match header.datatype {
        DataType::UInt8 => VoxelData::Integer(raw.iter().map(|&b| b as i64).collect()),
        DataType::Int16 => VoxelData::Integer(chunks.map(|c| e.i16(c) as i64).collect()),
        DataType::UInt16 => VoxelData::Integer(
            chunks
                .map(|c| match e {
                    Endian::Little => LittleEndian::read_u16(c),
                    Endian::Big => BigEndian::read_u16(c),
                } as i64)
                .collect(),
        ),
        DataType::Int32 => VoxelData::Integer(chunks.map(|c| e.i32(c) as i64).collect()),
        DataType::Float32 => VoxelData::Float(chunks.map(|c| e.f32(c) as f64).collect()),
        DataType::Float64 => VoxelData::Float(
            chunks
                .map(|c| match e {
                    Endian::Little => LittleEndian::read_f64(c),
                    Endian::Big => BigEndian::read_f64(c),
                })
                .collect(),
        ),
    };

    let scaled = header.slope != 0.0
        && header.slope.is_finite()
        && header.inter.is_finite()
        && !(header.slope == 1.0 && header.inter == 0.0);
    if scaled {
        let (slope, inter) = (header.slope, header.inter);
        data = VoxelData::Float(match data {
            VoxelData::Integer(v) => v.into_iter().map(|x| x as f64 * slope + inter).collect(),
            VoxelData::Float(v) => v.into_iter().map(|x| x * slope + inter).collect(),
        });
    }

    Ok(NiftiImage {
        geometry: header.geometry.clone(),
        datatype: header.datatype,
        data,
    })
}

/// Encode a volume as uncompressed NIfTI-1 bytes. Probabilities are stored
/// as float32, labels and masks as uint8.
pub fn encode_nifti<'a>(volume: impl Into<VolumeRef<'a>>) -> Vec<u8> {
    let volume = volume.into();
    let (geometry, datatype) = match volume {
        VolumeRef::Labels(v) => (v.geometry(), DataType::UInt8),
        VolumeRef::Mask(v) => (v.geometry(), DataType::UInt8),
        VolumeRef::Probabilities(v) => (v.geometry(), DataType::Float32),
    };
    let n = geometry.len();
    let mut out = vec![0u8; VOX_OFFSET + n * datatype.byte_size()];
    write_header(&mut out[..HEADER_SIZE], geometry, datatype);
    let payload = &mut out[VOX_OFFSET..];
    match volume {
        VolumeRef::Labels(v) => payload.copy_from_slice(v.labels()),
        VolumeRef::Mask(v) => {
            for (dst, &b) in payload.iter_mut().zip(v.values()) {
                *dst = b as u8;
            }
        }
        VolumeRef::Probabilities(v) => {
            for (dst, &p) in payload.chunks_exact_mut(4).zip(v.values()) {
                LittleEndian::write_f32(dst, p as f32);
            }
        }
    }
    out
}

fn write_header(h: &mut [u8], geometry: &Geometry, datatype: DataType) {
    LittleEndian::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    let dims = geometry.dims();
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for k in 0..3 {
        dim[k + 1] = dims[k] as i16;
    }
    for (k, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[offsets::DIM + 2 * k..], *d);
    }
    LittleEndian::write_i16(&mut h[offsets::DATATYPE..], datatype.code());
    LittleEndian::write_i16(&mut h[offsets::BITPIX..], (datatype.byte_size() * 8) as i16);

    let spacing = geometry.spacing();
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (k, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[offsets::PIXDIM + 4 * k..], *p as f32);
    }
    LittleEndian::write_f32(&mut h[offsets::VOX_OFFSET..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[offsets::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[offsets::SCL_INTER..], 0.0);
    h[offsets::XYZT_UNITS] = UNITS_MM;
    let descrip = b"hepeval";
    h[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);

    LittleEndian::write_i16(&mut h[offsets::QFORM_CODE..], 0);
    LittleEndian::write_i16(&mut h[offsets::SFORM_CODE..], 1);
    let r = geometry.orientation();
    let origin = geometry.origin();
    for row in 0..3 {
        let base = offsets::SROW_X + 16 * row;
        for col in 0..3 {
            LittleEndian::write_f32(
                &mut h[base + 4 * col..],
                (r[row][col] * spacing[col]) as f32,
            );
        }
        LittleEndian::write_f32(&mut h[base + 12..], origin[row] as f32);
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);
}

/// Write a volume; gzip is applied when the path ends in `.gz`.
pub fn write_nifti<'a>(volume: impl Into<VolumeRef<'a>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(volume);
    if is_gz(path) {
        let file = fs::File::create(path)?;
        let mut enc = GzEncoder::new(io::BufWriter::new(file), Compression::fast());
        enc.write_all(&bytes)?;
        enc.finish()?.flush()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}
