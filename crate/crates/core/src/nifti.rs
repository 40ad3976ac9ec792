//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Reads little- or big-endian headers with datatypes uint8, int16, int32,
//! float32 and float64. Writes little-endian with the affine in the sform.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Affine, Intent, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const INTENT_LABEL: i16 = 1002;
const CHANNELS_TAG: &[u8] = b"channels";

/// On-disk voxel type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
            DataType::F64 => 64,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            8 => DataType::I32,
            16 => DataType::F32,
            64 => DataType::F64,
            other => return Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::I32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }

    /// Default storage for a volume intent.
    pub fn for_intent(intent: Intent) -> Self {
        match intent {
            Intent::Label => DataType::I32,
            _ => DataType::F32,
        }
    }
}

fn is_gz_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(file).read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    decode(&bytes)
}

/// Decode an in-memory `.nii` image.
pub fn decode(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!("file too short for a header ({} bytes)", bytes.len())));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<BigEndian>(bytes)
    } else {
        Err(Error::Format("sizeof_hdr is not 348".into()))
    }
}

fn decode_with<B: ByteOrder>(h: &[u8]) -> Result<Volume> {
    if &h[344..348] != b"n+1\0" {
        return Err(Error::Format("missing n+1 magic (only single-file NIfTI-1 is supported)".into()));
    }
    let i16_at = |o: usize| B::read_i16(&h[o..o + 2]);
    let f32_at = |o: usize| B::read_f32(&h[o..o + 4]) as f64;

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim}")));
    }
    let mut dim = [1usize; 7];
    for (k, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = i16_at(42 + 2 * k);
        if v < 1 {
            return Err(Error::Format(format!("dim[{}] = {v}", k + 1)));
        }
        *d = v as usize;
    }
    if dim[4..].iter().any(|&d| d > 1) {
        return Err(Error::Unsupported(format!("{ndim}-dimensional image")));
    }
    let dtype = DataType::from_code(i16_at(70))?;

    let mut pixdim = [0.0f64; 8];
    for (k, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(76 + 4 * k);
    }
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f64) {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;

    let slope = f32_at(112);
    let inter = f32_at(116);
    let (slope, inter) = if slope != 0.0 && slope.is_finite() {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    } else {
        (1.0, 0.0)
    };

    let qform_code = i16_at(252);
    let sform_code = i16_at(254);
    let affine = if sform_code > 0 {
        let mut a = crate::volume::identity_affine();
        for r in 0..3 {
            for c in 0..4 {
                a[r][c] = f32_at(280 + 16 * r + 4 * c);
            }
        }
        a
    } else if qform_code > 0 {
        qform_affine(
            [f32_at(256), f32_at(260), f32_at(264)],
            [f32_at(268), f32_at(272), f32_at(276)],
            &pixdim,
        )
    } else {
        crate::volume::scaled_affine(
            [pixdim[1].abs().max(1e-6), pixdim[2].abs().max(1e-6), pixdim[3].abs().max(1e-6)],
            [0.0; 3],
        )
    };

    let mut spacing = [1.0; 3];
    for (ax, s) in spacing.iter_mut().enumerate() {
        let p = pixdim[ax + 1];
        *s = if p > 0.0 && p.is_finite() {
            p
        } else {
            let n = (0..3).map(|r| affine[r][ax] * affine[r][ax]).sum::<f64>().sqrt();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        };
    }

    let intent_code = i16_at(68);
    let intent_name = &h[328..344];
    let mut intent = if intent_code == INTENT_LABEL {
        Intent::Label
    } else if intent_name.starts_with(CHANNELS_TAG) {
        Intent::VectorChannel
    } else {
        Intent::Intensity
    };

    let dims = [dim[0], dim[1], dim[2]];
    let channels = dim[3];
    let n = dims.iter().product::<usize>() * channels;
    let need = vox_offset + n * dtype.size();
    if h.len() < need {
        return Err(Error::Format(format!("truncated data: need {need} bytes, have {}", h.len())));
    }
    let raw = &h[vox_offset..need];
    let data: Vec<f64> = match dtype {
        DataType::U8 => raw.iter().map(|&b| b as f64).collect(),
        DataType::I16 => raw.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DataType::I32 => raw.chunks_exact(4).map(|c| B::read_i32(c) as f64).collect(),
        DataType::F32 => raw.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        DataType::F64 => raw.chunks_exact(8).map(|c| B::read_f64(c)).collect(),
    };
    let data = if slope != 1.0 || inter != 0.0 {
        data.into_iter().map(|v| v * slope + inter).collect()
    } else {
        data
    };
    if intent == Intent::Label && data.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        intent = Intent::Intensity;
    }
    Volume::build(dims, channels, ndim >= 4, spacing, affine, intent, data)
}

fn qform_affine(q: [f64; 3], offset: [f64; 3], pixdim: &[f64; 8]) -> Affine {
    let [b, c, d] = q;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let s = [
        if pixdim[1] > 0.0 { pixdim[1] } else { 1.0 },
        if pixdim[2] > 0.0 { pixdim[2] } else { 1.0 },
        (if pixdim[3] > 0.0 { pixdim[3] } else { 1.0 }) * qfac,
    ];
    let mut out = crate::volume::identity_affine();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * s[j];
        }
        out[i][3] = offset[i];
    }
    out
}

/// Write with the default datatype for the volume's intent.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti_as(v, path, DataType::for_intent(v.intent()))
}

pub fn write_nifti_as(v: &Volume, path: impl AsRef<Path>, dtype: DataType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v, dtype)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = BufWriter::new(file);
    let res = if is_gz_path(path) {
        let mut gz = GzEncoder::new(w, Compression::fast());
        gz.write_all(&bytes).and_then(|_| gz.finish()).and_then(|mut w| w.flush())
    } else {
        let mut w = w;
        w.write_all(&bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Encode a volume as an uncompressed little-endian `.nii` byte image.
pub fn encode(v: &Volume, dtype: DataType) -> Result<Vec<u8>> {
    let dims = v.dims();
    if dims.iter().chain(std::iter::once(&v.channels())).any(|&d| d > i16::MAX as usize) {
        return Err(Error::Unsupported("dimension exceeds NIfTI-1 range".into()));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let ndim: i16 = if v.is_4d() { 4 } else { 3 };
    LittleEndian::write_i16(&mut h[40..42], ndim);
    for (k, d) in [dims[0], dims[1], dims[2], v.channels(), 1, 1, 1].iter().enumerate() {
        LittleEndian::write_i16(&mut h[42 + 2 * k..44 + 2 * k], *d as i16);
    }
    let intent_code = if v.intent() == Intent::Label { INTENT_LABEL } else { 0 };
    LittleEndian::write_i16(&mut h[68..70], intent_code);
    LittleEndian::write_i16(&mut h[70..72], dtype.code());
    LittleEndian::write_i16(&mut h[72..74], (dtype.size() * 8) as i16);
    let sp = v.spacing();
    let pixdim = [1.0, sp[0], sp[1], sp[2], 1.0, 1.0, 1.0, 1.0];
    for (k, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * k..80 + 4 * k], *p as f32);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    h[123] = 2; // mm
    LittleEndian::write_i16(&mut h[254..256], 2);
    let a = v.affine();
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c], a[r][c] as f32);
        }
    }
    if v.intent() == Intent::VectorChannel {
        h[328..328 + CHANNELS_TAG.len()].copy_from_slice(CHANNELS_TAG);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let data = v.data();
    h.reserve(data.len() * dtype.size());
    let check_int = |x: f64, lo: f64, hi: f64| -> Result<f64> {
        let r = x.round();
        if !(lo..=hi).contains(&r) {
            return Err(Error::Unsupported(format!("value {x} does not fit the integer datatype")));
        }
        Ok(r)
    };
    match dtype {
        DataType::U8 => {
            for &x in data {
                h.push(check_int(x, 0.0, 255.0)? as u8);
            }
        }
        DataType::I16 => {
            let mut buf = [0u8; 2];
            for &x in data {
                LittleEndian::write_i16(&mut buf, check_int(x, i16::MIN as f64, i16::MAX as f64)? as i16);
                h.extend_from_slice(&buf);
            }
        }
        DataType::I32 => {
            let mut buf = [0u8; 4];
            for &x in data {
                LittleEndian::write_i32(&mut buf, check_int(x, i32::MIN as f64, i32::MAX as f64)? as i32);
                h.extend_from_slice(&buf);
            }
        }
        DataType::F32 => {
            let mut buf = [0u8; 4];
            for &x in data {
                LittleEndian::write_f32(&mut buf, x as f32);
                h.extend_from_slice(&buf);
            }
        }
        DataType::F64 => {
            let mut buf = [0u8; 8];
            for &x in data {
                LittleEndian::write_f64(&mut buf, x);
                h.extend_from_slice(&buf);
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{identity_affine, scaled_affine};

    fn tiny() -> Volume {
        let data = (0..8).map(|i| i as f64 * 0.5 - 1.25).collect();
        Volume::new([2, 2, 2], 1, [1.0; 3], identity_affine(), Intent::Intensity, data).unwrap()
    }

    #[test]
    fn float32_round_trip() {
        let v = tiny();
        let back = decode(&encode(&v, DataType::F32).unwrap()).unwrap();
        assert_eq!(back.dims(), [2, 2, 2]);
        assert_eq!(back.data(), v.data());
        assert!(!back.is_4d());
    }

    #[test]
    fn scl_slope_and_inter_applied() {
        let v = Volume::new([1, 1, 1], 1, [1.0; 3], identity_affine(), Intent::Intensity, vec![3.0]).unwrap();
        let mut bytes = encode(&v, DataType::I16).unwrap();
        LittleEndian::write_f32(&mut bytes[112..116], 2.0);
        LittleEndian::write_f32(&mut bytes[116..120], 1.0);
        assert_eq!(decode(&bytes).unwrap().data(), &[7.0]);
    }

    #[test]
    fn bad_sizeof_hdr_rejected() {
        let mut bytes = encode(&tiny(), DataType::F32).unwrap();
        bytes[0..4].copy_from_slice(&[1, 2, 3, 4]);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_datatype_and_rank() {
        let mut bytes = encode(&tiny(), DataType::F32).unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], 128);
        assert!(matches!(decode(&bytes), Err(Error::Unsupported(_))));

        let mut bytes = encode(&tiny(), DataType::F32).unwrap();
        LittleEndian::write_i16(&mut bytes[40..42], 5);
        LittleEndian::write_i16(&mut bytes[50..52], 2);
        assert!(matches!(decode(&bytes), Err(Error::Unsupported(_))));
    }

    #[test]
    fn truncated_data_rejected() {
        let bytes = encode(&tiny(), DataType::F32).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn big_endian_header_is_read() {
        let v = Volume::new([1, 1, 2], 1, [1.0; 3], identity_affine(), Intent::Intensity, vec![1.5, -2.0]).unwrap();
        let le = encode(&v, DataType::F32).unwrap();
        let mut be = le.clone();
        let swap = |b: &mut [u8], off: usize, len: usize| b[off..off + len].reverse();
        swap(&mut be, 0, 4);
        for k in 0..8 {
            swap(&mut be, 40 + 2 * k, 2);
        }
        for off in [68, 70, 72, 252, 254] {
            swap(&mut be, off, 2);
        }
        for k in 0..8 {
            swap(&mut be, 76 + 4 * k, 4);
        }
        for off in [108, 112, 116] {
            swap(&mut be, off, 4);
        }
        for k in 0..12 {
            swap(&mut be, 280 + 4 * k, 4);
        }
        swap(&mut be, 352, 4);
        swap(&mut be, 356, 4);
        assert_eq!(decode(&be).unwrap().data(), v.data());
    }

    #[test]
    fn qform_used_when_sform_absent() {
        let v = Volume::new([1, 1, 1], 1, [2.0, 2.0, 2.0], scaled_affine([2.0; 3], [0.0; 3]), Intent::Intensity, vec![0.0])
            .unwrap();
        let mut bytes = encode(&v, DataType::F32).unwrap();
        LittleEndian::write_i16(&mut bytes[254..256], 0);
        LittleEndian::write_i16(&mut bytes[252..254], 1);
        // identity rotation, offset (10, 20, 30)
        LittleEndian::write_f32(&mut bytes[268..272], 10.0);
        LittleEndian::write_f32(&mut bytes[272..276], 20.0);
        LittleEndian::write_f32(&mut bytes[276..280], 30.0);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.affine()[0], [2.0, 0.0, 0.0, 10.0]);
        assert_eq!(back.affine()[2], [0.0, 0.0, 2.0, 30.0]);
    }

    #[test]
    fn labels_round_trip_exactly() {
        let v = Volume::new([3, 1, 1], 1, [1.0; 3], identity_affine(), Intent::Label, vec![0.0, 13.0, 70000.0]).unwrap();
        let back = decode(&encode(&v, DataType::I32).unwrap()).unwrap();
        assert_eq!(back.intent(), Intent::Label);
        assert_eq!(back.data(), v.data());
        assert!(encode(&v, DataType::U8).is_err());
    }
}
