//! Slice-bundle files for externally prepared data.
//!
//! Layout (little-endian): magic `FSSB`, version `u32`, case count `u32`; per case the id
//! (`u32` length + UTF-8), slice count `u32`, slice size `S` as `u32`; per slice
//! `4*S*S` `f32` image values (channel-major) followed by `3*S*S` `u8` labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Case, Slice, MODALITIES, REGIONS};
use crate::binio::{put_f32s, put_str, put_u32, OffsetReader};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &[u8; 4] = b"FSSB";
pub const BUNDLE_VERSION: u32 = 1;

pub fn write_slice_bundle<T: Scalar, W: Write>(cases: &[Case<T>], w: &mut W) -> Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    put_u32(w, BUNDLE_VERSION)?;
    put_u32(w, cases.len() as u32)?;
    for case in cases {
        let s = case.slice_size().unwrap_or(0);
        put_str(w, &case.case_id)?;
        put_u32(w, case.slices.len() as u32)?;
        put_u32(w, s as u32)?;
        for slice in &case.slices {
            if slice.image.shape() != [MODALITIES, s, s] || slice.labels.shape() != [REGIONS, s, s] {
                return Err(Error::Validation(format!("case {:?} mixes slice sizes", case.case_id)));
            }
            put_f32s(w, slice.image.data().iter().map(|v| v.as_f64() as f32))?;
            let labels: Vec<u8> = slice.labels.data().iter().map(|&v| u8::from(v > T::zero())).collect();
            w.write_all(&labels)?;
        }
    }
    Ok(())
}

/// Reads and validates a whole bundle; nothing is returned unless every case is well formed.
pub fn read_slice_bundle<T: Scalar, R: Read>(r: R) -> Result<Vec<Case<T>>> {
    let mut r = OffsetReader::new(r);
    r.magic(BUNDLE_MAGIC)?;
    let version = r.u32("version")?;
    if version != BUNDLE_VERSION {
        return Err(r.error(format!("unsupported bundle version {version}")));
    }
    let count = r.u32("case count")? as usize;
    let mut cases = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let case_id = r.string("case id")?;
        let n_slices = r.u32("slice count")? as usize;
        let s = r.u32("slice size")? as usize;
        let plane = s * s;
        let mut slices = Vec::with_capacity(n_slices.min(1 << 16));
        for _ in 0..n_slices {
            let image = r.f32s(MODALITIES * plane, "slice image")?;
            let mut raw = vec![0u8; REGIONS * plane];
            let label_offset = r.offset();
            r.bytes(&mut raw, "slice labels")?;
            if let Some(bad) = raw.iter().position(|&b| b > 1) {
                return Err(Error::Format {
                    offset: label_offset + bad as u64,
                    message: format!("label byte {} is not 0 or 1", raw[bad]),
                });
            }
            slices.push(Slice {
                image: Tensor::new(vec![MODALITIES, s, s], image.into_iter().map(|v| T::of(v as f64)).collect())?,
                labels: Tensor::new(vec![REGIONS, s, s], raw.into_iter().map(|b| T::of(b as f64)).collect())?,
            });
        }
        let case = Case { case_id, slices };
        case.validate()?;
        cases.push(case);
    }
    r.expect_end()?;
    Ok(cases)
}

pub fn save_slice_bundle<T: Scalar>(cases: &[Case<T>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_slice_bundle(cases, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_slice_bundle<T: Scalar>(path: &Path) -> Result<Vec<Case<T>>> {
    read_slice_bundle(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cases, SyntheticConfig};

    fn bundle_bytes() -> (Vec<Case<f32>>, Vec<u8>) {
        let cases = generate_cases::<f32>(&SyntheticConfig::small()).unwrap();
        let mut buf = Vec::new();
        write_slice_bundle(&cases, &mut buf).unwrap();
        (cases, buf)
    }

    #[test]
    fn roundtrip_is_exact() {
        let (cases, buf) = bundle_bytes();
        assert_eq!(read_slice_bundle::<f32, _>(&buf[..]).unwrap(), cases);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.fssb");
        save_slice_bundle(&cases, &path).unwrap();
        assert_eq!(load_slice_bundle::<f32>(&path).unwrap(), cases);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let (_, mut buf) = bundle_bytes();
        buf.truncate(buf.len() / 2);
        assert!(matches!(read_slice_bundle::<f32, _>(&buf[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let (_, mut buf) = bundle_bytes();
        buf[0] = b'X';
        assert!(matches!(read_slice_bundle::<f32, _>(&buf[..]), Err(Error::Format { offset: 0, .. })));
        let (_, mut buf) = bundle_bytes();
        buf[4] = 9;
        assert!(matches!(read_slice_bundle::<f32, _>(&buf[..]), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn nesting_violation_names_case_and_slice() {
        let (mut cases, _) = bundle_bytes();
        let plane = 16 * 16;
        let l = cases[2].slices[0].labels.data_mut();
        l[2 * plane] = 1.0; // ET without TC
        l[plane] = 0.0;
        let mut buf = Vec::new();
        write_slice_bundle(&cases, &mut buf).unwrap();
        let err = read_slice_bundle::<f32, _>(&buf[..]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let msg = err.to_string();
        assert!(msg.contains("case_0002") && msg.contains("slice 0"), "{msg}");
    }
}
