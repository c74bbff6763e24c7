//! Binary parameter-set files.
//!
//! Layout (little-endian): magic `FSTP`, version `u32`, entry count `u32`, then per entry
//! the name (`u32` length + UTF-8 bytes), a tag byte (0 aggregatable, 1 norm-local),
//! rank `u32`, `rank` dims as `u32`, and the values as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{put_f32s, put_str, put_u32, OffsetReader};
use crate::error::Result;
use crate::params::{ParamTag, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSTP";
pub const VERSION: u32 = 1;

pub fn write_parameters<T: Scalar, W: Write>(params: &ParameterSet<T>, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, params.len() as u32)?;
    for e in params.iter() {
        put_str(w, &e.name)?;
        w.write_all(&[e.tag.to_byte()])?;
        put_u32(w, e.tensor.rank() as u32)?;
        for &d in e.tensor.shape() {
            put_u32(w, d as u32)?;
        }
        put_f32s(w, e.tensor.data().iter().map(|v| v.as_f64() as f32))?;
    }
    Ok(())
}

pub fn read_parameters<T: Scalar, R: Read>(r: R) -> Result<ParameterSet<T>> {
    let mut r = OffsetReader::new(r);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name = r.string("entry name")?;
        let tag_byte = r.u8("tag")?;
        let tag = ParamTag::from_byte(tag_byte).ok_or_else(|| r.error(format!("invalid tag byte {tag_byte}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let values = r.f32s(len, "tensor payload")?;
        let tensor = Tensor::new(shape, values.into_iter().map(|v| T::of(v as f64)).collect())?;
        params.insert(name, tag, tensor).map_err(|e| r.error(e.to_string()))?;
    }
    r.expect_end()?;
    Ok(params)
}

pub fn save_parameters<T: Scalar>(params: &ParameterSet<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_parameters(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_parameters<T: Scalar>(path: &Path) -> Result<ParameterSet<T>> {
    read_parameters(BufReader::new(File::open(path)?))
}
