//! Binary checkpoints: 4-byte magic, `u16` version, `u32` tensor count,
//! a `(rows, cols)` shape table, then every tensor as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use dmc_core::{Error, Result};
use num_traits::Float;

use crate::ffnn::FfnnParams;
use crate::tensor::{Mat, Tensors};
use crate::vec2seq::Vec2seqParams;

pub const FFNN_MAGIC: &[u8; 4] = b"FFNN";
pub const VEC2SEQ_MAGIC: &[u8; 4] = b"V2SQ";
pub const VERSION: u16 = 1;

pub fn write_tensors<F: Float>(
    mut w: impl Write,
    magic: &[u8; 4],
    tensors: &[&Mat<F>],
) -> Result<()> {
    w.write_all(magic)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        w.write_u32::<LittleEndian>(t.rows as u32)?;
        w.write_u32::<LittleEndian>(t.cols as u32)?;
    }
    for t in tensors {
        for v in &t.data {
            w.write_f32::<LittleEndian>(v.to_f32().unwrap_or(f32::NAN))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors(
    mut r: impl Read,
    magic: &[u8; 4],
    format: &'static str,
) -> Result<Vec<Mat<f32>>> {
    let bad = |reason: String| Error::BadFormat { format, reason };
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(bad(format!("magic {m:?}, expected {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count > 1024 {
        return Err(bad(format!("implausible tensor count {count}")));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        shapes.push((rows, cols));
    }
    let mut out = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| bad(format!("shape {rows}×{cols} overflows")))?;
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|e| bad(format!("truncated tensor data: {e}")))?;
        out.push(Mat { rows, cols, data });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(out)
}

pub fn save_ffnn<F: Float + Send + Sync>(
    path: impl AsRef<Path>,
    params: &FfnnParams<F>,
) -> Result<()> {
    write_tensors(
        BufWriter::new(File::create(path)?),
        FFNN_MAGIC,
        &params.tensors(),
    )
}

pub fn load_ffnn(path: impl AsRef<Path>) -> Result<FfnnParams<f32>> {
    let t = read_tensors(
        BufReader::new(File::open(path)?),
        FFNN_MAGIC,
        "ffnn checkpoint",
    )?;
    FfnnParams::from_tensors(t)
}

pub fn save_vec2seq<F: Float + Send + Sync>(
    path: impl AsRef<Path>,
    params: &Vec2seqParams<F>,
) -> Result<()> {
    write_tensors(
        BufWriter::new(File::create(path)?),
        VEC2SEQ_MAGIC,
        &params.tensors(),
    )
}

pub fn load_vec2seq(path: impl AsRef<Path>) -> Result<Vec2seqParams<f32>> {
    let t = read_tensors(
        BufReader::new(File::open(path)?),
        VEC2SEQ_MAGIC,
        "vec2seq checkpoint",
    )?;
    Vec2seqParams::from_tensors(t)
}
