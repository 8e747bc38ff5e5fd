//! Binary checkpoints.
//!
//! Layout (little endian): the magic `UFNRECKP`, a `u32` format version, a
//! `u32`-length JSON header, a `u32` array count, then per array a
//! `u32`-length UTF-8 name, `u64` rows, `u64` cols and `rows·cols` `f64`s.
//! Teacher arrays carry a `teacher.` name prefix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"UFNRECKP";
pub const FORMAT_VERSION: u32 = 1;
pub const TEACHER_PREFIX: &str = "teacher.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub item_count: usize,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub student: ModelParams,
    pub teacher: Option<ModelParams>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.meta)?;
        write_len(&mut w, header.len())?;
        w.write_all(&header)?;
        let teacher = self.teacher.iter().flat_map(|t| t.params());
        let count = self.student.len() + self.teacher.as_ref().map_or(0, |t| t.len());
        write_len(&mut w, count)?;
        for p in self.student.params() {
            write_array(&mut w, &p.name, &p.value)?;
        }
        for p in teacher {
            write_array(&mut w, &format!("{TEACHER_PREFIX}{}", p.name), &p.value)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut header = vec![0u8; read_u32(&mut r)? as usize];
        read_exact(&mut r, &mut header)?;
        let meta: CheckpointMeta = serde_json::from_slice(&header)?;
        let count = read_u32(&mut r)? as usize;
        let mut student = Vec::new();
        let mut teacher = Vec::new();
        for _ in 0..count {
            let (name, value) = read_array(&mut r)?;
            match name.strip_prefix(TEACHER_PREFIX) {
                Some(rest) => teacher.push((rest.to_string(), value)),
                None => student.push((name, value)),
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let student = ModelParams::from_arrays(&meta.encoder, meta.item_count, student)?;
        let teacher = if teacher.is_empty() {
            None
        } else {
            Some(ModelParams::from_arrays(&meta.encoder, meta.item_count, teacher)?)
        };
        Ok(Checkpoint {
            meta,
            student,
            teacher,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format("length exceeds u32".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn write_array<W: Write>(w: &mut W, name: &str, m: &Matrix) -> Result<()> {
    write_len(w, name.len())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::RawIo(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_array<R: Read>(r: &mut R) -> Result<(String, Matrix)> {
    let mut name = vec![0u8; read_u32(r)? as usize];
    read_exact(r, &mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("array name not UTF-8".into()))?;
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| Error::Format(format!("array {name} too large")))?;
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((name, Matrix::from_vec(rows, cols, data)))
}
