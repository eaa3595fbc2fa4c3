use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::numerics::{ParamTensors, Tensor};
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::params::RetroParams;

const MAGIC: &[u8; 4] = b"RTWT";
const VERSION: u32 = 1;

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_checkpoint<T: Scalar, W: Write>(params: &RetroParams<T>, mut w: W) -> Result<()> {
    let io = |e: std::io::Error| fmt(format!("writing checkpoint: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    let cfg = serde_json::to_vec(&params.config)?;
    w.write_u32::<LittleEndian>(cfg.len() as u32).map_err(io)?;
    w.write_all(&cfg).map_err(io)?;
    let tensors = params.named_tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32).map_err(io)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v.to_f32().unwrap_or(f32::NAN)).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<RetroParams<T>> {
    let io = |e: std::io::Error| fmt(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(fmt("not a model checkpoint (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg).map_err(io)?;
    let config: ModelConfig = serde_json::from_slice(&cfg)?;
    let mut params = RetroParams::<T>::init(&config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if count != expected.len() {
        return Err(fmt(format!("checkpoint holds {count} tensors, config needs {}", expected.len())));
    }
    for ((name, shape), dst) in expected.into_iter().zip(params.tensors_mut()) {
        let nlen = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf).map_err(io)?;
        if nbuf != name.as_bytes() {
            return Err(fmt(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(&nbuf)
            )));
        }
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut got = Vec::with_capacity(rank);
        for _ in 0..rank {
            got.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
        }
        if got != shape {
            return Err(fmt(format!("tensor {name}: shape {got:?}, expected {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::of(r.read_f32::<LittleEndian>().map_err(io)? as f64));
        }
        *dst = Tensor::new(&shape, data)?;
    }
    if !params.is_finite() {
        return Err(Error::Numeric("checkpoint contains non-finite weights".into()));
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &RetroParams<T>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(params, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<RetroParams<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
