//! Binary checkpoints: `USFG` magic, `u32` format version, `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, a `u8` rank,
//! `u32` extents and the little-endian `f32` payload.
//!
//! Tensors are `arch` (the descriptor codes), the network parameters under
//! their canonical names and, when optimizer state is included,
//! `adam.t`, `adam.m.<name>` and `adam.v.<name>`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use super::adam::AdamState;
use super::arch::Architecture;
use super::network::NetworkParams;
use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"USFG";
pub const FORMAT_VERSION: u32 = 1;

/// Step counters are stored as `f32`, exact up to this bound.
const MAX_STEP: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    /// Moments and step counter; hyperparameters are not stored and come
    /// back as defaults.
    pub adam: Option<AdamState<f32>>,
}

fn records<'a>(
    params: &'a NetworkParams<f32>,
    adam: Option<&'a AdamState<f32>>,
    arch_codes: &'a Tensor<f32>,
    step: &'a Tensor<f32>,
) -> Vec<(String, &'a Tensor<f32>)> {
    let mut out = vec![("arch".to_string(), arch_codes)];
    let named = params.tensors();
    out.extend(named.iter().map(|(n, t)| (n.clone(), *t)));
    if let Some(a) = adam {
        out.push(("adam.t".into(), step));
        out.extend(named.iter().zip(&a.m).map(|((n, _), m)| (format!("adam.m.{n}"), m)));
        out.extend(named.iter().zip(&a.v).map(|((n, _), v)| (format!("adam.v.{n}"), v)));
    }
    out
}

fn write_checkpoint<W: Write>(
    w: &mut W,
    params: &NetworkParams<f32>,
    adam: Option<&AdamState<f32>>,
) -> Result<io::Result<()>> {
    params.validate()?;
    if let Some(a) = adam {
        if a.t >= MAX_STEP {
            return Err(Error::argument(format!("step counter {} too large to store", a.t)));
        }
        if a.m.len() != params.tensors().len() || a.v.len() != a.m.len() {
            return Err(Error::argument("optimizer state does not match the parameters"));
        }
    }
    let codes: Vec<f32> = params.arch.to_codes().iter().map(|&c| c as f32).collect();
    let arch_codes = Tensor::from_vec(&[codes.len()], codes)?;
    let step = Tensor::from_vec(&[1], vec![adam.map_or(0, |a| a.t) as f32])?;
    let recs = records(params, adam, &arch_codes, &step);

    Ok((|| {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(recs.len() as u32).to_le_bytes())?;
        let mut buf = Vec::new();
        for (name, t) in &recs {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.dims().len() as u8])?;
            for &d in t.dims() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for chunk in t.data().chunks(1 << 16) {
                buf.clear();
                buf.extend(chunk.iter().flat_map(|v| v.to_le_bytes()));
                w.write_all(&buf)?;
            }
        }
        w.flush()
    })())
}

pub fn encode_checkpoint(params: &NetworkParams<f32>, adam: Option<&AdamState<f32>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, params, adam)?.expect("writing to memory cannot fail");
    Ok(out)
}

/// Writes through a temporary file and renames, so readers never see a
/// partial checkpoint.
pub fn save_checkpoint(
    params: &NetworkParams<f32>,
    adam: Option<&AdamState<f32>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, params, adam)?.map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(checkpoint_error(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn checkpoint_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset,
        message: message.into(),
    }
}

struct Record {
    offset: usize,
    dims: Vec<usize>,
    data: Vec<f32>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(checkpoint_error(0, "bad magic, expected USFG"));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(checkpoint_error(4, format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut recs: HashMap<String, Record> = HashMap::new();
    for _ in 0..count {
        let offset = r.pos;
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| checkpoint_error(offset + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        if !(1..=4).contains(&rank) {
            return Err(checkpoint_error(r.pos - 1, format!("{name}: rank {rank} unsupported")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("extent")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| checkpoint_error(offset, format!("{name}: extents overflow")))?;
        let payload = r.take(n, &format!("payload of {name}"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if recs.insert(name.clone(), Record { offset, dims, data }).is_some() {
            return Err(checkpoint_error(offset, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(checkpoint_error(r.pos, "trailing bytes after the last tensor"));
    }

    let end = bytes.len();
    let arch_rec = recs
        .remove("arch")
        .ok_or_else(|| checkpoint_error(end, "missing arch tensor"))?;
    let codes = arch_rec
        .data
        .iter()
        .map(|&v| (v >= 0.0 && v.fract() == 0.0).then_some(v as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| checkpoint_error(arch_rec.offset, "arch codes must be non-negative integers"))?;
    let arch = Architecture::from_codes(&codes)
        .map_err(|e| checkpoint_error(arch_rec.offset, e.to_string()))?;

    let mut params = NetworkParams::<f32>::zeros(&arch)?;
    let names = params.tensor_names();
    let fill = |recs: &mut HashMap<String, Record>, name: &str, t: &mut Tensor<f32>| -> Result<()> {
        let rec = recs
            .remove(name)
            .ok_or_else(|| checkpoint_error(end, format!("missing tensor {name}")))?;
        if rec.dims != t.dims() {
            return Err(checkpoint_error(
                rec.offset,
                format!("{name} has extents {:?}, architecture needs {:?}", rec.dims, t.dims()),
            ));
        }
        if let Some(i) = rec.data.iter().position(|v| !v.is_finite()) {
            return Err(checkpoint_error(rec.offset, format!("{name}[{i}] is not finite")));
        }
        t.data_mut().copy_from_slice(&rec.data);
        Ok(())
    };
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        fill(&mut recs, name, t)?;
    }

    let adam = match recs.remove("adam.t") {
        None => None,
        Some(rec) => {
            let t = match rec.data.as_slice() {
                [v] if *v >= 0.0 && v.fract() == 0.0 => *v as u64,
                _ => return Err(checkpoint_error(rec.offset, "adam.t must be one non-negative integer")),
            };
            let mut state = AdamState::new(&params);
            state.t = t;
            for (name, m) in names.iter().zip(state.m.iter_mut()) {
                fill(&mut recs, &format!("adam.m.{name}"), m)?;
            }
            for (name, v) in names.iter().zip(state.v.iter_mut()) {
                fill(&mut recs, &format!("adam.v.{name}"), v)?;
            }
            Some(state)
        }
    };
    if let Some((name, rec)) = recs.iter().min_by_key(|(_, r)| r.offset) {
        return Err(checkpoint_error(rec.offset, format!("unexpected tensor {name}")));
    }
    Ok(Checkpoint { params, adam })
}
