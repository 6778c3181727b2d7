//! `CKPT0001` tensor files and training run directories.
//!
//! A run directory holds `config.txt`, `model.ckpt` with the parameters,
//! `momentum.ckpt` with the SGD buffers under the same names, and
//! `state.txt` with the iteration and seed.

use std::path::Path;

use comma_core::model::{CommaConfig, CommaNet};
use comma_core::train::ModelState;
use comma_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, KeyValues};
use crate::error::{create_dir, read, write, IoError, Result};

pub const MAGIC: &[u8; 8] = b"CKPT0001";
pub const MODEL_FILE: &str = "model.ckpt";
pub const MOMENTUM_FILE: &str = "momentum.ckpt";
pub const STATE_FILE: &str = "state.txt";
pub const CONFIG_FILE: &str = "config.txt";

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = MAGIC.to_vec();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32le(&mut out, tensors.len());
    for (name, t) in tensors {
        u32le(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32le(&mut out, t.shape().len());
        for &e in t.shape() {
            u32le(&mut out, e);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(IoError::Truncated { offset: self.bytes.len(), expected: self.pos.saturating_add(n), actual: self.bytes.len() });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(8)?;
    if magic != MAGIC {
        return Err(IoError::BadMagic {
            offset: 0,
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let count = c.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = c.pos + 4;
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| IoError::InvalidValue { offset: at, value: format!("non-UTF-8 name ({e})") })?
            .to_string();
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let at = c.pos;
        let n = shape
            .iter()
            .try_fold(4usize, |acc, &e| acc.checked_mul(e))
            .ok_or(IoError::InvalidValue { offset: at, value: format!("shape {shape:?}") })?;
        let data = c.take(n)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(IoError::Trailing { offset: c.pos, extra: bytes.len() - c.pos });
    }
    Ok(out)
}

pub fn write_params(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    write(path, &encode(store.iter().map(|p| (p.name.as_str(), &p.value))))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&read(path)?).map_err(|e| e.in_file(path))
}

/// Overwrites every parameter of `store` from `tensors`, which must name
/// each parameter exactly once and nothing else.
pub fn load_params(store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(IoError::Usage(format!("checkpoint has {} tensors, model has {} parameters", tensors.len(), store.len())));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.clone()) {
            return Err(IoError::Usage(format!("duplicate tensor `{name}` in checkpoint")));
        }
        store.set(&name, t)?;
    }
    Ok(())
}

/// Builds the network described by `cfg` with the parameters at `path`.
pub fn load_model(cfg: &CommaConfig, path: &Path) -> Result<(CommaNet, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let net = CommaNet::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    load_params(&mut store, read_tensors(path)?).map_err(|e| e.in_file(path))?;
    Ok((net, store))
}

pub fn save_run(dir: &Path, cfg: &CommaConfig, state: &ModelState) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join(CONFIG_FILE), config::to_string(cfg).as_bytes())?;
    write_params(&dir.join(MODEL_FILE), &state.params)?;
    let momentum: Vec<(&str, Tensor<f32>)> = state
        .params
        .iter()
        .zip(&state.momentum)
        .map(|(p, m)| Ok((p.name.as_str(), Tensor::new(p.value.shape(), m.clone())?)))
        .collect::<Result<_>>()?;
    write(&dir.join(MOMENTUM_FILE), &encode(momentum.iter().map(|(n, t)| (*n, t))))?;
    let state_txt = format!("iteration={}\nseed={}\n", state.iteration, state.seed);
    write(&dir.join(STATE_FILE), state_txt.as_bytes())
}

/// Restores a run directory written by [`save_run`].
pub fn load_run(dir: &Path) -> Result<(CommaConfig, CommaNet, ModelState)> {
    let cfg = config::read(&dir.join(CONFIG_FILE))?;
    let (net, params) = load_model(&cfg, &dir.join(MODEL_FILE))?;
    let mut state = ModelState::new(params, cfg.seed);
    let path = dir.join(MOMENTUM_FILE);
    for (name, t) in read_tensors(&path)? {
        let id = state.params.id(&name).ok_or_else(|| IoError::Core(comma_core::Error::UnknownParameter(name.clone())))?;
        let slot = &mut state.momentum[id.index()];
        if slot.len() != t.len() {
            return Err(IoError::Usage(format!("momentum `{name}` has {} values, expected {}", t.len(), slot.len())).in_file(&path));
        }
        slot.copy_from_slice(t.data());
    }
    let path = dir.join(STATE_FILE);
    let text = String::from_utf8_lossy(&read(&path)?).into_owned();
    let kv = KeyValues::parse(&text).map_err(|e| e.in_file(&path))?;
    for (line, key, value) in kv.iter() {
        let parsed = value.parse::<u64>().map_err(|e| IoError::Parse { line, msg: format!("{key}: {e}") });
        match key {
            "iteration" => state.iteration = parsed.map_err(|e| e.in_file(&path))? as usize,
            "seed" => state.seed = parsed.map_err(|e| e.in_file(&path))?,
            _ => return Err(IoError::Parse { line, msg: format!("unknown key `{key}`") }.in_file(&path)),
        }
    }
    Ok((cfg, net, state))
}
