//! Binary checkpoints: `AMOE` magic, version, a `key = value` config echo and
//! named row-major f64 tensors, all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::optim::{AdamConfig, OptimState};
use crate::error::{Error, Result};
use crate::kv::{self, KeyValue};
use crate::model::{ModelConfig, TinyTransformer};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AMOE";
pub const CHECKPOINT_VERSION: u32 = 1;

const OPT_M: &str = "__opt.m.";
const OPT_V: &str = "__opt.v.";

/// Decoded checkpoint contents before they are bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    /// Non-model keys of the config echo (stage flags, optimizer settings).
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor2<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor2<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.meta.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Corrupt(format!("config echo: bad value {v:?} for {key}"))),
        }
    }
}

/// Serializes a model and, optionally, its optimizer moments.
pub fn encode_checkpoint<S: Scalar>(m: &TinyTransformer<S>, st: Option<&OptimState<S>>) -> Result<Vec<u8>> {
    let mut pairs = m.config().to_kv();
    pairs.push(("base_pretrained", m.base_pretrained().to_string()));
    if let Some(st) = st {
        pairs.push(("opt.step", st.step.to_string()));
        pairs.push(("opt.lr", st.cfg.lr.to_string()));
        pairs.push(("opt.beta1", st.cfg.beta1.to_string()));
        pairs.push(("opt.beta2", st.cfg.beta2.to_string()));
        pairs.push(("opt.eps", st.cfg.eps.to_string()));
        pairs.push(("rng.shuffle_seed", st.shuffle_seed.to_string()));
    }
    let blob = kv::render(&pairs);

    let store = m.store();
    let mut tensors: Vec<(String, &Tensor2<S>)> = store.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
    if let Some(st) = st {
        for (i, &id) in st.params().iter().enumerate() {
            let name = &store.get(id).name;
            tensors.push((format!("{OPT_M}{name}"), &st.first_moments()[i]));
            tensors.push((format!("{OPT_V}{name}"), &st.second_moments()[i]));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for x in t.data() {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, m: &TinyTransformer<S>, st: Option<&OptimState<S>>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(m, st)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {} ({} bytes left, {n} needed)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r
        .take(4, "magic")
        .map_err(|_| Error::Corrupt(format!("file too short for a checkpoint header ({} bytes)", bytes.len())))?
        .try_into()
        .unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Magic(magic));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob_len = r.u32("config length")? as usize;
    let blob = std::str::from_utf8(r.take(blob_len, "config echo")?)
        .map_err(|e| Error::Corrupt(format!("config echo is not UTF-8: {e}")))?;
    let mut config = ModelConfig::new(1);
    let mut meta = BTreeMap::new();
    let lines = kv::split_lines(blob).map_err(|(line, msg)| Error::Corrupt(format!("config echo line {line}: {msg}")))?;
    for (_, k, v) in lines {
        let known = config
            .set_kv(&k, &v)
            .map_err(|e| Error::Corrupt(format!("config echo: {e}")))?;
        if !known {
            meta.insert(k, v);
        }
    }
    config
        .validate()
        .map_err(|e| Error::Corrupt(format!("config echo: {e}")))?;

    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Corrupt(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let ndim = r.u8("ndim")?;
        if ndim != 2 {
            return Err(Error::Corrupt(format!("tensor {name}: ndim {ndim}, only 2 is supported")));
        }
        let rows = r.u64("dims")?;
        let cols = r.u64("dims")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .filter(|&b| b <= (bytes.len() - r.pos) as u64)
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "tensor {name}: {rows}x{cols} does not fit in the remaining {} bytes",
                    bytes.len() - r.pos
                ))
            })?;
        let raw = r.take(n as usize, "tensor data")?;
        let data: Vec<S> = raw
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Corrupt(format!("tensor {name}: non-finite value")));
        }
        tensors.push((name, Tensor2::from_vec(rows as usize, cols as usize, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, meta, tensors })
}

pub fn read_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Rebuilds the saved model exactly, plus its optimizer state if one was stored.
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(TinyTransformer<S>, Option<OptimState<S>>)> {
    let ck = read_checkpoint(path)?;
    restore(ck)
}

fn restore<S: Scalar>(ck: Checkpoint<S>) -> Result<(TinyTransformer<S>, Option<OptimState<S>>)> {
    let mut m = TinyTransformer::new(ck.config.clone(), 0)?;
    let mut seen = vec![false; m.store().len()];
    let mut moments: Vec<(String, Tensor2<S>, Option<Tensor2<S>>)> = Vec::new();
    for (name, t) in &ck.tensors {
        if let Some(p) = name.strip_prefix(OPT_M) {
            moments.push((p.to_string(), t.clone(), None));
            continue;
        }
        if let Some(p) = name.strip_prefix(OPT_V) {
            match moments.iter_mut().find(|(n, _, v)| n == p && v.is_none()) {
                Some(slot) => slot.2 = Some(t.clone()),
                None => return Err(Error::Corrupt(format!("second moment for {p} without a first moment"))),
            }
            continue;
        }
        let id = m
            .store()
            .find(name)
            .ok_or_else(|| Error::Corrupt(format!("unexpected tensor {name} for this configuration")))?;
        if seen[id.index()] {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
        seen[id.index()] = true;
        m.store_mut().set(id, t.clone())?;
    }
    if let Some(missing) = m.store().iter().find(|(id, _)| !seen[id.index()]) {
        return Err(Error::Corrupt(format!("missing tensor {}", missing.1.name)));
    }
    if ck.meta_value::<bool>("base_pretrained")? == Some(true) {
        m.mark_base_pretrained();
    }

    let st = match ck.meta_value::<u64>("opt.step")? {
        None => None,
        Some(step) => {
            let need = |k: &str| -> Result<f64> {
                ck.meta_value::<f64>(k)?
                    .ok_or_else(|| Error::Corrupt(format!("config echo lacks {k}")))
            };
            let cfg = AdamConfig {
                lr: need("opt.lr")?,
                beta1: need("opt.beta1")?,
                beta2: need("opt.beta2")?,
                eps: need("opt.eps")?,
            };
            let mut ids = Vec::new();
            let mut ms = Vec::new();
            let mut vs = Vec::new();
            for (name, mt, vt) in moments {
                let id = m
                    .store()
                    .find(&name)
                    .ok_or_else(|| Error::Corrupt(format!("moments for unknown parameter {name}")))?;
                ids.push(id);
                ms.push(mt);
                vs.push(vt.ok_or_else(|| Error::Corrupt(format!("missing second moment for {name}")))?);
            }
            let mut st = OptimState::from_parts(m.store(), ids, cfg, step, ms, vs)?;
            st.shuffle_seed = ck.meta_value::<u64>("rng.shuffle_seed")?.unwrap_or(0);
            Some(st)
        }
    };
    Ok((m, st))
}

/// Copies every base parameter of the checkpoint into `m` by name, leaving
/// adapters untouched, and marks the base as pretrained when the checkpoint
/// says so.
pub fn load_base_into<S: Scalar>(path: impl AsRef<Path>, m: &mut TinyTransformer<S>) -> Result<()> {
    let path = path.as_ref();
    let ck: Checkpoint<S> = read_checkpoint(path)?;
    for id in m.base_params() {
        let name = m.store().get(id).name.clone();
        let t = ck.tensor(&name).ok_or_else(|| {
            Error::Shape(format!("{} has no base parameter {name}", path.display()))
        })?;
        let want = m.store().value(id).shape();
        if t.shape() != want {
            return Err(Error::Shape(format!(
                "{name}: checkpoint has {:?}, model expects {want:?}",
                t.shape()
            )));
        }
        m.store_mut().set(id, t.clone())?;
    }
    if ck.meta_value::<bool>("base_pretrained")? == Some(true) {
        m.mark_base_pretrained();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TinyTransformer<f64> {
        let mut cfg = ModelConfig::new(12);
        cfg.d_model = 8;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        cfg.max_seq = 8;
        cfg.adapter.n_experts = 2;
        cfg.adapter.rank = 2;
        TinyTransformer::new(cfg, 5).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = tiny();
        let bytes = encode_checkpoint(&m, None).unwrap();
        let (back, st) = restore(decode_checkpoint::<f64>(&bytes).unwrap()).unwrap();
        assert!(st.is_none());
        assert_eq!(back.store(), m.store());
        assert_eq!(encode_checkpoint(&back, None).unwrap(), bytes);
    }

    #[test]
    fn header_errors() {
        let m = tiny();
        let mut bytes = encode_checkpoint(&m, None).unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Magic(_))));
        let mut bytes = good.clone();
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes),
            Err(Error::Version { found: 9, expected: 1 })
        ));
        assert!(matches!(decode_checkpoint::<f64>(&good[..good.len() - 3]), Err(Error::Corrupt(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint::<f64>(&long), Err(Error::Corrupt(_))));
        assert!(matches!(decode_checkpoint::<f64>(&good[..2]), Err(Error::Corrupt(_))));
    }
}
