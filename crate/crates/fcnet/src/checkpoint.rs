//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FCNT" | u32 version | u32 record count
//! record: u32 name length | name (UTF-8) | u32 rank | u64 dims[rank] | u64 blob length | blob
//! ```
//!
//! Records: `config` and `vocab` (UTF-8 text), `param:<name>`,
//! `adam.m:<name>` and `adam.v:<name>` (f64 arrays), `adam.hyper`
//! (lr, beta1, beta2, eps as f64), `adam.step`, `rng.shuffle` (base seed
//! and stream index of the current epoch's shuffle) and `train.counters`
//! (epoch, batch within epoch) as u64 arrays.

use std::collections::HashMap;
use std::path::Path;

use fcnet_core::adam::Adam;
use fcnet_core::encoders::Vocab;
use fcnet_core::model::FcNet;
use fcnet_core::train::Trainer;
use fcnet_core::Config;

use crate::configfile::{parse_config, render_config};
use crate::error::FormatError;

pub const MAGIC: &[u8; 4] = b"FCNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<u64>,
    pub blob: Vec<u8>,
}

impl Record {
    fn text(name: &str, s: &str) -> Self {
        Self {
            name: name.into(),
            shape: vec![s.len() as u64],
            blob: s.as_bytes().to_vec(),
        }
    }

    fn floats(name: String, shape: &[usize], v: &[f64]) -> Self {
        Self {
            name,
            shape: shape.iter().map(|&d| d as u64).collect(),
            blob: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn words(name: &str, v: &[u64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len() as u64],
            blob: v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn as_f64(&self) -> Vec<f64> {
        self.blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    fn as_u64(&self) -> Vec<u64> {
        self.blob
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for d in &r.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(r.blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&r.blob);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FormatError::Invalid(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>, FormatError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(FormatError::Invalid("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(FormatError::Invalid(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let n = c.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| FormatError::Invalid("record name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
        let blob_len = c.u64()? as usize;
        let blob = c.take(blob_len)?.to_vec();
        out.push(Record { name, shape, blob });
    }
    if c.pos != bytes.len() {
        return Err(FormatError::Invalid("trailing bytes after the last record".into()));
    }
    Ok(out)
}

/// Snapshot of a trainer: model, optimiser and schedule position.
pub fn trainer_records(t: &Trainer) -> Vec<Record> {
    let m = &t.model;
    let mut out = vec![
        Record::text("config", &render_config(&m.config)),
        Record::text("vocab", &m.vocab.to_lines()),
    ];
    for (_, p) in m.params.iter() {
        out.push(Record::floats(
            format!("param:{}", p.name),
            p.value.shape(),
            p.value.data(),
        ));
    }
    for (_, p) in m.params.iter() {
        out.push(Record::floats(format!("adam.m:{}", p.name), p.value.shape(), &p.m));
        out.push(Record::floats(format!("adam.v:{}", p.name), p.value.shape(), &p.v));
    }
    let a = &t.adam;
    out.push(Record::floats(
        "adam.hyper".into(),
        &[4],
        &[a.lr, a.beta1, a.beta2, a.eps],
    ));
    out.push(Record::words("adam.step", &[a.step]));
    out.push(Record::words("rng.shuffle", &[m.config.seed, t.epoch as u64]));
    out.push(Record::words(
        "train.counters",
        &[t.epoch as u64, t.batch_in_epoch as u64],
    ));
    out
}

pub fn trainer_from_records(records: Vec<Record>) -> Result<Trainer, FormatError> {
    let mut map: HashMap<String, Record> = HashMap::new();
    for r in records {
        if map.contains_key(&r.name) {
            return Err(FormatError::Invalid(format!("duplicate record {}", r.name)));
        }
        map.insert(r.name.clone(), r);
    }
    let mut get = |name: &str| {
        map.remove(name)
            .ok_or_else(|| FormatError::Invalid(format!("missing record {name}")))
    };
    let text =
        |r: Record| String::from_utf8(r.blob).map_err(|_| FormatError::Invalid(format!("{} is not UTF-8", r.name)));

    let config: Config = parse_config(&text(get("config")?)?, Config::desk())?;
    let vocab = Vocab::from_lines(&text(get("vocab")?)?)?;
    let mut model = FcNet::with_vocab(config, vocab)?;
    let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
    for (p, name) in model.params.iter_mut().zip(&names) {
        let want: Vec<u64> = p.value.shape().iter().map(|&d| d as u64).collect();
        for (prefix, dst) in [("param:", 0), ("adam.m:", 1), ("adam.v:", 2)] {
            let r = get(&format!("{prefix}{name}"))?;
            if r.shape != want || r.blob.len() != 8 * p.value.len() {
                return Err(FormatError::Invalid(format!(
                    "{} has shape {:?}, model expects {:?}",
                    r.name, r.shape, want
                )));
            }
            let v = r.as_f64();
            match dst {
                0 => p.value.data_mut().copy_from_slice(&v),
                1 => p.m.copy_from_slice(&v),
                _ => p.v.copy_from_slice(&v),
            }
        }
    }
    let hyper = get("adam.hyper")?.as_f64();
    let step = get("adam.step")?.as_u64();
    let counters = get("train.counters")?.as_u64();
    let shuffle = get("rng.shuffle")?.as_u64();
    if hyper.len() != 4 || step.len() != 1 || counters.len() != 2 || shuffle.len() != 2 {
        return Err(FormatError::Invalid("malformed optimiser or counter record".into()));
    }
    if shuffle[0] != model.config.seed || shuffle[1] != counters[0] {
        return Err(FormatError::Invalid(
            "shuffle state disagrees with config seed or epoch".into(),
        ));
    }
    if let Some(extra) = map.keys().next() {
        return Err(FormatError::Invalid(format!("unexpected record {extra}")));
    }
    let mut t = Trainer::new(model);
    t.adam = Adam {
        lr: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
        step: step[0],
    };
    t.epoch = counters[0] as usize;
    t.batch_in_epoch = counters[1] as usize;
    Ok(t)
}

pub fn save(path: &Path, t: &Trainer) -> Result<(), FormatError> {
    // Write then rename so an interrupted save never clobbers a good file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(&trainer_records(t))).map_err(|e| FormatError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| FormatError::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer, FormatError> {
    let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
    trainer_from_records(decode(&bytes)?)
}
