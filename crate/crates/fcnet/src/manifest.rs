//! JSON-lines dataset manifests: one `{seed, expression, target_index,
//! mask_checksum}` object per line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fcnet_core::synthdata::{generate_sample, mask_checksum, Sample, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::error::FormatError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub seed: u64,
    pub expression: String,
    pub target_index: usize,
    /// FNV-1a of the mask bits, 16 lowercase hex digits.
    pub mask_checksum: String,
}

impl ManifestRecord {
    pub fn from_sample(s: &Sample) -> Self {
        Self {
            seed: s.seed,
            expression: s.expression_text(),
            target_index: s.target_index,
            mask_checksum: format!("{:016x}", mask_checksum(&s.mask)),
        }
    }

    /// Regenerate the sample from its seed and confirm it matches the record.
    pub fn materialize(&self, cfg: &SceneConfig) -> Result<Sample, FormatError> {
        let s = generate_sample(self.seed, cfg)?;
        let again = Self::from_sample(&s);
        if &again != self {
            return Err(FormatError::Invalid(format!(
                "sample {:#x} does not match its manifest record (got {:?}, expected {:?})",
                self.seed, again, self
            )));
        }
        Ok(s)
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), FormatError> {
    let file = std::fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| FormatError::io(path, e))?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, FormatError> {
    let file = std::fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FormatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| FormatError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_samples(path: &Path, cfg: &SceneConfig) -> Result<Vec<Sample>, FormatError> {
    read_manifest(path)?.iter().map(|r| r.materialize(cfg)).collect()
}
