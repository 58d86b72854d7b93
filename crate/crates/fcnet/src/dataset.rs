//! Dataset directories: manifests, vocabulary, split digests and optional
//! image/mask files.
//!
//! ```text
//! <dir>/train.jsonl  <dir>/val.jsonl  <dir>/vocab.txt  <dir>/dataset.json
//! <dir>/images/{train,val}_NNNNNN.ppm and _mask.pgm   (with --images)
//! ```

use std::path::Path;

use fcnet_core::encoders::Vocab;
use fcnet_core::metrics::mask_bits;
use fcnet_core::synthdata::{generate_split, split_digest, Sample, SceneConfig, Split};
use serde::{Deserialize, Serialize};

use crate::configfile::write_vocab;
use crate::error::FormatError;
use crate::manifest::{load_samples, write_manifest, ManifestRecord};
use crate::pnm::Raster;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub samples: usize,
    /// Order-sensitive digest of the manifest fields, 16 hex digits.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub data_seed: u64,
    pub height: usize,
    pub width: usize,
    pub train: SplitInfo,
    pub val: SplitInfo,
}

pub struct Dataset {
    pub info: DatasetInfo,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn split_info(samples: &[Sample]) -> SplitInfo {
    SplitInfo {
        samples: samples.len(),
        digest: format!("{:016x}", split_digest(samples)),
    }
}

/// Generate both splits in memory.
pub fn generate(
    data_seed: u64,
    height: usize,
    width: usize,
    train_n: usize,
    val_n: usize,
) -> Result<Dataset, FormatError> {
    if train_n == 0 || val_n == 0 {
        return Err(FormatError::Invalid("both splits need at least one sample".into()));
    }
    let sc = SceneConfig::new(height, width);
    let train = generate_split(data_seed, train_n, Split::Train, &sc)?;
    let val = generate_split(data_seed, val_n, Split::Val, &sc)?;
    Ok(Dataset {
        info: DatasetInfo {
            data_seed,
            height,
            width,
            train: split_info(&train),
            val: split_info(&val),
        },
        train,
        val,
    })
}

impl Dataset {
    pub fn save(&self, dir: &Path, images: bool) -> Result<(), FormatError> {
        std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        for (split, samples) in [(Split::Train, &self.train), (Split::Val, &self.val)] {
            let records: Vec<ManifestRecord> = samples.iter().map(ManifestRecord::from_sample).collect();
            write_manifest(&dir.join(format!("{}.jsonl", split.as_str())), &records)?;
            if images {
                let img_dir = dir.join("images");
                std::fs::create_dir_all(&img_dir).map_err(|e| FormatError::io(&img_dir, e))?;
                for (i, s) in samples.iter().enumerate() {
                    let stem = format!("{}_{i:06}", split.as_str());
                    Raster::from_tensor(&s.image)?.write(&img_dir.join(format!("{stem}.ppm")))?;
                    Raster::from_mask(&mask_bits(&s.mask), self.info.height, self.info.width)
                        .write(&img_dir.join(format!("{stem}_mask.pgm")))?;
                }
            }
        }
        write_vocab(&dir.join("vocab.txt"), &Vocab::synthetic())?;
        let meta = dir.join("dataset.json");
        std::fs::write(&meta, serde_json::to_string_pretty(&self.info)? + "\n").map_err(|e| FormatError::io(&meta, e))
    }

    /// Regenerate every sample from the manifests, verifying each record and
    /// both split digests.
    pub fn load(dir: &Path) -> Result<Self, FormatError> {
        let meta = dir.join("dataset.json");
        let text = std::fs::read_to_string(&meta).map_err(|e| FormatError::io(&meta, e))?;
        let info: DatasetInfo = serde_json::from_str(&text)?;
        let sc = SceneConfig::new(info.height, info.width);
        let train = load_samples(&dir.join("train.jsonl"), &sc)?;
        let val = load_samples(&dir.join("val.jsonl"), &sc)?;
        for (name, samples, want) in [("train", &train, &info.train), ("val", &val, &info.val)] {
            let got = split_info(samples);
            if &got != want {
                return Err(FormatError::Invalid(format!(
                    "{name} split does not match dataset.json: {got:?} vs {want:?}"
                )));
            }
        }
        Ok(Self { info, train, val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saved_datasets_reload_identically() {
        let ds = generate(9, 32, 32, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), true).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.info, ds.info);
        assert_eq!(back.train, ds.train);
        assert_eq!(back.val, ds.val);
        let img = Raster::read(&dir.path().join("images/val_000002.ppm")).unwrap();
        assert_eq!((img.width, img.height, img.channels), (32, 32, 3));
        let mask = Raster::read(&dir.path().join("images/val_000002_mask.pgm")).unwrap();
        assert_eq!(mask.channels, 1);
        let vocab = std::fs::read_to_string(dir.path().join("vocab.txt")).unwrap();
        assert!(vocab.starts_with("[SOS]\n[EOS]\n"));
    }

    #[test]
    fn digest_mismatch_is_detected() {
        let ds = generate(9, 32, 32, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), false).unwrap();
        // Drop one training record: every line still verifies, the digest does not.
        let path = dir.path().join("train.jsonl");
        let text = std::fs::read_to_string(&path).unwrap();
        let kept: Vec<&str> = text.lines().skip(1).collect();
        std::fs::write(&path, kept.join("\n") + "\n").unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn empty_splits_are_rejected() {
        assert!(generate(1, 32, 32, 0, 3).is_err());
    }
}
