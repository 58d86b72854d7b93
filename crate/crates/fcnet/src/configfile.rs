//! Flat `key = value` configuration files and the vocabulary file.

use std::path::Path;

use fcnet_core::encoders::Vocab;
use fcnet_core::Config;

use crate::error::FormatError;

/// Apply every `key = value` line of `text` on top of `base`.
/// Blank lines and text after `#` are ignored.
pub fn parse_config(text: &str, mut base: Config) -> Result<Config, FormatError> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::Invalid(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
        base.set(k.trim(), v.trim())
            .map_err(|e| FormatError::Invalid(format!("line {}: {e}", i + 1)))?;
    }
    Ok(base)
}

pub fn render_config(cfg: &Config) -> String {
    cfg.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn read_config(path: &Path, base: Config) -> Result<Config, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_config(&text, base)
}

pub fn write_config(path: &Path, cfg: &Config) -> Result<(), FormatError> {
    std::fs::write(path, render_config(cfg)).map_err(|e| FormatError::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    Ok(Vocab::from_lines(&text)?)
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<(), FormatError> {
    std::fs::write(path, vocab.to_lines()).map_err(|e| FormatError::io(path, e))
}
