//! Bundled parity-check matrices and code lookup.
//!
//! Codes are resolved by name. `ECCM_DATA_DIR`, when set, is searched first
//! for `<name>.alist`; the matrices compiled into the crate are the fallback.
//! A path to an existing `.alist` file is accepted as well.

use std::path::{Path, PathBuf};

use crate::alist;
use crate::gf2::{CodeError, ParityCheckMatrix};

pub const DATA_DIR_ENV: &str = "ECCM_DATA_DIR";

const BUNDLED: &[(&str, &str)] = &[
    ("hamming_7_4", include_str!("../data/codes/hamming_7_4.alist")),
    ("bch_31_16", include_str!("../data/codes/bch_31_16.alist")),
    ("ldpc_49_24", include_str!("../data/codes/ldpc_49_24.alist")),
];

/// Names of the bundled codes.
pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(name, _)| *name).collect()
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

/// Every code visible to [`load_code`]: bundled names plus any alist file
/// in the data directory.
pub fn available() -> Vec<String> {
    let mut names: Vec<String> = bundled_names().into_iter().map(String::from).collect();
    if let Some(dir) = data_dir() {
        if let Ok(entries) = std::fs::read_dir(dir) {
            for entry in entries.flatten() {
                let path = entry.path();
                if path.extension().is_some_and(|e| e == "alist") {
                    if let Some(stem) = path.file_stem() {
                        let stem = stem.to_string_lossy().into_owned();
                        if !names.contains(&stem) {
                            names.push(stem);
                        }
                    }
                }
            }
        }
    }
    names.sort();
    names
}

pub fn load_code(name_or_path: &str) -> Result<ParityCheckMatrix, CodeError> {
    let as_path = Path::new(name_or_path);
    if as_path.extension().is_some_and(|e| e == "alist") && as_path.is_file() {
        return alist::load_alist(as_path);
    }
    if let Some(dir) = data_dir() {
        let candidate = dir.join(format!("{name_or_path}.alist"));
        if candidate.is_file() {
            return alist::load_alist(candidate);
        }
    }
    BUNDLED
        .iter()
        .find(|(name, _)| *name == name_or_path)
        .map(|(name, text)| alist::parse(text, name))
        .unwrap_or_else(|| Err(CodeError::UnknownCode(name_or_path.to_string())))
}
