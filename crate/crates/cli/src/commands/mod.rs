pub mod eval;
pub mod extract;
pub mod inpaint;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use cxinpaint_core::checkpoint::{from_bytes, read_header};
use cxinpaint_core::data::{read_patch_index, read_patch_store, IndexEntry};
use cxinpaint_core::{Error, Scalar, Tensor, Trainer32, Trainer64};

use crate::error::CliResult;

pub const INDEX_FILE: &str = "patches.csv";
pub const STORE_FILE: &str = "patches.cxpd";

/// A checkpoint loaded at its stored precision.
pub enum AnyTrainer {
    F32(Trainer32),
    F64(Trainer64),
}

pub fn load_any(path: &Path) -> CliResult<(AnyTrainer, Vec<String>)> {
    let bytes = fs::read(path)?;
    let (header, _) = read_header(&bytes)?;
    Ok(match header.dtype.as_str() {
        f32::DTYPE => {
            let l = from_bytes::<f32>(&bytes)?;
            (AnyTrainer::F32(l.trainer), l.checksum_mismatches)
        }
        f64::DTYPE => {
            let l = from_bytes::<f64>(&bytes)?;
            (AnyTrainer::F64(l.trainer), l.checksum_mismatches)
        }
        other => return Err(Error::CorruptHeader(format!("unknown dtype {other}")).into()),
    })
}

pub fn warn_checksums(path: &Path, mismatches: &[String]) {
    if !mismatches.is_empty() {
        eprintln!("warning: {}: checksum mismatch in {}", path.display(), mismatches.join(", "));
    }
}

/// Index and store paths for a `--data`/`--patches` argument naming either a directory or a
/// store file.
pub fn patch_paths(data: &Path) -> (PathBuf, PathBuf) {
    if data.is_dir() {
        (data.join(INDEX_FILE), data.join(STORE_FILE))
    } else {
        (data.with_extension("csv"), data.to_path_buf())
    }
}

pub fn read_index(path: &Path) -> CliResult<Vec<IndexEntry>> {
    Ok(read_patch_index(fs::File::open(path)?)?)
}

pub fn read_store<S: Scalar>(path: &Path) -> CliResult<(usize, Vec<Tensor<S>>)> {
    Ok(read_patch_store(fs::File::open(path)?)?)
}

/// Writes `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
