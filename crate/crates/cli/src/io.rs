//! Atomic output files and input digests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hepeval_core::nifti::{write_nifti, VolumeRef};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::failure::{CmdResult, Failure};

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("cannot write {}: {e}", path.display()))
}

fn parent_of(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

/// Create `dir` (and parents) for outputs.
pub fn ensure_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

/// Write `bytes` to a temporary file next to `path`, then rename it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult {
    let mut tmp = NamedTempFile::new_in(parent_of(path)).map_err(|e| io_failure(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_failure(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_failure(path, e))?;
    tmp.persist(path).map_err(|e| io_failure(path, e.error))?;
    Ok(())
}

pub fn write_json_atomic(path: &Path, value: &serde_json::Value) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Atomic NIfTI write. The temporary file keeps the target's extension so
/// `.nii.gz` targets are compressed.
pub fn write_nifti_atomic<'a>(volume: impl Into<VolumeRef<'a>>, path: &Path) -> CmdResult {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let suffix = if name.ends_with(".nii.gz") { ".nii.gz" } else { ".nii" };
    let tmp = tempfile::Builder::new()
        .suffix(suffix)
        .tempfile_in(parent_of(path))
        .map_err(|e| io_failure(path, e))?;
    write_nifti(volume, tmp.path())?;
    tmp.persist(path).map_err(|e| io_failure(path, e.error))?;
    Ok(())
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// File name without `.nii`, `.nii.gz`, `.gz` or other extension.
pub fn case_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".hdr", ".img"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    Path::new(&name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or(name)
}

pub fn out_dir(out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_ids_strip_nifti_extensions() {
        assert_eq!(case_id(Path::new("/a/case_01.nii.gz")), "case_01");
        assert_eq!(case_id(Path::new("b.nii")), "b");
        assert_eq!(case_id(Path::new("c.hdr")), "c");
        assert_eq!(case_id(Path::new("d.json")), "d");
    }

    #[test]
    fn atomic_write_replaces_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"abc");
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
