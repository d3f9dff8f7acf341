use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use voxret_core::manifest::{
    load_manifest, manifest_to_string, read_vectors, SegmentRecord, StoreSet, VectorStore,
};

use crate::error::{CliError, CliResult};

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::from(e).context(dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::from(e).context(dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| CliError::from(e.error).context(path.display()))?;
    Ok(())
}

pub fn write_manifest(path: &Path, records: &[SegmentRecord]) -> CliResult<()> {
    write_atomic(path, manifest_to_string(records).as_bytes())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Prints to stdout, or writes atomically when `out` is given.
pub fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

pub fn emit_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    emit(out, &s)
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::validation(
            "input",
            format!("{} does not exist or is not a file", path.display()),
        ))
    }
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<SegmentRecord>> {
    require_file(path)?;
    load_manifest(path).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn read_store(path: &Path) -> CliResult<VectorStore> {
    require_file(path)?;
    read_vectors(path).map_err(|e| CliError::from(e).context(path.display()))
}

/// Manifest references name a store by the file stem of its vector file.
pub fn store_name(path: &Path) -> CliResult<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| {
            CliError::validation(
                "input",
                format!("cannot derive a store name from {}", path.display()),
            )
        })
}

pub fn load_stores(paths: &[&Path]) -> CliResult<StoreSet> {
    let mut set = StoreSet::new();
    for p in paths {
        set.insert(store_name(p)?, read_store(p)?);
    }
    Ok(set)
}

/// Resolves a manifest-relative path such as a `wav_ref`.
pub fn resolve_under(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn store_names_come_from_stems() {
        assert_eq!(store_name(Path::new("/x/audio.vec")).unwrap(), "audio");
    }
}
