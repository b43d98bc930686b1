use std::io::Write;
use std::path::Path;

use crate::error::{HipaError, Result};

/// Writes through a temp file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| HipaError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HipaError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| HipaError::io(path, e))?;
    tmp.persist(path).map_err(|e| HipaError::io(path, e.error))?;
    Ok(())
}
