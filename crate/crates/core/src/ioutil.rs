//! Small filesystem helpers.

use std::io;
use std::path::{Path, PathBuf};

/// Write a file atomically: write a sibling temp file, then rename it over
/// the destination, so readers never observe a partial artifact.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> io::Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
