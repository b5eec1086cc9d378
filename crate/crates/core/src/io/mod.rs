//! File formats: model manifests with weight blobs, frame sequences, synthetic
//! sequence generation and CSV/text reports.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub mod blob;
pub mod frames;
pub mod manifest;
pub mod report;
pub mod synth;

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|e| Error::parse(path, e.utf8_error().valid_up_to(), "not valid UTF-8"))
}

/// Splits `text` into lines, dropping `#` comments and blank lines, and
/// yields each line's byte offset with its trimmed content.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len();
        let line = raw.split('#').next().unwrap_or("");
        let lead = line.len() - line.trim_start().len();
        let trimmed = line.trim();
        (!trimmed.is_empty()).then_some((start + lead, trimmed))
    })
}

/// Whitespace-separated tokens of `line` with their byte offsets, relative
/// to `base`.
pub(crate) fn tokens(base: usize, line: &str) -> impl Iterator<Item = (usize, &str)> {
    let origin = line.as_ptr() as usize;
    line.split_whitespace()
        .map(move |t| (base + t.as_ptr() as usize - origin, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn lines_and_tokens_track_offsets() {
        let text = "# header\n  a  b # tail\n\nc\n";
        let lines: Vec<_> = content_lines(text).collect();
        assert_eq!(lines, vec![(11, "a  b"), (24, "c")]);
        let toks: Vec<_> = tokens(lines[0].0, lines[0].1).collect();
        assert_eq!(toks, vec![(11, "a"), (14, "b")]);
        assert_eq!(&text[14..15], "b");
    }
}
