//! Frame files and frame-sequence directories.
//!
//! A raw frame is a little-endian `f32` planar tensor (`name.f32`) with a
//! text sidecar (`name.hdr`) holding `channels height width`. Binary PGM (P5)
//! and PPM (P6) images with 8-bit samples are also accepted; samples are
//! divided by 255 exactly, whatever the declared maxval, so thresholds mean
//! the same thing for every input format.
//!
//! A sequence directory holds `sequence.txt`, listing every frame file in
//! playback order, one per line.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::{blob, content_lines, read_file, read_text, tokens, write_atomic};
use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

pub const SEQUENCE_MANIFEST: &str = "sequence.txt";

const FRAME_EXTENSIONS: [&str; 4] = ["f32", "pgm", "ppm", "pnm"];

/// Parses a sidecar header: `channels height width`.
pub fn parse_header(text: &str, file: &Path) -> Result<Shape3> {
    let mut lines = content_lines(text);
    let (off, line) = lines.next().ok_or_else(|| Error::parse(file, 0, "empty header"))?;
    let toks: Vec<_> = tokens(off, line).collect();
    if toks.len() != 3 {
        return Err(Error::parse(file, off, "expected 'channels height width'"));
    }
    let mut d = [0usize; 3];
    for (slot, (o, t)) in d.iter_mut().zip(&toks) {
        *slot = t
            .parse()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::parse(file, *o, format!("expected a positive integer, got '{t}'")))?;
    }
    if let Some((o, _)) = lines.next() {
        return Err(Error::parse(file, o, "unexpected content after header"));
    }
    Ok(Shape3::new(d[0], d[1], d[2]))
}

pub fn render_header(shape: Shape3) -> String {
    format!("{} {} {}\n", shape.channels, shape.height, shape.width)
}

/// Decodes a raw planar frame of `shape`.
pub fn decode_raw(bytes: &[u8], shape: Shape3, file: &Path) -> Result<Tensor3> {
    let want = shape
        .channels
        .checked_mul(shape.height)
        .and_then(|v| v.checked_mul(shape.width))
        .and_then(|v| v.checked_mul(4));
    if want != Some(bytes.len()) {
        return Err(Error::parse(
            file,
            bytes.len().min(want.unwrap_or(usize::MAX)),
            format!("{} bytes do not hold a {shape} f32 frame", bytes.len()),
        ));
    }
    let values = blob::decode_f32_le(bytes, file)?;
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::parse(file, 4 * k, "non-finite sample"));
    }
    Tensor3::from_vec(shape, values)
}

fn pnm_token(bytes: &[u8], pos: &mut usize, file: &Path) -> Result<(usize, usize)> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::parse(file, *pos, "truncated header")),
        }
    }
    let start = *pos;
    let mut v: usize = 0;
    while let Some(&b) = bytes.get(*pos).filter(|b| b.is_ascii_digit()) {
        v = v
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| Error::parse(file, start, "number too large"))?;
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::parse(file, start, "expected a decimal number"));
    }
    Ok((start, v))
}

/// Decodes a binary PGM (one channel) or PPM (three channels).
pub fn decode_pnm(bytes: &[u8], file: &Path) -> Result<Tensor3> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::parse(file, 0, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let (wo, width) = pnm_token(bytes, &mut pos, file)?;
    let (ho, height) = pnm_token(bytes, &mut pos, file)?;
    let (mo, maxval) = pnm_token(bytes, &mut pos, file)?;
    if width == 0 {
        return Err(Error::parse(file, wo, "zero width"));
    }
    if height == 0 {
        return Err(Error::parse(file, ho, "zero height"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::parse(
            file,
            mo,
            format!("maxval {maxval} unsupported (8-bit only)"),
        ));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::parse(file, pos, "expected whitespace before raster"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .filter(|n| *n <= bytes.len() - pos)
        .ok_or_else(|| Error::parse(file, bytes.len(), "raster shorter than declared size"))?;
    let raster = &bytes[pos..pos + n];
    if let Some(k) = raster.iter().position(|&b| b as usize > maxval) {
        return Err(Error::parse(file, pos + k, "sample exceeds maxval"));
    }
    let plane = width * height;
    let mut data = vec![0.0f32; n];
    for (k, &b) in raster.iter().enumerate() {
        data[(k % channels) * plane + k / channels] = b as f32 / 255.0;
    }
    Tensor3::from_vec(Shape3::new(channels, height, width), data)
}

/// Encodes a one- or three-channel frame as PGM/PPM, clamping to [0, 1].
pub fn encode_pnm(t: &Tensor3) -> Result<Vec<u8>> {
    let magic = match t.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::invalid(format!("PNM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", t.width(), t.height()).into_bytes();
    let plane = t.shape().pixels();
    for k in 0..plane {
        for c in 0..t.channels() {
            out.push((t.data()[c * plane + k].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}

/// Reads one frame, choosing the decoder by file extension.
pub fn read_frame(path: &Path) -> Result<Tensor3> {
    match extension(path).as_deref() {
        Some("f32") => {
            let hdr = path.with_extension("hdr");
            let shape = parse_header(&read_text(&hdr)?, &hdr)?;
            decode_raw(&read_file(path)?, shape, path)
        }
        Some("pgm" | "ppm" | "pnm") => decode_pnm(&read_file(path)?, path),
        _ => Err(Error::invalid(format!(
            "{}: unknown frame format (expected .f32, .pgm or .ppm)",
            path.display()
        ))),
    }
}

/// Writes a raw frame and its sidecar header.
pub fn write_raw_frame(path: &Path, t: &Tensor3) -> Result<()> {
    blob::write_blob(path, t.data())?;
    write_atomic(&path.with_extension("hdr"), render_header(t.shape()).as_bytes())
}

/// Parses an ordering manifest into frame file names.
pub fn parse_sequence_manifest(text: &str, file: &Path) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut names = Vec::new();
    for (off, line) in content_lines(text) {
        let toks: Vec<_> = tokens(off, line).collect();
        if toks.len() != 1 {
            return Err(Error::parse(file, off, "expected one file name per line"));
        }
        let name = toks[0].1;
        if name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::parse(file, off, format!("'{name}' must be a plain file name")));
        }
        if !FRAME_EXTENSIONS
            .iter()
            .any(|e| extension(Path::new(name)).as_deref() == Some(e))
        {
            return Err(Error::parse(file, off, format!("'{name}' is not a frame file")));
        }
        if !seen.insert(name) {
            return Err(Error::parse(file, off, format!("'{name}' listed twice")));
        }
        names.push(name.to_string());
    }
    if names.is_empty() {
        return Err(Error::parse(file, text.len(), "no frames listed"));
    }
    Ok(names)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SEQUENCE_MANIFEST)
    } else {
        path.to_path_buf()
    }
}

/// Reads a sequence given its directory or its ordering manifest.
pub fn read_sequence(path: &Path) -> Result<Vec<Tensor3>> {
    let manifest = manifest_path(path);
    let text = read_text(&manifest)?;
    let names = parse_sequence_manifest(&text, &manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));

    let listed: HashSet<&str> = names.iter().map(String::as_str).collect();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut unlisted = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_frame = extension(&p).is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str()));
        if let (true, Some(name)) = (is_frame, p.file_name().and_then(|n| n.to_str())) {
            if !listed.contains(name) {
                unlisted.push(name.to_string());
            }
        }
    }
    if !unlisted.is_empty() {
        unlisted.sort();
        return Err(Error::parse(
            &manifest,
            text.len(),
            format!("frame files not listed: {}", unlisted.join(", ")),
        ));
    }

    let mut frames: Vec<Tensor3> = Vec::with_capacity(names.len());
    for name in &names {
        let f = read_frame(&dir.join(name))?;
        if let Some(first) = frames.first() {
            if f.shape() != first.shape() {
                return Err(Error::invalid(format!(
                    "{name}: shape {} differs from the first frame's {}",
                    f.shape(),
                    first.shape()
                )));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

/// Writes `frames` as raw frames plus an ordering manifest into `dir`,
/// creating it if needed.
pub fn write_sequence(dir: &Path, frames: &[Tensor3]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot write an empty sequence"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let width = frames.len().to_string().len().max(4);
    let mut manifest = String::new();
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:0width$}.f32");
        write_raw_frame(&dir.join(&name), f)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    write_atomic(&dir.join(SEQUENCE_MANIFEST), manifest.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("f")
    }

    #[test]
    fn header_round_trip_and_errors() {
        let s = Shape3::new(3, 4, 5);
        assert_eq!(parse_header(&render_header(s), p()).unwrap(), s);
        assert!(matches!(
            parse_header("3 0 5", p()),
            Err(Error::Parse { offset: 2, .. })
        ));
        assert!(parse_header("3 4", p()).is_err());
        assert!(parse_header("3 4 5\n1\n", p()).is_err());
    }

    #[test]
    fn raw_rejects_wrong_length_and_nan() {
        let s = Shape3::new(1, 1, 2);
        assert!(decode_raw(&[0; 4], s, p()).is_err());
        let mut bytes = blob::encode_f32_le(&[1.0, f32::NAN]);
        assert!(matches!(
            decode_raw(&bytes, s, p()),
            Err(Error::Parse { offset: 4, .. })
        ));
        bytes = blob::encode_f32_le(&[1.0, 2.0]);
        assert_eq!(decode_raw(&bytes, s, p()).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn pgm_divides_by_255() {
        let bytes = b"P5\n# comment\n3 1\n255\n\x00\x80\xff";
        let t = decode_pnm(bytes, p()).unwrap();
        assert_eq!(t.shape(), Shape3::new(1, 1, 3));
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn ppm_is_deinterleaved() {
        let bytes = b"P6 2 1 255\n\x01\x02\x03\x04\x05\x06";
        let t = decode_pnm(bytes, p()).unwrap();
        let expect: Vec<f32> = [1u8, 4, 2, 5, 3, 6].iter().map(|&b| b as f32 / 255.0).collect();
        assert_eq!(t.data(), expect.as_slice());
        assert_eq!(decode_pnm(&encode_pnm(&t).unwrap(), p()).unwrap(), t);
    }

    #[test]
    fn pnm_errors() {
        assert!(matches!(
            decode_pnm(b"P3 1 1 255\n\x00", p()),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(decode_pnm(b"P5 2 2 255\n\x00", p()).is_err());
        assert!(decode_pnm(b"P5 1 1 65535\n\x00\x00", p()).is_err());
        assert!(matches!(
            decode_pnm(b"P5 1 1 10\n\x0b", p()),
            Err(Error::Parse { offset: 10, .. })
        ));
        assert!(decode_pnm(b"P5 0 1 255\n", p()).is_err());
        assert!(decode_pnm(b"P5 1", p()).is_err());
    }

    #[test]
    fn sequence_manifest_rules() {
        assert_eq!(
            parse_sequence_manifest("a.f32\n# c\nb.pgm\n", p()).unwrap(),
            vec!["a.f32", "b.pgm"]
        );
        assert!(matches!(
            parse_sequence_manifest("a.f32\na.f32\n", p()),
            Err(Error::Parse { offset: 6, .. })
        ));
        assert!(parse_sequence_manifest("../a.f32\n", p()).is_err());
        assert!(parse_sequence_manifest("a.txt\n", p()).is_err());
        assert!(parse_sequence_manifest("", p()).is_err());
    }

    #[test]
    fn sequence_round_trip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Tensor3> = (0..3)
            .map(|i| {
                Tensor3::from_vec(
                    Shape3::new(2, 2, 3),
                    (0..12).map(|k| (i * 12 + k) as f32 * 0.1).collect(),
                )
                .unwrap()
            })
            .collect();
        write_sequence(dir.path(), &frames).unwrap();
        assert_eq!(read_sequence(dir.path()).unwrap(), frames);
        assert_eq!(read_sequence(&dir.path().join(SEQUENCE_MANIFEST)).unwrap(), frames);

        std::fs::write(dir.path().join("stray.pgm"), b"P5 1 1 255\n\x00").unwrap();
        assert!(matches!(read_sequence(dir.path()), Err(Error::Parse { .. })));
        std::fs::remove_file(dir.path().join("stray.pgm")).unwrap();

        write_raw_frame(
            &dir.path().join("frame_0001.f32"),
            &Tensor3::zeros(Shape3::new(1, 2, 3)),
        )
        .unwrap();
        assert!(matches!(read_sequence(dir.path()), Err(Error::InvalidInput(_))));
    }
}
