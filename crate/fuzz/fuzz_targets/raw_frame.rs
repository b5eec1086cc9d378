#![no_main]

use std::path::Path;

use changenet::io::frames::{decode_raw, parse_header};
use libfuzzer_sys::fuzz_target;

// Input: a text header line, a newline, then the raw payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == b'\n').unwrap_or(data.len());
    let Ok(header) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let Ok(shape) = parse_header(header, Path::new("fuzz.hdr")) else {
        return;
    };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(t) = decode_raw(payload, shape, Path::new("fuzz.f32")) {
        assert!(t.data().iter().all(|v| v.is_finite()));
    }
});
