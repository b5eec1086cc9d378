#![no_main]

use std::path::Path;

use changenet::io::blob::{decode_f32_le, encode_f32_le};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(values) = decode_f32_le(data, Path::new("fuzz.bin")) {
        assert_eq!(encode_f32_le(&values), data);
    }
});
