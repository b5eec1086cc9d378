#![no_main]

use std::path::Path;

use changenet::io::frames::decode_pnm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_pnm(data, Path::new("fuzz")) {
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
