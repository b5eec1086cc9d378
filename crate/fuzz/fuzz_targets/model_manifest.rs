#![no_main]

use std::path::Path;

use changenet::io::manifest::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_manifest(text, Path::new("fuzz")) {
            // Anything accepted must render and parse back to the same model.
            let again = parse_manifest(&m.render(), Path::new("fuzz")).expect("rendered manifest parses");
            assert_eq!(again.spec, m.spec);
        }
    }
});
