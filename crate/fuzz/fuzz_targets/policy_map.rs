#![no_main]

use std::path::Path;

use changenet::io::report::parse_policy_map;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let names: Vec<String> = ["conv1", "conv6", "conv7"].iter().map(|s| s.to_string()).collect();
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(p) = parse_policy_map(text, Path::new("fuzz"), &names) {
            assert_eq!(p.len(), names.len());
        }
    }
});
