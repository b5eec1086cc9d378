#![no_main]

use std::path::Path;

use changenet::io::report::parse_thresholds;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let names: Vec<String> = ["conv1", "conv3", "conv5"].iter().map(|s| s.to_string()).collect();
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = parse_thresholds(text, Path::new("fuzz"), &names) {
            assert_eq!(t.len(), names.len());
            assert!(t.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
});
