#![no_main]

use changenet::io::report::parse_factors;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(f) = parse_factors(text) {
            assert!(f.windows(2).all(|w| w[0] < w[1]));
            assert!(f.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
});
