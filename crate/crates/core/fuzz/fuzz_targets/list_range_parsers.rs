#![no_main]

use libfuzzer_sys::fuzz_target;
use mlbranch_core::config::{parse_f64, parse_f64_list, parse_level_range};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(x) = parse_f64(s) {
        assert!(x.is_finite());
    }
    if let Ok(xs) = parse_f64_list(s) {
        assert!(!xs.is_empty() && xs.iter().all(|x| x.is_finite()));
    }
    if let Ok(r) = parse_level_range(s) {
        assert!(r.start() <= r.end());
    }
});
