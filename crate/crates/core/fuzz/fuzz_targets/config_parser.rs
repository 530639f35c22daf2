#![no_main]

use libfuzzer_sys::fuzz_target;
use mlbranch_core::config::parse_config;

// First line of the input is treated as `key=value` overrides separated by `;`,
// the rest as the config file.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (head, body) = text.split_once('\n').unwrap_or(("", text));
    let overrides: Vec<(String, String)> = head
        .split(';')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    if let Ok(cfg) = parse_config(body, &overrides, None) {
        cfg.validate().expect("parse_config returns validated configs");
    }
});
