//! Fuzz the experiment-configuration parser: TOML decoding plus the
//! cross-field validation pass behind it.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = dfdg::config::parse_config(text);
    }
});
