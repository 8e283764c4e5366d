//! Fuzz the structured-text partition parser. Valid inputs describe an exact
//! disjoint cover of the training indices; anything else must come back as a
//! structured error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = dfdg::data::parse_partition(text);
    }
});
