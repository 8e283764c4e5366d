//! Fuzz the binary checkpoint decoder: header, architecture JSON, entry
//! table, and tensor payloads all come from untrusted bytes here.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = dfdg::models::parse_checkpoint(data);
});
