//! Fuzz the run-record decoder (JSON plus schema-version checking).

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = dfdg::metrics::parse_run_record(data);
});
