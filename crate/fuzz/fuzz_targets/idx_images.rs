//! Fuzz the IDX image decoder (the MNIST-family binary format).

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = dfdg::data::parse_idx_images(data);
});
