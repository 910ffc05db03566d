#![no_main]

use libfuzzer_sys::fuzz_target;
use siid_core::net::{decode_weights, encode_weights};

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = decode_weights(data) {
        assert_eq!(encode_weights(&w), data);
    }
});
