#![no_main]

use libfuzzer_sys::fuzz_target;
use siid_core::formats::{decode_pfm, encode_pfm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pfm(data) {
        let again = decode_pfm(&encode_pfm(&img).expect("decoded maps re-encode")).expect("round trip");
        assert_eq!(again.shape(), img.shape());
    }
});
