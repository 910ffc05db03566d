#![no_main]

use libfuzzer_sys::fuzz_target;
use siid_core::metrics::JudgementSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(set) = JudgementSet::parse(text) {
            let again = JudgementSet::parse(&set.to_text()).expect("printed judgements parse");
            assert_eq!(again.judgements.len(), set.judgements.len());
        }
    }
});
