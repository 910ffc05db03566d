#![no_main]

use libfuzzer_sys::fuzz_target;
use siid_core::metrics::{parse_report, radar_svg};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(report) = parse_report(text) {
            if let Some(values) = report.chart_values() {
                radar_svg(&[("fuzz".to_string(), values)]);
            }
        }
    }
});
