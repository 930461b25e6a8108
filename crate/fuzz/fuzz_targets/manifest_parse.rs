#![no_main]

use libfuzzer_sys::fuzz_target;
use mambareg::data::{format_manifest, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest(text) {
        if let Ok(out) = format_manifest(&records) {
            assert_eq!(parse_manifest(&out).expect("formatted manifest parses"), records);
        }
    }
});
