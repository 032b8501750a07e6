#![no_main]

use libfuzzer_sys::fuzz_target;

use voxloc::phantom::{parse_manifest, write_manifest};

// Dataset manifests are plain text; the parser must never panic, and
// accepted manifests must round-trip through the writer unchanged.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = parse_manifest(text) {
            let reparsed = parse_manifest(&write_manifest(&entries)).expect("round trip");
            assert_eq!(entries, reparsed);
        }
    }
});
