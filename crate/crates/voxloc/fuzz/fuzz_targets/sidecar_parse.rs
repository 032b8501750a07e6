#![no_main]

use libfuzzer_sys::fuzz_target;

use voxloc::phantom::{parse_sidecar, write_sidecar};

// Truth sidecars are hand-editable text; the parser must never panic.
// Anything it accepts must survive a write/parse round trip.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(truth) = parse_sidecar(text) {
            let reparsed = parse_sidecar(&write_sidecar(&truth)).expect("round trip");
            assert_eq!(truth, reparsed);
        }
    }
});
