#![no_main]

use libfuzzer_sys::fuzz_target;

use voxloc::eval::{parse_trace, trace_to_csv};

// Episode traces come back from disk for offline analysis; the parser
// must never panic, and anything it accepts must round-trip through the
// writer.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(trace) = parse_trace(text) {
            let reparsed = parse_trace(&trace_to_csv(&trace)).expect("round trip");
            assert_eq!(trace, reparsed);
        }
    }
});
