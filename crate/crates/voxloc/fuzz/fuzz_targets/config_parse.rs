#![no_main]

use libfuzzer_sys::fuzz_target;

use voxloc::config::parse_config;

// Run configs are user-written text; the parser must never panic. An
// accepted config re-parses from its canonical display form to the same
// value (display is the canonical encoding).
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config(text) {
            let reparsed = parse_config(&cfg.to_display_string()).expect("round trip");
            assert_eq!(cfg, reparsed);
        }
    }
});
