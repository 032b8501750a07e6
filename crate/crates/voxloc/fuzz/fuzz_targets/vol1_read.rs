#![no_main]

use libfuzzer_sys::fuzz_target;

// The .vol1 decoder must reject arbitrary bytes without panicking or
// allocating beyond the input size. A successful decode must re-encode
// to the exact input (the format has a single canonical encoding).
fuzz_target!(|data: &[u8]| {
    if let Ok(vol) = voxloc::volume::Volume::from_bytes(data) {
        assert_eq!(vol.to_bytes(), data);
    }
});
