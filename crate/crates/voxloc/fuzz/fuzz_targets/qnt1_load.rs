#![no_main]

use libfuzzer_sys::fuzz_target;

// The .qnt1 checkpoint decoder must reject arbitrary bytes without
// panicking. Accepted checkpoints round-trip bit-exactly.
fuzz_target!(|data: &[u8]| {
    if let Ok(net) = voxloc::qnet::QNetwork::from_bytes(data) {
        assert_eq!(net.to_bytes(), data);
    }
});
