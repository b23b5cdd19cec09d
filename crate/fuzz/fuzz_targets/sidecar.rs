#![no_main]

use libfuzzer_sys::fuzz_target;
use umloc::cgan::CganSidecar;
use umloc::qnet::QnetSidecar;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = QnetSidecar::parse(text);
        let _ = CganSidecar::parse(text);
    }
});
