#![no_main]

use libfuzzer_sys::fuzz_target;
use umloc_cli::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // A manifest that parses must serialize back to the same manifest.
        if let Ok(m) = Manifest::parse(text) {
            if let Ok(out) = m.to_text() {
                assert_eq!(Manifest::parse(&out).ok(), Some(m));
            }
        }
    }
});
