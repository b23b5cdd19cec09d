#![no_main]

use libfuzzer_sys::fuzz_target;
use umloc::datasim::TrajectoryFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = TrajectoryFile::parse(text);
    }
});
