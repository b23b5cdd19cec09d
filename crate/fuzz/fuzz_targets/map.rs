#![no_main]

use libfuzzer_sys::fuzz_target;
use umloc::mapkit::{distance_transform, DistanceMap, OccupancyGrid};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Anything that parses as a grid must also survive the transform.
        if let Ok(grid) = OccupancyGrid::parse(text) {
            if grid.height() * grid.width() <= 1 << 16 {
                let _ = distance_transform(&grid);
            }
        }
        let _ = DistanceMap::parse(text);
    }
});
