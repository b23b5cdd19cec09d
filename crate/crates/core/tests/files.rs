//! Text formats on disk: dataset round trips and the fuzz seed corpus.

use std::path::{Path, PathBuf};

use umloc::cgan::CganSidecar;
use umloc::datasim::{simulate, Dataset, SimConfig, TrajectoryFile};
use umloc::evalkit::MetricsReport;
use umloc::mapkit::{DistanceMap, OccupancyGrid};
use umloc::qnet::QnetSidecar;
use umloc::trainer::TrainConfig;

#[test]
fn simulated_dataset_round_trips_through_a_directory() {
    let ds = simulate(&SimConfig::new(12, 5, 4.0, 60.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_dir(dir.path()).unwrap();
    let back = Dataset::read_dir(dir.path()).unwrap();
    assert_eq!(back.maps.len(), ds.maps.len());
    for (a, b) in ds.maps.iter().zip(&back.maps) {
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.distance.values(), b.distance.values());
    }
    assert_eq!(back.trajectories.len(), ds.trajectories.len());
    for (a, b) in ds.trajectories.iter().zip(&back.trajectories) {
        assert_eq!((&a.name, a.map_id, a.split), (&b.name, b.map_id, b.split));
        assert_eq!(a.truth.positions(), b.truth.positions());
        for (x, y) in a.imu.samples().iter().zip(b.imu.samples()) {
            for (u, v) in x.channels().iter().zip(y.channels()) {
                assert!((u - v).abs() < 1e-9, "{u} vs {v}");
            }
        }
    }
}

fn corpus(target: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

/// Seeds should exercise the accepting path, not just the error path.
#[test]
fn fuzz_seeds_are_valid_inputs() {
    for f in corpus("map") {
        let text = read(&f);
        assert!(
            OccupancyGrid::parse(&text).is_ok() || DistanceMap::parse(&text).is_ok(),
            "{}",
            f.display()
        );
    }
    for f in corpus("trajectory") {
        TrajectoryFile::parse(&read(&f)).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
    }
    for f in corpus("config") {
        TrainConfig::parse(&read(&f), 0)
            .unwrap()
            .validate()
            .unwrap();
    }
    for f in corpus("sidecar") {
        let text = read(&f);
        assert!(
            QnetSidecar::parse(&text).is_ok() || CganSidecar::parse(&text).is_ok(),
            "{}",
            f.display()
        );
    }
    for f in corpus("report") {
        let r = MetricsReport::parse(&read(&f)).unwrap();
        assert!(!r.blocks.is_empty() && !r.aggregates.is_empty());
    }
}
