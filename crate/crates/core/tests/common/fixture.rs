//! Hand-built DoTA-format annotations with known anomaly windows.

use std::path::PathBuf;

use tad_core::data::{import_dota_annotations, Clip};

pub struct Expected {
    pub name: &'static str,
    pub tag: &'static str,
    pub labels: Vec<u8>,
    pub tracks: usize,
}

fn window(frames: usize, start: usize, end: usize) -> Vec<u8> {
    (0..frames).map(|f| u8::from((start..end).contains(&f))).collect()
}

pub fn expected() -> Vec<Expected> {
    vec![
        Expected { name: "fixture_oo", tag: "OO", labels: vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0], tracks: 1 },
        Expected { name: "fixture_la", tag: "LA*", labels: window(10, 0, 3), tracks: 2 },
        Expected { name: "fixture_st", tag: "ST*", labels: vec![0, 0, 0, 0, 0, 0, 1, 1], tracks: 0 },
    ]
}

pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dota")
}

pub fn import(name: &str) -> Clip {
    let root = fixture_root();
    import_dota_annotations(
        root.join("annotations").join(format!("{name}.json")),
        root.join("features").join(name),
    )
    .unwrap()
}

/// Imports every fixture clip and compares labels and tags exactly.
pub fn check_dota_fixture() -> usize {
    let cases = expected();
    for e in &cases {
        let clip = import(e.name);
        assert_eq!(clip.id, e.name);
        assert_eq!(clip.labels, e.labels, "{}: labels", e.name);
        assert_eq!(clip.category.to_string(), e.tag, "{}: category", e.name);
        assert_eq!(clip.tracks.tracks.len(), e.tracks, "{}: tracks", e.name);
        assert_eq!(clip.flows.len(), e.labels.len());
    }
    cases.len()
}
