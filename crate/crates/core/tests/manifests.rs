use std::path::Path;

use oosd::bench::dataset::{DatasetManifest, IdOosSpec};
use oosd::bench::harness::manifest_paths;

fn manifests() -> Vec<DatasetManifest> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests");
    manifest_paths(&dir).unwrap().iter().map(|p| DatasetManifest::load(p).unwrap()).collect()
}

#[test]
fn thirteen_manifests_parse() {
    let ms = manifests();
    assert_eq!(ms.len(), 13);
    let hint3 = ms.iter().filter(|m| m.group.as_deref() == Some("HINT3")).count();
    assert_eq!(hint3, 3);
}

#[test]
fn published_counts_are_encoded() {
    let ms = manifests();
    let get = |n: &str| ms.iter().find(|m| m.name == n).unwrap();
    let clinc = get("CLINC150-FULL").expected.unwrap();
    assert_eq!(clinc.train, [11300, 3700, 100]);
    assert_eq!(clinc.test, [3390, 1110, 1000]);
    let snips = get("SNIPS");
    assert_eq!(snips.expected.unwrap().test, [500, 200, 0]);
    assert_eq!(
        snips.idoos,
        Some(IdOosSpec::Intents(vec!["SearchCreativeWork".into(), "SearchScreeningEvent".into()]))
    );
    assert_eq!(get("HAR").split.ratio, Some([0.8, 0.1, 0.1]));
}
