use std::path::Path;

use oosd::bench::dataset::{load_dataset, DatasetManifest};
use oosd::bench::harness::{run_bundle, BenchOptions};
use oosd::container::ModelContainer;
use oosd::pipeline::{FormulationKind, OosSystem, PipelineError, SystemConfig, TrainingData};
use oosd::textnorm::EntityLexicon;

fn write(root: &Path, rel: &str, body: &str) {
    let p = root.join(rel);
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    std::fs::write(p, body).unwrap();
}

fn clinc_like(root: &Path) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for intent in ["balance", "transfer", "card_lost", "pin_change"] {
        for i in 0..12 {
            train.push(format!("[\"{intent} request number {i}\", \"{intent}\"]"));
        }
        test.push(format!("[\"{intent} request please\", \"{intent}\"]"));
    }
    let doc = format!(
        "{{\"train\": [{}], \"oos_train\": [[\"tell me a joke\", \"oos\"]], \"test\": [{}], \"oos_test\": [[\"how tall is everest\", \"oos\"]]}}",
        train.join(","),
        test.join(",")
    );
    write(root, "clinc/data.json", &doc);
}

const CLINC_MANIFEST: &str = r#"
name = "mini-clinc"
ood_labels = ["oos"]
idoos = { auto = { fraction = 0.25, seed = 1 } }
[[sources]]
split = "train"
path = "clinc/data.json"
format = "clinc-json"
key = "train"
[[sources]]
split = "train"
path = "clinc/data.json"
format = "clinc-json"
key = "oos_train"
[[sources]]
split = "test"
path = "clinc/data.json"
format = "clinc-json"
key = "test"
[[sources]]
split = "test"
path = "clinc/data.json"
format = "clinc-json"
key = "oos_test"
[expected]
train = [36, 12, 1]
dev = [0, 0, 0]
test = [3, 1, 1]
"#;

#[test]
fn clinc_json_auto_idoos_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    clinc_like(dir.path());
    let m: DatasetManifest = toml::from_str(CLINC_MANIFEST).unwrap();
    let bundle = load_dataset(&m, dir.path()).unwrap();
    assert_eq!(bundle.digest(), load_dataset(&m, dir.path()).unwrap().digest());
    let runs = run_bundle(&m.name, None, &bundle, &BenchOptions::default()).unwrap();
    assert_eq!(runs.len(), FormulationKind::ALL.len());
    for r in runs {
        let v = r.full.values();
        assert!(v.iter().flatten().all(|x| (0.0..=1.0).contains(x)), "{:?}", r.formulation);
    }
}

#[test]
fn dir_per_class_with_ratio_split() {
    let dir = tempfile::tempdir().unwrap();
    for intent in ["lights", "music", "alarm"] {
        let body: String = (0..20).map(|i| format!("{intent} thing {i}\n")).collect();
        write(dir.path(), &format!("home/{intent}.txt"), &body);
    }
    let m: DatasetManifest = toml::from_str(
        r#"
        name = "home"
        idoos = { intents = ["alarm"] }
        [split]
        ratio = [0.8, 0.1, 0.1]
        [[sources]]
        split = "all"
        path = "home"
        format = "dir-per-class"
        [expected]
        train = [32, 16, 0]
        dev = [4, 2, 0]
        test = [4, 2, 0]
        "#,
    )
    .unwrap();
    load_dataset(&m, dir.path()).unwrap();
}

#[test]
fn container_file_round_trip_and_limits() {
    let data = TrainingData {
        is_examples: (0..40).map(|i| (format!("order number {i} status"), format!("intent{}", i % 4))).collect(),
        oos_examples: vec!["what is the meaning of life".into()],
    };
    let cfg = SystemConfig::default();
    let sys = OosSystem::train(&data, &cfg, EntityLexicon::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.oosd");
    let c = ModelContainer::new(sys, &cfg);
    let size = c.save(&path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, size);
    let back = ModelContainer::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    let q = "order number 3 status";
    assert_eq!(
        serde_json::to_string(&back.system.predict(q).unwrap()).unwrap(),
        serde_json::to_string(&c.system.predict(q).unwrap()).unwrap()
    );

    let too_many = TrainingData {
        is_examples: (0..25_001).map(|i| (format!("q {i}"), "a".to_string())).collect(),
        oos_examples: Vec::new(),
    };
    assert!(matches!(
        OosSystem::train(&too_many, &cfg, EntityLexicon::default()),
        Err(PipelineError::LimitExceeded { got: 25_001, .. })
    ));
}
