use std::path::Path;

use robustlab::cli::classify;
use robustlab::Manifest;
use robustlab_core::structure::Stacking;

const MINIMAL: &str = r#"
[dataset]
kind = "synthetic"

[structure]
presets = ["(b)"]

[train]
epochs = 1
batch = 8
"#;

fn shipped(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests").join(name)
}

#[test]
fn shipped_manifests_validate() {
    for name in ["micro-grid.toml", "cifar10-desk.toml"] {
        let loaded = Manifest::load(&shipped(name)).unwrap();
        let resolved = loaded.manifest.validate().unwrap();
        assert!(!resolved.is_empty(), "{name}");
        assert_eq!(loaded.sha256.len(), 64);
    }
}

#[test]
fn micro_grid_scale_reaches_every_preset() {
    let m = Manifest::load(&shipped("micro-grid.toml")).unwrap().manifest;
    let resolved = m.validate().unwrap();
    let labels: Vec<&str> = resolved.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["(b)", "(h)", "(j)", "(l)", "(n)"]);
    for r in &resolved {
        assert_eq!((r.spec.image.height, r.spec.patch, r.spec.embed_dim, r.spec.classes), (8, 2, 16, 2));
        assert_eq!(r.spec.total_layers(), 2, "{}", r.label);
        if r.spec.stacking == Stacking::OriVit {
            assert_eq!(r.spec.stage_layers, [2]);
        }
    }
}

#[test]
fn defaults_fill_optional_sections() {
    let m = Manifest::parse(MINIMAL).unwrap();
    assert_eq!((m.seed, m.replicates, m.eval_batch), (0, 1, 64));
    assert!(m.attacks.is_empty() && m.prune.is_none());
    assert_eq!(m.train.mode(), "standard");
    m.validate().unwrap();
}

#[test]
fn schema_violations_are_manifest_errors() {
    let cases = [
        MINIMAL.replace("epochs = 1", "epochs = 1\nwarmup = 2"),
        MINIMAL.replace("kind = \"synthetic\"", "kind = \"mnist\""),
        MINIMAL.replace("batch = 8", "batch = \"eight\""),
        format!("{MINIMAL}\n[prune]\nfractions = [0.5, 0.1]"),
        format!("{MINIMAL}\n[prune]\nfractions = [1.5]"),
        MINIMAL.replace("presets = [\"(b)\"]", "presets = [\"(b)\", \"(b)\"]"),
        MINIMAL.replace("presets = [\"(b)\"]", "presets = []"),
        format!("replicates = 0\n{MINIMAL}"),
    ];
    for text in &cases {
        let err = Manifest::parse(text).and_then(|m| m.validate().map(|_| ()));
        let err = err.expect_err(text);
        assert_eq!(classify(&err).0, "invalid-manifest", "{text}\n{err:#}");
    }
}

#[test]
fn unknown_presets_and_incompatible_structures_keep_their_categories() {
    let unknown = Manifest::parse(&MINIMAL.replace("(b)", "(q)")).unwrap().validate().unwrap_err();
    assert_eq!(classify(&unknown).0, "invalid-input");

    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/manifest_parse/custom_rejected.toml"),
    )
    .unwrap();
    let err = Manifest::parse(&text).unwrap().validate().unwrap_err();
    assert_eq!(classify(&err), ("incompatible-structure", Some("oriViT-dimension"), 3));
    assert!(format!("{err:#}").contains("orivit-pconv"));
}

#[test]
fn manifest_round_trips_through_toml() {
    let m = Manifest::load(&shipped("micro-grid.toml")).unwrap().manifest;
    let text = toml::to_string(&m).unwrap();
    assert_eq!(Manifest::parse(&text).unwrap(), m);
}

#[test]
fn readme_manifest_example_is_valid() {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let start = readme.find("```toml\n").expect("toml example") + "```toml\n".len();
    let len = readme[start..].find("```").unwrap();
    let m = Manifest::parse(&readme[start..start + len]).unwrap();
    let labels: Vec<String> = m.validate().unwrap().into_iter().map(|r| r.label).collect();
    assert_eq!(labels, ["(b)", "(n)", "my-variant"]);
    assert_eq!(m.attacks.len(), 3);
}
