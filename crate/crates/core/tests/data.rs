//! Loading datasets from disk and the processed artifacts.

use std::fs;
use std::path::Path;

use kgattn::data::{Dataset, Triple};
use kgattn::{KgeError, ModelConfig};
use proptest::prelude::*;

fn write_split(dir: &Path, name: &str, rows: &[(&str, &str, &str)]) {
    let body: String = rows.iter().map(|(h, r, t)| format!("{h}\t{r}\t{t}\n")).collect();
    fs::write(dir.join(name), body).unwrap();
}

fn sample_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_split(
        dir.path(),
        "train.txt",
        &[("/m/a", "/r/likes", "/m/b"), ("/m/b", "/r/likes", "/m/c"), ("/m/a", "/r/knows", "/m/c"), ("/m/a", "/r/likes", "/m/b")],
    );
    write_split(dir.path(), "valid.txt", &[("/m/c", "/r/knows", "/m/a")]);
    write_split(dir.path(), "test.txt", &[("/m/d", "/r/likes", "/m/a")]);
    dir
}

#[test]
fn loads_counts_and_round_trips_names() {
    let dir = sample_dir();
    let data = Dataset::load(dir.path()).unwrap();
    let stats = data.stats();
    assert_eq!((stats.entities, stats.relations), (4, 2));
    // duplicate training line dropped
    assert_eq!((stats.train, stats.valid, stats.test), (3, 1, 1));
    assert_eq!(data.train.len(), 6);
    assert!(data.train.has_reciprocals());
    let text = fs::read_to_string(dir.path().join("train.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    for (t, line) in data.train.originals().zip(&lines) {
        let (h, r, o) = data.vocab.decode(*t).unwrap();
        assert_eq!(format!("{h}\t{r}\t{o}"), *line);
    }
    assert_eq!(data.checksum.len(), 64);
    assert_eq!(data.file_checksums.len(), 3);
}

#[test]
fn filter_covers_every_split_in_both_directions() {
    let data = Dataset::load(sample_dir().path()).unwrap();
    let r = data.vocab.relation_count() as u32;
    for store in [&data.train, &data.valid, &data.test] {
        for t in store.originals() {
            assert!(data.filter.targets(t.source, t.relation).unwrap().contains(&t.target));
            assert!(data.filter.targets(t.target, t.relation + r).unwrap().contains(&t.source));
        }
    }
}

#[test]
fn empty_directory_lists_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    match Dataset::load(dir.path()) {
        Err(KgeError::MissingFiles { missing, .. }) => {
            assert_eq!(missing, vec!["train.txt", "valid.txt", "test.txt"]);
        }
        other => panic!("expected missing files, got {other:?}"),
    }
}

#[test]
fn processed_artifacts_are_written() {
    let data = Dataset::load(sample_dir().path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    data.write_processed(out.path()).unwrap();
    for name in ["entities.tsv", "relations.tsv", "train.ids.tsv", "valid.ids.tsv", "test.ids.tsv", "filter.tsv"] {
        assert!(out.path().join(name).is_file(), "{name}");
    }
    let ids = fs::read_to_string(out.path().join("train.ids.tsv")).unwrap();
    assert_eq!(ids.lines().count(), 6);
}

#[test]
fn in_memory_dataset_rejects_out_of_range_ids() {
    let bad = vec![Triple::new(0, 5, 1)];
    assert!(Dataset::from_id_triples("x", 3, 2, bad, vec![], vec![]).is_err());
}

proptest! {
    #[test]
    fn reciprocal_is_an_involution(s in 0u32..1000, r in 0u32..50, t in 0u32..1000) {
        let triple = Triple::new(s, r, t);
        prop_assert_eq!(triple.reciprocal(50).reciprocal(50), triple);
        prop_assert_eq!(triple.reciprocal(50).relation, r + 50);
    }
}

#[test]
fn shipped_configs_equal_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let presets = ModelConfig::presets();
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let config = ModelConfig::from_file(&path).unwrap();
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        assert_eq!(config.preset_name(), stem);
        assert!(presets.contains(&config), "{stem} differs from its preset");
        seen += 1;
    }
    assert_eq!(seen, presets.len());
}
