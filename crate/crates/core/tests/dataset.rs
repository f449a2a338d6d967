use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use forge_core::edit_ops::{compose_edits, EditOp};
use forge_core::sample_generator::*;
use forge_core::synth::write_synthetic_corpus;
use proptest::prelude::*;

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn every_plan_fits_its_class(seed in any::<u64>(), fake in any::<bool>(), face in any::<bool>()) {
        let table = RangeTable::standard();
        let label = if fake { Label::Fake } else { Label::Real };
        let class = SampleClass::for_label(label, face);
        let (perm, params) = sample_plan(seed, label, face, &table).unwrap();
        prop_assert!(table.complies(class, &perm, &params));
        if class != SampleClass::Fake {
            prop_assert!(params.get(EditOp::WhiteBalance).is_none());
        }
        let (lo, hi) = table.class(class).count;
        prop_assert!((lo..=hi).contains(&perm.len()));
    }
}

#[test]
fn real_label_ignores_face_flag() {
    assert_eq!(SampleClass::for_label(Label::Real, true), SampleClass::Real);
    assert_eq!(SampleClass::for_label(Label::Fake, true), SampleClass::FakeFace);
    assert_eq!(SampleClass::for_label(Label::Fake, false), SampleClass::Fake);
}

#[test]
fn dataset_writer_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_synthetic_corpus(dir.path().join("corpus"), 12, 32, 5).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ma = write_dataset(&corpus, 10, 77, &a, 8, |_, _| {}).unwrap();
    let mb = write_dataset(&corpus, 10, 77, &b, 8, |_, _| {}).unwrap();
    assert_eq!(ma, mb);
    assert_eq!((ma.real, ma.fake), (10, 10));
    assert_eq!(ma.shards.len(), 3);
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta, tb);
    assert!(ta.contains_key("manifest.json"));

    let c = dir.path().join("c");
    write_dataset(&corpus, 10, 78, &c, 8, |_, _| {}).unwrap();
    assert_ne!(tree_bytes(&c), ta);
}

#[test]
fn written_records_comply_and_reproduce_edits() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_synthetic_corpus(dir.path().join("corpus"), 10, 32, 9).unwrap();
    let out = dir.path().join("ds");
    let manifest = write_dataset(&corpus, 6, 3, &out, 100, |_, _| {}).unwrap();
    let table = RangeTable::standard();
    let text = fs::read_to_string(out.join(&manifest.shards[0]).join("samples.jsonl")).unwrap();
    let records: Vec<SampleRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 12);
    for r in &records {
        let class = SampleClass::for_label(r.label, r.contains_face);
        assert!(table.complies(class, &r.recipe.perm, &r.recipe.params), "{r:?}");
    }
    let samples: Vec<TrainingSample> = generate_dataset(&corpus, 6, 3).unwrap().collect::<Result<_, _>>().unwrap();
    for s in &samples {
        let again = compose_edits(&s.base, &s.params, &s.perm, &s.mask).unwrap();
        assert_eq!(again, s.edited);
        assert_eq!(s.label, if s.index % 2 == 0 { Label::Real } else { Label::Fake });
    }
}

#[test]
fn split_keeps_images_on_one_side() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_synthetic_corpus(dir.path(), 20, 32, 1).unwrap();
    let (train, held) = corpus.split(15);
    assert_eq!(train.images().len(), 15);
    assert_eq!(held.images().len(), 5);
    for img in held.images() {
        assert!(!train.images().contains(&img));
    }
}

#[test]
fn region_items_fill_missing_masks() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_synthetic_corpus(dir.path(), 14, 32, 2).unwrap();
    assert!(corpus.entries.iter().any(|e| e.mask.is_none()));
    let items = corpus.region_items(4).unwrap();
    assert_eq!(items.len(), corpus.entries.len());
    assert!(items.iter().all(|it| it.mask.weight_sum() > 0.0));
    assert_eq!(corpus.region_items(4).unwrap()[13].mask, items[13].mask);
}

#[test]
fn empty_corpus_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Corpus::open(dir.path()).unwrap_err();
    assert_eq!(err.code(), "input");
}
