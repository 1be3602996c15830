use std::fs;
use std::path::{Path, PathBuf};

use scopilot_core::corpus::{build_corpus, read_sources, MetadataIndex};
use scopilot_core::index::{build_checksum, DenseIndex};
use scopilot_core::model::{Checkpoint, ModelConfig, ScholarLm};
use scopilot_core::orchestrator::{OrchestratorError, Resources};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Saves a small checkpoint and a matching index under `dir`.
fn artifacts(dir: &Path, seed: u64) -> (PathBuf, PathBuf, PathBuf) {
    let meta_path = fixtures().join("metadata.jsonl");
    let metadata = MetadataIndex::load_jsonl(&meta_path).unwrap();
    let built = build_corpus(&read_sources(&fixtures().join("papers")).unwrap(), &metadata, 1, 64).unwrap();
    let mut cfg = ModelConfig::desk(built.vocab.len());
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    let model = ScholarLm::init(cfg, seed).unwrap();
    let ckpt_path = dir.join(format!("m{seed}.ckpt"));
    let ckpt_id = Checkpoint::new(model.clone(), built.vocab.clone()).save(&ckpt_path).unwrap();
    let embs = model.embed_references(&built.vocab, metadata.entries(), 64).unwrap();
    let index = DenseIndex::build(&embs, build_checksum(&ckpt_id, &metadata.metadata_id())).unwrap();
    let index_path = dir.join(format!("m{seed}.idx"));
    index.save(&index_path).unwrap();
    (ckpt_path, index_path, meta_path)
}

#[test]
fn matching_artifacts_load() {
    let d = tempfile::tempdir().unwrap();
    let (ckpt, index, meta) = artifacts(d.path(), 1);
    let r = Resources::load(&ckpt, &index, &meta).unwrap();
    assert_eq!(r.index.len(), r.metadata.len());
    r.orchestrator().unwrap();
}

#[test]
fn index_from_another_checkpoint_is_stale() {
    let d = tempfile::tempdir().unwrap();
    let (ckpt1, _, meta) = artifacts(d.path(), 1);
    let (_, index2, _) = artifacts(d.path(), 2);
    let err = Resources::load(&ckpt1, &index2, &meta).err().expect("stale index accepted");
    assert!(matches!(err, OrchestratorError::StaleIndex { .. }), "{err}");
}

#[test]
fn edited_metadata_makes_index_stale() {
    let d = tempfile::tempdir().unwrap();
    let (ckpt, index, meta) = artifacts(d.path(), 1);
    let edited = d.path().join("edited.jsonl");
    let text = fs::read_to_string(&meta).unwrap().replace("Layer normalization", "Layer Normalisation");
    fs::write(&edited, text).unwrap();
    let err = Resources::load(&ckpt, &index, &edited).err().expect("stale index accepted");
    assert!(matches!(err, OrchestratorError::StaleIndex { .. }), "{err}");
}
