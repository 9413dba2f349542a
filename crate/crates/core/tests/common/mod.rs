#![allow(dead_code)]

use std::path::{Path, PathBuf};

use granary::corpus::{ingest, load_corpus, DecomposeConfig, LearningNode};
use granary::dataset::{build_domain_examples, tokenize_and_mask, TokenizedExample};
use granary::distiller::{distill_corpus, DistillConfig, MockBackend, MockBehavior, QtsaEntry, RetryPolicy};
use granary::tinylm::ByteTokenizer;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn fixture_nodes() -> Vec<LearningNode> {
    let dir = fixtures().join("minibook");
    let docs = load_corpus(&dir, &dir.join("manifest.json")).unwrap();
    ingest(&docs, &DecomposeConfig::default())
}

pub fn faulty_mock() -> MockBackend {
    MockBackend::with_behavior(
        7,
        MockBehavior {
            missing_answer_every: Some(10),
            ..Default::default()
        },
    )
}

pub fn distill_cfg() -> DistillConfig {
    DistillConfig {
        n_samples: 5,
        parallelism: 4,
        retry: RetryPolicy::no_wait(3),
        ..Default::default()
    }
}

pub fn fixture_entries() -> Vec<QtsaEntry> {
    distill_corpus(&fixture_nodes(), &distill_cfg(), &MockBackend::new(7))
        .unwrap()
        .entries
}

/// Tokenized SFT examples of the fixture pipeline, truncated to `max_len`.
pub fn fixture_sft(max_len: usize) -> Vec<TokenizedExample> {
    let tok = ByteTokenizer;
    build_domain_examples(&fixture_entries(), "", max_len)
        .unwrap()
        .iter()
        .map(|e| tokenize_and_mask(e, &tok))
        .collect()
}
