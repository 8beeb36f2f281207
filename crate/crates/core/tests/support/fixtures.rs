//! Small seeded corpora and models shared by the integration tests.
#![allow(dead_code)]

use consert::data::{build_vocab, SyntheticCorpus, SyntheticSizes};
use consert::encoder::{EncoderConfig, EncoderParams, Pooling, SentenceModel};

pub fn small_sizes() -> SyntheticSizes {
    SyntheticSizes {
        n_templates: 8,
        n_per_template: 30,
        dev_pairs: 80,
        test_pairs: 100,
        nli_examples: 200,
        ..SyntheticSizes::default()
    }
}

pub fn small_corpus(seed: u64) -> SyntheticCorpus {
    small_sizes().generate(seed)
}

pub fn all_texts(corpus: &SyntheticCorpus) -> Vec<String> {
    let mut texts = corpus.unlabeled.clone();
    for p in corpus.dev.iter().chain(&corpus.test) {
        texts.push(p.sentence_a.clone());
        texts.push(p.sentence_b.clone());
    }
    for ex in &corpus.nli {
        texts.push(ex.premise.clone());
        texts.push(ex.hypothesis.clone());
    }
    texts
}

pub fn tiny_model(corpus: &SyntheticCorpus, d_model: usize, n_layers: usize, seed: u64) -> SentenceModel {
    let vocab = build_vocab(&all_texts(corpus), 1).unwrap();
    let config = EncoderConfig {
        vocab_size: vocab.len(),
        max_len: 32,
        d_model,
        n_layers,
        n_heads: 2,
        d_ff: 2 * d_model,
        pooling: if n_layers >= 2 { Pooling::LastTwoLayersMean } else { Pooling::LastLayerMean },
    };
    SentenceModel::new(EncoderParams::init(&config, seed).unwrap(), vocab).unwrap()
}
