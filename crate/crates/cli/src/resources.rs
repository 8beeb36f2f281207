//! Resolves the data section of a run config into in-memory datasets.

use anyhow::{Context, Result};
use consert::config::RunConfig;
use consert::data::{
    build_vocab, load_nli_tsv, load_sts_tsv, load_unlabeled, NliExample, SentencePairExample, SyntheticCorpus, Vocab,
};
use consert::encoder::{EncoderParams, SentenceModel};
use consert::eval::StsDataset;
use consert::rng::derive_seed;
use std::path::Path;

pub struct Resources {
    pub unlabeled: Vec<String>,
    pub dev: Vec<SentencePairExample>,
    pub test: Vec<StsDataset>,
    pub nli: Vec<NliExample>,
}

/// The corpus used for every path left unset; `gen-data` writes the same one.
pub fn synthetic_corpus(cfg: &RunConfig) -> SyntheticCorpus {
    cfg.data.synthetic.generate(derive_seed(cfg.seed, "data", &[]))
}

pub fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn load_sts_dataset(path: &Path) -> Result<StsDataset> {
    let pairs = load_sts_tsv(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(StsDataset::single(dataset_name(path), pairs))
}

impl Resources {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let needs_synthetic =
            d.unlabeled.is_none() || d.dev.is_none() || d.test.is_empty() || (d.nli.is_none() && d.synthetic_nli);
        let synthetic = needs_synthetic.then(|| synthetic_corpus(cfg));
        let synth = || synthetic.as_ref().expect("generated when a path is missing");

        let unlabeled = match &d.unlabeled {
            Some(p) => load_unlabeled(p).with_context(|| format!("loading {}", p.display()))?,
            None => synth().unlabeled.clone(),
        };
        let dev = match &d.dev {
            Some(p) => load_sts_tsv(p).with_context(|| format!("loading {}", p.display()))?,
            None => synth().dev.clone(),
        };
        let test = if d.test.is_empty() {
            vec![StsDataset::single("synthetic", synth().test.clone())]
        } else {
            d.test.iter().map(|p| load_sts_dataset(p)).collect::<Result<_>>()?
        };
        let nli = match &d.nli {
            Some(p) => load_nli_tsv(p).with_context(|| format!("loading {}", p.display()))?,
            None if d.synthetic_nli => synth().nli.clone(),
            None => Vec::new(),
        };
        Ok(Self { unlabeled, dev, test, nli })
    }

    /// Every sentence of every configured dataset.
    pub fn all_texts(&self) -> Vec<&str> {
        let mut texts: Vec<&str> = self.unlabeled.iter().map(String::as_str).collect();
        let pairs = self.dev.iter().chain(self.test.iter().flat_map(|d| d.splits.iter().flatten()));
        for p in pairs {
            texts.push(&p.sentence_a);
            texts.push(&p.sentence_b);
        }
        for ex in &self.nli {
            texts.push(&ex.premise);
            texts.push(&ex.hypothesis);
        }
        texts
    }

    pub fn test_texts(&self) -> Vec<String> {
        self.test
            .iter()
            .flat_map(|d| d.splits.iter().flatten())
            .flat_map(|p| [p.sentence_a.clone(), p.sentence_b.clone()])
            .collect()
    }

    pub fn vocab(&self, cfg: &RunConfig) -> Result<Vocab> {
        Ok(build_vocab(&self.all_texts(), cfg.encoder.min_count)?)
    }

    /// A freshly initialized model over this data's vocabulary.
    pub fn untrained_model(&self, cfg: &RunConfig) -> Result<SentenceModel> {
        let vocab = self.vocab(cfg)?;
        let params = EncoderParams::init(&cfg.encoder_config(vocab.len()), cfg.seed)?;
        Ok(SentenceModel::new(params, vocab)?)
    }
}
