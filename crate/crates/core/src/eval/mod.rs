//! STS evaluation and representation diagnostics.
//!
//! Scores are Spearman correlations between cosine similarities of pooled
//! sentence representations and gold scores, reported as `rho * 100`. All
//! splits of a dataset are merged before a single correlation is computed.

mod frequency;
pub mod sweeps;

pub use frequency::FrequencyTable;

use crate::data::SentencePairExample;
use crate::encoder::{EncoderError, Pooling, SentenceModel};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("correlation is undefined: {0}")]
    Undefined(String),
    #[error("dataset {0:?} has no examples")]
    EmptyDataset(String),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Anything that maps raw sentences to fixed-size vectors.
pub trait SentenceEncoder {
    fn encode_sentences(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;
}

/// A [`SentenceModel`] with a pooling mode and an optional set of token ids
/// left out of the pooling average.
#[derive(Debug, Clone)]
pub struct ModelEncoder<'a> {
    pub model: &'a SentenceModel,
    pub pooling: Pooling,
    pub excluded: Option<HashSet<usize>>,
}

impl<'a> ModelEncoder<'a> {
    pub fn new(model: &'a SentenceModel, pooling: Pooling) -> Self {
        Self { model, pooling, excluded: None }
    }

    pub fn excluding(mut self, excluded: HashSet<usize>) -> Self {
        self.excluded = Some(excluded);
        self
    }
}

impl SentenceEncoder for ModelEncoder<'_> {
    fn encode_sentences(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let encoded = texts.iter().map(|t| self.model.encode_text(t)).collect::<Result<Vec<_>, _>>()?;
        Ok(self.model.represent(&encoded, self.pooling, self.excluded.as_ref())?)
    }
}

/// 1-based ranks with ties replaced by their average rank.
pub fn fractional_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(EvalError::Invalid("NaN in ranked values".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    Ok(ranks)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(EvalError::Invalid(format!("need two equal-length lists of at least 2, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Undefined("one of the inputs is constant".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of fractional ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() || pred.len() < 2 {
        return Err(EvalError::Invalid(format!("need two equal-length lists of at least 2, got {} and {}", pred.len(), gold.len())));
    }
    pearson(&fractional_ranks(pred)?, &fractional_ranks(gold)?)
}

/// Cosine in f64; zero vectors have similarity 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Representations for a list of texts, encoding each distinct text once.
pub fn encode_unique(encoder: &dyn SentenceEncoder, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<&str> = Vec::new();
    let slots: Vec<usize> = texts
        .iter()
        .map(|&t| {
            *index.entry(t).or_insert_with(|| {
                unique.push(t);
                unique.len() - 1
            })
        })
        .collect();
    let reps = encoder.encode_sentences(&unique)?;
    Ok(slots.into_iter().map(|i| reps[i].clone()).collect())
}

/// Predicted cosine similarity for every pair.
pub fn predict_similarities(encoder: &dyn SentenceEncoder, pairs: &[SentencePairExample]) -> Result<Vec<f64>> {
    let texts: Vec<&str> =
        pairs.iter().flat_map(|p| [p.sentence_a.as_str(), p.sentence_b.as_str()]).collect();
    let reps = encode_unique(encoder, &texts)?;
    Ok(reps.chunks(2).map(|c| cosine(&c[0], &c[1])).collect())
}

/// `rho * 100` over one list of pairs.
pub fn spearman_x100(encoder: &dyn SentenceEncoder, pairs: &[SentencePairExample]) -> Result<f64> {
    let pred = predict_similarities(encoder, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold as f64).collect();
    Ok(100.0 * spearman(&pred, &gold)?)
}

/// One named STS dataset, possibly made of several splits.
#[derive(Debug, Clone, PartialEq)]
pub struct StsDataset {
    pub name: String,
    pub splits: Vec<Vec<SentencePairExample>>,
}

impl StsDataset {
    pub fn single(name: impl Into<String>, pairs: Vec<SentencePairExample>) -> Self {
        Self { name: name.into(), splits: vec![pairs] }
    }

    pub fn merged(&self) -> Vec<SentencePairExample> {
        self.splits.iter().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.splits.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub spearman_x100: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<DatasetScore>,
    /// Unweighted mean over `scores`.
    pub average: f64,
    pub checkpoint: String,
    pub pooling: Pooling,
    pub config_hash: String,
}

impl EvalReport {
    /// `dataset<TAB>spearman_x100<TAB>pairs` lines followed by the average.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dataset\tspearman_x100\tpairs\n");
        for s in &self.scores {
            out.push_str(&format!("{}\t{:.6}\t{}\n", s.name, s.spearman_x100, s.pairs));
        }
        out.push_str(&format!("avg\t{:.6}\t{}\n", self.average, self.scores.iter().map(|s| s.pairs).sum::<usize>()));
        out
    }
}

/// Metadata attached to a report.
#[derive(Debug, Clone, Default)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub config_hash: String,
}

/// Merged-split Spearman per dataset plus the unweighted average.
pub fn evaluate_sts(
    encoder: &dyn SentenceEncoder,
    datasets: &[StsDataset],
    pooling: Pooling,
    meta: &ReportMeta,
) -> Result<EvalReport> {
    if datasets.is_empty() {
        return Err(EvalError::Invalid("no datasets to evaluate".into()));
    }
    let mut scores = Vec::with_capacity(datasets.len());
    for d in datasets {
        if d.is_empty() {
            return Err(EvalError::EmptyDataset(d.name.clone()));
        }
        let merged = d.merged();
        scores.push(DatasetScore { name: d.name.clone(), spearman_x100: spearman_x100(encoder, &merged)?, pairs: merged.len() });
    }
    let average = scores.iter().map(|s| s.spearman_x100).sum::<f64>() / scores.len() as f64;
    Ok(EvalReport { scores, average, checkpoint: meta.checkpoint.clone(), pooling, config_hash: meta.config_hash.clone() })
}

/// Mean of per-split correlations; provided for comparison only, reports use
/// the merged protocol.
pub fn per_split_average(encoder: &dyn SentenceEncoder, dataset: &StsDataset) -> Result<f64> {
    let scores = dataset.splits.iter().map(|s| spearman_x100(encoder, s)).collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean cosine over all distinct pairs of representations.
pub fn mean_pairwise_cosine(reps: &[Vec<f32>]) -> f64 {
    let normed: Vec<Vec<f64>> = reps
        .iter()
        .map(|r| {
            let n = r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            r.iter().map(|&x| if n == 0.0 { 0.0 } else { x as f64 / n }).collect()
        })
        .collect();
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..normed.len() {
        for j in i + 1..normed.len() {
            total += normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Joint histogram of gold score and predicted cosine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub bins: usize,
    /// `counts[g][c]`: gold bin `g` over `[0, 5]`, cosine bin `c` over `[-1, 1]`.
    pub counts: Vec<Vec<usize>>,
    pub mean_pairwise_cosine: f64,
    pub mean_pair_cosine: f64,
}

fn bin_of(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((value - lo) / (hi - lo) * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

impl SimilarityHistogram {
    /// Long-format CSV: `gold_lo,gold_hi,cos_lo,cos_hi,count`.
    pub fn to_csv(&self) -> String {
        let b = self.bins as f64;
        let mut out = String::from("gold_lo,gold_hi,cos_lo,cos_hi,count\n");
        for (g, row) in self.counts.iter().enumerate() {
            for (c, n) in row.iter().enumerate() {
                let (glo, ghi) = (5.0 * g as f64 / b, 5.0 * (g + 1) as f64 / b);
                let (clo, chi) = (-1.0 + 2.0 * c as f64 / b, -1.0 + 2.0 * (c + 1) as f64 / b);
                out.push_str(&format!("{glo:.4},{ghi:.4},{clo:.4},{chi:.4},{n}\n"));
            }
        }
        out
    }
}

/// Gold-vs-predicted density plus the collapse statistic.
///
/// The mean pairwise cosine is taken over all distinct sentences of `pairs`
/// (pairs of unrelated sentences dominate it), while `mean_pair_cosine`
/// averages the predictions for the listed pairs.
pub fn similarity_histogram(
    encoder: &dyn SentenceEncoder,
    pairs: &[SentencePairExample],
    bins: usize,
) -> Result<SimilarityHistogram> {
    if bins < 2 {
        return Err(EvalError::Invalid(format!("need at least 2 bins, got {bins}")));
    }
    let pred = predict_similarities(encoder, pairs)?;
    let mut counts = vec![vec![0usize; bins]; bins];
    for (p, ex) in pred.iter().zip(pairs) {
        counts[bin_of(ex.gold as f64, 0.0, 5.0, bins)][bin_of(*p, -1.0, 1.0, bins)] += 1;
    }
    let mut seen = HashSet::new();
    let texts: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.sentence_a.as_str(), p.sentence_b.as_str()])
        .filter(|t| seen.insert(*t))
        .collect();
    let reps = encoder.encode_sentences(&texts)?;
    let mean_pair_cosine = if pred.is_empty() { 0.0 } else { pred.iter().sum::<f64>() / pred.len() as f64 };
    Ok(SimilarityHistogram { bins, counts, mean_pairwise_cosine: mean_pairwise_cosine(&reps), mean_pair_cosine })
}

/// Reports for each `k`, pooling without the `k` most frequent tokens.
///
/// `k = 0` runs exactly the ordinary evaluation path.
pub fn frequency_masked_eval(
    model: &SentenceModel,
    pooling: Pooling,
    datasets: &[StsDataset],
    table: &FrequencyTable,
    k_values: &[usize],
    meta: &ReportMeta,
) -> Result<Vec<(usize, EvalReport)>> {
    if table.is_empty() {
        return Err(EvalError::Invalid("frequency table is empty".into()));
    }
    k_values
        .iter()
        .map(|&k| {
            let mut enc = ModelEncoder::new(model, pooling);
            if k > 0 {
                enc = enc.excluding(table.top_k(k));
            }
            evaluate_sts(&enc, datasets, pooling, meta).map(|r| (k, r))
        })
        .collect()
}
