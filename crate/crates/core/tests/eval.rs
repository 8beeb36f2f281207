#[path = "support/fixtures.rs"]
mod fixtures;

use consert::data::SentencePairExample;
use consert::encoder::{frequency_pool_mask, pool, Pooling};
use consert::eval::{
    evaluate_sts, frequency_masked_eval, per_split_average, similarity_histogram, spearman_x100, EvalError,
    FrequencyTable, ModelEncoder, ReportMeta, SentenceEncoder, StsDataset,
};
use consert::numerics::{Tape, Tensor};
use rand::seq::SliceRandom;
use std::collections::HashMap;

/// Looks sentences up in a fixed table.
struct TableEncoder(HashMap<String, Vec<f32>>);

impl SentenceEncoder for TableEncoder {
    fn encode_sentences(&self, texts: &[&str]) -> consert::eval::Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.0[*t].clone()).collect())
    }
}

/// Pair `i` gets unit vectors at an angle that shrinks as `cos_of(i)` grows.
fn stub(pairs: &[SentencePairExample], cos_of: impl Fn(usize) -> f64) -> TableEncoder {
    let mut table = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let theta = cos_of(i).clamp(-1.0, 1.0).acos();
        table.insert(p.sentence_a.clone(), vec![1.0, 0.0]);
        table.insert(p.sentence_b.clone(), vec![theta.cos() as f32, theta.sin() as f32]);
    }
    TableEncoder(table)
}

fn pairs(prefix: &str, golds: &[f32]) -> Vec<SentencePairExample> {
    golds
        .iter()
        .enumerate()
        .map(|(i, &g)| SentencePairExample::new(format!("{prefix} a{i}"), format!("{prefix} b{i}"), g).unwrap())
        .collect()
}

#[test]
fn oracle_stub_scores_one() {
    let p = pairs("x", &[0.0, 1.5, 1.5, 3.0, 4.2, 5.0, 2.0]);
    let enc = stub(&p, |i| p[i].gold as f64 / 5.0 * 1.8 - 0.9);
    let report = evaluate_sts(&enc, &[StsDataset::single("toy", p.clone())], Pooling::LastTwoLayersMean, &ReportMeta::default()).unwrap();
    assert!((report.scores[0].spearman_x100 - 100.0).abs() < 1e-9);
    assert_eq!(report.average, report.scores[0].spearman_x100);
}

#[test]
fn merged_protocol_is_reported() {
    // Each split is perfectly ordered on its own, but the low-gold split gets
    // the higher similarities, so merging the splits inverts the ranking.
    let low = pairs("low", &[0.0, 1.0, 2.0]);
    let high = pairs("high", &[3.0, 4.0, 5.0]);
    let mut all = low.clone();
    all.extend(high.clone());
    let enc = stub(&all, |i| if i < 3 { 0.7 + 0.1 * i as f64 } else { 0.1 * (i - 2) as f64 });
    let ds = StsDataset { name: "two-split".into(), splits: vec![low, high] };
    let report = evaluate_sts(&enc, std::slice::from_ref(&ds), Pooling::LastTwoLayersMean, &ReportMeta::default()).unwrap();
    let per_split = per_split_average(&enc, &ds).unwrap();
    let merged = spearman_x100(&enc, &ds.merged()).unwrap();
    assert!((per_split - 100.0).abs() < 1e-9);
    assert!(merged < 0.0);
    assert_eq!(report.scores[0].spearman_x100, merged);
    assert_eq!(report.scores[0].pairs, 6);
}

#[test]
fn report_ignores_row_order_and_repeats_exactly() {
    let corpus = fixtures::small_corpus(3);
    let model = fixtures::tiny_model(&corpus, 16, 2, 3);
    let enc = ModelEncoder::new(&model, Pooling::LastTwoLayersMean);
    let meta = ReportMeta { checkpoint: "c".into(), config_hash: "h".into() };
    let ds = vec![StsDataset::single("dev", corpus.dev.clone()), StsDataset::single("test", corpus.test.clone())];
    let base = evaluate_sts(&enc, &ds, Pooling::LastTwoLayersMean, &meta).unwrap();
    assert_eq!(evaluate_sts(&enc, &ds, Pooling::LastTwoLayersMean, &meta).unwrap(), base);
    let mut shuffled = ds.clone();
    for (i, d) in shuffled.iter_mut().enumerate() {
        d.splits[0].shuffle(&mut consert::rng::substream(11, "rows", &[i as u64]));
    }
    assert_ne!(shuffled[0].splits[0], ds[0].splits[0]);
    assert_eq!(evaluate_sts(&enc, &shuffled, Pooling::LastTwoLayersMean, &meta).unwrap(), base);
    assert!(base.scores.iter().all(|s| (-100.0..=100.0).contains(&s.spearman_x100)));
    assert!((base.average - (base.scores[0].spearman_x100 + base.scores[1].spearman_x100) / 2.0).abs() < 1e-12);
}

#[test]
fn empty_dataset_is_an_error() {
    let corpus = fixtures::small_corpus(3);
    let model = fixtures::tiny_model(&corpus, 8, 1, 3);
    let enc = ModelEncoder::new(&model, Pooling::LastLayerMean);
    let err = evaluate_sts(&enc, &[StsDataset::single("empty", vec![])], Pooling::LastLayerMean, &ReportMeta::default());
    assert!(matches!(err, Err(EvalError::EmptyDataset(_))));
}

#[test]
fn histogram_extremes() {
    let p = pairs("h", &[0.0, 2.5, 5.0, 4.9]);
    let same = TableEncoder(p.iter().flat_map(|x| [x.sentence_a.clone(), x.sentence_b.clone()]).map(|s| (s, vec![0.3, 0.4])).collect());
    let h = similarity_histogram(&same, &p, 4).unwrap();
    assert!((h.mean_pairwise_cosine - 1.0).abs() < 1e-6);
    for row in &h.counts {
        assert_eq!(row[..3].iter().sum::<usize>(), 0, "all mass in the top cosine column");
    }
    assert_eq!(h.counts.iter().map(|r| r[3]).sum::<usize>(), 4);

    let orth = stub(&p, |_| 0.0);
    let h = similarity_histogram(&orth, &p, 4).unwrap();
    assert!(h.mean_pair_cosine.abs() < 1e-6);
    assert_eq!(h.counts.iter().map(|r| r[2]).sum::<usize>(), 4);
    assert!(similarity_histogram(&orth, &p, 1).is_err());
}

#[test]
fn frequency_mask_k0_is_the_standard_evaluation() {
    let corpus = fixtures::small_corpus(5);
    let model = fixtures::tiny_model(&corpus, 16, 2, 5);
    let texts: Vec<&str> = corpus.test.iter().flat_map(|p| [p.sentence_a.as_str(), p.sentence_b.as_str()]).collect();
    let table = FrequencyTable::from_corpus(&texts, &model.vocab, 32).unwrap();
    let ds = vec![StsDataset::single("test", corpus.test.clone())];
    let meta = ReportMeta::default();
    let pooling = Pooling::LastTwoLayersMean;
    let standard = evaluate_sts(&ModelEncoder::new(&model, pooling), &ds, pooling, &meta).unwrap();
    let masked = frequency_masked_eval(&model, pooling, &ds, &table, &[0, 2, 8], &meta).unwrap();
    assert_eq!(masked[0].0, 0);
    assert_eq!(masked[0].1, standard);
    assert_eq!(masked[0].1.average.to_bits(), standard.average.to_bits());
    assert_ne!(masked[2].1.average, standard.average);

    // [CLS] and [SEP] are counted once per sentence and take part in the ranking.
    assert_eq!(table.total(), texts.iter().map(|t| model.encode_text(t).unwrap().len() as u64).sum::<u64>());
    for special in [consert::data::CLS, consert::data::SEP] {
        assert!(table.entries().contains(&(special, texts.len() as u64)));
    }
}

/// Pooling never reads the rows of excluded tokens: overwriting their layer
/// outputs with noise leaves every representation bit-identical.
#[test]
fn masked_token_rows_have_no_influence() {
    let corpus = fixtures::small_corpus(6);
    let model = fixtures::tiny_model(&corpus, 16, 2, 6);
    let texts: Vec<&str> = corpus.test.iter().take(40).flat_map(|p| [p.sentence_a.as_str(), p.sentence_b.as_str()]).collect();
    let table = FrequencyTable::from_corpus(&texts, &model.vocab, 32).unwrap();
    let sentences: Vec<_> = texts.iter().map(|t| model.encode_text(t).unwrap()).collect();
    let batch = consert::data::EncodedBatch::pad(&sentences);

    for k in [1, 3, 6] {
        let excluded = table.top_k(k);
        let pool_mask = frequency_pool_mask(&batch, &excluded);
        let noise_rows: Vec<usize> = (0..batch.mask.len()).filter(|&i| batch.mask[i] && !pool_mask[i]).collect();
        assert!(!noise_rows.is_empty());
        for pooling in [Pooling::LastLayerMean, Pooling::LastTwoLayersMean] {
            let run = |perturb: bool| -> Tensor {
                let mut tape = Tape::<f32>::new();
                let enc = model.params.bind(&mut tape, false);
                let e = enc.embed(&mut tape, &batch).unwrap();
                let mut layers = enc.encode(&mut tape, e, &batch.mask, batch.seq_len).unwrap();
                if perturb {
                    for layer in layers.iter_mut() {
                        let mut noisy = tape.value(*layer).clone();
                        let d = noisy.cols();
                        for &r in &noise_rows {
                            for c in 0..d {
                                noisy.data_mut()[r * d + c] += 7.0 + (r * c) as f32;
                            }
                        }
                        *layer = tape.constant(noisy);
                    }
                }
                let r = pool(&mut tape, &layers, &pool_mask, batch.seq_len, pooling).unwrap();
                tape.value(r).clone()
            };
            assert_eq!(run(false), run(true), "k={k} {pooling:?}");
        }
        let reps = model.represent(&sentences, Pooling::LastTwoLayersMean, Some(&excluded)).unwrap();
        let direct = run_direct(&model, &batch, &pool_mask);
        assert_eq!(reps.concat(), direct.data());
    }
}

fn run_direct(model: &consert::SentenceModel, batch: &consert::data::EncodedBatch, pool_mask: &[bool]) -> Tensor {
    let mut tape = Tape::<f32>::new();
    let enc = model.params.bind(&mut tape, false);
    let e = enc.embed(&mut tape, batch).unwrap();
    let layers = enc.encode(&mut tape, e, &batch.mask, batch.seq_len).unwrap();
    let r = pool(&mut tape, &layers, pool_mask, batch.seq_len, Pooling::LastTwoLayersMean).unwrap();
    tape.value(r).clone()
}
