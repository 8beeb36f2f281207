//! Seeded templated corpus with graded similarity pairs.
//!
//! Each template owns four slots of pseudo-word content vocabulary plus a
//! topic marker. A sentence is a template instance (one word per slot)
//! realized with the template's slot order, optional marker, and a handful of
//! function words drawn from a Zipf distribution. The function words dominate
//! raw token counts, which is what makes frequency-masked pooling interesting.
//!
//! Gold similarity for a pair: 0 across templates, otherwise `1 + shared slots`.

use super::{normalize, NliExample, NliLabel, SentencePairExample};
use crate::rng::{substream, Rng};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const SLOTS: usize = 4;

const FILLERS: [&str; 40] = [
    "the", "a", "of", "and", "to", "in", "is", "was", "that", "with", "for", "on", "as", "at", "by", "it", "from",
    "this", "be", "are", "or", "an", "very", "then", "also", "just", "really", "quite", "some", "its", "there", "when",
    "which", "would", "about", "into", "over", "only", "after", "most",
];

const SYLLABLES: [&str; 16] =
    ["ka", "lo", "mi", "nu", "re", "sa", "to", "vi", "ze", "bo", "du", "fe", "gi", "ha", "ju", "py"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSizes {
    pub n_templates: usize,
    pub n_per_template: usize,
    pub slot_words: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub nli_examples: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
}

impl Default for SyntheticSizes {
    fn default() -> Self {
        Self {
            n_templates: 20,
            n_per_template: 100,
            slot_words: 8,
            dev_pairs: 300,
            test_pairs: 400,
            nli_examples: 1200,
            min_fillers: 3,
            max_fillers: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub unlabeled: Vec<String>,
    pub dev: Vec<SentencePairExample>,
    pub test: Vec<SentencePairExample>,
    pub nli: Vec<NliExample>,
}

/// Generates a corpus with the default pair and NLI counts.
pub fn make_synthetic_corpus(seed: u64, n_templates: usize, n_per_template: usize) -> SyntheticCorpus {
    SyntheticSizes { n_templates, n_per_template, ..SyntheticSizes::default() }.generate(seed)
}

fn pseudo_word(index: usize) -> String {
    let b = SYLLABLES.len();
    let (x, y, z) = (index / (b * b) % b, index / b % b, index % b);
    format!("{}{}{}", SYLLABLES[x], SYLLABLES[y], SYLLABLES[z])
}

#[derive(Debug, Clone, Copy)]
struct Instance {
    template: usize,
    slots: [usize; SLOTS],
}

struct Generator<'a> {
    sizes: &'a SyntheticSizes,
    orders: Vec<[usize; SLOTS]>,
    zipf: WeightedIndex<f64>,
}

impl<'a> Generator<'a> {
    fn new(sizes: &'a SyntheticSizes, seed: u64) -> Self {
        let mut rng = substream(seed, "synthetic-templates", &[]);
        let orders = (0..sizes.n_templates)
            .map(|_| {
                let mut o = [0, 1, 2, 3];
                o.shuffle(&mut rng);
                o
            })
            .collect();
        let weights: Vec<f64> = (1..=FILLERS.len()).map(|r| 1.0 / (r as f64).powf(1.1)).collect();
        Self { sizes, orders, zipf: WeightedIndex::new(weights).expect("positive weights") }
    }

    fn content_word(&self, template: usize, slot: usize, value: usize) -> String {
        pseudo_word((template * SLOTS + slot) * self.sizes.slot_words + value)
    }

    fn marker(&self, template: usize) -> String {
        pseudo_word(self.sizes.n_templates * SLOTS * self.sizes.slot_words + template)
    }

    fn random_instance(&self, template: usize, rng: &mut Rng) -> Instance {
        let mut slots = [0; SLOTS];
        for s in &mut slots {
            *s = rng.random_range(0..self.sizes.slot_words);
        }
        Instance { template, slots }
    }

    /// Same template, exactly `shared` slots equal to `base`.
    fn sibling(&self, base: Instance, shared: usize, rng: &mut Rng) -> Instance {
        let mut which = [0, 1, 2, 3];
        which.shuffle(rng);
        let mut out = base;
        for &s in &which[shared..] {
            let other = rng.random_range(0..self.sizes.slot_words - 1);
            out.slots[s] = if other >= base.slots[s] { other + 1 } else { other };
        }
        out
    }

    fn other_template(&self, template: usize, rng: &mut Rng) -> usize {
        let t = rng.random_range(0..self.sizes.n_templates - 1);
        if t >= template {
            t + 1
        } else {
            t
        }
    }

    fn realize(&self, inst: Instance, rng: &mut Rng) -> String {
        let mut words: Vec<String> =
            self.orders[inst.template].iter().map(|&s| self.content_word(inst.template, s, inst.slots[s])).collect();
        if rng.random_bool(0.3) {
            let i = rng.random_range(0..SLOTS - 1);
            words.swap(i, i + 1);
        }
        if rng.random_bool(0.6) {
            let at = rng.random_range(0..=words.len());
            words.insert(at, self.marker(inst.template));
        }
        let n_fillers = rng.random_range(self.sizes.min_fillers..=self.sizes.max_fillers);
        for _ in 0..n_fillers {
            let at = rng.random_range(0..=words.len());
            words.insert(at, FILLERS[self.zipf.sample(rng)].to_string());
        }
        let mut text = words.join(" ");
        if let Some(first) = text.get(0..1) {
            text.replace_range(0..1, &first.to_uppercase());
        }
        text.push('.');
        text
    }

    fn pairs(&self, n: usize, rng: &mut Rng) -> Vec<SentencePairExample> {
        (0..n)
            .map(|i| {
                let level = i % 6;
                let t = rng.random_range(0..self.sizes.n_templates);
                let a = self.random_instance(t, rng);
                let b = if level == 0 {
                    self.random_instance(self.other_template(t, rng), rng)
                } else {
                    self.sibling(a, level - 1, rng)
                };
                SentencePairExample {
                    sentence_a: self.realize(a, rng),
                    sentence_b: self.realize(b, rng),
                    gold: level as f32,
                }
            })
            .collect()
    }

    fn nli(&self, n: usize, rng: &mut Rng) -> Vec<NliExample> {
        (0..n)
            .map(|i| {
                let label = NliLabel::ALL[i % 3];
                let t = rng.random_range(0..self.sizes.n_templates);
                let premise = self.random_instance(t, rng);
                let hypothesis = match label {
                    NliLabel::Entailment => premise,
                    NliLabel::Neutral => self.sibling(premise, 2, rng),
                    NliLabel::Contradiction => self.random_instance(self.other_template(t, rng), rng),
                };
                NliExample { premise: self.realize(premise, rng), hypothesis: self.realize(hypothesis, rng), label }
            })
            .collect()
    }
}

impl SyntheticSizes {
    pub fn validate(&self) -> Result<(), String> {
        let b = SYLLABLES.len();
        if self.n_templates < 2 || self.slot_words < 2 {
            return Err("need at least two templates and two words per slot".into());
        }
        if self.min_fillers > self.max_fillers {
            return Err(format!("min_fillers {} exceeds max_fillers {}", self.min_fillers, self.max_fillers));
        }
        if self.n_templates * (SLOTS * self.slot_words + 1) > b * b * b {
            return Err(format!("at most {} distinct content words are available", b * b * b));
        }
        if self.n_per_template == 0 {
            return Err("n_per_template must be positive".into());
        }
        Ok(())
    }

    /// Panics if [`SyntheticSizes::validate`] fails.
    pub fn generate(&self, seed: u64) -> SyntheticCorpus {
        if let Err(e) = self.validate() {
            panic!("invalid synthetic sizes: {e}");
        }
        let gen = Generator::new(self, seed);
        let mut rng = substream(seed, "synthetic-unlabeled", &[]);
        let mut unlabeled = Vec::with_capacity(self.n_templates * self.n_per_template);
        for t in 0..self.n_templates {
            for _ in 0..self.n_per_template {
                let inst = gen.random_instance(t, &mut rng);
                unlabeled.push(gen.realize(inst, &mut rng));
            }
        }
        unlabeled.shuffle(&mut rng);
        let dev = gen.pairs(self.dev_pairs, &mut substream(seed, "synthetic-dev", &[]));
        let test = gen.pairs(self.test_pairs, &mut substream(seed, "synthetic-test", &[]));
        let nli = gen.nli(self.nli_examples, &mut substream(seed, "synthetic-nli", &[]));
        SyntheticCorpus { unlabeled, dev, test, nli }
    }
}

/// Cosine of raw token-count vectors; the learnability reference for the corpus.
pub fn bag_of_words_cosine(a: &str, b: &str) -> f64 {
    let count = |s: &str| {
        let mut m: HashMap<String, f64> = HashMap::new();
        for t in normalize(s) {
            *m.entry(t).or_default() += 1.0;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let dot: f64 = ca.iter().map(|(t, x)| x * cb.get(t).copied().unwrap_or(0.0)).sum();
    let na = ca.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = cb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
