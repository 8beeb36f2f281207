//! Training objectives: NT-Xent, the NLI pair classifier and their sum.

use crate::numerics::{NumericsError, Real, Result, Tape, Tensor, Var};
use crate::rng::substream;
use rand_distr::{Distribution, Normal};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 0.15;
pub const NUM_CLASSES: usize = 3;

/// Representations of `n` sentences under two views, interleaved so that rows
/// `2k` and `2k+1` form the positive pair of sentence `k`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch {
    pub reps: Var,
    pub pairs: usize,
}

impl ContrastiveBatch {
    pub fn new<T: Real>(tape: &Tape<T>, reps: Var) -> Result<Self> {
        let rows = tape.value(reps).rows();
        if rows == 0 || rows % 2 != 0 {
            return Err(NumericsError::Shape {
                op: "nt_xent",
                detail: format!("expected a positive even number of rows, got {rows}"),
            });
        }
        Ok(Self { reps, pairs: rows / 2 })
    }

    pub fn nt_xent<T: Real>(&self, tape: &mut Tape<T>, temperature: T) -> Result<Var> {
        nt_xent(tape, self.reps, temperature)
    }
}

/// NT-Xent over interleaved view pairs.
///
/// For each row `i` with partner `j`, the loss term is the cross entropy of
/// cosine similarities scaled by `1/temperature`, with the row itself removed
/// from the partition. The result is the mean over all `2N` rows, so every
/// pair is counted in both directions. A single pair has loss zero.
pub fn nt_xent<T: Real>(tape: &mut Tape<T>, reps: Var, temperature: T) -> Result<Var> {
    let n2 = ContrastiveBatch::new(tape, reps)?.pairs * 2;
    if temperature.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(NumericsError::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let z = tape.l2_normalize(reps)?;
    let sim = tape.matmul_t(z, z)?;
    let logits = tape.scale(sim, T::one() / temperature)?;
    let labels: Vec<usize> = (0..n2).map(|i| i ^ 1).collect();
    let exclude: Vec<bool> = (0..n2 * n2).map(|k| k / n2 == k % n2).collect();
    tape.cross_entropy(logits, &labels, Some(&exclude))
}

/// Linear softmax head over `concat(r1, r2, |r1 - r2|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairClassifierParams {
    /// `[3d, 3]`
    pub weight: Tensor,
    /// `[3]`
    pub bias: Tensor,
}

impl PairClassifierParams {
    pub fn init(d_model: usize, seed: u64) -> Self {
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        let mut rng = substream(seed, "classifier-init", &[]);
        let data = (0..3 * d_model * NUM_CLASSES).map(|_| normal.sample(&mut rng) as f32).collect();
        Self {
            weight: Tensor::new(vec![3 * d_model, NUM_CLASSES], data).expect("sized"),
            bias: Tensor::zeros(vec![NUM_CLASSES]),
        }
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundClassifier {
        BoundClassifier { weight: tape.leaf(self.weight.cast(), trainable), bias: tape.leaf(self.bias.cast(), trainable) }
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundClassifier {
    pub weight: Var,
    pub bias: Var,
}

impl BoundClassifier {
    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }

    /// `[B, 3]` logits for premise/hypothesis representations `[B, d]`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, r1: Var, r2: Var) -> Result<Var> {
        let diff = tape.abs_diff(r1, r2)?;
        let f = tape.concat(&[r1, r2, diff])?;
        let h = tape.matmul(f, self.weight)?;
        tape.add_bias(h, self.bias)
    }

    /// Mean cross entropy against class indices (see [`crate::data::NliLabel::index`]).
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, r1: Var, r2: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.logits(tape, r1, r2)?;
        tape.cross_entropy(logits, labels, None)
    }
}

/// `l_ce + alpha * l_con` on a single tape.
pub fn joint_objective<T: Real>(tape: &mut Tape<T>, l_ce: Var, l_con: Var, alpha: T) -> Result<Var> {
    let scaled = tape.scale(l_con, alpha)?;
    tape.add(l_ce, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(rows: Vec<Vec<f64>>, tau: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::from_rows(&rows).unwrap());
        let l = nt_xent(&mut tape, r, tau).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn single_pair_is_zero() {
        assert_eq!(loss_of(vec![vec![1.0, 2.0], vec![-3.0, 0.5]], 0.1), 0.0);
    }

    #[test]
    fn identical_four_rows_give_ln3() {
        let l = loss_of(vec![vec![0.3, -1.0, 2.0]; 4], 0.05);
        assert!((l - 3f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn odd_rows_and_bad_temperature_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(nt_xent(&mut tape, r, 0.1).is_err());
        let r = tape.constant(Tensor::ones(vec![2, 2]));
        assert!(nt_xent(&mut tape, r, 0.0).is_err());
    }

    #[test]
    fn classifier_shapes() {
        let head = PairClassifierParams::init(4, 0);
        assert_eq!(head.weight.shape(), &[12, 3]);
        let mut tape = Tape::<f32>::new();
        let b = head.bind(&mut tape, true);
        let r1 = tape.constant(Tensor::ones(vec![2, 4]));
        let r2 = tape.constant(Tensor::zeros(vec![2, 4]));
        let logits = b.logits(&mut tape, r1, r2).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 3]);
        let l = b.loss(&mut tape, r1, r2, &[0, 2]).unwrap();
        assert!(tape.value(l).item().unwrap() > 0.0);
    }
}
