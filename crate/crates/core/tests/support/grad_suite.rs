//! Central-difference checks for every differentiable operation and for the
//! full encoder + NT-Xent composition. Shared with the acceptance suite.

use consert::augment::{AugmentationSpec, ViewPair};
use consert::data::{EncodedSentence, CLS, SEP};
use consert::encoder::{parameter_layout, pool, BoundEncoder, EncoderConfig, Pooling};
use consert::numerics::{grad_check, GradCheckReport, Result, Tape, Tensor, Var};
use consert::objectives::{joint_objective, nt_xent, BoundClassifier};
use consert::rng::{substream, Rng};
use rand::Rng as _;

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const COMPOSITION_TAU: f64 = 0.1;
const EMB_SCALE: f64 = 1.0;
const FFN_SCALE: f64 = 0.15;
const W_SCALE: f64 = 0.3;

fn uniform(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalarizes `out` with fixed random weights so every output entry matters.
fn weighted(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

type Case = (String, GradCheckReport);

fn check(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    rng: &mut Rng,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Case {
    let w = uniform(rng, out_shape, 1.0);
    let report = grad_check(&inputs, &[], EPSILON, |tape, v| {
        let out = f(tape, v)?;
        weighted(tape, out, &w)
    })
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    (name.to_string(), report)
}

/// Two tensors whose elementwise difference stays away from zero.
fn separated(rng: &mut Rng, shape: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
    let a = uniform(rng, shape, 1.0);
    let mut b = a.clone();
    for v in b.data_mut() {
        let gap = 0.2 + rng.random_range(0.0..0.5);
        *v += if rng.random_bool(0.5) { gap } else { -gap };
    }
    (a, b)
}

pub fn op_cases(seed: u64) -> Vec<Case> {
    let rng = &mut substream(seed, "grad-suite", &[]);
    let mut out = Vec::new();

    let inputs = vec![uniform(rng, &[3, 4], 1.0), uniform(rng, &[4, 5], 1.0)];
    out.push(check("matmul", inputs, &[3, 5], rng, |t, v| t.matmul(v[0], v[1])));
    let inputs = vec![uniform(rng, &[3, 4], 1.0), uniform(rng, &[5, 4], 1.0)];
    out.push(check("matmul_t", inputs, &[3, 5], rng, |t, v| t.matmul_t(v[0], v[1])));
    let inputs = vec![uniform(rng, &[3, 4], 1.0), uniform(rng, &[3, 4], 1.0)];
    out.push(check("add", inputs.clone(), &[3, 4], rng, |t, v| t.add(v[0], v[1])));
    out.push(check("mul", inputs, &[3, 4], rng, |t, v| t.mul(v[0], v[1])));
    let inputs = vec![uniform(rng, &[3, 4], 1.0), uniform(rng, &[4], 1.0)];
    out.push(check("add_bias", inputs, &[3, 4], rng, |t, v| t.add_bias(v[0], v[1])));
    let inputs = vec![uniform(rng, &[3, 4], 1.0)];
    out.push(check("scale", inputs, &[3, 4], rng, |t, v| t.scale(v[0], 0.7)));
    let inputs = vec![uniform(rng, &[3, 5], 2.0)];
    out.push(check("softmax", inputs, &[3, 5], rng, |t, v| t.softmax(v[0])));
    let inputs = vec![uniform(rng, &[4, 6], 2.0), uniform(rng, &[6], 1.5), uniform(rng, &[6], 1.0)];
    out.push(check("layer_norm", inputs, &[4, 6], rng, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)));
    let inputs = vec![uniform(rng, &[3, 4], 3.0)];
    out.push(check("gelu", inputs, &[3, 4], rng, |t, v| t.gelu(v[0])));
    let inputs = vec![uniform(rng, &[6, 3], 1.0)];
    out.push(check("embedding", inputs, &[5, 3], rng, |t, v| t.embedding(v[0], &[0, 2, 2, 5, 1], "table")));
    let inputs = vec![uniform(rng, &[6, 4], 1.0)];
    let mask = [true, true, false, true, false, true];
    out.push(check("masked_mean", inputs, &[2, 4], rng, move |t, v| t.masked_mean(v[0], &mask, 3)));
    let inputs = vec![uniform(rng, &[3, 4], 1.0)];
    out.push(check("l2_normalize", inputs, &[3, 4], rng, |t, v| t.l2_normalize(v[0])));
    let inputs = vec![uniform(rng, &[3, 4], 1.0), uniform(rng, &[3, 4], 1.0)];
    out.push(check("cosine", inputs, &[3], rng, |t, v| t.cosine(v[0], v[1])));
    let inputs = vec![uniform(rng, &[2, 3], 1.0), uniform(rng, &[2, 2], 1.0)];
    out.push(check("concat", inputs, &[2, 8], rng, |t, v| t.concat(&[v[0], v[1], v[0]])));
    let (a, b) = separated(rng, &[3, 4]);
    out.push(check("abs_diff", vec![a, b], &[3, 4], rng, |t, v| t.abs_diff(v[0], v[1])));
    let inputs = vec![uniform(rng, &[4, 3], 1.0)];
    out.push(check("select_rows", inputs, &[3, 3], rng, |t, v| t.select_rows(v[0], &[3, 0, 0])));
    let inputs = vec![uniform(rng, &[4, 5], 2.0)];
    let exclude: Vec<bool> = (0..20).map(|k| k / 5 == k % 5).collect();
    out.push(check("cross_entropy", inputs, &[], rng, move |t, v| t.cross_entropy(v[0], &[1, 0, 4, 2], Some(exclude.as_slice()))));
    let inputs = vec![uniform(rng, &[3, 4], 1.0)];
    out.push(check("sum", inputs, &[], rng, |t, v| t.sum(v[0])));
    let inputs = vec![uniform(rng, &[8, 6], 1.5), uniform(rng, &[8, 6], 1.5), uniform(rng, &[8, 6], 1.0)];
    let key_mask = [true, true, true, false, true, true, false, false];
    out.push(check("attention", inputs, &[8, 6], rng, move |t, v| t.attention(v[0], v[1], v[2], &key_mask, 4, 2)));
    out
}

pub fn objective_cases(seed: u64) -> Vec<Case> {
    let rng = &mut substream(seed, "grad-suite-objectives", &[]);
    let mut out = Vec::new();

    for tau in [0.1, 1.0] {
        let reps = uniform(rng, &[6, 5], 1.0);
        let r = grad_check(&[reps], &[], EPSILON, |t, v| nt_xent(t, v[0], tau)).unwrap();
        out.push((format!("nt_xent(tau={tau})"), r));
    }

    let (r1, r2) = separated(rng, &[3, 4]);
    let w = uniform(rng, &[12, 3], 0.5);
    let b = uniform(rng, &[3], 0.5);
    let labels = [0, 2, 1];
    let r = grad_check(&[r1.clone(), r2.clone(), w.clone(), b.clone()], &[], EPSILON, |t, v| {
        let bound = BoundClassifier { weight: v[2], bias: v[3] };
        bound.loss(t, v[0], v[1], &labels)
    })
    .unwrap();
    out.push(("pair_classifier".to_string(), r));

    let r = grad_check(&[r1, r2, w, b], &[], EPSILON, |t, v| {
        let bound = BoundClassifier { weight: v[2], bias: v[3] };
        let l_ce = bound.loss(t, v[0], v[1], &labels)?;
        let both = t.concat(&[v[0], v[1]])?;
        let reps = t.select_rows(both, &[0, 1, 2, 0])?;
        let l_con = nt_xent(t, reps, 0.5)?;
        joint_objective(t, l_ce, l_con, 0.15)
    })
    .unwrap();
    out.push(("joint_objective".to_string(), r));
    out
}

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig { vocab_size: 10, max_len: 8, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, pooling: Pooling::LastTwoLayersMean }
}

/// Encoder + augmentation + NT-Xent, and encoder + last-two pooling, with
/// every encoder parameter checked.
pub fn encoder_cases(seed: u64) -> Vec<Case> {
    let rng = &mut substream(seed, "grad-suite-encoder", &[]);
    let config = tiny_encoder_config();
    let params: Vec<Tensor<f64>> = parameter_layout(&config)
        .iter()
        .map(|(name, shape)| {
            // Small FFN input weights keep GELU out of its flat negative tail,
            // where gradients vanish and relative error is meaningless.
            let scale = match name.as_str() {
                "token_embedding" | "position_embedding" => EMB_SCALE,
                n if n.ends_with("ffn.w1") || n.ends_with("ffn.b1") => FFN_SCALE,
                _ => W_SCALE,
            };
            let t = uniform(rng, shape, scale);
            if name.ends_with(".gamma") {
                t.map(|x| 1.0 + 0.5 * x)
            } else {
                t
            }
        })
        .collect();
    let sentences = vec![
        EncodedSentence::from_ids(vec![CLS, 4, 5, 6, SEP]),
        EncodedSentence::from_ids(vec![CLS, 7, SEP]),
        EncodedSentence::from_ids(vec![CLS, 8, 9, 4, 5, SEP]),
    ];
    let views = ViewPair::new("shuffle".parse::<AugmentationSpec>().unwrap(), "feature_cutoff:0.25".parse().unwrap());
    let aug = views.build(&sentences, config.d_model, &mut substream(seed, "grad-suite-views", &[]), None).unwrap();
    let keep: Tensor<f64> = aug.keep.clone().expect("feature cutoff makes a keep mask").cast();

    let mut out = Vec::new();
    let r = grad_check(&params, &[], EPSILON, |t, v| {
        let enc = BoundEncoder::from_vars(t, config.clone(), v.to_vec()).expect("layout");
        let e = enc.embed(t, &aug.batch).expect("embed");
        let k = t.constant(keep.clone());
        let e = t.mul(e, k)?;
        let layers = enc.encode(t, e, &aug.batch.mask, aug.batch.seq_len).expect("encode");
        let r = pool(t, &layers, &aug.batch.mask, aug.batch.seq_len, Pooling::LastLayerMean).expect("pool");
        nt_xent(t, r, COMPOSITION_TAU)
    })
    .unwrap();
    out.push(("encoder+views+nt_xent".to_string(), r));

    let plain = consert::data::EncodedBatch::pad(&sentences);
    let w = uniform(rng, &[3, config.d_model], 1.0);
    let r = grad_check(&params, &[], EPSILON, |t, v| {
        let enc = BoundEncoder::from_vars(t, config.clone(), v.to_vec()).expect("layout");
        let r = enc.forward(t, &plain, Pooling::LastTwoLayersMean).expect("forward");
        weighted(t, r, &w)
    })
    .unwrap();
    out.push(("encoder last_two pooling".to_string(), r));
    out
}

pub fn full_suite(seed: u64) -> Vec<Case> {
    let mut all = op_cases(seed);
    all.extend(objective_cases(seed));
    all.extend(encoder_cases(seed));
    all
}
