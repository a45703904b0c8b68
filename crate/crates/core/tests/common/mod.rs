//! Shared oracles and experiment runners for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use modgpt::corpus::{
    load_corpus, split_corpus, synth_corpus, Corpus, SplitRatios, SynthConfig, TokenSequence,
};
use modgpt::evalkit::{emotion_accuracy, perplexity, recall_at_k, seen_unseen_breakdown, usage_accuracy};
use modgpt::model::{Model, ModelConfig};
use modgpt::numerics::{grad_check, grad_check_params, Tape, Tensor, Var, IGNORE_INDEX};
use modgpt::training::{compute_losses, corpus_examples, select_emotion_labels, train, LossWeights, NoHooks, TrainConfig};
use modgpt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn sample_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/sample")
}

pub fn load_sample() -> Corpus {
    let dir = sample_dir();
    load_corpus(&dir.join("corpus.jsonl"), &dir.join("catalog.json"), None).expect("shipped sample loads")
}

pub fn overfit_corpus() -> Corpus {
    synth_corpus(&SynthConfig::new(32, 8, 50, 1)).unwrap()
}

// ---- n-gram oracle --------------------------------------------------------

/// All n-grams of `s`, in order, as owned vectors.
fn grams(s: &[u32], n: usize) -> Vec<Vec<u32>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<u32>], g: &[u32]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// Counts by linear scans over explicit n-gram lists.
pub fn bleu_oracle(cands: &[Vec<u32>], refs: &[Vec<u32>], n: usize) -> f64 {
    let mut log_p = 0.0;
    for order in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let cg = grams(c, order);
            let rg = grams(r, order);
            let mut seen: Vec<&Vec<u32>> = Vec::new();
            for g in &cg {
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matched += count(&cg, g).min(count(&rg, g));
            }
            total += cg.len();
        }
        let p = if order == 1 {
            if total == 0 {
                0.0
            } else {
                matched as f64 / total as f64
            }
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_p += p.ln() / n as f64;
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * log_p.exp()
}

pub fn distinct_oracle(cands: &[Vec<u32>], n: usize) -> Option<f64> {
    let all: Vec<Vec<u32>> = cands.iter().flat_map(|c| grams(c, n)).collect();
    if all.is_empty() {
        return None;
    }
    let mut unique: Vec<&Vec<u32>> = Vec::new();
    for g in &all {
        if !unique.contains(&g) {
            unique.push(g);
        }
    }
    Some(unique.len() as f64 / all.len() as f64)
}

/// Random token lists over a small alphabet so n-grams repeat.
pub fn random_text_pairs(rng: &mut ChaCha8Rng) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let alphabet = rng.random_range(2..6u32);
    let pairs = rng.random_range(1..5);
    let text = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let len = rng.random_range(0..9);
        (0..len).map(|_| rng.random_range(0..alphabet)).collect()
    };
    let cands = (0..pairs).map(|_| text(rng)).collect();
    let refs = (0..pairs).map(|_| text(rng)).collect();
    (cands, refs)
}

// ---- nucleus oracle -------------------------------------------------------

/// Smallest set, taken in descending probability (ties by id), whose mass
/// reaches `top_p`. Found by repeated arg-max selection.
pub fn nucleus_oracle(probs: &[f64], top_p: f64) -> BTreeSet<usize> {
    let mut taken = BTreeSet::new();
    let mut mass = 0.0;
    while taken.len() < probs.len() {
        let mut best: Option<usize> = None;
        for i in 0..probs.len() {
            if taken.contains(&i) {
                continue;
            }
            if best.is_none_or(|b| probs[i] > probs[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken.insert(b);
        mass += probs[b];
        if mass >= top_p {
            break;
        }
    }
    taken
}

// ---- gradient suite -------------------------------------------------------

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_batched",
    "add",
    "add_bias",
    "mul",
    "scale",
    "embedding_gather",
    "replace_rows",
    "layernorm",
    "softmax_rows",
    "softmax_cols",
    "causal_softmax",
    "gelu",
    "relu",
    "dropout",
    "concat_rows",
    "concat_cols",
    "slice",
    "transpose",
    "reshape",
    "sum",
    "cross_entropy",
    "l2_loss",
];

pub const GRAD_EPS: f64 = 1e-6;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.05);
    }
    t
}

/// Weighted sum of all elements with fixed random weights, so every output
/// element reaches the scalar with a distinct coefficient.
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = normal(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5), &shape);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Worst relative error of `op` on random `m x n` inputs.
pub fn op_grad_error(op: &str, seed: u64, m: usize, n: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = n.max(2);
    let ids: Vec<usize> = (0..m + 1).map(|_| rng.random_range(0..m)).collect();
    let targets: Vec<usize> = (0..m)
        .map(|r| if r == 0 && m > 1 { IGNORE_INDEX } else { rng.random_range(0..n) })
        .collect();
    let (inputs, f): (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>) = match op {
        "matmul" => (
            vec![normal(&mut rng, &[m, k]), normal(&mut rng, &[k, n])],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y, seed)
            }),
        ),
        "matmul_batched" => (
            vec![normal(&mut rng, &[2, m, k]), normal(&mut rng, &[2, k, n])],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y, seed)
            }),
        ),
        "add" | "mul" => {
            let is_add = op == "add";
            (
                vec![normal(&mut rng, &[m, n]), normal(&mut rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = if is_add { t.add(v[0], v[1])? } else { t.mul(v[0], v[1])? };
                    readout(t, y, seed)
                }),
            )
        }
        "add_bias" => (
            vec![normal(&mut rng, &[m, n]), normal(&mut rng, &[n])],
            Box::new(move |t, v| {
                let y = t.add(v[0], v[1])?;
                readout(t, y, seed)
            }),
        ),
        "scale" => (
            vec![normal(&mut rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.scale(v[0], -1.7);
                readout(t, y, seed)
            }),
        ),
        "embedding_gather" => (
            vec![normal(&mut rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.embedding_gather(v[0], &ids)?;
                readout(t, y, seed)
            }),
        ),
        "replace_rows" => (
            vec![normal(&mut rng, &[m + 1, n]), normal(&mut rng, &[1, n])],
            Box::new(move |t, v| {
                let y = t.replace_rows(v[0], v[1], &[m / 2])?;
                readout(t, y, seed)
            }),
        ),
        "layernorm" => (
            vec![normal(&mut rng, &[m, k]), normal(&mut rng, &[k]), normal(&mut rng, &[k])],
            Box::new(move |t, v| {
                let y = t.layernorm(v[0], v[1], v[2])?;
                readout(t, y, seed)
            }),
        ),
        "softmax_rows" | "softmax_cols" => {
            let axis = usize::from(op == "softmax_rows");
            (
                vec![normal(&mut rng, &[m, n])],
                Box::new(move |t, v| {
                    let y = t.softmax(v[0], axis)?;
                    readout(t, y, seed)
                }),
            )
        }
        "causal_softmax" => (
            vec![normal(&mut rng, &[m, m])],
            Box::new(move |t, v| {
                let masked = t.causal_mask(v[0])?;
                let y = t.softmax(masked, 1)?;
                readout(t, y, seed)
            }),
        ),
        "gelu" => (
            vec![normal(&mut rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.gelu(v[0]);
                readout(t, y, seed)
            }),
        ),
        "relu" => (
            vec![off_zero(&mut rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.relu(v[0]);
                readout(t, y, seed)
            }),
        ),
        "dropout" => (
            vec![normal(&mut rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.dropout(v[0], 0.3)?;
                readout(t, y, seed)
            }),
        ),
        "concat_rows" | "concat_cols" => {
            let axis = usize::from(op == "concat_cols");
            let other = if axis == 0 { [1, n] } else { [m, 1] };
            (
                vec![normal(&mut rng, &[m, n]), normal(&mut rng, &other)],
                Box::new(move |t, v| {
                    let y = t.concat(&[v[0], v[1]], axis)?;
                    readout(t, y, seed)
                }),
            )
        }
        "slice" => (
            vec![normal(&mut rng, &[m, k])],
            Box::new(move |t, v| {
                let y = t.slice(v[0], 1, 1, k)?;
                readout(t, y, seed)
            }),
        ),
        "transpose" => (
            vec![normal(&mut rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.transpose(v[0])?;
                readout(t, y, seed)
            }),
        ),
        "reshape" => (
            vec![normal(&mut rng, &[m, n])],
            Box::new(move |t, v| {
                let y = t.reshape(v[0], &[n, m])?;
                readout(t, y, seed)
            }),
        ),
        "sum" => (
            vec![normal(&mut rng, &[m, n])],
            Box::new(move |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            }),
        ),
        "cross_entropy" => (
            vec![normal(&mut rng, &[m, n])],
            Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
        ),
        "l2_loss" => (
            vec![normal(&mut rng, &[n]), normal(&mut rng, &[n])],
            Box::new(move |t, v| t.l2_loss(v[0], v[1])),
        ),
        other => panic!("unknown op {other}"),
    };
    Ok(grad_check(f, &inputs, GRAD_EPS)?.max_rel_err)
}

/// Worst relative error over every op, three seeds and two shapes.
pub fn op_suite() -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for &op in OPS {
        let mut worst: f64 = 0.0;
        for seed in 0..3 {
            for (m, n) in [(2, 3), (4, 5)] {
                worst = worst.max(op_grad_error(op, seed, m, n)?);
            }
        }
        out.push((op, worst));
    }
    Ok(out)
}

/// Loss-sample parameters: one element from every tensor, the rest uniform
/// over all scalars.
pub fn sample_params(model: &Model<f64>, total: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &model.params;
    let mut sample: Vec<(usize, usize)> = (0..p.len()).map(|i| (i, rng.random_range(0..p.tensor(i).numel()))).collect();
    let sizes: Vec<usize> = (0..p.len()).map(|i| p.tensor(i).numel()).collect();
    let all: usize = sizes.iter().sum();
    while sample.len() < total {
        let mut g = rng.random_range(0..all);
        let mut i = 0;
        while g >= sizes[i] {
            g -= sizes[i];
            i += 1;
        }
        if !sample.contains(&(i, g)) {
            sample.push((i, g));
        }
    }
    sample
}

/// End-to-end check of the three-term loss, dropout active, on a small
/// batch of synthetic examples.
pub fn end_to_end_grad_error(samples: usize, seed: u64) -> Result<f64> {
    let corpus = overfit_corpus();
    let batch: Vec<TokenSequence> = corpus_examples(&corpus, 500)?
        .into_iter()
        .filter(|s| s.supervised_tags().any(|t| t.y))
        .take(3)
        .collect();
    let cfg = ModelConfig::desk(corpus.vocab.len(), corpus.catalog.feature_dim(), 4);
    let model: Model<f64> = Model::init(cfg, seed)?.cast();
    let sample = sample_params(&model, samples, seed);
    let w = LossWeights::new(1.0, 1.0);
    let report = grad_check_params(
        |tape, ps| compute_losses(&model, tape, ps, &batch, &w).map(|(l, _)| l),
        &model.params,
        &sample,
        GRAD_EPS,
    )?;
    Ok(report.max_rel_err)
}

// ---- learnability runs ----------------------------------------------------

pub fn overfit_train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs: usize::MAX,
        max_steps: Some(3000),
        warmup_steps: 100,
        lambda1: 1.0,
        lambda2: 1.0,
        lambda_emotion: 1.0,
        pretrain_memes: true,
        pretrain_emotion: true,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[derive(Debug)]
pub struct OverfitResult {
    pub steps: usize,
    pub perplexity: f64,
    pub usage: f64,
    pub r8_at_1: f64,
    pub emotion: f64,
    pub elapsed: Duration,
}

pub fn overfit_run() -> Result<OverfitResult> {
    let start = Instant::now();
    let corpus = overfit_corpus();
    let labels = select_emotion_labels(&corpus, 100);
    let cfg = ModelConfig::desk(corpus.vocab.len(), corpus.catalog.feature_dim(), labels.len());
    let mut model = Model::init(cfg, 1)?;
    let summary = train(&mut model, &corpus, None, &labels, &overfit_train_config(), &mut NoHooks)?;
    let recall = recall_at_k(&model, &corpus, Some(8), &[1], 0, 500)?;
    Ok(OverfitResult {
        steps: summary.steps,
        perplexity: perplexity(&model, &corpus, 500)?,
        usage: usage_accuracy(&model, &corpus, 0.5, 500)?,
        r8_at_1: recall.at(1).unwrap(),
        emotion: emotion_accuracy(&model, &corpus, &labels, 500)?.top1,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug)]
pub struct HardSplitResult {
    pub unseen_turns: usize,
    pub unseen_hits: usize,
    pub seen_turns: usize,
    pub seen_r_at_1: f64,
    pub p_value: f64,
}

/// P(X >= k) for X ~ Binomial(n, p).
pub fn binomial_upper_tail(n: usize, k: usize, p: f64) -> f64 {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += pmf;
        }
        pmf *= (n - i) as f64 / (i + 1) as f64 * p / (1.0 - p);
    }
    tail.min(1.0)
}

#[derive(Clone, Debug)]
pub struct HardSplitSetup {
    pub n_dialogues: usize,
    pub n_memes: usize,
    pub reserved: Vec<u32>,
    pub data_seed: u64,
    pub train_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for HardSplitSetup {
    fn default() -> Self {
        Self {
            n_dialogues: 320,
            n_memes: 16,
            reserved: vec![5, 10],
            data_seed: 5,
            train_seed: 1,
            steps: 2000,
            batch_size: 8,
        }
    }
}

pub fn hard_split_run(setup: &HardSplitSetup) -> Result<HardSplitResult> {
    let corpus = synth_corpus(&SynthConfig::new(setup.n_dialogues, setup.n_memes, 50, setup.data_seed))?;
    let ratios = SplitRatios {
        train: 0.7,
        valid: 0.1,
        easy_test: 0.1,
        hard_test: 0.1,
    };
    let split = split_corpus(&corpus, 3, ratios, &setup.reserved)?;
    let labels = select_emotion_labels(&split.train, 100);
    let cfg = ModelConfig::desk(corpus.vocab.len(), corpus.catalog.feature_dim(), labels.len());
    let mut model = Model::init(cfg, setup.train_seed)?;
    let train_cfg = TrainConfig {
        batch_size: setup.batch_size,
        max_steps: Some(setup.steps),
        seed: setup.train_seed,
        ..overfit_train_config()
    };
    train(&mut model, &split.train, None, &labels, &train_cfg, &mut NoHooks)?;
    let train_memes = split.train.meme_ids_used();
    let su = seen_unseen_breakdown(&model, &split.hard_test, &train_memes, Some(8), &[1], 0, 500)?;
    let unseen = su.unseen.expect("hard split has unseen turns");
    let seen = su.seen.expect("hard split has seen turns");
    let hits = (unseen.at(1).unwrap() * unseen.turns as f64).round() as usize;
    Ok(HardSplitResult {
        unseen_turns: unseen.turns,
        unseen_hits: hits,
        seen_turns: seen.turns,
        seen_r_at_1: seen.at(1).unwrap(),
        p_value: binomial_upper_tail(unseen.turns, hits, 1.0 / 8.0),
    })
}
