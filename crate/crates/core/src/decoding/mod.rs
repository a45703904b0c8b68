//! Response generation: sample text, decide on a meme at the tag, retrieve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{flatten_utterances, special, MemeCatalog, MemeId, Speaker, TokenId, TokenSequence, Utterance};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            temperature: 0.7,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Softmax of `logits / temperature`, in f64. Negative infinity maps to 0.
pub fn tempered_softmax(logits: &[f32], temperature: f64) -> Result<Vec<f64>> {
    if logits.iter().any(|x| x.is_nan() || *x == f32::INFINITY) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("every logit is masked"));
    }
    let exps: Vec<f64> = logits.iter().map(|&x| ((x as f64 - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Smallest set of ids whose probabilities, taken in descending order (ties
/// by id), reach `top_p`. The token that crosses the threshold is included.
pub fn nucleus_support(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    for (i, &id) in order.iter().enumerate() {
        mass += probs[id];
        if mass >= top_p {
            order.truncate(i + 1);
            return order;
        }
    }
    order
}

/// Draws a token from the renormalized nucleus of the tempered distribution.
pub fn nucleus_sample<R: Rng + ?Sized>(logits: &[f32], cfg: &SamplerConfig, rng: &mut R) -> Result<usize> {
    cfg.validate()?;
    let probs = tempered_softmax(logits, cfg.temperature)?;
    let support = nucleus_support(&probs, cfg.top_p);
    let mass: f64 = support.iter().map(|&i| probs[i]).sum();
    let u = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &support {
        acc += probs[i];
        if u < acc {
            return Ok(i);
        }
    }
    // u rounds up to `mass`: take the last token with nonzero probability.
    Ok(*support.iter().rev().find(|&&i| probs[i] > 0.0).expect("support has mass"))
}

/// History flattened with room for a response of up to `max_new` tokens.
fn context(model: &Model, history: &[Utterance], catalog: &MemeCatalog, max_new: usize) -> Result<TokenSequence> {
    // [speaker] [bos] .. [eos] [tag]
    let room = max_new + 4;
    let budget = model.config.max_positions.checked_sub(room).filter(|&b| b >= 8).ok_or_else(|| {
        Error::invalid(format!(
            "max_new_tokens {max_new} leaves no room in {} positions",
            model.config.max_positions
        ))
    })?;
    flatten_utterances(history, catalog, budget)
}

/// Samples the text of the next utterance by `speaker`. Returns the sequence
/// left open after the generated text (no `[eos]` yet) and the text.
pub fn generate_text(
    model: &Model,
    history: &[Utterance],
    catalog: &MemeCatalog,
    speaker: Speaker,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(TokenSequence, Vec<TokenId>)> {
    cfg.validate()?;
    let mut seq = context(model, history, catalog, cfg.max_new_tokens)?;
    seq.open_utterance(speaker, history.len());
    let mut text = Vec::new();
    while text.len() < cfg.max_new_tokens {
        let out = model.forward(&seq)?;
        let mut logits = out.lm_logits.row(seq.len() - 1).to_vec();
        for (id, l) in logits.iter_mut().enumerate().take(special::COUNT) {
            if id != special::EOS as usize {
                *l = f32::NEG_INFINITY;
            }
        }
        let next = nucleus_sample(&logits, cfg, rng)? as TokenId;
        if next == special::EOS {
            break;
        }
        seq.push_text(next);
        text.push(next);
    }
    Ok((seq, text))
}

/// L2 distance ranking, ascending, ties broken by ascending id.
pub fn rank_candidates<'a>(pred: &[f32], candidates: impl IntoIterator<Item = (MemeId, &'a [f32])>) -> Vec<(MemeId, f64)> {
    let mut ranked: Vec<(MemeId, f64)> = candidates
        .into_iter()
        .map(|(id, f)| {
            let d2: f64 = pred.iter().zip(f).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            (id, d2.sqrt())
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Softmax probability of the "use a meme" class.
pub fn usage_probability(logits: &[f32]) -> f64 {
    let (a, b) = (logits[0] as f64, logits[1] as f64);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    eb / (ea + eb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub usage_prob: f64,
    pub use_meme: bool,
    /// Top-k candidates; empty when no meme is used.
    pub ranked: Vec<(MemeId, f64)>,
}

/// Evaluates the heads at the final tag of `seq`; ranks `candidates` (every
/// catalog meme when `None`) when the usage probability reaches `threshold`.
pub fn decide_and_retrieve(
    model: &Model,
    seq: &TokenSequence,
    catalog: &MemeCatalog,
    candidates: Option<&[MemeId]>,
    threshold: f64,
    k: usize,
) -> Result<Decision> {
    let out = model.forward(seq)?;
    decide_from(&out, seq, catalog, candidates, threshold, k, &mut |_| {})
}

fn decide_from(
    out: &crate::model::ForwardOutput,
    seq: &TokenSequence,
    catalog: &MemeCatalog,
    candidates: Option<&[MemeId]>,
    threshold: f64,
    k: usize,
    observe: &mut dyn FnMut(Stage),
) -> Result<Decision> {
    let tag = seq
        .tags
        .last()
        .filter(|t| t.pos + 1 == seq.len())
        .ok_or_else(|| Error::invalid("sequence must end with a [tag]"))?;
    observe(Stage::Usage);
    let usage_prob = usage_probability(out.usage_at(tag.pos)?);
    let use_meme = usage_prob >= threshold;
    if !use_meme {
        return Ok(Decision {
            usage_prob,
            use_meme,
            ranked: Vec::new(),
        });
    }
    observe(Stage::Retrieval);
    let pred = out.regress_at(tag.pos)?;
    let mut ranked = match candidates {
        None => rank_candidates(pred, catalog.memes().iter().map(|m| (m.id, m.feature.as_slice()))),
        Some(ids) => {
            let mut cands = Vec::with_capacity(ids.len());
            for &id in ids {
                cands.push((id, catalog.feature(id)?));
            }
            rank_candidates(pred, cands)
        }
    };
    if ranked.is_empty() {
        return Err(Error::Empty("meme usage decided but the candidate set is empty".into()));
    }
    ranked.truncate(k.max(1));
    Ok(Decision {
        usage_prob,
        use_meme,
        ranked,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Text,
    Usage,
    Retrieval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RespondConfig {
    pub sampler: SamplerConfig,
    pub threshold: f64,
    /// Length of the returned ranking.
    pub top_k: usize,
}

impl Default for RespondConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            threshold: 0.5,
            top_k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub speaker: Speaker,
    pub text: Vec<TokenId>,
    pub meme_id: Option<MemeId>,
    pub usage_prob: f64,
    pub ranked_memes: Vec<(MemeId, f64)>,
    /// History plus the response, ending at its `[tag]`.
    pub sequence: TokenSequence,
    /// Head-averaged last-layer attention of the tag over `sequence`.
    pub attention: Vec<f32>,
}

impl Response {
    pub fn utterance(&self) -> Utterance {
        Utterance {
            speaker: self.speaker,
            text: self.text.clone(),
            meme_id: self.meme_id,
            emotion: None,
        }
    }
}

/// Next utterance after `history`: text first, then the usage decision at
/// the tag that follows the generated `[eos]`, then retrieval. `observe` is
/// called as each stage starts. An empty text always retrieves a meme, so
/// the response is a valid utterance.
pub fn respond(
    model: &Model,
    catalog: &MemeCatalog,
    history: &[Utterance],
    cfg: &RespondConfig,
    candidates: Option<&[MemeId]>,
    observe: &mut dyn FnMut(Stage),
) -> Result<Response> {
    let speaker = history.last().map_or(Speaker::User1, |u| u.speaker.other());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    observe(Stage::Text);
    let (mut seq, text) = generate_text(model, history, catalog, speaker, &cfg.sampler, &mut rng)?;
    let tag = seq.close_utterance();
    let out = model.forward(&seq)?;
    let threshold = if text.is_empty() { 0.0 } else { cfg.threshold };
    let d = decide_from(&out, &seq, catalog, candidates, threshold, cfg.top_k, observe)?;
    Ok(Response {
        speaker,
        text,
        meme_id: d.ranked.first().map(|r| r.0),
        usage_prob: d.usage_prob,
        ranked_memes: d.ranked,
        attention: out.mean_last_layer_attention(tag)?,
        sequence: seq,
    })
}
