//! Pre-LN decoder-only transformer with usage, regression and emotion heads.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{special, Segment, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Scalar, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// Meme feature dimension.
    pub meme_dim: usize,
    pub n_emotions: usize,
    pub dropout_p: f64,
    pub n_segments: usize,
    /// Hidden width of the usage, regression and emotion MLPs.
    pub head_hidden: usize,
}

impl ModelConfig {
    /// 2 layers, d_model 64, 4 heads, d_ff 256, 512 positions, dropout 0.1.
    pub fn desk(vocab_size: usize, meme_dim: usize, n_emotions: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_positions: 512,
            meme_dim,
            n_emotions,
            dropout_p: 0.1,
            n_segments: Segment::COUNT,
            head_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
            ("meme_dim", self.meme_dim),
            ("n_emotions", self.n_emotions),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < special::COUNT {
            return Err(Error::invalid("model config: vocab_size smaller than the reserved block"));
        }
        if self.n_segments != Segment::COUNT {
            return Err(Error::invalid(format!("model config: n_segments must be {}", Segment::COUNT)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("model config: dropout_p {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Scalars in one transformer block: `4d² + 2df + 9d + f`.
    pub fn layer_param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * d * d + 2 * d * f + 9 * d + f
    }

    /// Total scalar count, as a closed form in the config.
    pub fn param_count(&self) -> usize {
        let (v, d, p, m, h) = (self.vocab_size, self.d_model, self.max_positions, self.meme_dim, self.head_hidden);
        let embeddings = v * d + p * d + self.n_segments * d + m * d + d;
        let final_ln = 2 * d;
        let lm_head = d * v + v;
        let head = |out: usize| d * h + h + h * out + out;
        embeddings
            + self.n_layers * self.layer_param_count()
            + final_ln
            + lm_head
            + head(2)
            + head(m)
            + head(self.n_emotions)
    }
}

/// Parameters in a fixed order. Names are stable across versions because the
/// checkpoint format stores them.
fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, h) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.head_hidden);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![cfg.max_positions, d]),
        ("seg_emb".to_string(), vec![cfg.n_segments, d]),
        ("meme_proj.w".to_string(), vec![cfg.meme_dim, d]),
        ("meme_proj.b".to_string(), vec![d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("h{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.qkv.w"), vec![d, 3 * d]),
            (p("attn.qkv.b"), vec![3 * d]),
            (p("attn.out.w"), vec![d, d]),
            (p("attn.out.b"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.fc.w"), vec![d, f]),
            (p("mlp.fc.b"), vec![f]),
            (p("mlp.proj.w"), vec![f, d]),
            (p("mlp.proj.b"), vec![d]),
        ]);
    }
    out.extend([
        ("ln_f.g".to_string(), vec![d]),
        ("ln_f.b".to_string(), vec![d]),
        ("lm_head.w".to_string(), vec![d, v]),
        ("lm_head.b".to_string(), vec![v]),
    ]);
    for (head, width) in [("usage", 2), ("regress", cfg.meme_dim), ("emotion", cfg.n_emotions)] {
        out.extend([
            (format!("{head}.fc.w"), vec![d, h]),
            (format!("{head}.fc.b"), vec![h]),
            (format!("{head}.out.w"), vec![h, width]),
            (format!("{head}.out.b"), vec![width]),
        ]);
    }
    out
}

/// Weights ~ N(0, 0.02); biases and layernorm shifts 0; layernorm gains 1.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut params = ParamSet::new();
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".g") {
            Tensor::full(&shape, 1.0)
        } else if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng) as f32).collect())?
        };
        params.insert(name, t)?;
    }
    Ok(params)
}

/// Indices of every parameter, resolved once per config.
#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    seg_emb: usize,
    meme_proj: Linear,
    layers: Vec<LayerLayout>,
    ln_f: (usize, usize),
    lm_head: Linear,
    usage: Mlp,
    regress: Mlp,
    emotion: Mlp,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    fc: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct LayerLayout {
    ln1: (usize, usize),
    qkv: Linear,
    attn_out: Linear,
    ln2: (usize, usize),
    fc: Linear,
    proj: Linear,
}

impl Layout {
    fn resolve<T: Scalar>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        for (name, shape) in param_shapes(cfg) {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "model",
                    format!("parameter `{name}` is {:?}, config needs {shape:?}", t.shape()),
                ));
            }
        }
        if params.len() != param_shapes(cfg).len() {
            return Err(Error::Format(format!(
                "parameter set has {} tensors, config needs {}",
                params.len(),
                param_shapes(cfg).len()
            )));
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let lin = |p: &str| Linear {
            w: id(&format!("{p}.w")),
            b: id(&format!("{p}.b")),
        };
        let ln = |p: &str| (id(&format!("{p}.g")), id(&format!("{p}.b")));
        let mlp = |p: &str| Mlp {
            fc: lin(&format!("{p}.fc")),
            out: lin(&format!("{p}.out")),
        };
        Ok(Self {
            tok_emb: id("tok_emb"),
            pos_emb: id("pos_emb"),
            seg_emb: id("seg_emb"),
            meme_proj: lin("meme_proj"),
            layers: (0..cfg.n_layers)
                .map(|l| LayerLayout {
                    ln1: ln(&format!("h{l}.ln1")),
                    qkv: lin(&format!("h{l}.attn.qkv")),
                    attn_out: lin(&format!("h{l}.attn.out")),
                    ln2: ln(&format!("h{l}.ln2")),
                    fc: lin(&format!("h{l}.mlp.fc")),
                    proj: lin(&format!("h{l}.mlp.proj")),
                })
                .collect(),
            ln_f: ln("ln_f"),
            lm_head: lin("lm_head"),
            usage: mlp("usage"),
            regress: mlp("regress"),
            emotion: mlp("emotion"),
        })
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Final hidden states `[len, d_model]`.
    pub hidden: Var,
    /// `[len, vocab_size]`.
    pub lm_logits: Var,
    /// Positions the heads were evaluated at, in sequence order.
    pub tag_positions: Vec<usize>,
    /// `[tags, 2]`, `[tags, meme_dim]`, `[tags, n_emotions]`; `None` without tags.
    pub heads: Option<HeadVars>,
    /// Last-layer attention probabilities, one `[len, len]` map per head.
    pub last_attention: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub usage: Var,
    pub regress: Var,
    pub emotion: Var,
}

/// Values of one inference pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub hidden: Tensor<f32>,
    pub lm_logits: Tensor<f32>,
    pub tag_positions: Vec<usize>,
    pub usage_logits: Tensor<f32>,
    pub regress: Tensor<f32>,
    pub emotion_logits: Tensor<f32>,
    /// `[n_heads, len, len]`.
    pub attention: Tensor<f32>,
}

impl ForwardOutput {
    pub fn len(&self) -> usize {
        self.hidden.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row of head results for the tag at `pos`.
    fn tag_row(&self, pos: usize) -> Result<usize> {
        self.tag_positions
            .iter()
            .position(|&p| p == pos)
            .ok_or_else(|| Error::invalid(format!("position {pos} is not a tag position")))
    }

    pub fn usage_at(&self, tag_pos: usize) -> Result<&[f32]> {
        Ok(self.usage_logits.row(self.tag_row(tag_pos)?))
    }

    pub fn regress_at(&self, tag_pos: usize) -> Result<&[f32]> {
        Ok(self.regress.row(self.tag_row(tag_pos)?))
    }

    pub fn emotion_at(&self, tag_pos: usize) -> Result<&[f32]> {
        Ok(self.emotion_logits.row(self.tag_row(tag_pos)?))
    }

    /// Head-averaged last-layer attention row at `tag_pos`, over all `len`
    /// positions (zero after `tag_pos`).
    pub fn mean_last_layer_attention(&self, tag_pos: usize) -> Result<Vec<f32>> {
        let len = self.len();
        if tag_pos >= len {
            return Err(Error::invalid(format!("position {tag_pos} outside sequence of length {len}")));
        }
        let heads = self.attention.shape()[0];
        let data = self.attention.data();
        let mut out = vec![0.0f32; len];
        for h in 0..heads {
            let row = &data[(h * len + tag_pos) * len..(h * len + tag_pos + 1) * len];
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a;
            }
        }
        let inv = 1.0 / heads as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl Model<f32> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Inference pass with dropout off.
    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput> {
        let mut tape = Tape::inference();
        let vars = self.forward_tape(&mut tape, &self.params, seq)?;
        let head = |f: fn(&HeadVars) -> Var, width: usize| match &vars.heads {
            Some(h) => tape.value(f(h)).clone(),
            None => Tensor::zeros(&[0, width]),
        };
        let len = seq.len();
        let mut attention = Vec::with_capacity(self.config.n_heads * len * len);
        for &a in &vars.last_attention {
            attention.extend_from_slice(tape.value(a).data());
        }
        Ok(ForwardOutput {
            hidden: tape.value(vars.hidden).clone(),
            lm_logits: tape.value(vars.lm_logits).clone(),
            tag_positions: vars.tag_positions.clone(),
            usage_logits: head(|h| h.usage, 2),
            regress: head(|h| h.regress, self.config.meme_dim),
            emotion_logits: head(|h| h.emotion, self.config.n_emotions),
            attention: Tensor::new(vec![vars.last_attention.len(), len, len], attention)?,
        })
    }
}

impl<T: Scalar> Model<T> {
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        Layout::resolve(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Sum of token (or projected meme), position and segment embeddings,
    /// `[len, d_model]`.
    pub fn embed(&self, tape: &mut Tape<T>, params: &ParamSet<T>, seq: &TokenSequence) -> Result<Var> {
        let layout = Layout::resolve(&self.config, params)?;
        self.embed_with(&layout, tape, params, seq)
    }

    fn embed_with(
        &self,
        layout: &Layout,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        seq: &TokenSequence,
    ) -> Result<Var> {
        let cfg = &self.config;
        if seq.is_empty() {
            return Err(Error::Empty("cannot embed an empty sequence".into()));
        }
        if let Some(&p) = seq.positions.iter().find(|&&p| p >= cfg.max_positions) {
            return Err(Error::invalid(format!(
                "position {p} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        if let Some(&t) = seq.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        let tok_table = tape.param(params, layout.tok_emb);
        let ids: Vec<usize> = seq.tokens.iter().map(|&t| t as usize).collect();
        let mut x = tape.embedding_gather(tok_table, &ids)?;
        if !seq.meme_slots.is_empty() {
            let dm = cfg.meme_dim;
            let mut feats = Vec::with_capacity(seq.meme_slots.len() * dm);
            for slot in &seq.meme_slots {
                if slot.feature.len() != dm {
                    return Err(Error::shape(
                        "embed",
                        format!("meme {} has {} features, model expects {dm}", slot.meme_id, slot.feature.len()),
                    ));
                }
                feats.extend(slot.feature.iter().map(|&v| T::of(v as f64)));
            }
            let feats = tape.constant(Tensor::new(vec![seq.meme_slots.len(), dm], feats)?);
            let projected = linear(tape, params, layout.meme_proj, feats)?;
            let at: Vec<usize> = seq.meme_slots.iter().map(|s| s.pos).collect();
            x = tape.replace_rows(x, projected, &at)?;
        }
        let pos_table = tape.param(params, layout.pos_emb);
        let pos = tape.embedding_gather(pos_table, &seq.positions)?;
        let seg_table = tape.param(params, layout.seg_emb);
        let segs: Vec<usize> = seq.segments.iter().map(|s| s.index()).collect();
        let seg = tape.embedding_gather(seg_table, &segs)?;
        let x = tape.add(x, pos)?;
        tape.add(x, seg)
    }

    /// Records a full forward pass on `tape`, reading weights from `params`
    /// (which must have this model's layout). Heads run at every tag.
    pub fn forward_tape(&self, tape: &mut Tape<T>, params: &ParamSet<T>, seq: &TokenSequence) -> Result<ForwardVars> {
        let cfg = &self.config;
        let layout = Layout::resolve(cfg, params)?;
        let p = cfg.dropout_p;
        let len = seq.len();
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = d / nh;
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());

        let x = self.embed_with(&layout, tape, params, seq)?;
        let mut x = tape.dropout(x, p)?;
        let mut last_attention = Vec::new();
        for (li, l) in layout.layers.iter().enumerate() {
            let h = layernorm(tape, params, l.ln1, x)?;
            let qkv = linear(tape, params, l.qkv, h)?;
            let mut heads = Vec::with_capacity(nh);
            for j in 0..nh {
                let q = tape.slice(qkv, 1, j * dh, (j + 1) * dh)?;
                let k = tape.slice(qkv, 1, d + j * dh, d + (j + 1) * dh)?;
                let v = tape.slice(qkv, 1, 2 * d + j * dh, 2 * d + (j + 1) * dh)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let scores = tape.causal_mask(scores)?;
                let att = tape.softmax(scores, 1)?;
                if li + 1 == layout.layers.len() {
                    last_attention.push(att);
                }
                let att = tape.dropout(att, p)?;
                heads.push(tape.matmul(att, v)?);
            }
            let merged = if nh == 1 { heads[0] } else { tape.concat(&heads, 1)? };
            let a = linear(tape, params, l.attn_out, merged)?;
            let a = tape.dropout(a, p)?;
            x = tape.add(x, a)?;

            let h = layernorm(tape, params, l.ln2, x)?;
            let h = linear(tape, params, l.fc, h)?;
            let h = tape.gelu(h);
            let h = linear(tape, params, l.proj, h)?;
            let h = tape.dropout(h, p)?;
            x = tape.add(x, h)?;
        }
        let hidden = layernorm(tape, params, layout.ln_f, x)?;
        let lm_logits = linear(tape, params, layout.lm_head, hidden)?;

        let tag_positions: Vec<usize> = seq.tags.iter().map(|t| t.pos).collect();
        if let Some(&bad) = tag_positions.iter().find(|&&t| t >= len) {
            return Err(Error::invalid(format!("tag position {bad} outside sequence of length {len}")));
        }
        let heads = if tag_positions.is_empty() {
            None
        } else {
            let h_tag = tape.embedding_gather(hidden, &tag_positions)?;
            Some(HeadVars {
                usage: mlp(tape, params, layout.usage, h_tag, p)?,
                regress: mlp(tape, params, layout.regress, h_tag, p)?,
                emotion: mlp(tape, params, layout.emotion, h_tag, p)?,
            })
        };
        Ok(ForwardVars {
            hidden,
            lm_logits,
            tag_positions,
            heads,
            last_attention,
        })
    }

    /// Runs one head MLP on explicit hidden states `[n, d_model]`.
    pub fn head(&self, tape: &mut Tape<T>, params: &ParamSet<T>, which: Head, h: Var) -> Result<Var> {
        let layout = Layout::resolve(&self.config, params)?;
        let m = match which {
            Head::Usage => layout.usage,
            Head::Regress => layout.regress,
            Head::Emotion => layout.emotion,
        };
        mlp(tape, params, m, h, self.config.dropout_p)
    }

    /// Meme projection applied to raw features `[n, meme_dim]`.
    pub fn project_memes(&self, tape: &mut Tape<T>, params: &ParamSet<T>, feats: Var) -> Result<Var> {
        let layout = Layout::resolve(&self.config, params)?;
        linear(tape, params, layout.meme_proj, feats)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Usage,
    Regress,
    Emotion,
}

fn linear<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>, l: Linear, x: Var) -> Result<Var> {
    let w = tape.param(params, l.w);
    let b = tape.param(params, l.b);
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn layernorm<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>, (g, b): (usize, usize), x: Var) -> Result<Var> {
    let g = tape.param(params, g);
    let b = tape.param(params, b);
    tape.layernorm(x, g, b)
}

/// Linear, ReLU, dropout, linear.
fn mlp<T: Scalar>(tape: &mut Tape<T>, params: &ParamSet<T>, m: Mlp, x: Var, p: f64) -> Result<Var> {
    let h = linear(tape, params, m.fc, x)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, p)?;
    linear(tape, params, m.out, h)
}
