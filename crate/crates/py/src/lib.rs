//! Python bindings. Structured results come back as plain dicts.

use std::path::{Path, PathBuf};

use modgpt::corpus::{corpus_stats as stats, load_catalog, load_corpus, save_catalog, save_corpus, synth_corpus};
use modgpt::corpus::{MemeCatalog, Speaker, SynthConfig, Utterance};
use modgpt::decoding::{respond, RespondConfig, SamplerConfig};
use modgpt::evalkit::{bleu_n, distinct_n, evaluate, EvalOptions};
use modgpt::model::{Checkpoint, Model, ModelConfig};
use modgpt::training::{select_emotion_labels, train as run_training, CheckpointHooks, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

create_exception!(modgpt, ModgptError, PyValueError, "Raised for any modgpt failure; the message starts with its kind.");

fn err(e: modgpt::Error) -> PyErr {
    ModgptError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| ModgptError::new_err(format!("json: {e}")))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(|e| ModgptError::new_err(format!("json: {e}")))
}

fn catalog_or_sibling(corpus: &Path, catalog: Option<PathBuf>) -> PathBuf {
    catalog.unwrap_or_else(|| corpus.parent().unwrap_or(Path::new(".")).join("catalog.json"))
}

/// Corpus statistics as a dict.
#[pyfunction]
#[pyo3(signature = (corpus, catalog=None))]
fn corpus_stats<'py>(py: Python<'py>, corpus: PathBuf, catalog: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let c = load_corpus(&corpus, &catalog_or_sibling(&corpus, catalog), None).map_err(err)?;
    to_py(py, &stats(&c).map_err(err)?)
}

/// Writes `corpus.jsonl` and `catalog.json` for a synthetic corpus.
#[pyfunction]
#[pyo3(signature = (out_dir, dialogues=32, memes=8, vocab=50, seed=1))]
fn synth(out_dir: PathBuf, dialogues: usize, memes: usize, vocab: usize, seed: u64) -> PyResult<()> {
    let c = synth_corpus(&SynthConfig::new(dialogues, memes, vocab, seed)).map_err(err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| ModgptError::new_err(format!("io: {e}")))?;
    save_corpus(&c, &out_dir.join("corpus.jsonl")).map_err(err)?;
    save_catalog(&c.catalog, &out_dir.join("catalog.json")).map_err(err)
}

#[pyfunction]
fn bleu(candidates: Vec<Vec<String>>, references: Vec<Vec<String>>, n: usize) -> PyResult<f64> {
    bleu_n(&candidates, &references, n).map_err(err)
}

#[pyfunction]
fn distinct(candidates: Vec<Vec<String>>, n: usize) -> PyResult<f64> {
    distinct_n(&candidates, n).map_err(err)
}

/// Trains a fresh model and writes checkpoints to `out_dir`. `config` holds
/// any training config fields to override. Returns the training summary.
#[pyfunction]
#[pyo3(signature = (corpus, out_dir, catalog=None, config=None, d_model=64, layers=2, heads=4, d_ff=256, model_seed=0))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    corpus: PathBuf,
    out_dir: PathBuf,
    catalog: Option<PathBuf>,
    config: Option<Bound<'py, PyDict>>,
    d_model: usize,
    layers: usize,
    heads: usize,
    d_ff: usize,
    model_seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TrainConfig = match &config {
        Some(d) => from_py(d.as_any())?,
        None => TrainConfig::default(),
    };
    let summary = py.detach(|| -> modgpt::Result<_> {
        let c = load_corpus(&corpus, &catalog_or_sibling(&corpus, catalog), None)?;
        let labels = select_emotion_labels(&c, 100);
        let mut mc = ModelConfig::desk(c.vocab.len(), c.catalog.feature_dim(), labels.len().max(1));
        (mc.d_model, mc.head_hidden, mc.n_layers, mc.n_heads, mc.d_ff) = (d_model, d_model, layers, heads, d_ff);
        let mut model = Model::init(mc, model_seed)?;
        let meta = serde_json::json!({ "stage": "train", "train_config": cfg });
        let mut hooks = CheckpointHooks::new(&out_dir, c.vocab.clone(), labels.clone(), meta)?;
        let summary = run_training(&mut model, &c, None, &labels, &cfg, &mut hooks)?;
        hooks.checkpoint(&model).save(&out_dir.join("final.ckpt"))?;
        Ok(summary)
    });
    to_py(py, &summary.map_err(err)?)
}

/// A loaded checkpoint plus the meme catalog it retrieves from.
#[pyclass(frozen)]
struct Chatbot {
    ckpt: Checkpoint,
    catalog: MemeCatalog,
}

#[pymethods]
impl Chatbot {
    #[new]
    fn new(checkpoint: PathBuf, catalog: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: Checkpoint::load(&checkpoint).map_err(err)?,
            catalog: load_catalog(&catalog).map_err(err)?,
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.ckpt.vocab.len()
    }

    /// Next turn after `history`, a list of strings or `{"text", "meme_id"}`
    /// dicts with speakers alternating from user 1.
    #[pyo3(signature = (history, seed=0, top_p=0.9, temperature=0.7, max_new_tokens=32, threshold=0.5, top_k=5))]
    #[allow(clippy::too_many_arguments)]
    fn respond<'py>(
        &self,
        py: Python<'py>,
        history: Bound<'py, PyList>,
        seed: u64,
        top_p: f64,
        temperature: f64,
        max_new_tokens: usize,
        threshold: f64,
        top_k: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mut utts = Vec::new();
        let mut speaker = Speaker::User1;
        for item in history.iter() {
            let (text, meme_id): (Option<String>, Option<u32>) = match item.extract::<String>() {
                Ok(s) => (Some(s), None),
                Err(_) => {
                    let d = item.cast::<PyDict>()?;
                    let text = d.get_item("text")?.map(|t| t.extract()).transpose()?.flatten();
                    let meme = d.get_item("meme_id")?.map(|t| t.extract()).transpose()?.flatten();
                    (text, meme)
                }
            };
            let u = Utterance {
                speaker,
                text: text.map(|t| self.ckpt.vocab.encode(&t)).unwrap_or_default(),
                meme_id,
                emotion: None,
            };
            u.validate().map_err(|e| ModgptError::new_err(format!("empty: {e}")))?;
            if let Some(id) = meme_id.filter(|id| !self.catalog.contains(*id)) {
                return Err(ModgptError::new_err(format!("dangling_meme: meme id {id} not in catalog")));
            }
            utts.push(u);
            speaker = speaker.other();
        }
        let cfg = RespondConfig {
            sampler: SamplerConfig {
                top_p,
                temperature,
                max_new_tokens,
                seed,
            },
            threshold,
            top_k,
        };
        let r = py
            .detach(|| respond(&self.ckpt.model, &self.catalog, &utts, &cfg, None, &mut |_| {}))
            .map_err(err)?;
        let vocab = &self.ckpt.vocab;
        let out = serde_json::json!({
            "speaker": r.speaker.number(),
            "text": vocab.decode(&r.text),
            "meme_id": r.meme_id,
            "usage_prob": r.usage_prob,
            "ranked_memes": r.ranked_memes,
            "attention": {
                "tokens": r.sequence.tokens.iter().map(|&t| vocab.token(t).unwrap_or("[unk]")).collect::<Vec<_>>(),
                "weights": r.attention,
            },
        });
        to_py(py, &out)
    }

    /// Evaluation report for a corpus file as a dict.
    #[pyo3(signature = (corpus, seed=0, threshold=0.5))]
    fn evaluate<'py>(&self, py: Python<'py>, corpus: PathBuf, seed: u64, threshold: f64) -> PyResult<Bound<'py, PyAny>> {
        let c = modgpt::corpus::parse_corpus_jsonl(
            &std::fs::read_to_string(&corpus).map_err(|e| ModgptError::new_err(format!("io: {}: {e}", corpus.display())))?,
            self.catalog.clone(),
            Some(self.ckpt.vocab.clone()),
        )
        .map_err(err)?;
        let opts = EvalOptions {
            threshold,
            seed,
            emotion_labels: self.ckpt.emotion_labels.clone(),
            ..EvalOptions::default()
        };
        let report = py.detach(|| evaluate(&self.ckpt.model, &c, &opts)).map_err(err)?;
        to_py(py, &report)
    }
}

#[pymodule]
#[pyo3(name = "modgpt")]
fn modgpt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ModgptError", m.py().get_type::<ModgptError>())?;
    m.add_function(wrap_pyfunction!(corpus_stats, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(distinct, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Chatbot>()?;
    Ok(())
}
