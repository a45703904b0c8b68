use std::path::{Path, PathBuf};

use modgpt::corpus::{
    corpus_stats, load_catalog, load_corpus, save_catalog, save_corpus, split_corpus, synth_corpus, Corpus, SplitRatios,
    SynthConfig, Utterance, Vocab,
};
use modgpt::decoding::{respond, RespondConfig, SamplerConfig};
use modgpt::evalkit::{evaluate, seen_unseen_breakdown, EvalOptions};
use modgpt::model::{Checkpoint, Model, ModelConfig};
use modgpt::training::{
    pretrain_emotion, pretrain_meme_features, select_emotion_labels, train as run_training, CheckpointHooks,
    TrainConfig,
};
use serde_json::{json, Value};

use crate::server::{parse_utterance, TurnReply};
use crate::{
    CliError, CliResult, DataArgs, EvalArgs, Format, GenerateArgs, ModelArgs, PretrainArgs, SamplingArgs, SplitArgs,
    StatsArgs, SynthArgs, TrainArgs,
};

/// Most frequent emotion labels kept for the emotion head.
pub const MAX_EMOTIONS: usize = 100;

fn catalog_path(data: &DataArgs) -> PathBuf {
    data.catalog.clone().unwrap_or_else(|| {
        data.corpus
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("catalog.json")
    })
}

fn print_json(v: &impl serde::Serialize) -> CliResult<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))
}

pub fn stats(a: &StatsArgs) -> CliResult<()> {
    let corpus = load_corpus(&a.data.corpus, &catalog_path(&a.data), None)?;
    let s = corpus_stats(&corpus)?;
    match a.format {
        Format::Text => print!("{s}"),
        Format::Json => print_json(&s)?,
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let corpus = synth_corpus(&SynthConfig::new(a.dialogues, a.memes, a.vocab, a.seed))?;
    create_dir(&a.out_dir)?;
    save_corpus(&corpus, &a.out_dir.join("corpus.jsonl"))?;
    save_catalog(&corpus.catalog, &a.out_dir.join("catalog.json"))?;
    println!("wrote {} dialogues and {} memes to {}", corpus.dialogues.len(), corpus.catalog.len(), a.out_dir.display());
    Ok(())
}

pub const SPLIT_FILES: [&str; 4] = ["train.jsonl", "valid.jsonl", "easy_test.jsonl", "hard_test.jsonl"];

pub fn split(a: &SplitArgs) -> CliResult<()> {
    if a.ratios.len() != 4 {
        return Err(CliError::new("invalid_argument", format!("--ratios needs 4 values, got {}", a.ratios.len())));
    }
    let corpus = load_corpus(&a.data.corpus, &catalog_path(&a.data), None)?;
    let ratios = SplitRatios {
        train: a.ratios[0],
        valid: a.ratios[1],
        easy_test: a.ratios[2],
        hard_test: a.ratios[3],
    };
    let s = split_corpus(&corpus, a.seed, ratios, &a.reserve)?;
    create_dir(&a.out_dir)?;
    let parts = [&s.train, &s.valid, &s.easy_test, &s.hard_test];
    for (part, name) in parts.iter().zip(SPLIT_FILES) {
        save_corpus(part, &a.out_dir.join(name))?;
    }
    save_catalog(&corpus.catalog, &a.out_dir.join("catalog.json"))?;
    let summary = json!({
        "seed": a.seed,
        "reserved": a.reserve,
        "ratios": a.ratios,
        "dialogues": {
            "train": s.train.dialogues.len(),
            "valid": s.valid.dialogues.len(),
            "easy_test": s.easy_test.dialogues.len(),
            "hard_test": s.hard_test.dialogues.len(),
        },
        "train_memes": s.train.meme_ids_used(),
    });
    std::fs::write(a.out_dir.join("split.json"), serde_json::to_string_pretty(&summary)?)?;
    print_json(&summary)
}

/// Model, vocabulary and emotion labels to work with, plus the corpus encoded
/// with that vocabulary.
struct Setup {
    model: Model,
    vocab: Vocab,
    labels: Vec<String>,
    corpus: Corpus,
}

fn setup(data: &DataArgs, m: &ModelArgs) -> CliResult<Setup> {
    let catalog = catalog_path(data);
    if let Some(init) = &m.init {
        let ckpt = Checkpoint::load(init)?;
        let corpus = load_corpus(&data.corpus, &catalog, Some(ckpt.vocab.clone()))?;
        let labels = if ckpt.emotion_labels.is_empty() {
            let mut l = select_emotion_labels(&corpus, MAX_EMOTIONS);
            l.truncate(ckpt.model.config.n_emotions);
            l
        } else {
            ckpt.emotion_labels
        };
        return Ok(Setup {
            model: ckpt.model,
            vocab: ckpt.vocab,
            labels,
            corpus,
        });
    }
    let corpus = load_corpus(&data.corpus, &catalog, None)?;
    let labels = select_emotion_labels(&corpus, MAX_EMOTIONS);
    let mut cfg = ModelConfig::desk(corpus.vocab.len(), corpus.catalog.feature_dim(), labels.len().max(1));
    if let Some(v) = m.d_model {
        cfg.d_model = v;
        cfg.head_hidden = v;
    }
    if let Some(v) = m.layers {
        cfg.n_layers = v;
    }
    if let Some(v) = m.heads {
        cfg.n_heads = v;
    }
    if let Some(v) = m.d_ff {
        cfg.d_ff = v;
    }
    if let Some(v) = m.dropout {
        cfg.dropout_p = v;
    }
    if let Some(v) = m.max_positions {
        cfg.max_positions = v;
    }
    Ok(Setup {
        model: Model::init(cfg, m.model_seed)?,
        vocab: corpus.vocab.clone(),
        labels,
        corpus,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Memes,
    Emotion,
}

pub fn pretrain(a: &PretrainArgs, stage: Stage) -> CliResult<()> {
    let s = setup(&a.data, &a.model)?;
    let defaults = TrainConfig::default();
    let mut cfg = match stage {
        Stage::Memes => defaults.meme_pretrain,
        Stage::Emotion => defaults.emotion_pretrain,
    };
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = a.seed;
    let mut model = s.model;
    let report = match stage {
        Stage::Memes => pretrain_meme_features(&mut model, &s.corpus.catalog, &cfg)?,
        Stage::Emotion => pretrain_emotion(&mut model, &s.corpus, &s.labels, defaults.max_len, &cfg)?,
    };
    let stage_name = match stage {
        Stage::Memes => "pretrain-memes",
        Stage::Emotion => "pretrain-emotion",
    };
    let ckpt = Checkpoint {
        model,
        vocab: s.vocab,
        emotion_labels: s.labels,
        meta: json!({ "stage": stage_name, "pretrain": cfg }),
    };
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ckpt.save(&a.out)?;
    print_json(&json!({ "stage": stage_name, "report": report, "checkpoint": a.out }))
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)?
        }
        None => TrainConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    over!(lr, batch_size, epochs, lambda1, lambda2, lambda_emotion, warmup_steps, max_len, seed);
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.pretrain_memes |= a.pretrain_memes;
    cfg.pretrain_emotion |= a.pretrain_emotion;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = train_config(a)?;
    let s = setup(&a.data, &a.model)?;
    let valid = match &a.valid {
        Some(p) => Some(load_corpus(p, &catalog_path(&a.data), Some(s.vocab.clone()))?),
        None => None,
    };
    let meta = json!({ "stage": "train", "train_config": cfg });
    let mut hooks = CheckpointHooks::new(&a.out_dir, s.vocab.clone(), s.labels.clone(), meta)?;
    let mut model = s.model;
    let summary = run_training(&mut model, &s.corpus, valid.as_ref(), &s.labels, &cfg, &mut hooks)?;
    hooks.checkpoint(&model).save(&a.out_dir.join("final.ckpt"))?;
    std::fs::write(a.out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    print_json(&summary)
}

pub fn resolve_checkpoint(arg: &str, run_dir: &Path) -> CliResult<PathBuf> {
    let direct = PathBuf::from(arg);
    if direct.is_file() {
        return Ok(direct);
    }
    for candidate in [run_dir.join(arg), run_dir.join(format!("{arg}.ckpt"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(CliError::new("io", format!("checkpoint `{arg}` not found (also looked in {})", run_dir.display())))
}

fn suite_file(suite: &str) -> CliResult<&'static str> {
    match suite {
        "train" => Ok(SPLIT_FILES[0]),
        "valid" => Ok(SPLIT_FILES[1]),
        "easy" => Ok(SPLIT_FILES[2]),
        "hard" => Ok(SPLIT_FILES[3]),
        other => Err(CliError::new(
            "invalid_argument",
            format!("unknown suite `{other}` (expected train, valid, easy or hard)"),
        )),
    }
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&resolve_checkpoint(&a.checkpoint, &a.run_dir)?)?;
    let corpus_path = match (&a.corpus, &a.suite) {
        (Some(p), _) => p.clone(),
        (None, Some(s)) => a.data_dir.join(suite_file(s)?),
        (None, None) => return Err(CliError::new("invalid_argument", "pass --corpus or --suite")),
    };
    let catalog = a.catalog.clone().unwrap_or_else(|| match &a.suite {
        Some(_) => a.data_dir.join("catalog.json"),
        None => corpus_path.parent().unwrap_or_else(|| Path::new(".")).join("catalog.json"),
    });
    let corpus = load_corpus(&corpus_path, &catalog, Some(ckpt.vocab.clone()))?;
    let opts = EvalOptions {
        threshold: a.threshold,
        seed: a.seed,
        emotion_labels: ckpt.emotion_labels.clone(),
        generation: a.generate.then(|| SamplerConfig {
            seed: a.seed,
            ..SamplerConfig::default()
        }),
        ..EvalOptions::default()
    };
    let report = evaluate(&ckpt.model, &corpus, &opts)?;

    let train_path = a.train_corpus.clone().or_else(|| {
        a.suite
            .as_deref()
            .filter(|s| *s != "train")
            .map(|_| a.data_dir.join(SPLIT_FILES[0]))
            .filter(|p| p.is_file())
    });
    let breakdown = match train_path {
        Some(p) => {
            let train_memes = load_catalog(&catalog)
                .and_then(|c| modgpt::corpus::parse_corpus_jsonl(&read(&p)?, c, Some(ckpt.vocab.clone())))?
                .meme_ids_used();
            let pools: Vec<Value> = opts
                .pools
                .iter()
                .filter(|n| n.is_none_or(|n| n <= corpus.catalog.len()))
                .map(|&n| {
                    seen_unseen_breakdown(&ckpt.model, &corpus, &train_memes, n, &opts.ks, opts.seed, opts.max_len)
                        .map(|su| json!({ "n": n, "seen": su.seen, "unseen": su.unseen }))
                })
                .collect::<Result<_, _>>()?;
            Some(Value::Array(pools))
        }
        None => None,
    };

    match a.format {
        Format::Json => {
            let mut v = serde_json::to_value(&report)?;
            if let Some(b) = breakdown {
                v["seen_unseen"] = b;
            }
            print_json(&v)
        }
        Format::Text => {
            print!("{report}");
            if let Some(Value::Array(rows)) = breakdown {
                println!();
                for row in rows {
                    for part in ["seen", "unseen"] {
                        let label = match row["n"].as_u64() {
                            Some(n) => format!("R_{n}"),
                            None => "R_T".to_string(),
                        };
                        match row[part]["at_k"].as_array() {
                            Some(at) => {
                                let cells: Vec<String> = at
                                    .iter()
                                    .map(|p| format!("@{}={:.2}", p[0], p[1].as_f64().unwrap_or(0.0) * 100.0))
                                    .collect();
                                println!("{part:<8}{label:<6}{}  (turns={})", cells.join("  "), row[part]["turns"]);
                            }
                            None => println!("{part:<8}{label:<6}-"),
                        }
                    }
                }
            }
            Ok(())
        }
    }
}

fn read(p: &Path) -> modgpt::Result<String> {
    std::fs::read_to_string(p).map_err(|e| modgpt::Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

pub fn respond_config(s: &SamplingArgs) -> RespondConfig {
    RespondConfig {
        sampler: SamplerConfig {
            top_p: s.top_p,
            temperature: s.temperature,
            max_new_tokens: s.max_new_tokens,
            seed: s.seed,
        },
        threshold: s.threshold,
        top_k: s.top_k,
    }
}

pub fn generate(a: &GenerateArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let catalog = load_catalog(&a.catalog)?;
    let mut history: Vec<Utterance> = Vec::new();
    let mut speaker = modgpt::corpus::Speaker::User1;
    for h in &a.history {
        let (text, meme_id) = parse_utterance(h);
        let u = crate::server::make_utterance(&ckpt.vocab, &catalog, speaker, text.as_deref(), meme_id)
            .map_err(|(kind, msg)| CliError::new(kind, msg))?;
        history.push(u);
        speaker = speaker.other();
    }
    let cfg = respond_config(&a.sampling);
    cfg.sampler.validate()?;
    let resp = respond(&ckpt.model, &catalog, &history, &cfg, None, &mut |_| {})?;
    print_json(&TurnReply::new(&resp, &ckpt.vocab))
}
