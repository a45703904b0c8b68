//! Terminal chat. Lines are user turns; `/meme <id> [text]` attaches a meme,
//! `/reset` clears the history and `/quit` exits.

use std::io::{BufRead, Write};

use modgpt::corpus::{load_catalog, Speaker, Utterance};
use modgpt::decoding::respond;
use modgpt::model::Checkpoint;

use crate::commands::respond_config;
use crate::server::{make_utterance, parse_utterance, TurnReply};
use crate::{ChatArgs, CliError, CliResult};

pub fn run(a: &ChatArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let catalog = load_catalog(&a.catalog)?;
    let base = respond_config(&a.sampling);
    base.sampler.validate()?;
    let mut history: Vec<Utterance> = Vec::new();
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    loop {
        write!(out, "you> ")?;
        out.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim();
        let input = match line {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                history.clear();
                println!("(history cleared)");
                continue;
            }
            l => match l.strip_prefix("/meme ") {
                Some(rest) => format!("meme:{}", rest.trim()),
                None => l.to_string(),
            },
        };
        let (text, meme_id) = parse_utterance(&input);
        let speaker = history.last().map_or(Speaker::User1, |u| u.speaker.other());
        let u = match make_utterance(&ckpt.vocab, &catalog, speaker, text.as_deref(), meme_id) {
            Ok(u) => u,
            Err((kind, msg)) => {
                eprintln!("{}", CliError::new(kind, msg));
                continue;
            }
        };
        history.push(u);
        let mut cfg = base.clone();
        cfg.sampler.seed = base.sampler.seed.wrapping_add((history.len() / 2) as u64);
        let resp = respond(&ckpt.model, &catalog, &history, &cfg, None, &mut |_| {})?;
        let reply = TurnReply::new(&resp, &ckpt.vocab);
        let meme = match reply.meme_id {
            Some(id) => format!("  [meme {id}]"),
            None => String::new(),
        };
        println!("bot> {}{meme}  (usage {:.2})", reply.text, reply.usage_prob);
        history.push(resp.utterance());
    }
    Ok(())
}
