"""Counts corpus statistics for the sample independently of the Rust code.

Usage: python3 count_stats.py > stats.json
"""
import json
import sys
from pathlib import Path

here = Path(__file__).parent
dialogues = [json.loads(l) for l in (here / "corpus.jsonl").read_text().splitlines() if l.strip()]
utts = [u for d in dialogues for u in d["utterances"]]
tokens = [t for u in utts for t in u["text"].split()]
uses = [u["meme_id"] for u in utts if u["meme_id"] is not None]
stats = {
    "n_dialogues": len(dialogues),
    "n_utterances": len(utts),
    "n_token_types": len(set(tokens)),
    "n_memes": len(set(uses)),
    "n_tokens": len(tokens),
    "n_meme_uses": len(uses),
    "avg_utt_per_dialogue": {"num": len(utts), "den": len(dialogues)},
    "avg_memes_per_dialogue": {"num": len(uses), "den": len(dialogues)},
    "avg_tokens_per_utt": {"num": len(tokens), "den": len(utts)},
}
json.dump(stats, sys.stdout, indent=2)
sys.stdout.write("\n")
