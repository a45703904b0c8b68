use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, MemeId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub easy_test: f64,
    pub hard_test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            easy_test: 0.05,
            hard_test: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: Corpus,
    pub valid: Corpus,
    pub easy_test: Corpus,
    pub hard_test: Corpus,
}

/// Splits by dialogue.
///
/// Dialogues that use any `reserved` meme go to the hard test set. The rest
/// are shuffled under `seed` and divided by `ratios`. An easy-test dialogue
/// whose memes do not all occur in the training split moves to the hard
/// test set, so the easy set only ever contains seen memes.
pub fn split_corpus(c: &Corpus, seed: u64, ratios: SplitRatios, reserved: &[MemeId]) -> Result<CorpusSplit> {
    let parts = [ratios.train, ratios.valid, ratios.easy_test, ratios.hard_test];
    if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {parts:?} must be in [0, 1] and sum to 1")));
    }
    let reserved: BTreeSet<MemeId> = reserved.iter().copied().collect();
    let (mut hard, mut pool): (Vec<usize>, Vec<usize>) =
        (0..c.dialogues.len()).partition(|&i| c.dialogues[i].meme_ids().any(|m| reserved.contains(&m)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let n = pool.len() as f64;
    let n_train = (ratios.train * n).round() as usize;
    let n_valid = ((ratios.valid * n).round() as usize).min(pool.len() - n_train);
    let n_easy = ((ratios.easy_test * n).round() as usize).min(pool.len() - n_train - n_valid);

    let mut train = pool[..n_train].to_vec();
    let mut valid = pool[n_train..n_train + n_valid].to_vec();
    let easy_candidates = &pool[n_train + n_valid..n_train + n_valid + n_easy];
    hard.extend_from_slice(&pool[n_train + n_valid + n_easy..]);

    let seen: BTreeSet<MemeId> = train.iter().flat_map(|&i| c.dialogues[i].meme_ids()).collect();
    let (mut easy, unseen): (Vec<usize>, Vec<usize>) = easy_candidates
        .iter()
        .partition(|&&i| c.dialogues[i].meme_ids().all(|m| seen.contains(&m)));
    hard.extend(unseen);

    let take = |idx: &mut Vec<usize>| {
        idx.sort_unstable();
        c.with_dialogues(idx.iter().map(|&i| c.dialogues[i].clone()).collect())
    };
    Ok(CorpusSplit {
        train: take(&mut train),
        valid: take(&mut valid),
        easy_test: take(&mut easy),
        hard_test: take(&mut hard),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};

    fn corpus() -> Corpus {
        synth_corpus(&SynthConfig::new(80, 10, 50, 3)).unwrap()
    }

    #[test]
    fn reserved_memes_only_in_hard_test() {
        let c = corpus();
        let s = split_corpus(&c, 7, SplitRatios::default(), &[8, 9]).unwrap();
        for part in [&s.train, &s.valid, &s.easy_test] {
            assert!(part.meme_ids_used().iter().all(|m| *m < 8));
        }
        assert!(s.hard_test.meme_ids_used().contains(&8));
        let total = s.train.dialogues.len() + s.valid.dialogues.len() + s.easy_test.dialogues.len() + s.hard_test.dialogues.len();
        assert_eq!(total, c.dialogues.len());
        let train_memes = s.train.meme_ids_used();
        assert!(s.easy_test.meme_ids_used().is_subset(&train_memes));
    }

    #[test]
    fn deterministic_under_seed() {
        let c = corpus();
        let a = split_corpus(&c, 7, SplitRatios::default(), &[9]).unwrap();
        let b = split_corpus(&c, 7, SplitRatios::default(), &[9]).unwrap();
        assert_eq!(a, b);
        let other = split_corpus(&c, 8, SplitRatios::default(), &[9]).unwrap();
        assert_ne!(a.train.dialogues, other.train.dialogues);
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let bad = SplitRatios {
            train: 0.9,
            ..SplitRatios::default()
        };
        assert!(split_corpus(&corpus(), 1, bad, &[]).is_err());
    }
}
