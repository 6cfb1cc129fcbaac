//! Synthetic classification tasks.
//!
//! Every sample is generated on demand from a counter-based RNG stream keyed
//! by (task seed, split, index), so splits are disjoint by construction and
//! regeneration is free. Labels cycle through the classes, which keeps every
//! split exactly class-balanced.
//!
//! Three families:
//! * `Majority` - label is the token group holding the most tokens. The
//!   grouping rule is either contiguous vocabulary blocks (the base task the
//!   backbone is pretrained on) or token index modulo the class count (the
//!   downstream variant, which forces the adapters to learn a new grouping).
//! * `PairPattern` - two half-sequences drawn from a small motif library;
//!   the first half realizes its motif in the low half of each category
//!   block, the second half in the high half. Label 1 iff both halves encode
//!   the same motif.
//! * `PairPattern { shifted: true }` - same labeling rule, but tokens are
//!   drawn from the shifted part of each realization pool. Used as the
//!   transfer target: the rule is unchanged while the surface vocabulary
//!   moves.

use crate::error::{Error, Result};
use crate::numerics::rng::RngState;

pub const PAIR_CATEGORIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Contiguous,
    Modulo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Majority { grouping: Grouping },
    PairPattern { shifted: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub seed: u64,
    pub kind: TaskKind,
    pub classes: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Majority tasks: probability that a token is drawn from the label's
    /// group rather than uniformly.
    pub majority_bias: f64,
    /// PairPattern tasks: number of distinct motifs in the library.
    pub motif_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("task.classes must be >= 2".into()));
        }
        match self.kind {
            TaskKind::Majority { .. } => {
                if self.vocab % self.classes != 0 {
                    return Err(Error::Config(
                        "majority task needs vocab divisible by classes".into(),
                    ));
                }
            }
            TaskKind::PairPattern { .. } => {
                if self.classes != 2 {
                    return Err(Error::Config("pair task is binary".into()));
                }
                if self.seq_len % 2 != 0 {
                    return Err(Error::Config("pair task needs even seq_len".into()));
                }
                if self.vocab % (PAIR_CATEGORIES * 4) != 0 {
                    return Err(Error::Config(
                        "pair task needs vocab divisible by 16".into(),
                    ));
                }
                if self.motif_count < 2 {
                    return Err(Error::Config("pair task needs >= 2 motifs".into()));
                }
            }
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
            Split::Test => self.test_size,
        }
    }

    /// Deterministic sample for (split, index).
    pub fn sample(&self, split: Split, index: usize) -> Sample {
        let mut rng = RngState::new(self.seed)
            .derive(split.stream_base().wrapping_add(index as u64));
        let label = index % self.classes;
        let tokens = match self.kind {
            TaskKind::Majority { grouping } => self.gen_majority(label, grouping, &mut rng),
            TaskKind::PairPattern { shifted } => self.gen_pair(label, shifted, &mut rng),
        };
        Sample { tokens, label }
    }

    pub fn batch(&self, split: Split, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.sample(split, i)).collect()
    }

    fn group_of(&self, token: usize, grouping: Grouping) -> usize {
        match grouping {
            Grouping::Contiguous => token / (self.vocab / self.classes),
            Grouping::Modulo => token % self.classes,
        }
    }

    fn gen_majority(&self, label: usize, grouping: Grouping, rng: &mut RngState) -> Vec<usize> {
        // Draw with bias toward the label group; resample (deterministically)
        // until the stated labeling rule actually holds.
        loop {
            let mut tokens = Vec::with_capacity(self.seq_len);
            for _ in 0..self.seq_len {
                let tok = if rng.next_f64() < self.majority_bias {
                    self.random_token_in_group(label, grouping, rng)
                } else {
                    rng.next_range(self.vocab)
                };
                tokens.push(tok);
            }
            let mut counts = vec![0usize; self.classes];
            for &t in &tokens {
                counts[self.group_of(t, grouping)] += 1;
            }
            let argmax = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            if argmax == label {
                return tokens;
            }
        }
    }

    fn random_token_in_group(
        &self,
        group: usize,
        grouping: Grouping,
        rng: &mut RngState,
    ) -> usize {
        let per_group = self.vocab / self.classes;
        match grouping {
            Grouping::Contiguous => group * per_group + rng.next_range(per_group),
            Grouping::Modulo => rng.next_range(per_group) * self.classes + group,
        }
    }

    /// Motif = a count vector over the categories summing to seq_len / 2.
    /// The library is fixed by the task seed and shared across splits.
    pub fn motif_library(&self) -> Vec<Vec<usize>> {
        let half = self.seq_len / 2;
        let mut rng = RngState::new(self.seed).derive(0x4D4F5449); // motif stream
        let mut motifs: Vec<Vec<usize>> = Vec::new();
        while motifs.len() < self.motif_count {
            let mut counts = vec![0usize; PAIR_CATEGORIES];
            for _ in 0..half {
                counts[rng.next_range(PAIR_CATEGORIES)] += 1;
            }
            if !motifs.contains(&counts) {
                motifs.push(counts);
            }
        }
        motifs
    }

    /// Token pool for (category, half, shifted): each category owns a
    /// contiguous block of vocab / PAIR_CATEGORIES ids, and the block splits
    /// into a low half (first sequence) and a high half (second sequence).
    /// Within a half, the unshifted pool is its first quarter-block; the
    /// shifted pool moves half a pool width up, so the transfer distribution
    /// overlaps the training one by 50% while introducing unseen tokens.
    fn pair_pool(&self, category: usize, second_half: bool, shifted: bool) -> (usize, usize) {
        let block = self.vocab / PAIR_CATEGORIES;
        let quarter = block / 4;
        let base = category * block
            + if second_half { block / 2 } else { 0 }
            + if shifted { quarter / 2 } else { 0 };
        (base, quarter)
    }

    fn realize_motif(
        &self,
        motif: &[usize],
        second_half: bool,
        shifted: bool,
        rng: &mut RngState,
    ) -> Vec<usize> {
        let mut tokens = Vec::with_capacity(self.seq_len / 2);
        for (category, &count) in motif.iter().enumerate() {
            let (base, width) = self.pair_pool(category, second_half, shifted);
            for _ in 0..count {
                tokens.push(base + rng.next_range(width));
            }
        }
        tokens
    }

    fn gen_pair(&self, label: usize, shifted: bool, rng: &mut RngState) -> Vec<usize> {
        let motifs = self.motif_library();
        let first = rng.next_range(motifs.len());
        let second = if label == 1 {
            first
        } else {
            // a different motif, chosen deterministically
            let offset = 1 + rng.next_range(motifs.len() - 1);
            (first + offset) % motifs.len()
        };
        let mut tokens = self.realize_motif(&motifs[first], false, shifted, rng);
        tokens.extend(self.realize_motif(&motifs[second], true, shifted, rng));
        tokens
    }
}

/// Ready-made specs used by the CLI defaults and the test suites.
pub fn majority_task(name: &str, seed: u64, grouping: Grouping, classes: usize) -> TaskSpec {
    TaskSpec {
        name: name.to_string(),
        seed,
        kind: TaskKind::Majority { grouping },
        classes,
        vocab: 64,
        seq_len: 16,
        train_size: 512,
        val_size: 128,
        test_size: 256,
        majority_bias: 0.55,
        motif_count: 8,
    }
}

pub fn pair_task(name: &str, seed: u64, shifted: bool) -> TaskSpec {
    TaskSpec {
        name: name.to_string(),
        seed,
        kind: TaskKind::PairPattern { shifted },
        classes: 2,
        vocab: 64,
        seq_len: 16,
        train_size: 512,
        val_size: 128,
        test_size: 256,
        majority_bias: 0.55,
        motif_count: 8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_label_rule_holds() {
        let t = majority_task("base", 5, Grouping::Contiguous, 4);
        for i in 0..64 {
            let s = t.sample(Split::Train, i);
            let mut counts = vec![0usize; t.classes];
            for &tok in &s.tokens {
                assert!(tok < t.vocab);
                counts[t.group_of(tok, Grouping::Contiguous)] += 1;
            }
            let argmax = counts.iter().enumerate().max_by_key(|&(i, c)| (*c, usize::MAX - i)).unwrap().0;
            assert_eq!(argmax, s.label);
        }
    }

    #[test]
    fn samples_are_deterministic() {
        let t = majority_task("base", 5, Grouping::Contiguous, 4);
        assert_eq!(t.sample(Split::Val, 9), t.sample(Split::Val, 9));
        assert_ne!(t.sample(Split::Val, 9), t.sample(Split::Val, 10));
        // splits use disjoint streams
        assert_ne!(t.sample(Split::Train, 9).tokens, t.sample(Split::Val, 9).tokens);
    }

    #[test]
    fn class_balance_is_exact() {
        let t = pair_task("pairs", 3, false);
        for split in [Split::Train, Split::Val, Split::Test] {
            let n = t.split_size(split);
            let mut counts = vec![0usize; t.classes];
            for i in 0..n {
                counts[t.sample(split, i).label] += 1;
            }
            let max = *counts.iter().max().unwrap() as f64;
            let min = *counts.iter().min().unwrap() as f64;
            assert!((max - min) / n as f64 <= 0.01, "{counts:?}");
        }
    }

    #[test]
    fn pair_label_reflects_motif_equality() {
        let t = pair_task("pairs", 11, false);
        let motifs = t.motif_library();
        assert_eq!(motifs.len(), t.motif_count);
        let half = t.seq_len / 2;
        let block = t.vocab / PAIR_CATEGORIES;
        for i in 0..64 {
            let s = t.sample(Split::Test, i);
            assert_eq!(s.tokens.len(), t.seq_len);
            // recover each half's category counts and match against library
            let count_of = |toks: &[usize]| {
                let mut c = vec![0usize; PAIR_CATEGORIES];
                for &tok in toks {
                    c[tok / block] += 1;
                }
                c
            };
            let c_a = count_of(&s.tokens[..half]);
            let c_b = count_of(&s.tokens[half..]);
            assert_eq!(c_a == c_b, s.label == 1);
            // first half uses the low pool, second half the high pool
            for &tok in &s.tokens[..half] {
                assert!(tok % block < block / 2);
            }
            for &tok in &s.tokens[half..] {
                assert!(tok % block >= block / 2);
            }
        }
    }

    #[test]
    fn shifted_variant_shares_labeling_rule_but_moves_tokens() {
        let base = pair_task("pairs", 11, false);
        let shifted = pair_task("pairs_shifted", 11, true);
        assert_eq!(base.motif_library(), shifted.motif_library());
        let block = base.vocab / PAIR_CATEGORIES;
        let quarter = block / 4;
        let mut saw_unseen = false;
        for i in 0..32 {
            let s = shifted.sample(Split::Test, i);
            for &tok in &s.tokens {
                // shifted pools start half a pool width into each half-block
                let offset = tok % (block / 2);
                assert!(offset >= quarter / 2 && offset < quarter / 2 + quarter);
                if offset >= quarter {
                    saw_unseen = true;
                }
            }
        }
        assert!(saw_unseen, "the shift must introduce unseen tokens");
    }
}
