use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};

/// The token pair `contains_bigram` looks for.
pub const BIGRAM: (usize, usize) = (3, 7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Alphabet {0, 1}; the label is whichever token occurs more often.
    MajorityToken,
    /// Label 1 iff the first and last tokens are equal.
    FirstLastMatch,
    /// Label 1 iff [`BIGRAM`] occurs at adjacent positions.
    ContainsBigram,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority_token" => Ok(Self::MajorityToken),
            "first_last_match" => Ok(Self::FirstLastMatch),
            "contains_bigram" => Ok(Self::ContainsBigram),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MajorityToken => "majority_token",
            Self::FirstLastMatch => "first_last_match",
            Self::ContainsBigram => "contains_bigram",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Ground-truth label of a token sequence under `kind`.
pub fn label_of(kind: TaskKind, tokens: &[usize]) -> usize {
    match kind {
        TaskKind::MajorityToken => {
            let ones = tokens.iter().filter(|&&t| t == 1).count();
            let zeros = tokens.iter().filter(|&&t| t == 0).count();
            usize::from(ones > zeros)
        }
        TaskKind::FirstLastMatch => usize::from(tokens.first() == tokens.last()),
        TaskKind::ContainsBigram => usize::from(
            tokens
                .windows(2)
                .any(|w| w[0] == BIGRAM.0 && w[1] == BIGRAM.1),
        ),
    }
}

fn sample(task: &SyntheticTask, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = task.seq_len;
    let v = task.vocab_size;
    match task.kind {
        TaskKind::MajorityToken => loop {
            let s: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let ones = s.iter().filter(|&&t| t == 1).count();
            if 2 * ones != n && label_of(task.kind, &s) == label {
                return s;
            }
        },
        TaskKind::FirstLastMatch => {
            let mut s: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
            if label == 1 {
                s[n - 1] = s[0];
            } else {
                while s[n - 1] == s[0] {
                    s[n - 1] = rng.random_range(0..v);
                }
            }
            s
        }
        TaskKind::ContainsBigram => {
            let mut s: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
            if label == 1 {
                let p = rng.random_range(0..n - 1);
                s[p] = BIGRAM.0;
                s[p + 1] = BIGRAM.1;
            } else {
                while let Some(p) = s
                    .windows(2)
                    .position(|w| w[0] == BIGRAM.0 && w[1] == BIGRAM.1)
                {
                    while s[p + 1] == BIGRAM.1 {
                        s[p + 1] = rng.random_range(0..v);
                    }
                }
            }
            s
        }
    }
}

fn split(task: &SyntheticTask, count: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let mut examples: Vec<Example> = (0..count)
        .map(|i| {
            let label = i % 2;
            Example {
                tokens: sample(task, label, rng),
                label,
            }
        })
        .collect();
    examples.shuffle(rng);
    Dataset::new(examples)
}

/// Deterministic 80/10/10 train/dev/test split; each split alternates labels
/// before shuffling, so classes are balanced to within one example.
pub fn generate_task(task: &SyntheticTask) -> Result<Splits> {
    let min_vocab = match task.kind {
        TaskKind::MajorityToken => 2,
        TaskKind::FirstLastMatch => 2,
        TaskKind::ContainsBigram => BIGRAM.0.max(BIGRAM.1) + 1,
    };
    if task.vocab_size < min_vocab {
        return Err(Error::Config(format!(
            "{} needs vocab_size >= {min_vocab}",
            task.kind
        )));
    }
    if task.seq_len < 2 {
        return Err(Error::Config("synthetic tasks need seq_len >= 2".into()));
    }
    if task.kind == TaskKind::MajorityToken && task.seq_len == 2 {
        return Err(Error::Config("majority_token needs seq_len >= 3".into()));
    }
    if task.size < 10 {
        return Err(Error::Config("synthetic task size must be at least 10".into()));
    }
    let train_n = task.size * 8 / 10;
    let dev_n = task.size / 10;
    let test_n = task.size - train_n - dev_n;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    Ok(Splits {
        train: split(task, train_n, &mut rng),
        dev: split(task, dev_n, &mut rng),
        test: split(task, test_n, &mut rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind) -> SyntheticTask {
        SyntheticTask {
            kind,
            vocab_size: 32,
            seq_len: 16,
            size: 400,
            seed: 11,
        }
    }

    #[test]
    fn majority_definition() {
        assert_eq!(label_of(TaskKind::MajorityToken, &[0, 0, 1]), 0);
        assert_eq!(label_of(TaskKind::MajorityToken, &[1, 0, 1]), 1);
        assert_eq!(label_of(TaskKind::FirstLastMatch, &[4, 9, 4]), 1);
        assert_eq!(label_of(TaskKind::ContainsBigram, &[1, 3, 7, 2]), 1);
        assert_eq!(label_of(TaskKind::ContainsBigram, &[7, 3, 1]), 0);
    }

    #[test]
    fn generated_labels_are_consistent_and_balanced() {
        for kind in [
            TaskKind::MajorityToken,
            TaskKind::FirstLastMatch,
            TaskKind::ContainsBigram,
        ] {
            let s = generate_task(&task(kind)).unwrap();
            assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (320, 40, 40));
            for d in [&s.train, &s.dev, &s.test] {
                for ex in &d.examples {
                    assert_eq!(label_of(kind, &ex.tokens), ex.label);
                    assert_eq!(ex.tokens.len(), 16);
                    assert!(ex.tokens.iter().all(|&t| t < 32));
                }
                let f = d.positive_fraction();
                assert!((0.45..=0.55).contains(&f), "{kind}: {f}");
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_task(&task(TaskKind::ContainsBigram)).unwrap();
        let b = generate_task(&task(TaskKind::ContainsBigram)).unwrap();
        assert_eq!(a, b);
        let mut t = task(TaskKind::ContainsBigram);
        t.seed = 12;
        assert_ne!(a, generate_task(&t).unwrap());
    }

    #[test]
    fn bad_task_parameters() {
        let mut t = task(TaskKind::ContainsBigram);
        t.vocab_size = 5;
        assert!(generate_task(&t).is_err());
        assert!("nope".parse::<TaskKind>().is_err());
        assert_eq!("first_last_match".parse::<TaskKind>().unwrap(), TaskKind::FirstLastMatch);
    }
}
