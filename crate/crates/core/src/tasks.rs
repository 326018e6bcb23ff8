//! Deterministic synthetic classification tasks.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::peft::PeftModel;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Number of occurrences of token 1, modulo 2.
    Parity,
    /// Most frequent token; sequences with a tie are never generated.
    Majority,
    /// Bucket of the first token: `first · n_classes / vocab_size`.
    CopyFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub name: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Overrides the experiment seed for data generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SyntheticTask {
    pub fn parity(seq_len: usize, train: usize, valid: usize, test: usize) -> Self {
        Self {
            name: TaskKind::Parity,
            vocab_size: 4,
            seq_len,
            n_classes: 2,
            train_size: train,
            valid_size: valid,
            test_size: test,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.seq_len == 0 || self.n_classes == 0 {
            return Err(Error::Config(
                "task vocab_size, seq_len and n_classes must be at least 1".into(),
            ));
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 {
            return Err(Error::Config("task split sizes must be at least 1".into()));
        }
        match self.name {
            TaskKind::Parity if self.n_classes != 2 || self.vocab_size < 2 => {
                Err(Error::Task(format!(
                    "parity needs n_classes = 2 and vocab_size >= 2, got {} and {}",
                    self.n_classes, self.vocab_size
                )))
            }
            TaskKind::Majority if self.n_classes != self.vocab_size || self.vocab_size < 2 => {
                Err(Error::Task(format!(
                    "majority needs n_classes = vocab_size >= 2, got {} and {}",
                    self.n_classes, self.vocab_size
                )))
            }
            TaskKind::CopyFirst if self.n_classes > self.vocab_size => Err(Error::Task(format!(
                "copy_first needs n_classes <= vocab_size, got {} > {}",
                self.n_classes, self.vocab_size
            ))),
            _ => {
                let total = (self.train_size + self.valid_size + self.test_size) as f64;
                let distinct = (self.vocab_size as f64).powi(self.seq_len.min(64) as i32);
                if distinct < total {
                    return Err(Error::Task(format!(
                        "only {distinct} distinct sequences exist for {total} examples"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Label of `tokens` under this task's rule, `None` when undefined.
    pub fn label(&self, tokens: &[usize]) -> Option<usize> {
        label_for(self.name, tokens, self.vocab_size, self.n_classes)
    }
}

pub fn label_for(
    kind: TaskKind,
    tokens: &[usize],
    vocab_size: usize,
    n_classes: usize,
) -> Option<usize> {
    match kind {
        TaskKind::Parity => Some(tokens.iter().filter(|&&t| t == 1).count() % 2),
        TaskKind::Majority => {
            let mut counts = vec![0usize; vocab_size];
            for &t in tokens {
                counts[t] += 1;
            }
            let max = *counts.iter().max()?;
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
            let (first, _) = winners.next()?;
            winners.next().is_none().then_some(first)
        }
        TaskKind::CopyFirst => tokens.first().map(|&t| t * n_classes / vocab_size),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub examples: Vec<Example>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
        let seq = self.examples[indices[0]].tokens.len();
        let mut tokens = Vec::with_capacity(indices.len() * seq);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            tokens.extend_from_slice(&self.examples[i].tokens);
            labels.push(self.examples[i].label);
        }
        Ok((TokenBatch::new(tokens, indices.len(), seq)?, labels))
    }

    pub fn label_histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for e in &self.examples {
            h[e.label] += 1;
        }
        h
    }

    /// `label,t0,t1,...` rows with a header.
    pub fn to_csv(&self) -> String {
        let seq = self.examples.first().map_or(0, |e| e.tokens.len());
        let mut out = String::from("label");
        for i in 0..seq {
            let _ = write!(out, ",t{i}");
        }
        out.push('\n');
        for e in &self.examples {
            let _ = write!(out, "{}", e.label);
            for t in &e.tokens {
                let _ = write!(out, ",{t}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

/// Generates the three splits. Each split draws from its own stream and
/// fills per-class quotas exactly; no sequence appears in two splits.
pub fn generate(task: &SyntheticTask, seed: u64) -> Result<Dataset> {
    task.validate()?;
    let seed = task.seed.unwrap_or(seed);
    let mut seen = HashSet::new();
    let mut make = |name: &str, size: usize| -> Result<Split> {
        let mut rng = rng::stream(seed, &format!("{}/{name}", rng::DATA));
        let mut quota: Vec<usize> = (0..task.n_classes)
            .map(|c| size / task.n_classes + usize::from(c < size % task.n_classes))
            .collect();
        let mut examples = Vec::with_capacity(size);
        let budget = 1000 * size + 100_000;
        for _ in 0..budget {
            if examples.len() == size {
                break;
            }
            let tokens: Vec<usize> = (0..task.seq_len)
                .map(|_| rng.gen_range(0..task.vocab_size))
                .collect();
            let Some(label) = task.label(&tokens) else {
                continue;
            };
            if quota[label] == 0 || seen.contains(&tokens) {
                continue;
            }
            quota[label] -= 1;
            seen.insert(tokens.clone());
            examples.push(Example { tokens, label });
        }
        if examples.len() < size {
            return Err(Error::Task(format!(
                "could not draw {size} distinct balanced examples for the {name} split"
            )));
        }
        Ok(Split { examples })
    };
    let train = make("train", task.train_size)?;
    let valid = make("valid", task.valid_size)?;
    let test = make("test", task.test_size)?;
    Ok(Dataset { train, valid, test })
}

/// Exact-match accuracy of `predict` over `split`.
pub fn evaluate_with<F>(mut predict: F, split: &Split, batch_size: usize) -> Result<f64>
where
    F: FnMut(&TokenBatch) -> Result<Vec<usize>>,
{
    if split.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = split.batch(chunk)?;
        let preds = predict(&batch)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Accuracy of the adapted model on `split`.
pub fn evaluate<T: Scalar>(model: &PeftModel<T>, split: &Split, batch_size: usize) -> Result<f64> {
    let classes = model.base.config.n_classes;
    evaluate_with(
        |batch| {
            let logits = model.logits(batch)?;
            Ok(argmax_rows(logits.data(), classes))
        },
        split,
        batch_size,
    )
}
