//! Synthetic corpora, character vocabulary, and batch sampling.
//!
//! Three corpora are built here:
//!
//! * arithmetic: `<a+b=c>` and `<a-b=c>` for single digits, with every
//!   expression pairing 5 and 7 held out of the text;
//! * capitals: fifty `Capital of X is Y` statements from a bundled list;
//! * combined: the arithmetic text followed by the capitals text.
//!
//! Training and validation read the same text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::Stream;

/// Substrings that must never occur in any training text.
pub const HOLDOUT_PATTERNS: [&str; 4] = ["5+7", "7+5", "5-7", "7-5"];

/// Width of an arithmetic line before its newline.
pub const ARITH_LINE_CONTENT: usize = 8;
pub const ARITH_BLOCK_SIZE: usize = 9;
pub const ARITH_BATCH_SIZE: usize = 882;
pub const FACTS_BLOCK_SIZE: usize = 24;
pub const FACTS_BATCH_SIZE: usize = 576;

const CAPITALS: &str = include_str!("../data/capitals-v1.txt");

/// Character vocabulary; ids follow sorted character order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Self::from_chars(set)
    }

    fn from_chars(set: BTreeSet<char>) -> Self {
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|ch| self.id(ch).ok_or(Error::UnknownChar { ch }))
            .collect()
    }

    /// Ids outside the vocabulary decode to U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.chars.get(i).copied().unwrap_or('\u{FFFD}'))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Addition,
    Subtraction,
    Fact,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Addition => "addition",
            Task::Subtraction => "subtraction",
            Task::Fact => "fact",
        }
    }

    pub fn is_arithmetic(self) -> bool {
        matches!(self, Task::Addition | Task::Subtraction)
    }
}

/// One evaluation prompt and its expected completion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalRecord {
    pub prompt: String,
    pub expected: String,
    pub task: Task,
    pub holdout: bool,
}

impl EvalRecord {
    /// Characters that end generation for this record.
    pub fn stop_chars(&self) -> &'static [char] {
        if self.task.is_arithmetic() {
            &['>', '\n']
        } else {
            &['\n']
        }
    }

    /// Whether generated text counts as a correct answer. Arithmetic output
    /// is compared up to and including the first `>`; fact output up to the
    /// first newline.
    pub fn is_correct(&self, generated: &str) -> bool {
        if self.task.is_arithmetic() {
            match generated.find('>') {
                Some(end) => generated[..=end] == *self.expected,
                None => false,
            }
        } else {
            match generated.find('\n') {
                Some(end) => generated[..end] == *self.expected,
                None => false,
            }
        }
    }
}

/// Which corpus a dataset or experiment uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Arithmetic,
    Facts,
    Combined,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Arithmetic, TaskKind::Facts, TaskKind::Combined];

    pub fn dataset(self) -> TaskDataset {
        match self {
            TaskKind::Arithmetic => gen_arithmetic(&default_holdout()).expect("default holdout is valid"),
            TaskKind::Facts => gen_capitals(),
            TaskKind::Combined => gen_combined(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Arithmetic => "arithmetic",
            TaskKind::Facts => "facts",
            TaskKind::Combined => "combined",
        }
    }

    pub fn block_size(self) -> usize {
        match self {
            TaskKind::Arithmetic => ARITH_BLOCK_SIZE,
            _ => FACTS_BLOCK_SIZE,
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            TaskKind::Arithmetic => ARITH_BATCH_SIZE,
            _ => FACTS_BATCH_SIZE,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arithmetic" | "arith" => Ok(TaskKind::Arithmetic),
            "facts" => Ok(TaskKind::Facts),
            "combined" => Ok(TaskKind::Combined),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }
}

/// Generated corpus plus its evaluation prompts.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub name: String,
    pub text: String,
    pub block_size: usize,
    pub batch_size: usize,
    pub vocab: Vocab,
    pub eval_records: Vec<EvalRecord>,
    tokens: Vec<usize>,
}

impl TaskDataset {
    fn new(
        name: &str,
        text: String,
        block_size: usize,
        batch_size: usize,
        eval_records: Vec<EvalRecord>,
    ) -> Self {
        let vocab = Vocab::from_text(&text);
        let tokens = vocab.encode(&text).expect("vocab built from this text");
        Self {
            name: name.to_string(),
            text,
            block_size,
            batch_size,
            vocab,
            eval_records,
            tokens,
        }
    }

    /// Encoded corpus.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn train_text(&self) -> &str {
        &self.text
    }

    /// Identical to the training text.
    pub fn val_text(&self) -> &str {
        &self.text
    }

    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.text.split_inclusive('\n')
    }

    pub fn write_corpus(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.text)?;
        Ok(())
    }
}

pub fn default_holdout() -> BTreeSet<(u32, u32)> {
    [(5, 7), (7, 5)].into_iter().collect()
}

fn arith_line(a: u32, op: char, b: u32) -> (String, String, Task) {
    let (c, task) = match op {
        '+' => (a as i64 + b as i64, Task::Addition),
        _ => (a as i64 - b as i64, Task::Subtraction),
    };
    (format!("<{a}{op}{b}="), format!("{c}>"), task)
}

/// Single-digit addition and subtraction. Pairs in `holdout` are removed
/// from the text for both operators but kept as flagged eval records.
pub fn gen_arithmetic(holdout: &BTreeSet<(u32, u32)>) -> Result<TaskDataset> {
    if let Some(&(a, b)) = holdout.iter().find(|&&(a, b)| a > 9 || b > 9) {
        return Err(Error::Invalid(format!(
            "holdout pair ({a}, {b}) has an operand outside 0..=9"
        )));
    }
    let mut text = String::new();
    let mut records = Vec::with_capacity(200);
    for op in ['+', '-'] {
        for a in 0..=9 {
            for b in 0..=9 {
                let (prompt, expected, task) = arith_line(a, op, b);
                let held = holdout.contains(&(a, b));
                if !held {
                    let content = format!("{prompt}{expected}");
                    text.push_str(&format!("{content:<ARITH_LINE_CONTENT$}\n"));
                }
                records.push(EvalRecord {
                    prompt,
                    expected,
                    task,
                    holdout: held,
                });
            }
        }
    }
    Ok(TaskDataset::new(
        "arithmetic",
        text,
        ARITH_BLOCK_SIZE,
        ARITH_BATCH_SIZE,
        records,
    ))
}

/// Bundled (country, capital) pairs.
pub fn capitals() -> Vec<(&'static str, &'static str)> {
    CAPITALS
        .lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_once('\t').expect("tab-separated capitals entry"))
        .collect()
}

pub fn gen_capitals() -> TaskDataset {
    let mut text = String::new();
    let mut records = Vec::new();
    for (country, capital) in capitals() {
        let prompt = format!("Capital of {country} is ");
        text.push_str(&format!("{prompt}{capital}\n"));
        records.push(EvalRecord {
            prompt,
            expected: capital.to_string(),
            task: Task::Fact,
            holdout: false,
        });
    }
    TaskDataset::new("facts", text, FACTS_BLOCK_SIZE, FACTS_BATCH_SIZE, records)
}

pub fn gen_combined() -> TaskDataset {
    let arith = gen_arithmetic(&default_holdout()).expect("default holdout is valid");
    let facts = gen_capitals();
    let text = format!("{}{}", arith.text, facts.text);
    let mut records = arith.eval_records;
    records.extend(facts.eval_records);
    TaskDataset::new("combined", text, FACTS_BLOCK_SIZE, FACTS_BATCH_SIZE, records)
}

/// Evaluation-only arithmetic over `lo..=hi`, skipping pairs where both
/// operands are single digits.
pub fn gen_extended_arithmetic(lo: u32, hi: u32) -> Result<Vec<EvalRecord>> {
    if lo > hi {
        return Err(Error::Invalid(format!("extended range {lo}..={hi} is empty")));
    }
    let mut records = Vec::new();
    for op in ['+', '-'] {
        for a in lo..=hi {
            for b in lo..=hi {
                if a <= 9 && b <= 9 {
                    continue;
                }
                let (prompt, expected, task) = arith_line(a, op, b);
                records.push(EvalRecord {
                    prompt,
                    expected,
                    task,
                    holdout: false,
                });
            }
        }
    }
    Ok(records)
}

/// Input windows and their one-step-shifted targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub x: TokenBatch,
    pub y: TokenBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// `batch_size` windows of `block_size` characters at independent uniform
/// offsets.
pub fn sample_batch(dataset: &TaskDataset, rng: &mut Stream) -> Result<Batch> {
    let data = dataset.tokens();
    let block = dataset.block_size;
    if data.len() <= block + 1 {
        return Err(Error::Invalid(format!(
            "corpus of {} characters is too short for block size {block}",
            data.len()
        )));
    }
    let b = dataset.batch_size;
    let mut x = Vec::with_capacity(b * block);
    let mut y = Vec::with_capacity(b * block);
    for _ in 0..b {
        let offset = rng.below(data.len() - block);
        x.extend_from_slice(&data[offset..offset + block]);
        y.extend_from_slice(&data[offset + 1..offset + block + 1]);
    }
    Ok(Batch {
        x: TokenBatch::new(b, block, x)?,
        y: TokenBatch::new(b, block, y)?,
    })
}

/// Occurrences of [`HOLDOUT_PATTERNS`] in the text a batch exposes: each
/// input window plus its final target character.
pub fn count_holdout_patterns(batch: &Batch, vocab: &Vocab) -> usize {
    (0..batch.x.batch)
        .map(|i| {
            let mut text = vocab.decode(batch.x.row(i));
            text.push_str(&vocab.decode(&batch.y.row(i)[batch.y.time - 1..]));
            HOLDOUT_PATTERNS.iter().map(|p| text.matches(p).count()).sum::<usize>()
        })
        .sum()
}
