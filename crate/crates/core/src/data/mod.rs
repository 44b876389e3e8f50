//! Input construction: concat-data vs souping-data formatting, document
//! segmentation, synthetic task generators, and the JSONL dataset format.

mod gen;
pub mod vocab;

pub use gen::{gen_multihop, gen_niah, gen_singlehop};
pub use vocab::Vocab;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use vocab::{DOC_SEP_ID, EOS_ID};

/// A QA instance: documents, question, answer, and which documents carry the
/// evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub docs: Vec<String>,
    pub question: String,
    pub answer: String,
    #[serde(rename = "gold")]
    pub gold_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatMode {
    Concat,
    Soup,
}

/// Tokenized training/eval input with segment boundaries and the answer-span
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FormattedExample {
    pub token_ids: Vec<usize>,
    /// Half-open `(start, end)` token span of each document. In soup mode a
    /// segment ends with its `<doc_sep>` token.
    pub segment_spans: Vec<(usize, usize)>,
    /// True exactly on answer tokens and the closing `<eos>`.
    pub answer_mask: Vec<bool>,
    pub mode: FormatMode,
}

impl FormattedExample {
    /// Token span of the question + answer + eos tail.
    pub fn qa_span(&self) -> (usize, usize) {
        let start = self.segment_spans.last().map_or(0, |s| s.1);
        (start, self.token_ids.len())
    }

    pub fn doc_tokens(&self, i: usize) -> &[usize] {
        let (s, e) = self.segment_spans[i];
        &self.token_ids[s..e]
    }

    pub fn qa_tokens(&self) -> &[usize] {
        let (s, e) = self.qa_span();
        &self.token_ids[s..e]
    }

    /// Answer mask restricted to the QA tail.
    pub fn qa_answer_mask(&self) -> &[bool] {
        let (s, e) = self.qa_span();
        &self.answer_mask[s..e]
    }
}

/// Build the model input for one example.
///
/// Concat mode lays out `d_1 .. d_k q a <eos>` as one flat sequence; soup
/// mode terminates every document with `<doc_sep>` so the segments can be
/// split off and encoded independently.
pub fn format_input(ex: &Example, soup: bool, vocab: &Vocab) -> Result<FormattedExample> {
    if ex.question.trim().is_empty() || ex.answer.trim().is_empty() {
        return Err(Error::InvalidExample(
            "question and answer must be nonempty".into(),
        ));
    }
    let mut token_ids = Vec::new();
    let mut segment_spans = Vec::with_capacity(ex.docs.len());
    for d in &ex.docs {
        let start = token_ids.len();
        token_ids.extend(vocab.tokenize(d)?);
        if soup {
            token_ids.push(DOC_SEP_ID);
        }
        segment_spans.push((start, token_ids.len()));
    }
    let q = vocab.tokenize(&ex.question)?;
    let a = vocab.tokenize(&ex.answer)?;
    token_ids.extend(&q);
    let answer_start = token_ids.len();
    token_ids.extend(&a);
    token_ids.push(EOS_ID);

    let mut answer_mask = vec![false; token_ids.len()];
    answer_mask[answer_start..].iter_mut().for_each(|m| *m = true);

    Ok(FormattedExample {
        token_ids,
        segment_spans,
        answer_mask,
        mode: if soup { FormatMode::Soup } else { FormatMode::Concat },
    })
}

/// Split a token sequence into `n` contiguous chunks whose sizes differ by at
/// most one; concatenating the chunks reproduces the input.
pub fn split_segments(tokens: &[usize], n: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || tokens.len() < n {
        return Err(Error::Split {
            len: tokens.len(),
            parts: n,
        });
    }
    let base = tokens.len() / n;
    let extra = tokens.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    for c in 0..n {
        let size = base + usize::from(c < extra);
        out.push(tokens[pos..pos + size].to_vec());
        pos += size;
    }
    Ok(out)
}

/// One JSON object per line: `{docs, question, answer, gold}`.
pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
