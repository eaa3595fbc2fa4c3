use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Neighbor, NeighborSet};
use crate::tokenizer::{ByteTokenizer, TokenId, Tokenizer, EOT_ID, PAD_ID};

use super::left_pad;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QaTemplate {
    /// Top evidence in the decoder, the rest in the encoder.
    A,
    /// Question only; all evidence goes to the encoder.
    B,
}

impl FromStr for QaTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            _ => Err(Error::Argument(format!("unknown QA template {s:?} (expected A or B)"))),
        }
    }
}

impl fmt::Display for QaTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub title: String,
    pub text: String,
}

/// One line of a QA file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub passages: Vec<Evidence>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPrompt {
    pub decoder_text: String,
    pub encoder_evidences: Vec<String>,
}

pub fn render_template(template: QaTemplate, question: &str, evidence: Option<&Evidence>) -> Result<String> {
    match (template, evidence) {
        (QaTemplate::A, Some(e)) => Ok(format!(
            "title: {}, source: {} \n question: {} \n answer:",
            e.title, e.text, question
        )),
        (QaTemplate::A, None) => Err(Error::Argument("template A needs at least one evidence passage".into())),
        (QaTemplate::B, _) => Ok(format!("question: {question} \n answer:")),
    }
}

/// Decoder prompt plus the passages handed to the neighbor encoder.
pub fn format_qa(question: &str, evidences: &[Evidence], template: QaTemplate, k: usize) -> Result<QaPrompt> {
    let (decoder_text, rest) = match template {
        QaTemplate::A => (render_template(template, question, evidences.first())?, evidences.get(1..).unwrap_or(&[])),
        QaTemplate::B => (render_template(template, question, None)?, evidences),
    };
    let encoder_evidences = rest.iter().take(k).map(|e| e.text.clone()).collect();
    Ok(QaPrompt {
        decoder_text,
        encoder_evidences,
    })
}

/// Encoder inputs from passage texts: tokenized, padded or truncated to `len`,
/// padded with empty neighbors up to `k`.
pub fn evidence_neighbors(texts: &[String], k: usize, len: usize) -> Vec<Neighbor> {
    let tok = ByteTokenizer;
    let mut out: Vec<Neighbor> = texts
        .iter()
        .take(k)
        .map(|t| {
            let mut ids = tok.encode(t);
            ids.resize(len, PAD_ID);
            Neighbor::from_tokens(ids)
        })
        .collect();
    while out.len() < k {
        out.push(Neighbor::pad(len));
    }
    out
}

/// Target tokens for an answer: a separating space, the answer, end-of-text.
pub fn answer_tokens(answer: &str) -> Vec<TokenId> {
    let mut ids = ByteTokenizer.encode(&format!(" {answer}"));
    ids.push(EOT_ID);
    ids
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaSample {
    pub context: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// Chunk-aligned QA batch: contexts padded on the left, answers on the right,
/// shorter samples extended with pad chunks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedQa {
    pub tokens: Vec<Vec<TokenId>>,
    pub pad_mask: Vec<Vec<bool>>,
    /// True exactly on answer tokens.
    pub answer_mask: Vec<Vec<bool>>,
    pub left_pads: Vec<usize>,
    pub chunks: usize,
}

impl PaddedQa {
    /// Training batch scoring the prediction of every answer token.
    pub fn into_batch(self, neighbors: NeighborSet) -> Batch {
        Batch::from_sequences(self.tokens, self.pad_mask, &self.answer_mask, neighbors)
    }
}

pub fn batch_pad_qa(samples: &[QaSample], m: usize, max_seq: usize) -> Result<PaddedQa> {
    if m < 2 {
        return Err(Error::Config(format!("chunk size must be >= 2, got {m}")));
    }
    let mut tokens = Vec::with_capacity(samples.len());
    let mut pad_mask = Vec::with_capacity(samples.len());
    let mut answer_mask = Vec::with_capacity(samples.len());
    let mut left_pads = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (mut seq, left) = left_pad(&s.context, m);
        let right = (m - s.answer.len() % m) % m;
        let total = seq.len() + s.answer.len() + right;
        if total > max_seq {
            return Err(Error::Length(format!(
                "sample {i}: {total} padded tokens exceed max_seq {max_seq}"
            )));
        }
        let mut pads = vec![true; left];
        pads.resize(seq.len(), false);
        let mut ans = vec![false; seq.len()];
        seq.extend_from_slice(&s.answer);
        pads.extend(std::iter::repeat_n(false, s.answer.len()));
        ans.extend(std::iter::repeat_n(true, s.answer.len()));
        seq.extend(std::iter::repeat_n(PAD_ID, right));
        pads.extend(std::iter::repeat_n(true, right));
        ans.extend(std::iter::repeat_n(false, right));
        tokens.push(seq);
        pad_mask.push(pads);
        answer_mask.push(ans);
        left_pads.push(left);
    }
    let chunks = tokens.iter().map(|t| t.len() / m).max().unwrap_or(0);
    for ((t, p), a) in tokens.iter_mut().zip(&mut pad_mask).zip(&mut answer_mask) {
        let n = chunks * m;
        t.resize(n, PAD_ID);
        p.resize(n, true);
        a.resize(n, false);
    }
    Ok(PaddedQa {
        tokens,
        pad_mask,
        answer_mask,
        left_pads,
        chunks,
    })
}

pub fn read_qa(path: &Path) -> Result<Vec<QaRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
