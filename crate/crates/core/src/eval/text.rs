use std::collections::HashMap;
use std::hash::Hash;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// True when the sequence ends with some phrase of length >= 2 repeated at least
/// three times back to back.
pub fn is_repetitive<T: PartialEq>(tokens: &[T]) -> bool {
    let n = tokens.len();
    (2..=n / 3).any(|len| {
        let last = &tokens[n - len..];
        (2..=3).all(|rep| &tokens[n - rep * len..n - (rep - 1) * len] == last)
    })
}

/// Fraction of repetitive records.
pub fn repetition_rate<T: PartialEq>(records: &[Vec<T>]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Argument("repetition rate over an empty record set".into()));
    }
    let hits = records.iter().filter(|r| is_repetitive(r)).count();
    Ok(hits as f64 / records.len() as f64)
}

const ORDERS: usize = 4;

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], u32> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Per-order smoothed precisions, brevity penalty and the resulting BLEU-4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuScore {
    pub precisions: [f64; ORDERS],
    pub brevity_penalty: f64,
    pub score: f64,
}

fn closest_ref_len(hyp_len: usize, ref_lens: impl Iterator<Item = usize>) -> usize {
    ref_lens
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

fn combine(hyp_len: usize, ref_len: usize, clipped: [u64; ORDERS], totals: [u64; ORDERS]) -> BleuScore {
    let mut precisions = [0.0; ORDERS];
    for n in 0..ORDERS {
        precisions[n] = (clipped[n] as f64 + 1.0) / (totals[n] as f64 + 1.0);
    }
    if hyp_len == 0 {
        return BleuScore {
            precisions,
            brevity_penalty: 0.0,
            score: 0.0,
        };
    }
    let brevity_penalty = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / ORDERS as f64;
    BleuScore {
        precisions,
        brevity_penalty,
        score: brevity_penalty * log_mean.exp(),
    }
}

/// Sentence BLEU-4 with uniform weights and add-one smoothing on every order.
pub fn sentence_bleu<T: Hash + Eq>(hyp: &[T], refs: &[&[T]]) -> BleuScore {
    let mut clipped = [0u64; ORDERS];
    let mut totals = [0u64; ORDERS];
    for n in 1..=ORDERS {
        let ref_counts: Vec<HashMap<&[T], u32>> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        for (g, c) in ngram_counts(hyp, n) {
            let max_ref = ref_counts.iter().map(|m| m.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            clipped[n - 1] += u64::from(c.min(max_ref));
            totals[n - 1] += u64::from(c);
        }
    }
    combine(hyp.len(), closest_ref_len(hyp.len(), refs.iter().map(|r| r.len())), clipped, totals)
}

/// For every n-gram, the records containing it with their counts, largest first.
struct NgramTable<'a, T> {
    per_order: Vec<HashMap<&'a [T], Vec<(u32, usize)>>>,
    record_counts: Vec<Vec<HashMap<&'a [T], u32>>>,
}

impl<'a, T: Hash + Eq> NgramTable<'a, T> {
    fn new(records: &'a [Vec<T>]) -> Self {
        let mut per_order = Vec::with_capacity(ORDERS);
        let mut record_counts = vec![Vec::with_capacity(ORDERS); records.len()];
        for n in 1..=ORDERS {
            let mut table: HashMap<&[T], Vec<(u32, usize)>> = HashMap::new();
            for (i, r) in records.iter().enumerate() {
                let counts = ngram_counts(r, n);
                for (&g, &c) in &counts {
                    table.entry(g).or_default().push((c, i));
                }
                record_counts[i].push(counts);
            }
            for v in table.values_mut() {
                v.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            }
            per_order.push(table);
        }
        Self {
            per_order,
            record_counts,
        }
    }

    fn max_other(&self, n: usize, g: &[T], exclude: usize) -> u32 {
        self.per_order[n - 1]
            .get(g)
            .and_then(|v| v.iter().find(|&&(_, r)| r != exclude))
            .map_or(0, |&(c, _)| c)
    }
}

/// Mean BLEU-4 of `sample_n` records (drawn with `seed`), each scored against all
/// other records as references. `sample_n` larger than the record count is
/// clamped.
pub fn self_bleu<T: Hash + Eq + Sync>(records: &[Vec<T>], sample_n: usize, seed: u64) -> Result<f64> {
    let total = records.len();
    if total < 2 {
        return Err(Error::Argument(format!("self-BLEU needs at least 2 records, got {total}")));
    }
    let n = if sample_n > total {
        log::warn!("self-BLEU sample size {sample_n} exceeds {total} records, using all");
        total
    } else {
        sample_n.max(1)
    };
    let chosen: Vec<usize> = if n == total {
        (0..total).collect()
    } else {
        let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), total, n).into_vec();
        idx.sort_unstable();
        idx
    };
    let table = NgramTable::new(records);
    let lens: Vec<usize> = records.iter().map(Vec::len).collect();
    let scores: Vec<f64> = chosen
        .par_iter()
        .map(|&i| {
            let mut clipped = [0u64; ORDERS];
            let mut totals = [0u64; ORDERS];
            for n in 1..=ORDERS {
                for (g, &c) in &table.record_counts[i][n - 1] {
                    clipped[n - 1] += u64::from(c.min(table.max_other(n, g, i)));
                    totals[n - 1] += u64::from(c);
                }
            }
            let r = closest_ref_len(lens[i], lens.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &l)| l));
            combine(lens[i], r, clipped, totals).score
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Negated least-squares slope of log frequency against log rank.
pub fn zipf_coefficient<T: Hash + Eq>(records: &[Vec<T>]) -> Result<f64> {
    let mut freq: HashMap<&T, u64> = HashMap::new();
    let mut total = 0usize;
    for r in records {
        for t in r {
            *freq.entry(t).or_insert(0) += 1;
            total += 1;
        }
    }
    if total < 100 {
        return Err(Error::Argument(format!("Zipf fit needs at least 100 tokens, got {total}")));
    }
    if freq.len() < 2 {
        return Err(Error::Argument("Zipf fit is undefined for a single distinct token".into()));
    }
    let mut counts: Vec<u64> = freq.into_values().collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .enumerate()
        .map(|(r, &c)| (((r + 1) as f64).ln(), (c as f64).ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(-sxy / sxx)
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let stripped: String = lower.chars().filter(|&c| !is_punctuation(c)).collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| normalize_answer(g) == p))
}

/// Whitespace-separated words mapped to dense ids shared across records.
pub fn word_ids(texts: &[String]) -> Vec<Vec<u32>> {
    let mut vocab: HashMap<&str, u32> = HashMap::new();
    texts
        .iter()
        .map(|t| {
            t.split_whitespace()
                .map(|w| {
                    let next = vocab.len() as u32;
                    *vocab.entry(w).or_insert(next)
                })
                .collect()
        })
        .collect()
}
