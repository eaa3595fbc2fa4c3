//! Text-quality metrics, perplexity, exact match and multiple-choice scoring.

mod records;
mod scoring;
mod text;

pub use records::{read_generations, read_jsonl, write_jsonl, GenerationRecord, MetricsReport};
pub use scoring::{mc_tokens, multiple_choice, perplexity, McChoice, McInstance};
pub use text::{
    exact_match, is_repetitive, normalize_answer, repetition_rate, self_bleu, sentence_bleu, word_ids, zipf_coefficient,
    BleuScore,
};
