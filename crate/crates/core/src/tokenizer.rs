//! Byte-level tokenizer. Ids 0–255 are raw UTF-8 bytes; 256 is end-of-text, which
//! also serves as the padding token.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const VOCAB_SIZE: usize = 257;
pub const EOT_ID: TokenId = 256;
pub const PAD_ID: TokenId = EOT_ID;

/// Text ↔ token id mapping.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, tokens: &[TokenId]) -> Result<String>;
    fn vocab_size(&self) -> usize;
    fn eot_id(&self) -> TokenId;

    fn pad_id(&self) -> TokenId {
        self.eot_id()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        encode(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        decode(tokens)
    }

    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn eot_id(&self) -> TokenId {
        EOT_ID
    }
}

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Drops EOT/pad ids and decodes the remaining bytes, replacing invalid UTF-8.
pub fn decode(tokens: &[TokenId]) -> Result<String> {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            0..=255 => bytes.push(t as u8),
            EOT_ID => {}
            _ => return Err(Error::Vocab(t)),
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_and_empty() {
        assert_eq!(encode("ab"), vec![97, 98]);
        assert!(encode("").is_empty());
        assert_eq!(decode(&[104, 105]).unwrap(), "hi");
    }

    #[test]
    fn pads_are_dropped() {
        assert_eq!(decode(&[256, 256, 97]).unwrap(), "a");
    }

    #[test]
    fn multibyte_roundtrip() {
        let ids = encode("héllo");
        assert_eq!(ids, vec![104, 0xC3, 0xA9, 108, 108, 111]);
        assert_eq!(decode(&ids).unwrap(), "héllo");
    }

    #[test]
    fn out_of_vocab() {
        assert!(matches!(decode(&[257]), Err(Error::Vocab(257))));
    }

    #[test]
    fn invalid_utf8_is_replaced() {
        assert_eq!(decode(&[0xFF, 97]).unwrap(), "\u{FFFD}a");
    }

    proptest! {
        #[test]
        fn roundtrip(s in ".*") {
            let ids = encode(&s);
            prop_assert_eq!(ids.len(), s.len());
            prop_assert_eq!(decode(&ids).unwrap(), s);
        }
    }
}
