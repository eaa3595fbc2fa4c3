//! Frozen feature-hashing chunk embedder.

use crate::tokenizer::{TokenId, PAD_ID};

use super::DatastoreConfig;

const POSITION_BUCKETS: usize = 4;
const UNIGRAM_TAG: u64 = 0x55;
const BIGRAM_TAG: u64 = 0xB1;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn feature_hash(parts: &[u64], seed: u64) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |h, &p| splitmix64(h ^ p))
}

/// Embeds a chunk as an L2-normalized vector of length `config.embed_dim`.
///
/// Each non-pad unigram and each bigram of non-pad tokens is hashed together with
/// its position bucket and the seed into a signed bucket. An all-pad chunk maps to e₁.
pub fn embed_chunk(tokens: &[TokenId], config: &DatastoreConfig) -> Vec<f32> {
    let d = config.embed_dim;
    let m = tokens.len().max(1);
    let mut acc = vec![0.0f64; d];
    let mut add = |h: u64| {
        let slot = (h % d as u64) as usize;
        acc[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    };
    for (pos, &tok) in tokens.iter().enumerate() {
        if tok == PAD_ID {
            continue;
        }
        let bucket = (pos * POSITION_BUCKETS / m) as u64;
        add(feature_hash(&[UNIGRAM_TAG, tok as u64, bucket], config.hash_seed));
        if let Some(&next) = tokens.get(pos + 1) {
            if next != PAD_ID {
                add(feature_hash(
                    &[BIGRAM_TAG, tok as u64, next as u64, bucket],
                    config.hash_seed,
                ));
            }
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e1 = vec![0.0f32; d];
        e1[0] = 1.0;
        return e1;
    }
    acc.iter().map(|v| (v / norm) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DatastoreConfig {
        DatastoreConfig::default()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let toks: Vec<TokenId> = (0..64).map(|i| (i * 7 % 200) as TokenId).collect();
        let a = embed_chunk(&toks, &cfg());
        let b = embed_chunk(&toks, &cfg());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let n: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn all_pad_is_e1() {
        let e = embed_chunk(&[PAD_ID; 64], &cfg());
        assert_eq!(e[0], 1.0);
        assert!(e[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seed_changes_embedding() {
        let toks: Vec<TokenId> = (0..64).collect();
        let other = DatastoreConfig {
            hash_seed: 99,
            ..cfg()
        };
        assert_ne!(embed_chunk(&toks, &cfg()), embed_chunk(&toks, &other));
    }

    #[test]
    fn disjoint_vocabularies_are_nearly_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let config = cfg();
        let mut ids: Vec<TokenId> = (0..256).collect();
        let trials = 1000;
        let mut total = 0.0;
        for _ in 0..trials {
            ids.shuffle(&mut rng);
            let (left, right) = ids.split_at(128);
            let a: Vec<TokenId> = (0..64).map(|_| left[rng.gen_range(0..128)]).collect();
            let b: Vec<TokenId> = (0..64).map(|_| right[rng.gen_range(0..128)]).collect();
            let (ea, eb) = (embed_chunk(&a, &config), embed_chunk(&b, &config));
            let cos: f64 = ea.iter().zip(&eb).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            total += cos.abs();
        }
        let mean = total / trials as f64;
        assert!(mean < 0.2, "mean |cos| = {mean}");
    }
}
