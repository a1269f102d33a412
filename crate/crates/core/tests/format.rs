mod common;

use common::manifest_length_digits;
use overwhelm_core::format::{decode_model, encode_model, read_model, write_model};
use overwhelm_core::model::Dtype;
use overwhelm_core::toy::{random_model, ToyConfig};
use overwhelm_core::Error;
use proptest::prelude::*;

fn config(d_vocab: usize, n_heads: usize, d_head: usize, rope: bool, dtype: Dtype) -> ToyConfig {
    ToyConfig {
        d_vocab,
        d_emb: n_heads * d_head,
        n_heads,
        rope,
        dtype,
        ..ToyConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_is_bit_exact(
        seed in any::<u64>(),
        d_vocab in 2usize..12,
        n_heads in 1usize..3,
        d_head in prop::sample::select(vec![2usize, 4]),
        rope in any::<bool>(),
        f32 in any::<bool>(),
    ) {
        let dtype = if f32 { Dtype::F32 } else { Dtype::F64 };
        let w = random_model(&config(d_vocab, n_heads, d_head, rope, dtype), seed);
        let bytes = encode_model(&w).unwrap();
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(&back, &w);
        prop_assert_eq!(encode_model(&back).unwrap(), bytes.clone());
        let mut sink = Vec::new();
        prop_assert_eq!(write_model(&back, &mut sink).unwrap(), bytes.len() as u64);
        prop_assert_eq!(read_model(sink.as_slice()).unwrap(), w);
    }

    #[test]
    fn any_header_length_corruption_is_rejected(seed in any::<u64>(), pos in 8usize..16, flip in 1u8..=255) {
        let bytes = encode_model(&random_model(&ToyConfig::default(), seed)).unwrap();
        let mut bad = bytes.clone();
        bad[pos] ^= flip;
        prop_assert!(decode_model(&bad).is_err());
    }

    #[test]
    fn truncation_is_rejected(seed in any::<u64>(), cut in 1usize..4096) {
        let bytes = encode_model(&random_model(&ToyConfig::default(), seed)).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_model(&bytes[..keep]).is_err());
    }
}

#[test]
fn every_length_digit_change_is_rejected() {
    let bytes = encode_model(&random_model(&ToyConfig { n_heads: 2, ..ToyConfig::default() }, 7)).unwrap();
    let digits = manifest_length_digits(&bytes);
    assert!(digits.len() > 20);
    for i in digits {
        for d in b'0'..=b'9' {
            if d == bytes[i] {
                continue;
            }
            let mut bad = bytes.clone();
            bad[i] = d;
            assert!(decode_model(&bad).is_err(), "digit at byte {i} set to {}", d as char);
        }
    }
}

#[test]
fn repeated_encoding_is_deterministic() {
    let w = random_model(&ToyConfig::default(), 99);
    let a = encode_model(&w).unwrap();
    let b = encode_model(&random_model(&ToyConfig::default(), 99)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shortened_header_is_truncation() {
    let bytes = encode_model(&random_model(&ToyConfig::default(), 1)).unwrap();
    assert!(matches!(decode_model(&bytes[..12]), Err(Error::Truncated(_))));
}
