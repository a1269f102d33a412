#![allow(dead_code)]

use overwhelm_core::format::HEADER_LEN;
use overwhelm_core::model::{ModelWeights, TokenId};
use overwhelm_core::toy::ToyConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toks(ids: &[usize]) -> Vec<TokenId> {
    ids.iter().map(|&t| TokenId(t)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tokens(rng: &mut ChaCha8Rng, d_vocab: usize, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| TokenId(rng.gen_range(0..d_vocab))).collect()
}

/// Toy shapes within `d_vocab ≤ 8`, `d_emb ≤ 8`, `H ∈ {1, 2}`, even head width.
pub fn small_config(rng: &mut ChaCha8Rng) -> ToyConfig {
    let n_heads = rng.gen_range(1..=2);
    let d_head = [2, 4][rng.gen_range(0..2)];
    ToyConfig {
        d_vocab: rng.gen_range(2..=8),
        d_emb: n_heads * d_head,
        n_heads,
        d_mlp: rng.gen_range(1..=8),
        n_ctx_max: 16,
        rope: rng.gen_bool(0.5),
        qk_scale: [0.5, 1.0, 3.0][rng.gen_range(0..3)],
        value_scale: [0.02, 0.1, 0.5, 1.0][rng.gen_range(0..4)],
        unembed_scale: 1.0,
        ..ToyConfig::default()
    }
}

fn matvec(x: &[f64], rows: usize, cols: usize, m: &[f64]) -> Vec<f64> {
    (0..cols)
        .map(|c| (0..rows).map(|r| x[r] * m[r * cols + c]).sum())
        .collect()
}

fn rotate(v: &mut [f64], pos: usize, base: f64, dim: usize) {
    for m in 0..v.len() / 2 {
        let angle = pos as f64 * base.powf(-((2 * m) as f64) / dim as f64);
        let (a, b) = (v[2 * m], v[2 * m + 1]);
        v[2 * m] = a * angle.cos() - b * angle.sin();
        v[2 * m + 1] = a * angle.sin() + b * angle.cos();
    }
}

/// Logits for every row of the sequence from full matrices: rotary embedding
/// applied to queries and keys at absolute positions, optional causal mask.
pub fn dense_logits(w: &ModelWeights, tokens: &[TokenId], causal: bool) -> Vec<Vec<f64>> {
    let n = tokens.len();
    let d = w.d_emb;
    let dh = d / w.n_heads;
    let x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| {
            let e = w.embed.row(t.0);
            let mean = e.iter().sum::<f64>() / d as f64;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d)
                .map(|i| (e[i] - mean) / (var + w.ln.eps).sqrt() * w.ln.gamma[i] + w.ln.beta[i])
                .collect()
        })
        .collect();
    let mut hidden: Vec<Vec<f64>> = tokens.iter().map(|t| w.embed.row(t.0).to_vec()).collect();
    for (h, head) in w.heads.iter().enumerate() {
        let proj = |m: &overwhelm_core::tensor::Matrix, rot: bool| -> Vec<Vec<f64>> {
            x.iter()
                .enumerate()
                .map(|(p, row)| {
                    let mut v = matvec(row, d, dh, m.data());
                    if rot && w.rope.enabled {
                        rotate(&mut v, p, w.rope.base, w.rope.dim);
                    }
                    v
                })
                .collect()
        };
        let (qs, ks, vs) = (proj(&head.query, true), proj(&head.key, true), proj(&head.value, false));
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    if causal && j > i {
                        f64::NEG_INFINITY
                    } else {
                        qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    }
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = ex.iter().sum();
            for j in 0..n {
                for c in 0..dh {
                    hidden[i][h * dh + c] += ex[j] / z * vs[j][c];
                }
            }
        }
    }
    for i in 0..n {
        let mut act = matvec(&x[i], d, w.d_mlp, w.mlp.enc_w.data());
        for (a, b) in act.iter_mut().zip(&w.mlp.enc_b) {
            *a = (*a + b).max(0.0);
        }
        let out = matvec(&act, w.d_mlp, d, w.mlp.dec_w.data());
        for c in 0..d {
            hidden[i][c] += out[c];
        }
    }
    hidden.iter().map(|hrow| matvec(hrow, d, w.d_vocab, w.unembed.data())).collect()
}

/// Byte ranges of the decimal offset and length fields in the manifest text.
pub fn manifest_length_digits(bytes: &[u8]) -> Vec<usize> {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&bytes[HEADER_LEN..HEADER_LEN + len]).unwrap();
    let mut out = Vec::new();
    let mut line_start = HEADER_LEN;
    for line in text.split_inclusive('\n') {
        if let Some(rest) = line.strip_prefix("tensor=") {
            let fields: Vec<&str> = rest.trim_end().split(' ').collect();
            // name dtype shape offset nbytes
            let tail = fields[3].len() + 1 + fields[4].len();
            let start = line_start + line.trim_end().len() - tail;
            out.extend((start..start + tail).filter(|&i| bytes[i].is_ascii_digit()));
        }
        line_start += line.len();
    }
    out
}
