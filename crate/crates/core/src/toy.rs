//! Seeded random models at desk scale, for tests, demos and fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Dtype, HeadWeights, LayerNormParams, MlpWeights, ModelWeights, RopeConfig};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub d_vocab: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub n_ctx_max: usize,
    pub rope: bool,
    /// Scale of `Q` and `K` entries; larger values sharpen attention.
    pub qk_scale: f64,
    /// Scale of `V` entries.
    pub value_scale: f64,
    /// Scale of the unembedding; the residual path drives the logit margin.
    pub unembed_scale: f64,
    pub dtype: Dtype,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_vocab: 4,
            d_emb: 4,
            n_heads: 1,
            d_mlp: 8,
            n_ctx_max: 64,
            rope: true,
            qk_scale: 1.0,
            value_scale: 0.5,
            unembed_scale: 1.0,
            dtype: Dtype::F64,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Deterministic random weights for `seed`. With `dtype = F32` every scalar
/// is rounded to single precision so the model survives an f32 round trip.
pub fn random_model(cfg: &ToyConfig, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dh = cfg.d_emb / cfg.n_heads;
    let heads = (0..cfg.n_heads)
        .map(|_| HeadWeights {
            query: uniform(&mut rng, cfg.d_emb, dh, cfg.qk_scale),
            key: uniform(&mut rng, cfg.d_emb, dh, cfg.qk_scale),
            value: uniform(&mut rng, cfg.d_emb, dh, cfg.value_scale),
        })
        .collect();
    let mut w = ModelWeights {
        d_vocab: cfg.d_vocab,
        d_emb: cfg.d_emb,
        n_heads: cfg.n_heads,
        d_mlp: cfg.d_mlp,
        n_ctx_max: cfg.n_ctx_max,
        embed: uniform(&mut rng, cfg.d_vocab, cfg.d_emb, 1.0),
        unembed: uniform(&mut rng, cfg.d_emb, cfg.d_vocab, cfg.unembed_scale),
        heads,
        ln: LayerNormParams {
            gamma: uniform_vec(&mut rng, cfg.d_emb, 0.5, 1.5),
            beta: uniform_vec(&mut rng, cfg.d_emb, -0.1, 0.1),
            eps: 1e-5,
        },
        mlp: MlpWeights {
            enc_w: uniform(&mut rng, cfg.d_emb, cfg.d_mlp, 0.5),
            enc_b: uniform_vec(&mut rng, cfg.d_mlp, -0.1, 0.1),
            dec_w: uniform(&mut rng, cfg.d_mlp, cfg.d_emb, 0.5),
        },
        rope: RopeConfig {
            enabled: cfg.rope,
            base: 10000.0,
            dim: dh,
        },
        dtype: cfg.dtype,
    };
    if cfg.dtype == Dtype::F32 {
        round_to_f32(&mut w);
    }
    w
}

/// Rounds every tensor scalar to the nearest `f32`. `eps` and the rope base
/// live in the manifest at full precision and are left alone.
pub fn round_to_f32(w: &mut ModelWeights) {
    let r = |x: &mut f64| *x = *x as f32 as f64;
    let mats = [&mut w.embed, &mut w.unembed, &mut w.mlp.enc_w, &mut w.mlp.dec_w];
    for m in mats {
        m.data_mut().iter_mut().for_each(r);
    }
    for h in &mut w.heads {
        for m in [&mut h.query, &mut h.key, &mut h.value] {
            m.data_mut().iter_mut().for_each(r);
        }
    }
    for v in [&mut w.ln.gamma, &mut w.ln.beta, &mut w.mlp.enc_b] {
        v.iter_mut().for_each(r);
    }
    w.dtype = Dtype::F32;
}
