//! Forward semantics of the single-layer model at the query position.
//!
//! The layer is `Unembed ∘ ((Attn + MLP) ∘ LN + I) ∘ Embed`: one shared
//! layer-norm feeds the attention heads and the MLP in parallel, and the raw
//! embedding is added back through the identity residual. Because layer-norm
//! acts row-wise on one-hot inputs it collapses to a lookup into the
//! normalized embedding table, which [`Model`] materializes once.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i)
    }
}

/// Storage precision of the payload. Computation is always in `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    /// `d_emb × d_head`
    pub query: Matrix,
    /// `d_emb × d_head`
    pub key: Matrix,
    /// `d_emb × d_head`
    pub value: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    /// `d_emb × d_mlp`
    pub enc_w: Matrix,
    pub enc_b: Vec<f64>,
    /// `d_mlp × d_emb`
    pub dec_w: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    pub enabled: bool,
    pub base: f64,
    /// Denominator of the frequency exponent, `θ_m = base^(-2m / dim)`.
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub d_vocab: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub n_ctx_max: usize,
    /// `d_vocab × d_emb`
    pub embed: Matrix,
    /// `d_emb × d_vocab`
    pub unembed: Matrix,
    pub heads: Vec<HeadWeights>,
    pub ln: LayerNormParams,
    pub mlp: MlpWeights,
    pub rope: RopeConfig,
    pub dtype: Dtype,
}

fn expect_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

fn expect_len(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Shape(format!("{name} has length {}, expected {len}", v.len())));
    }
    Ok(())
}

impl ModelWeights {
    pub fn d_head(&self) -> usize {
        self.d_emb.checked_div(self.n_heads).unwrap_or(0)
    }

    /// Shape consistency only.
    pub fn check_shapes(&self) -> Result<()> {
        if self.d_vocab == 0 || self.d_emb == 0 || self.n_heads == 0 || self.n_ctx_max == 0 {
            return Err(Error::Shape(format!(
                "degenerate dimension: d_vocab={}, d_emb={}, n_heads={}, n_ctx_max={}",
                self.d_vocab, self.d_emb, self.n_heads, self.n_ctx_max
            )));
        }
        if !self.d_emb.is_multiple_of(self.n_heads) {
            return Err(Error::Shape(format!(
                "d_emb={} is not divisible by n_heads={}",
                self.d_emb, self.n_heads
            )));
        }
        let dh = self.d_head();
        expect_shape("embed", &self.embed, self.d_vocab, self.d_emb)?;
        expect_shape("unembed", &self.unembed, self.d_emb, self.d_vocab)?;
        if self.heads.len() != self.n_heads {
            return Err(Error::Shape(format!(
                "{} head weight sets for n_heads={}",
                self.heads.len(),
                self.n_heads
            )));
        }
        for (h, head) in self.heads.iter().enumerate() {
            expect_shape(&format!("query[{h}]"), &head.query, self.d_emb, dh)?;
            expect_shape(&format!("key[{h}]"), &head.key, self.d_emb, dh)?;
            expect_shape(&format!("value[{h}]"), &head.value, self.d_emb, dh)?;
        }
        expect_len("ln.gamma", &self.ln.gamma, self.d_emb)?;
        expect_len("ln.beta", &self.ln.beta, self.d_emb)?;
        expect_shape("mlp.enc_w", &self.mlp.enc_w, self.d_emb, self.d_mlp)?;
        expect_len("mlp.enc_b", &self.mlp.enc_b, self.d_mlp)?;
        expect_shape("mlp.dec_w", &self.mlp.dec_w, self.d_mlp, self.d_emb)?;
        Ok(())
    }

    /// Full invariant check: shapes, finiteness and hyperparameter ranges.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        let finite = self.embed.is_finite()
            && self.unembed.is_finite()
            && self
                .heads
                .iter()
                .all(|h| h.query.is_finite() && h.key.is_finite() && h.value.is_finite())
            && self.ln.gamma.iter().chain(&self.ln.beta).all(|x| x.is_finite())
            && self.mlp.enc_w.is_finite()
            && self.mlp.enc_b.iter().all(|x| x.is_finite())
            && self.mlp.dec_w.is_finite();
        if !finite {
            return Err(Error::Validation("non-finite weight".into()));
        }
        if !(self.ln.eps.is_finite() && self.ln.eps >= 0.0) {
            return Err(Error::Validation(format!("layer-norm eps {} must be finite and >= 0", self.ln.eps)));
        }
        if self.rope.enabled {
            if !self.d_head().is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "rotary embedding needs an even head width, got d_head={}",
                    self.d_head()
                )));
            }
            if !(self.rope.base.is_finite() && self.rope.base > 0.0) || self.rope.dim == 0 {
                return Err(Error::Config(format!(
                    "rope base {} / dim {} out of range",
                    self.rope.base, self.rope.dim
                )));
            }
        }
        Ok(())
    }

    /// Columns of the unembedding owned by head `h` in the concatenated output.
    pub fn head_unembed(&self, h: usize) -> Matrix {
        let dh = self.d_head();
        self.unembed.row_slice(h * dh, (h + 1) * dh)
    }
}

/// `E_LN`: the layer-normalized embedding table, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedEmbedding(pub Matrix);

impl NormalizedEmbedding {
    pub fn row(&self, t: TokenId) -> &[f64] {
        self.0.row(t.index())
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Layer-norm of one vector with population variance and `eps` under the root.
pub fn layer_norm(x: &[f64], ln: &LayerNormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + ln.eps).sqrt();
    x.iter()
        .zip(ln.gamma.iter().zip(&ln.beta))
        .map(|(v, (g, b))| {
            let centered = v - mean;
            // a constant row with eps = 0 is 0/0; the centered numerator is
            // exactly zero so the normalized value is taken as zero
            let z = if centered == 0.0 { 0.0 } else { centered / denom };
            z * g + b
        })
        .collect()
}

pub fn normalized_embedding(weights: &ModelWeights) -> Result<NormalizedEmbedding> {
    let mut out = Matrix::zeros(weights.d_vocab, weights.d_emb);
    for t in 0..weights.d_vocab {
        let row = layer_norm(weights.embed.row(t), &weights.ln);
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("normalized embedding of token {t} is not finite")));
        }
        out.row_mut(t).copy_from_slice(&row);
    }
    Ok(NormalizedEmbedding(out))
}

/// Rotary frequencies `θ_m = base^(-2m/dim)` for each 2-D block of a head.
pub fn rope_frequencies(rope: &RopeConfig, d_head: usize) -> Vec<f64> {
    (0..d_head / 2)
        .map(|m| rope.base.powf(-2.0 * m as f64 / rope.dim as f64))
        .collect()
}

/// `Θ_{i,j}` such that `RoPE(q at i) · RoPE(k at j) = q · Θ_{i,j} · kᵀ`.
///
/// Block `m` is the rotation by `(j - i)·θ_m`. With rotary embedding
/// disabled the result is the identity.
pub fn rope_rotation(weights: &ModelWeights, i: usize, j: usize) -> Result<Matrix> {
    let dh = weights.d_head();
    if i >= weights.n_ctx_max || j >= weights.n_ctx_max {
        return Err(Error::Config(format!(
            "positions ({i}, {j}) outside context of {}",
            weights.n_ctx_max
        )));
    }
    if !weights.rope.enabled {
        return Ok(Matrix::identity(dh));
    }
    if !dh.is_multiple_of(2) {
        return Err(Error::Config(format!("odd head width {dh}")));
    }
    let rel = j as f64 - i as f64;
    let mut theta = Matrix::zeros(dh, dh);
    for (m, freq) in rope_frequencies(&weights.rope, dh).into_iter().enumerate() {
        let (s, c) = (rel * freq).sin_cos();
        theta[(2 * m, 2 * m)] = c;
        theta[(2 * m, 2 * m + 1)] = -s;
        theta[(2 * m + 1, 2 * m)] = s;
        theta[(2 * m + 1, 2 * m + 1)] = c;
    }
    Ok(theta)
}

/// A validated sequence of token ids of length `1..=n_ctx_max`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InputSequence(Vec<TokenId>);

impl InputSequence {
    pub fn new(tokens: Vec<TokenId>, weights: &ModelWeights) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > weights.n_ctx_max {
            return Err(Error::Restriction(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                weights.n_ctx_max
            )));
        }
        if let Some(t) = tokens.iter().find(|t| t.index() >= weights.d_vocab) {
            return Err(Error::Restriction(format!(
                "token {t} outside vocabulary of {}",
                weights.d_vocab
            )));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn query(&self) -> TokenId {
        *self.0.last().expect("non-empty by construction")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryLogits(pub Vec<f64>);

impl QueryLogits {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Greedy decoding: the lowest index among the maximal logits.
pub fn greedy_token(logits: &QueryLogits) -> TokenId {
    TokenId(argmax(&logits.0).unwrap_or(0))
}

/// Per-path decomposition of the query row before unembedding.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryComponents {
    /// Attention output of each head, length `d_head` each.
    pub heads: Vec<Vec<f64>>,
    /// Softmax weights of each head over all positions.
    pub attention: Vec<Vec<f64>>,
    pub mlp: Vec<f64>,
    pub residual: Vec<f64>,
    pub logits: QueryLogits,
}

/// Model weights together with the per-token tables every analysis needs.
#[derive(Clone, Debug)]
pub struct Model {
    weights: ModelWeights,
    e_ln: NormalizedEmbedding,
    /// Per head: `E_LN · Q_h`, `d_vocab × d_head`.
    queries: Vec<Matrix>,
    /// Per head: `E_LN · K_h`.
    keys: Vec<Matrix>,
    /// Per head: `E_LN · V_h`.
    values: Vec<Matrix>,
    /// Per head: rows `[h·d_head, (h+1)·d_head)` of the unembedding.
    head_unembed: Vec<Matrix>,
    freqs: Vec<f64>,
    inv_scale: f64,
}

impl Model {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        weights.validate()?;
        let e_ln = normalized_embedding(&weights)?;
        let queries = weights.heads.iter().map(|h| e_ln.0.matmul(&h.query)).collect();
        let keys = weights.heads.iter().map(|h| e_ln.0.matmul(&h.key)).collect();
        let values = weights.heads.iter().map(|h| e_ln.0.matmul(&h.value)).collect();
        let head_unembed = (0..weights.n_heads).map(|h| weights.head_unembed(h)).collect();
        let freqs = if weights.rope.enabled {
            rope_frequencies(&weights.rope, weights.d_head())
        } else {
            Vec::new()
        };
        let inv_scale = 1.0 / (weights.d_head() as f64).sqrt();
        Ok(Self {
            weights,
            e_ln,
            queries,
            keys,
            values,
            head_unembed,
            freqs,
            inv_scale,
        })
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn normalized_embedding(&self) -> &NormalizedEmbedding {
        &self.e_ln
    }

    pub fn d_vocab(&self) -> usize {
        self.weights.d_vocab
    }

    pub fn n_heads(&self) -> usize {
        self.weights.n_heads
    }

    pub fn rope_enabled(&self) -> bool {
        self.weights.rope.enabled
    }

    pub fn check_token(&self, t: TokenId) -> Result<()> {
        if t.index() >= self.weights.d_vocab {
            return Err(Error::Restriction(format!(
                "token {t} outside vocabulary of {}",
                self.weights.d_vocab
            )));
        }
        Ok(())
    }

    /// `E_LN[t] · V_h`.
    pub fn value_row(&self, h: usize, t: TokenId) -> &[f64] {
        self.values[h].row(t.index())
    }

    pub fn head_unembed(&self, h: usize) -> &Matrix {
        &self.head_unembed[h]
    }

    /// Pre-softmax attention score of the query token `q` at `q_pos` against
    /// token `k` at `k_pos`, i.e. `(E_LN[q]·Q_h) Θ_{q_pos,k_pos} (E_LN[k]·K_h)ᵀ / √d_head`.
    pub fn score(&self, h: usize, q: TokenId, q_pos: usize, k: TokenId, k_pos: usize) -> f64 {
        let qv = self.queries[h].row(q.index());
        let kv = self.keys[h].row(k.index());
        self.rotated_dot(qv, kv, k_pos as f64 - q_pos as f64) * self.inv_scale
    }

    /// Score with rotary embedding ignored regardless of configuration.
    pub fn score_positionless(&self, h: usize, q: TokenId, k: TokenId) -> f64 {
        dot(self.queries[h].row(q.index()), self.keys[h].row(k.index())) * self.inv_scale
    }

    fn rotated_dot(&self, q: &[f64], k: &[f64], rel: f64) -> f64 {
        if self.freqs.is_empty() {
            return dot(q, k);
        }
        let mut acc = 0.0;
        for (m, freq) in self.freqs.iter().enumerate() {
            let (s, c) = (rel * freq).sin_cos();
            let (qa, qb) = (q[2 * m], q[2 * m + 1]);
            let (ka, kb) = (k[2 * m], k[2 * m + 1]);
            acc += qa * (c * ka - s * kb) + qb * (s * ka + c * kb);
        }
        acc
    }

    /// Query-row softmax weights of head `h`.
    pub fn query_attention(&self, h: usize, x: &InputSequence) -> Vec<f64> {
        let toks = x.tokens();
        let qpos = toks.len() - 1;
        let q = toks[qpos];
        let scores: Vec<f64> = toks
            .iter()
            .enumerate()
            .map(|(j, &t)| self.score(h, q, qpos, t, j))
            .collect();
        softmax(&scores)
    }

    pub fn attention_head_query_row(&self, h: usize, x: &InputSequence) -> Vec<f64> {
        let p = self.query_attention(h, x);
        self.mix_values(h, x, &p)
    }

    fn mix_values(&self, h: usize, x: &InputSequence, p: &[f64]) -> Vec<f64> {
        let dh = self.weights.d_head();
        let mut out = vec![0.0; dh];
        for (&t, &w) in x.tokens().iter().zip(p) {
            for (o, v) in out.iter_mut().zip(self.value_row(h, t)) {
                *o += w * v;
            }
        }
        out
    }

    /// All rows of head `h`, optionally with the causal mask. Used to check
    /// that masking never touches the query row.
    pub fn attention_head_rows(&self, h: usize, x: &InputSequence, causal: bool) -> Matrix {
        let toks = x.tokens();
        let n = toks.len();
        let mut out = Matrix::zeros(n, self.weights.d_head());
        for i in 0..n {
            let visible = if causal { i + 1 } else { n };
            let scores: Vec<f64> = (0..visible)
                .map(|j| self.score(h, toks[i], i, toks[j], j))
                .collect();
            let p = softmax(&scores);
            let row = out.row_mut(i);
            for (j, w) in p.iter().enumerate() {
                for (o, v) in row.iter_mut().zip(self.value_row(h, toks[j])) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// `ReLU(E_LN[q]·A_enc + b_enc)·A_dec`.
    pub fn mlp_row(&self, q: TokenId) -> Vec<f64> {
        let mlp = &self.weights.mlp;
        let mut hidden = mlp.enc_w.left_mul(self.e_ln.row(q));
        for (h, b) in hidden.iter_mut().zip(&mlp.enc_b) {
            *h = (*h + b).max(0.0);
        }
        mlp.dec_w.left_mul(&hidden)
    }

    /// Unembeds `concat_h heads[h] + mlp + residual`.
    pub fn unembed_parts(&self, heads: &[Vec<f64>], mlp: &[f64], residual: &[f64]) -> QueryLogits {
        let hidden: Vec<f64> = heads
            .iter()
            .flatten()
            .zip(mlp.iter().zip(residual))
            .map(|(a, (m, r))| a + m + r)
            .collect();
        QueryLogits(self.weights.unembed.left_mul(&hidden))
    }

    pub fn query_components(&self, x: &InputSequence) -> QueryComponents {
        let q = x.query();
        let attention: Vec<Vec<f64>> = (0..self.n_heads()).map(|h| self.query_attention(h, x)).collect();
        let heads: Vec<Vec<f64>> = attention
            .iter()
            .enumerate()
            .map(|(h, p)| self.mix_values(h, x, p))
            .collect();
        let mlp = self.mlp_row(q);
        let residual = self.weights.embed.row(q.index()).to_vec();
        let logits = self.unembed_parts(&heads, &mlp, &residual);
        QueryComponents {
            heads,
            attention,
            mlp,
            residual,
            logits,
        }
    }

    pub fn forward_query_logits(&self, x: &InputSequence) -> QueryLogits {
        self.query_components(x).logits
    }

    /// Logit contribution of one head's output: `out_h · U_h`.
    pub fn head_logits(&self, h: usize, out: &[f64]) -> Vec<f64> {
        self.head_unembed[h].left_mul(out)
    }
}

/// Max-shifted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
