//! Worst-case deviation bounds over a designed input space.
//!
//! A restriction fixes a prefix `s`, leaves `n_free` slots open and fixes the
//! final query token `q`. Only attention can carry information from the free
//! slots to the query row: the MLP and the residual see the query token alone,
//! so their deviation is exactly zero. For each head the query-row logits are
//! boxed position by position, the boxes are pushed through softmax into
//! bounds on the attention mass landing on fixed and free positions, and the
//! masses are combined with `F∞` norms of the value-to-logit maps.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{greedy_token, InputSequence, Model, ModelWeights, QueryLogits, TokenId};
use crate::tensor::Matrix;

/// Default relative inflation of `W` (and deflation of `PTP/2`) before the
/// verdict comparison.
pub const DEFAULT_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRestriction {
    pub fixed: Vec<TokenId>,
    pub n_free: usize,
    pub query: TokenId,
}

impl InputRestriction {
    pub fn new(fixed: Vec<TokenId>, n_free: usize, query: TokenId) -> Self {
        Self { fixed, n_free, query }
    }

    pub fn n_fix(&self) -> usize {
        self.fixed.len()
    }

    pub fn n_ctx(&self) -> usize {
        self.fixed.len() + self.n_free + 1
    }

    pub fn query_pos(&self) -> usize {
        self.n_ctx() - 1
    }

    pub fn free_positions(&self) -> std::ops::Range<usize> {
        self.n_fix()..self.n_fix() + self.n_free
    }

    pub fn is_free(&self, pos: usize) -> bool {
        self.free_positions().contains(&pos)
    }

    pub fn validate(&self, weights: &ModelWeights) -> Result<()> {
        if self.n_ctx() > weights.n_ctx_max {
            return Err(Error::Restriction(format!(
                "context length {} exceeds n_ctx_max={}",
                self.n_ctx(),
                weights.n_ctx_max
            )));
        }
        let bad = self
            .fixed
            .iter()
            .chain(std::iter::once(&self.query))
            .find(|t| t.index() >= weights.d_vocab);
        if let Some(t) = bad {
            return Err(Error::Restriction(format!(
                "token {t} outside vocabulary of {}",
                weights.d_vocab
            )));
        }
        Ok(())
    }

    /// The concrete input with the free slots set to `fill`.
    pub fn sequence(&self, fill: &[TokenId], weights: &ModelWeights) -> Result<InputSequence> {
        if fill.len() != self.n_free {
            return Err(Error::Restriction(format!(
                "{} filler tokens for {} free slots",
                fill.len(),
                self.n_free
            )));
        }
        let mut tokens = self.fixed.clone();
        tokens.extend_from_slice(fill);
        tokens.push(self.query);
        InputSequence::new(tokens, weights)
    }

    /// Distinct token ids of `s ∪ {q}`, ascending.
    pub fn fixed_side_tokens(&self) -> Vec<TokenId> {
        let set: BTreeSet<TokenId> = self.fixed.iter().copied().chain([self.query]).collect();
        set.into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitBounds {
    pub l_min: Vec<f64>,
    pub l_max: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxMassBounds {
    pub alpha_fix_min: f64,
    pub alpha_fix_max: f64,
    pub alpha_free_min: f64,
    pub alpha_free_max: f64,
    /// Offset subtracted from every logit before exponentiation.
    pub shift: f64,
    pub beta_fix_min: f64,
    pub beta_fix_max: f64,
    pub beta_free_min: f64,
    pub beta_free_max: f64,
}

fn ratio(num: f64, other: f64, empty: f64) -> f64 {
    let denom = num + other;
    if denom > 0.0 {
        num / denom
    } else {
        empty
    }
}

impl SoftmaxMassBounds {
    /// Builds the `β` ratios from shifted exponential sums.
    ///
    /// A denominator that underflows to zero falls back to the trivial bound
    /// (0 for a minimum, 1 for a maximum).
    pub fn from_alphas(
        alpha_fix_min: f64,
        alpha_fix_max: f64,
        alpha_free_min: f64,
        alpha_free_max: f64,
        shift: f64,
    ) -> Self {
        Self {
            alpha_fix_min,
            alpha_fix_max,
            alpha_free_min,
            alpha_free_max,
            shift,
            beta_free_min: ratio(alpha_free_min, alpha_fix_max, 0.0),
            beta_free_max: ratio(alpha_free_max, alpha_fix_min, 1.0),
            beta_fix_min: ratio(alpha_fix_min, alpha_free_max, 0.0),
            beta_fix_max: ratio(alpha_fix_max, alpha_free_min, 1.0),
        }
    }
}

/// Per-position extreme query-row scores of head `h`. Free positions range
/// over every vocabulary token.
pub fn logit_bounds(model: &Model, restriction: &InputRestriction, h: usize) -> Result<LogitBounds> {
    let all: Vec<TokenId> = (0..model.d_vocab()).map(TokenId).collect();
    logit_bounds_over(model, restriction, h, &all)
}

/// As [`logit_bounds`], with free positions ranging over `candidates` only.
pub fn logit_bounds_over(
    model: &Model,
    restriction: &InputRestriction,
    h: usize,
    candidates: &[TokenId],
) -> Result<LogitBounds> {
    restriction.validate(model.weights())?;
    if restriction.n_free > 0 && candidates.is_empty() {
        return Err(Error::Restriction("no candidate tokens for the free slots".into()));
    }
    let q = restriction.query;
    let qpos = restriction.query_pos();
    let per_pos: Vec<(f64, f64)> = (0..restriction.n_ctx())
        .into_par_iter()
        .map(|k| {
            if restriction.is_free(k) {
                candidates.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
                    let s = model.score(h, q, qpos, t, k);
                    (lo.min(s), hi.max(s))
                })
            } else {
                let t = if k == qpos { q } else { restriction.fixed[k] };
                let s = model.score(h, q, qpos, t, k);
                (s, s)
            }
        })
        .collect();
    let (l_min, l_max) = per_pos.into_iter().unzip();
    Ok(LogitBounds { l_min, l_max })
}

/// Softmax extremal values from per-position logit boxes.
pub fn softmax_mass_bounds(bounds: &LogitBounds, restriction: &InputRestriction) -> Result<SoftmaxMassBounds> {
    let n = restriction.n_ctx();
    if bounds.l_min.len() != n || bounds.l_max.len() != n {
        return Err(Error::Shape(format!(
            "logit bounds of length {} for context {n}",
            bounds.l_min.len()
        )));
    }
    let shift = bounds.l_max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() || bounds.l_min.iter().any(|x| x.is_nan()) {
        return Err(Error::Degenerate(format!("logit upper envelope peaks at {shift}")));
    }
    let (mut fix_min, mut fix_max, mut free_min, mut free_max) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..n {
        let lo = (bounds.l_min[k] - shift).exp();
        let hi = (bounds.l_max[k] - shift).exp();
        if restriction.is_free(k) {
            free_min += lo;
            free_max += hi;
        } else {
            fix_min += lo;
            fix_max += hi;
        }
    }
    Ok(SoftmaxMassBounds::from_alphas(fix_min, fix_max, free_min, free_max, shift))
}

/// `‖E_rows · V · U‖_F∞` without forming the `rows × d_vocab` product at once.
pub fn f_inf_norm_product(e_rows: &Matrix, value: &Matrix, unembed: &Matrix) -> f64 {
    (0..e_rows.rows())
        .map(|i| value.left_mul(e_rows.row(i)))
        .map(|v| row_unembed_max(&v, unembed))
        .fold(0.0, f64::max)
}

fn row_unembed_max(v: &[f64], unembed: &Matrix) -> f64 {
    let ut = unembed.cols();
    (0..ut)
        .map(|o| {
            let mut acc = 0.0;
            for (i, x) in v.iter().enumerate() {
                acc += x * unembed[(i, o)];
            }
            acc.abs()
        })
        .fold(0.0, f64::max)
}

/// `‖E_LN[tokens] · V_h · U_h‖_F∞` using the model's cached value rows.
pub fn head_value_norm(model: &Model, h: usize, tokens: &[TokenId]) -> f64 {
    let u = model.head_unembed(h);
    tokens
        .iter()
        .map(|&t| row_unembed_max(model.value_row(h, t), u))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadNorms {
    /// Over the rows of `s ∪ {q}`.
    pub fixed: f64,
    /// Over the rows the free slots may take.
    pub free: f64,
}

/// `(β_fix_max − β_fix_min)·fixed + 2·β_free_max·free`.
pub fn deviation_from_mass(mass: &SoftmaxMassBounds, norms: &HeadNorms) -> f64 {
    (mass.beta_fix_max - mass.beta_fix_min) * norms.fixed + 2.0 * mass.beta_free_max * norms.free
}

/// Bound on the query-row logit deviation contributed by head `h` when the
/// free slots range over the whole vocabulary.
pub fn attention_deviation_bound(
    model: &Model,
    restriction: &InputRestriction,
    mass: &SoftmaxMassBounds,
    h: usize,
) -> (HeadNorms, f64) {
    let all: Vec<TokenId> = (0..model.d_vocab()).map(TokenId).collect();
    let norms = HeadNorms {
        fixed: head_value_norm(model, h, &restriction.fixed_side_tokens()),
        free: if restriction.n_free == 0 { 0.0 } else { head_value_norm(model, h, &all) },
    };
    let bound = deviation_from_mass(mass, &norms);
    (norms, bound)
}

/// Combines per-head bounds into a bound on the full query-logit deviation.
///
/// Each head's bound already includes its slice of the unembedding, and the
/// logits are the sum of the per-head contributions, so the bounds add. The
/// MLP and identity paths contribute zero.
pub fn total_deviation_bound(per_head: &[f64]) -> f64 {
    per_head.iter().sum()
}

/// Gap between the top logit and the runner-up.
pub fn logit_gap(logits: &QueryLogits) -> Result<f64> {
    let v = logits.values();
    if v.len() < 2 {
        return Err(Error::Undefined(format!("peak-to-peak needs two logits, got {}", v.len())));
    }
    let k = greedy_token(logits).index();
    let gap = v
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &x)| v[k] - x)
        .fold(f64::INFINITY, f64::min);
    Ok(gap)
}

pub fn peak_to_peak(model: &Model, x: &InputSequence) -> Result<f64> {
    logit_gap(&model.forward_query_logits(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Overwhelmed,
    Inconclusive,
}

/// How the concrete input used for `PTP` is picked from the designed space.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePolicy {
    /// Every free slot holds the query token.
    #[default]
    QueryFill,
    /// Explicit filler, one token per free slot.
    Filler(Vec<TokenId>),
}

impl SamplePolicy {
    pub fn fill(&self, restriction: &InputRestriction) -> Vec<TokenId> {
        match self {
            SamplePolicy::QueryFill => vec![restriction.query; restriction.n_free],
            SamplePolicy::Filler(f) => f.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub slack: f64,
    pub sample: SamplePolicy,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            slack: DEFAULT_SLACK,
            sample: SamplePolicy::QueryFill,
        }
    }
}

/// Everything computed for one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: usize,
    pub logits: LogitBounds,
    pub mass: SoftmaxMassBounds,
    pub norms: HeadNorms,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub per_head_bound: Vec<f64>,
    pub w: f64,
    /// `w·(1 + slack)`, the value actually compared.
    pub w_guarded: f64,
    pub ptp: f64,
    /// `(ptp/2)·(1 − slack)`, the threshold actually compared.
    pub threshold: f64,
    pub slack: f64,
    pub sample_input: InputSequence,
    pub sample_greedy: TokenId,
    pub sample_logits: QueryLogits,
    pub verdict: Verdict,
    pub heads: Vec<HeadReport>,
}

/// The certified comparison `W < PTP/2`, with `W` rounded up and `PTP`
/// rounded down by `slack`. Ties are inconclusive.
pub fn decide(w: f64, ptp: f64, slack: f64) -> (f64, f64, Verdict) {
    let w_guarded = w * (1.0 + slack);
    let threshold = ptp / 2.0 * (1.0 - slack);
    let verdict = if w_guarded < threshold {
        Verdict::Overwhelmed
    } else {
        Verdict::Inconclusive
    };
    (w_guarded, threshold, verdict)
}

pub(crate) fn finish_report(
    model: &Model,
    x: InputSequence,
    heads: Vec<HeadReport>,
    slack: f64,
) -> Result<VerificationReport> {
    if !(slack.is_finite() && (0.0..1.0).contains(&slack)) {
        return Err(Error::Config(format!("slack {slack} outside [0, 1)")));
    }
    let per_head_bound: Vec<f64> = heads.iter().map(|h| h.bound).collect();
    let w = total_deviation_bound(&per_head_bound);
    let logits = model.forward_query_logits(&x);
    let ptp = logit_gap(&logits)?;
    let (w_guarded, threshold, verdict) = decide(w, ptp, slack);
    Ok(VerificationReport {
        per_head_bound,
        w,
        w_guarded,
        ptp,
        threshold,
        slack,
        sample_greedy: greedy_token(&logits),
        sample_logits: logits,
        sample_input: x,
        verdict,
        heads,
    })
}

/// Decides overwhelming for the designed space of `restriction`.
pub fn verify_overwhelmed(
    model: &Model,
    restriction: &InputRestriction,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    restriction.validate(model.weights())?;
    let x = restriction.sequence(&opts.sample.fill(restriction), model.weights())?;
    let heads = (0..model.n_heads())
        .into_par_iter()
        .map(|h| {
            let logits = logit_bounds(model, restriction, h)?;
            let mass = softmax_mass_bounds(&logits, restriction)?;
            let (norms, bound) = attention_deviation_bound(model, restriction, &mass, h);
            Ok(HeadReport {
                head: h,
                logits,
                mass,
                norms,
                bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finish_report(model, x, heads, opts.slack)
}

/// Query-row attention mass on free positions and on fixed-side positions.
pub fn realized_masses(weights: &[f64], restriction: &InputRestriction) -> (f64, f64) {
    let free: f64 = weights[restriction.free_positions()].iter().sum();
    let fixed: f64 = weights
        .iter()
        .enumerate()
        .filter(|(k, _)| !restriction.is_free(*k))
        .map(|(_, w)| w)
        .sum();
    (free, fixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{random_model, ToyConfig};

    fn restriction(fixed: &[usize], n_free: usize, q: usize) -> InputRestriction {
        InputRestriction::new(fixed.iter().map(|&t| TokenId(t)).collect(), n_free, TokenId(q))
    }

    fn toy(seed: u64) -> Model {
        Model::new(random_model(&ToyConfig::default(), seed)).unwrap()
    }

    #[test]
    fn no_free_slots_collapse_bounds() {
        let m = toy(1);
        let r = restriction(&[0, 2, 1], 0, 3);
        let lb = logit_bounds(&m, &r, 0).unwrap();
        assert_eq!(lb.l_min, lb.l_max);
        let mass = softmax_mass_bounds(&lb, &r).unwrap();
        assert_eq!((mass.beta_fix_min, mass.beta_fix_max, mass.beta_free_max), (1.0, 1.0, 0.0));
        let (_, b) = attention_deviation_bound(&m, &r, &mass, 0);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn two_token_vocab_free_slot_is_min_max_of_both() {
        let m = Model::new(random_model(&ToyConfig { d_vocab: 2, ..ToyConfig::default() }, 4)).unwrap();
        let r = restriction(&[1, 0], 1, 1);
        let lb = logit_bounds(&m, &r, 0).unwrap();
        let a = m.score(0, TokenId(1), 3, TokenId(0), 2);
        let b = m.score(0, TokenId(1), 3, TokenId(1), 2);
        assert!((lb.l_min[2] - a.min(b)).abs() < 1e-12);
        assert!((lb.l_max[2] - a.max(b)).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_quarter_mass() {
        let r = restriction(&[0, 0], 1, 0);
        let lb = LogitBounds { l_min: vec![0.7; 4], l_max: vec![0.7; 4] };
        let mass = softmax_mass_bounds(&lb, &r).unwrap();
        assert!((mass.beta_free_min - 0.25).abs() < 1e-15);
        assert!((mass.beta_free_max - 0.25).abs() < 1e-15);
    }

    #[test]
    fn beta_is_shift_invariant_and_complementary() {
        let r = restriction(&[0, 1, 2], 2, 0);
        let lb = LogitBounds {
            l_min: vec![0.1, -0.3, 0.8, -1.0, -2.0, 0.4],
            l_max: vec![0.1, -0.3, 0.8, 1.5, 0.2, 0.4],
        };
        let a = softmax_mass_bounds(&lb, &r).unwrap();
        let shifted = LogitBounds {
            l_min: lb.l_min.iter().map(|x| x + 37.0).collect(),
            l_max: lb.l_max.iter().map(|x| x + 37.0).collect(),
        };
        let b = softmax_mass_bounds(&shifted, &r).unwrap();
        for (x, y) in [
            (a.beta_fix_min, b.beta_fix_min),
            (a.beta_fix_max, b.beta_fix_max),
            (a.beta_free_min, b.beta_free_min),
            (a.beta_free_max, b.beta_free_max),
        ] {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.beta_fix_min + a.beta_free_max - 1.0).abs() < 1e-15);
        assert!((a.beta_fix_max + a.beta_free_min - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_negative_infinity_is_degenerate() {
        let r = restriction(&[0], 1, 0);
        let lb = LogitBounds { l_min: vec![f64::NEG_INFINITY; 3], l_max: vec![f64::NEG_INFINITY; 3] };
        assert!(matches!(softmax_mass_bounds(&lb, &r), Err(Error::Degenerate(_))));
    }

    #[test]
    fn f_inf_norm_of_formed_product() {
        let m = Matrix::from_rows(&[vec![1.0, -5.0], vec![2.0, 3.0]]).unwrap();
        let id = Matrix::identity(2);
        assert_eq!(f_inf_norm_product(&m, &id, &id), 5.0);
    }

    #[test]
    fn f_inf_norm_blocked_matches_dense() {
        let w = random_model(&ToyConfig { d_vocab: 8, d_emb: 8, n_heads: 2, ..ToyConfig::default() }, 12);
        let m = Model::new(w.clone()).unwrap();
        let e = m.normalized_embedding().matrix();
        for h in 0..2 {
            let u = w.head_unembed(h);
            let dense = e.matmul(&w.heads[h].value).matmul(&u).max_abs();
            assert_eq!(f_inf_norm_product(e, &w.heads[h].value, &u), dense);
            let all: Vec<TokenId> = (0..8).map(TokenId).collect();
            assert_eq!(head_value_norm(&m, h, &all), dense);
        }
    }

    #[test]
    fn zero_values_give_zero_bound() {
        let mut w = random_model(&ToyConfig::default(), 5);
        w.heads[0].value = Matrix::zeros(w.d_emb, w.d_head());
        let m = Model::new(w).unwrap();
        let r = restriction(&[1], 2, 0);
        let lb = logit_bounds(&m, &r, 0).unwrap();
        let mass = softmax_mass_bounds(&lb, &r).unwrap();
        assert_eq!(attention_deviation_bound(&m, &r, &mass, 0).1, 0.0);
    }

    #[test]
    fn total_bound_examples() {
        assert_eq!(total_deviation_bound(&[0.4]), 0.4);
        assert_eq!(total_deviation_bound(&[0.25, 0.5]), 0.75);
    }

    #[test]
    fn ptp_examples() {
        assert_eq!(logit_gap(&QueryLogits(vec![3.0, 1.0, 0.0])).unwrap(), 2.0);
        assert_eq!(logit_gap(&QueryLogits(vec![1.0, 3.0, 3.0])).unwrap(), 0.0);
        assert!(matches!(logit_gap(&QueryLogits(vec![1.0])), Err(Error::Undefined(_))));
    }

    #[test]
    fn fully_fixed_input_is_overwhelmed() {
        let m = toy(8);
        let r = restriction(&[0, 1, 2], 0, 3);
        let rep = verify_overwhelmed(&m, &r, &VerifyOptions::default()).unwrap();
        assert_eq!(rep.w, 0.0);
        assert!(rep.ptp > 0.0);
        assert_eq!(rep.verdict, Verdict::Overwhelmed);
    }

    #[test]
    fn ties_are_inconclusive() {
        assert_eq!(decide(1.0, 2.0, 0.0).2, Verdict::Inconclusive);
        assert_eq!(decide(0.0, 0.0, 0.0).2, Verdict::Inconclusive);
        assert_eq!(decide(0.999_999_999_9, 2.0, 1e-9).2, Verdict::Inconclusive);
        assert_eq!(decide(0.9, 2.0, 1e-9).2, Verdict::Overwhelmed);
    }

    #[test]
    fn restriction_validation() {
        let m = toy(2);
        let too_long = restriction(&[0; 10], m.weights().n_ctx_max, 0);
        assert!(verify_overwhelmed(&m, &too_long, &VerifyOptions::default()).is_err());
        let bad_tok = restriction(&[9], 1, 0);
        assert!(verify_overwhelmed(&m, &bad_tok, &VerifyOptions::default()).is_err());
        let bad_fill = VerifyOptions { sample: SamplePolicy::Filler(vec![TokenId(0)]), ..Default::default() };
        assert!(verify_overwhelmed(&m, &restriction(&[0], 2, 1), &bad_fill).is_err());
    }
}
