//! Long-context behaviour under a repetition restriction: every fixed slot
//! and the query hold one token `r`, and a small number of free slots sit
//! between them. Without rotary embedding the scores no longer depend on
//! position, so the attention-mass bounds have a closed form in
//! `(n_fix, n_free)` and the sample margin does not depend on `n_ctx` at all.
//!
//! Context lengths here are not checked against `n_ctx_max`: with positions
//! removed the layer is the same function at every length.

use serde::{Deserialize, Serialize};

use crate::bounds::{decide, head_value_norm, logit_gap, Verdict};
use crate::error::{Error, Result};
use crate::model::{Model, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionRestriction {
    pub rep_token: TokenId,
    pub n_free: usize,
    pub n_ctx: usize,
}

impl RepetitionRestriction {
    pub fn new(rep_token: TokenId, n_free: usize, n_ctx: usize) -> Result<Self> {
        if n_ctx == 0 || n_free + 1 > n_ctx {
            return Err(Error::Restriction(format!(
                "repetition restriction needs n_free + 1 <= n_ctx, got n_free={n_free}, n_ctx={n_ctx}"
            )));
        }
        Ok(Self { rep_token, n_free, n_ctx })
    }

    pub fn n_fix(&self) -> usize {
        self.n_ctx - self.n_free - 1
    }
}

/// Position-free score envelopes of one head for query `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitEnvelope {
    pub fix_min: f64,
    pub fix_max: f64,
    pub free_min: f64,
    pub free_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassEnvelope {
    /// Bounds on the attention mass on the `n_fix + 1` fixed-side slots.
    pub fixed: (f64, f64),
    /// Bounds on the attention mass on the `n_free` free slots.
    pub free: (f64, f64),
}

fn require_no_rope(model: &Model) -> Result<()> {
    if model.rope_enabled() {
        return Err(Error::Config(
            "the repetition analysis assumes no rotary embedding; this model has it enabled".into(),
        ));
    }
    Ok(())
}

pub fn logit_envelope(model: &Model, rep: TokenId, h: usize) -> LogitEnvelope {
    let fixed = model.score_positionless(h, rep, rep);
    let (free_min, free_max) = (0..model.d_vocab()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
        let s = model.score_positionless(h, rep, TokenId(t));
        (lo.min(s), hi.max(s))
    });
    LogitEnvelope {
        fix_min: fixed,
        fix_max: fixed,
        free_min,
        free_max,
    }
}

/// Shares of `a` slots at score 0 and `b` slots at score `d`, computed
/// without overflowing the exponential.
fn shares(a: f64, b: f64, d: f64) -> (f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0);
    }
    if d > 0.0 {
        let e = (-d).exp();
        (a * e / (a * e + b), b / (a * e + b))
    } else {
        let e = d.exp();
        (a / (a + b * e), b * e / (a + b * e))
    }
}

/// Closed-form bounds on fixed-side and free attention mass.
pub fn mass_envelope(env: &LogitEnvelope, n_fix: usize, n_free: usize) -> MassEnvelope {
    let a = (n_fix + 1) as f64;
    let b = n_free as f64;
    // fixed side smallest and free side largest together, and vice versa
    let (fix_lo, free_hi) = shares(a, b, env.free_max - env.fix_min);
    let (fix_hi, free_lo) = shares(a, b, env.free_min - env.fix_max);
    MassEnvelope {
        fixed: (fix_lo, fix_hi),
        free: (free_lo, free_hi),
    }
}

/// `PTP` of the all-`r` input, in time independent of the context length.
///
/// Each head attends to identical rows, so its output is `E_LN[r]·V_h`
/// whatever the softmax weights are.
pub fn ptp_shortcut(model: &Model, rep: TokenId) -> Result<f64> {
    require_no_rope(model)?;
    model.check_token(rep)?;
    let heads: Vec<Vec<f64>> = (0..model.n_heads()).map(|h| model.value_row(h, rep).to_vec()).collect();
    let mlp = model.mlp_row(rep);
    let residual = model.weights().embed.row(rep.index()).to_vec();
    logit_gap(&model.unembed_parts(&heads, &mlp, &residual))
}

/// How many free slots accompany a given context length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeSlots {
    Constant(usize),
    /// `floor(n_ctx · num / den)`, capped at `n_ctx − 1`.
    Fraction { num: usize, den: usize },
}

impl FreeSlots {
    pub fn at(&self, n_ctx: usize) -> usize {
        let n = match *self {
            FreeSlots::Constant(n) => n,
            FreeSlots::Fraction { num, den } => n_ctx * num / den.max(1),
        };
        n.min(n_ctx.saturating_sub(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub n_ctx: usize,
    pub n_free: usize,
    pub per_head_bound: Vec<f64>,
    pub w: f64,
    pub ptp: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceScan {
    pub rep_token: TokenId,
    pub envelopes: Vec<LogitEnvelope>,
    pub rows: Vec<ScanRow>,
    /// Smallest scanned `n_ctx` certified overwhelmed.
    pub first_certified: Option<usize>,
}

/// Certified `W` against the shortcut `PTP` at each scheduled length.
pub fn convergence_scan(
    model: &Model,
    rep: TokenId,
    free: FreeSlots,
    schedule: &[usize],
    slack: f64,
) -> Result<ConvergenceScan> {
    require_no_rope(model)?;
    model.check_token(rep)?;
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("context schedule must be strictly increasing".into()));
    }
    let ptp = ptp_shortcut(model, rep)?;
    let h_count = model.n_heads();
    let envelopes: Vec<LogitEnvelope> = (0..h_count).map(|h| logit_envelope(model, rep, h)).collect();
    let all: Vec<TokenId> = (0..model.d_vocab()).map(TokenId).collect();
    let norms: Vec<(f64, f64)> = (0..h_count)
        .map(|h| (head_value_norm(model, h, &[rep]), head_value_norm(model, h, &all)))
        .collect();

    let mut rows = Vec::with_capacity(schedule.len());
    for &n_ctx in schedule {
        let r = RepetitionRestriction::new(rep, free.at(n_ctx), n_ctx)?;
        let per_head_bound: Vec<f64> = envelopes
            .iter()
            .zip(&norms)
            .map(|(env, (fixed_norm, free_norm))| {
                let m = mass_envelope(env, r.n_fix(), r.n_free);
                (m.fixed.1 - m.fixed.0) * fixed_norm + 2.0 * m.free.1 * free_norm
            })
            .collect();
        let w = per_head_bound.iter().sum();
        let (_, _, verdict) = decide(w, ptp, slack);
        rows.push(ScanRow {
            n_ctx,
            n_free: r.n_free,
            per_head_bound,
            w,
            ptp,
            verdict,
        });
    }
    let first_certified = rows.iter().find(|r| r.verdict == Verdict::Overwhelmed).map(|r| r.n_ctx);
    Ok(ConvergenceScan {
        rep_token: rep,
        envelopes,
        rows,
        first_certified,
    })
}

/// `8, 16, …, 2^max_exp`.
pub fn geometric_schedule(min_exp: u32, max_exp: u32) -> Vec<usize> {
    (min_exp..=max_exp).map(|e| 1usize << e).collect()
}
