//! Exhaustive ground truth over small designed spaces and permutation
//! classes. Every input is evaluated with the exact forward pass; nothing is
//! sampled, and spaces above the limit are refused outright.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{realized_masses, InputRestriction, Verdict, VerificationReport};
use crate::error::{Error, Result};
use crate::model::{greedy_token, Model, TokenId};
use crate::perm::PermutationClass;

pub const DEFAULT_SPACE_LIMIT: u128 = 1_000_000;
pub const DEFAULT_CLASS_LIMIT: u128 = 100_000;
/// Above this many inputs the quadratic 1-norm deviation is skipped.
pub const L1_PAIR_LIMIT: usize = 4096;
/// Relative slack on bound comparisons in [`cross_check`]; masses use it absolutely.
pub const CROSS_CHECK_TOL: f64 = 1e-9;

/// Coordinate-wise running min/max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Envelope {
    pub fn empty(n: usize) -> Self {
        Self {
            lo: vec![f64::INFINITY; n],
            hi: vec![f64::NEG_INFINITY; n],
        }
    }

    pub fn widen(&mut self, v: &[f64]) {
        for ((lo, hi), x) in self.lo.iter_mut().zip(self.hi.iter_mut()).zip(v) {
            *lo = lo.min(*x);
            *hi = hi.max(*x);
        }
    }

    fn merge(mut self, other: &Envelope) -> Self {
        self.widen(&other.lo);
        self.widen(&other.hi);
        self
    }

    /// `max_i (hi_i − lo_i)`: the exact worst-case ∞-norm deviation.
    pub fn spread(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(lo, hi)| hi - lo)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub count: u128,
    /// Exact `max ‖M(X₁) − M(X₂)‖_∞` over the enumerated inputs.
    pub max_pairwise_deviation: f64,
    /// Same in the 1-norm, when the sweep is small enough for all pairs.
    pub max_pairwise_deviation_l1: Option<f64>,
    /// Exact ∞-norm deviation of each head's logit contribution.
    pub per_head_deviation: Vec<f64>,
    pub mlp_deviation: f64,
    pub residual_deviation: f64,
    pub greedy_tokens: BTreeSet<TokenId>,
    /// Per head, `(min, max)` realized attention mass on the free slots.
    pub realized_free_mass_range: Vec<(f64, f64)>,
    /// Per head, `(min, max)` realized attention mass on `s ∪ {q}`.
    pub realized_fixed_mass_range: Vec<(f64, f64)>,
    pub logit_envelope: Envelope,
}

#[derive(Clone)]
struct Acc {
    count: u128,
    logits: Envelope,
    heads: Vec<Envelope>,
    mlp: Envelope,
    residual: Envelope,
    free_mass: Vec<(f64, f64)>,
    fixed_mass: Vec<(f64, f64)>,
    greedy: BTreeSet<TokenId>,
}

impl Acc {
    fn new(model: &Model) -> Self {
        let w = model.weights();
        let h = w.n_heads;
        Self {
            count: 0,
            logits: Envelope::empty(w.d_vocab),
            heads: vec![Envelope::empty(w.d_vocab); h],
            mlp: Envelope::empty(w.d_emb),
            residual: Envelope::empty(w.d_emb),
            free_mass: vec![(f64::INFINITY, f64::NEG_INFINITY); h],
            fixed_mass: vec![(f64::INFINITY, f64::NEG_INFINITY); h],
            greedy: BTreeSet::new(),
        }
    }

    fn merge(mut self, other: Acc) -> Self {
        self.count += other.count;
        self.logits = self.logits.merge(&other.logits);
        self.heads = self.heads.into_iter().zip(&other.heads).map(|(a, b)| a.merge(b)).collect();
        self.mlp = self.mlp.merge(&other.mlp);
        self.residual = self.residual.merge(&other.residual);
        for (a, b) in self.free_mass.iter_mut().zip(&other.free_mass) {
            *a = (a.0.min(b.0), a.1.max(b.1));
        }
        for (a, b) in self.fixed_mass.iter_mut().zip(&other.fixed_mass) {
            *a = (a.0.min(b.0), a.1.max(b.1));
        }
        self.greedy.extend(other.greedy);
        self
    }
}

fn evaluate(model: &Model, restriction: &InputRestriction, fill: &[TokenId], acc: &mut Acc) -> Result<Vec<f64>> {
    let x = restriction.sequence(fill, model.weights())?;
    let comp = model.query_components(&x);
    acc.count += 1;
    acc.logits.widen(comp.logits.values());
    for (h, out) in comp.heads.iter().enumerate() {
        acc.heads[h].widen(&model.head_logits(h, out));
        let (free, fixed) = realized_masses(&comp.attention[h], restriction);
        let fm = &mut acc.free_mass[h];
        *fm = (fm.0.min(free), fm.1.max(free));
        let xm = &mut acc.fixed_mass[h];
        *xm = (xm.0.min(fixed), xm.1.max(fixed));
    }
    acc.mlp.widen(&comp.mlp);
    acc.residual.widen(&comp.residual);
    acc.greedy.insert(greedy_token(&comp.logits));
    Ok(comp.logits.0)
}

fn sweep(model: &Model, restriction: &InputRestriction, fills: Vec<Vec<TokenId>>) -> Result<SweepResult> {
    let keep = fills.len() <= L1_PAIR_LIMIT;
    let (acc, kept) = fills
        .par_iter()
        .map(|fill| -> Result<(Acc, Vec<Vec<f64>>)> {
            let mut acc = Acc::new(model);
            let logits = evaluate(model, restriction, fill, &mut acc)?;
            Ok((acc, if keep { vec![logits] } else { Vec::new() }))
        })
        .try_reduce(
            || (Acc::new(model), Vec::new()),
            |(a, mut ka), (b, kb)| {
                ka.extend(kb);
                Ok((a.merge(b), ka))
            },
        )?;
    let l1 = keep.then(|| {
        let mut best = 0.0f64;
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                best = best.max(d);
            }
        }
        best
    });
    Ok(SweepResult {
        count: acc.count,
        max_pairwise_deviation: acc.logits.spread(),
        max_pairwise_deviation_l1: l1,
        per_head_deviation: acc.heads.iter().map(Envelope::spread).collect(),
        mlp_deviation: acc.mlp.spread(),
        residual_deviation: acc.residual.spread(),
        greedy_tokens: acc.greedy,
        realized_free_mass_range: acc.free_mass,
        realized_fixed_mass_range: acc.fixed_mass,
        logit_envelope: acc.logits,
    })
}

/// `d_vocab^n_free`, or `None` on overflow.
pub fn designed_space_size(d_vocab: usize, n_free: usize) -> Option<u128> {
    (d_vocab as u128).checked_pow(u32::try_from(n_free).ok()?)
}

/// Every filling of the free slots, in lexicographic order.
pub fn enumerate_designed_space(model: &Model, restriction: &InputRestriction, limit: u128) -> Result<SweepResult> {
    restriction.validate(model.weights())?;
    let d = model.d_vocab();
    let n = restriction.n_free;
    let size = designed_space_size(d, n).unwrap_or(u128::MAX);
    if size > limit {
        return Err(Error::LimitExceeded { size, limit });
    }
    let fills = (0..size as usize)
        .map(|mut idx| {
            let mut fill = vec![TokenId(0); n];
            for slot in fill.iter_mut().rev() {
                *slot = TokenId(idx % d);
                idx /= d;
            }
            fill
        })
        .collect();
    sweep(model, restriction, fills)
}

/// Number of distinct orderings of a multiset, or `None` on overflow.
pub fn multiset_permutations(items: &[TokenId]) -> Option<u128> {
    let mut sorted = items.to_vec();
    sorted.sort_unstable();
    // build n!/∏ c_i! incrementally as a product of binomials
    let mut total: u128 = 1;
    let mut placed: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        for k in 1..=(j - i) as u128 {
            placed += 1;
            total = total.checked_mul(placed)? / k;
        }
        i = j;
    }
    Some(total)
}

/// Rearranges into the next lexicographic permutation; false after the last.
pub fn next_permutation<T: Ord>(v: &mut [T]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Every distinct ordering of the class's free multiset.
pub fn enumerate_permutation_class(model: &Model, cls: &PermutationClass, limit: u128) -> Result<SweepResult> {
    cls.validate(model)?;
    let size = multiset_permutations(&cls.free_toks).unwrap_or(u128::MAX);
    if size > limit {
        return Err(Error::LimitExceeded { size, limit });
    }
    let mut cur = cls.free_toks.clone();
    cur.sort_unstable();
    let mut fills = vec![cur.clone()];
    while next_permutation(&mut cur) {
        fills.push(cur.clone());
    }
    debug_assert_eq!(fills.len() as u128, size);
    sweep(model, &cls.base, fills)
}

/// A realized quantity that escapes its certified bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Deviation { realized: f64, bound: f64 },
    HeadDeviation { head: usize, realized: f64, bound: f64 },
    FreeMass { head: usize, realized: (f64, f64), bound: (f64, f64) },
    FixedMass { head: usize, realized: (f64, f64), bound: (f64, f64) },
    GreedyVaries { tokens: Vec<TokenId> },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Deviation { realized, bound } => {
                write!(f, "realized logit deviation {realized:e} exceeds W = {bound:e}")
            }
            Violation::HeadDeviation { head, realized, bound } => {
                write!(f, "head {head}: realized deviation {realized:e} exceeds its bound {bound:e}")
            }
            Violation::FreeMass { head, realized, bound } => write!(
                f,
                "head {head}: free mass [{:e}, {:e}] outside [{:e}, {:e}]",
                realized.0, realized.1, bound.0, bound.1
            ),
            Violation::FixedMass { head, realized, bound } => write!(
                f,
                "head {head}: fixed mass [{:e}, {:e}] outside [{:e}, {:e}]",
                realized.0, realized.1, bound.0, bound.1
            ),
            Violation::GreedyVaries { tokens } => {
                write!(f, "certified overwhelmed but greedy output takes {} values", tokens.len())
            }
        }
    }
}

fn above(realized: f64, bound: f64, tol: f64) -> bool {
    realized > bound * (1.0 + tol) + 1e-12
}

fn outside(realized: (f64, f64), lo: f64, hi: f64, tol: f64) -> bool {
    realized.0 < lo - tol || realized.1 > hi + tol
}

/// Every way the exhaustive sweep contradicts the report.
pub fn cross_check(report: &VerificationReport, sweep: &SweepResult, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    if above(sweep.max_pairwise_deviation, report.w, tol) {
        out.push(Violation::Deviation { realized: sweep.max_pairwise_deviation, bound: report.w });
    }
    for (h, head) in report.heads.iter().enumerate() {
        let m = &head.mass;
        if above(sweep.per_head_deviation[h], head.bound, tol) {
            out.push(Violation::HeadDeviation { head: h, realized: sweep.per_head_deviation[h], bound: head.bound });
        }
        let free = sweep.realized_free_mass_range[h];
        if outside(free, m.beta_free_min, m.beta_free_max, tol) {
            out.push(Violation::FreeMass { head: h, realized: free, bound: (m.beta_free_min, m.beta_free_max) });
        }
        let fixed = sweep.realized_fixed_mass_range[h];
        if outside(fixed, m.beta_fix_min, m.beta_fix_max, tol) {
            out.push(Violation::FixedMass { head: h, realized: fixed, bound: (m.beta_fix_min, m.beta_fix_max) });
        }
    }
    if report.verdict == Verdict::Overwhelmed && sweep.greedy_tokens.len() > 1 {
        out.push(Violation::GreedyVaries { tokens: sweep.greedy_tokens.iter().copied().collect() });
    }
    out
}
