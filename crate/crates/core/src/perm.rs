//! Overwhelming when the free slots hold some permutation of a fixed
//! multiset of tokens.
//!
//! The free-slot exponential mass `Σ_j exp(c_{j,π(j)})` is linear in the
//! permutation matrix, so its extremes over the Birkhoff polytope sit at
//! vertices and one assignment solve per direction gives them exactly.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{self, Assignment, Sense};
use crate::bounds::{
    deviation_from_mass, finish_report, head_value_norm, logit_bounds_over, HeadNorms, HeadReport,
    InputRestriction, SamplePolicy, SoftmaxMassBounds, VerificationReport, VerifyOptions,
};
use crate::error::{Error, Result};
use crate::model::{Model, TokenId};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationClass {
    /// Free-slot multiset, in the order of the representative input.
    pub free_toks: Vec<TokenId>,
    pub base: InputRestriction,
}

impl PermutationClass {
    pub fn new(fixed: Vec<TokenId>, free_toks: Vec<TokenId>, query: TokenId) -> Self {
        let base = InputRestriction::new(fixed, free_toks.len(), query);
        Self { free_toks, base }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.free_toks.len() != self.base.n_free {
            return Err(Error::Restriction(format!(
                "{} free tokens for {} free slots",
                self.free_toks.len(),
                self.base.n_free
            )));
        }
        self.base.validate(model.weights())?;
        self.free_toks.iter().try_for_each(|&t| model.check_token(t))
    }

    pub fn distinct_free(&self) -> Vec<TokenId> {
        let set: BTreeSet<TokenId> = self.free_toks.iter().copied().collect();
        set.into_iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaBounds {
    pub alpha_free_min: f64,
    pub alpha_free_max: f64,
    pub shift: f64,
}

/// Entry `(j, t)` is `exp(c_{j,t} − shift)` for free position `j` and
/// multiset occurrence `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentProblem {
    pub cost: Matrix,
    pub shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpAlpha {
    pub bounds: AlphaBounds,
    /// Free-slot filling attaining the minimum.
    pub argmin: Vec<TokenId>,
    /// Free-slot filling attaining the maximum.
    pub argmax: Vec<TokenId>,
}

/// Raw scores of the query against every multiset occurrence at every free
/// position, plus the fixed-side scores.
struct ClassScores {
    fixed: Vec<f64>,
    /// `n_free × n_free`, rows are positions.
    free: Matrix,
}

impl ClassScores {
    fn new(model: &Model, cls: &PermutationClass, h: usize) -> Self {
        let r = &cls.base;
        let (q, qpos) = (r.query, r.query_pos());
        let mut fixed: Vec<f64> = r
            .fixed
            .iter()
            .enumerate()
            .map(|(k, &t)| model.score(h, q, qpos, t, k))
            .collect();
        fixed.push(model.score(h, q, qpos, q, qpos));
        let n = r.n_free;
        let rows: Vec<Vec<f64>> = r
            .free_positions()
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|pos| cls.free_toks.iter().map(|&t| model.score(h, q, qpos, t, pos)).collect())
            .collect();
        let free = Matrix::from_vec(n, n, rows.into_iter().flatten().collect()).expect("square by construction");
        Self { fixed, free }
    }

    fn shift(&self) -> f64 {
        self.fixed
            .iter()
            .chain(self.free.data())
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn alpha_fix(&self, shift: f64) -> f64 {
        self.fixed.iter().map(|s| (s - shift).exp()).sum()
    }
}

fn check_shift(shift: f64) -> Result<f64> {
    if shift.is_finite() {
        Ok(shift)
    } else {
        Err(Error::Degenerate(format!("score envelope peaks at {shift}")))
    }
}

/// Per-position extremes over the distinct free tokens, positions decoupled.
pub fn naive_alpha(model: &Model, cls: &PermutationClass, h: usize) -> Result<AlphaBounds> {
    cls.validate(model)?;
    let scores = ClassScores::new(model, cls, h);
    let shift = check_shift(scores.shift())?;
    Ok(naive_alpha_from_scores(&scores.free, shift))
}

/// Row-wise min/max of a position × occurrence score matrix, exponentiated
/// after subtracting `shift` and summed in position order.
pub fn naive_alpha_from_scores(scores: &Matrix, shift: f64) -> AlphaBounds {
    let (mut lo, mut hi) = (0.0, 0.0);
    for j in 0..scores.rows() {
        let row = scores.row(j);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lo += (min - shift).exp();
        hi += (max - shift).exp();
    }
    AlphaBounds {
        alpha_free_min: lo,
        alpha_free_max: hi,
        shift,
    }
}

/// Assignment extremes of `Σ_j exp(scores[j, π(j)] − shift)`.
pub fn lp_alpha_from_scores(scores: &Matrix, shift: f64) -> Result<(AlphaBounds, Assignment, Assignment)> {
    let mut cost = scores.clone();
    cost.data_mut().iter_mut().for_each(|c| *c = (*c - shift).exp());
    let lo = assignment::solve(&cost, Sense::Minimize)?;
    let hi = assignment::solve(&cost, Sense::Maximize)?;
    let alpha = AlphaBounds {
        alpha_free_min: lo.value,
        alpha_free_max: hi.value,
        shift,
    };
    Ok((alpha, lo, hi))
}

pub fn assignment_problem(model: &Model, cls: &PermutationClass, h: usize) -> Result<AssignmentProblem> {
    cls.validate(model)?;
    let scores = ClassScores::new(model, cls, h);
    let shift = check_shift(scores.shift())?;
    let mut cost = scores.free;
    cost.data_mut().iter_mut().for_each(|c| *c = (*c - shift).exp());
    Ok(AssignmentProblem { cost, shift })
}

/// Exact extremes of the free-slot exponential mass over all orderings of
/// the multiset.
pub fn lp_alpha(model: &Model, cls: &PermutationClass, h: usize) -> Result<LpAlpha> {
    if cls.base.n_free == 0 {
        return Err(Error::Restriction("assignment bound needs at least one free slot".into()));
    }
    cls.validate(model)?;
    let scores = ClassScores::new(model, cls, h);
    let shift = check_shift(scores.shift())?;
    let (bounds, lo, hi) = lp_alpha_from_scores(&scores.free, shift)?;
    let fill = |cols: &[usize]| cols.iter().map(|&c| cls.free_toks[c]).collect();
    Ok(LpAlpha {
        bounds,
        argmin: fill(&lo.col_of_row),
        argmax: fill(&hi.col_of_row),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Lp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermHeadDetails {
    pub head: usize,
    pub naive: AlphaBounds,
    pub lp: Option<LpAlpha>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermReport {
    pub method: Method,
    #[serde(flatten)]
    pub report: VerificationReport,
    /// Both alpha routes per head, whichever one drove the verdict.
    pub alpha_comparison: Vec<PermHeadDetails>,
}

/// Decides overwhelming over the permutation class `cls`. `PTP` is taken on
/// the representative ordering in `cls.free_toks` unless `opts` overrides it.
pub fn verify_overwhelmed_perm(
    model: &Model,
    cls: &PermutationClass,
    method: Method,
    opts: &VerifyOptions,
) -> Result<PermReport> {
    cls.validate(model)?;
    let r = &cls.base;
    let fill = match &opts.sample {
        SamplePolicy::QueryFill => cls.free_toks.clone(),
        SamplePolicy::Filler(f) => {
            let (mut a, mut b) = (f.clone(), cls.free_toks.clone());
            a.sort_unstable();
            b.sort_unstable();
            if a != b {
                return Err(Error::Restriction(
                    "sample filler must be an ordering of the free multiset".into(),
                ));
            }
            f.clone()
        }
    };
    let x = r.sequence(&fill, model.weights())?;
    let distinct = cls.distinct_free();
    let fixed_side = r.fixed_side_tokens();

    let per_head = (0..model.n_heads())
        .into_par_iter()
        .map(|h| -> Result<(HeadReport, PermHeadDetails)> {
            let scores = ClassScores::new(model, cls, h);
            let shift = check_shift(scores.shift())?;
            let alpha_fix = scores.alpha_fix(shift);
            let (naive, lp) = if r.n_free == 0 {
                let zero = AlphaBounds { alpha_free_min: 0.0, alpha_free_max: 0.0, shift };
                (zero, None)
            } else {
                (naive_alpha(model, cls, h)?, Some(lp_alpha(model, cls, h)?))
            };
            let chosen = match (method, &lp) {
                (Method::Lp, Some(lp)) => lp.bounds,
                _ => naive,
            };
            let mass = SoftmaxMassBounds::from_alphas(
                alpha_fix,
                alpha_fix,
                chosen.alpha_free_min,
                chosen.alpha_free_max,
                shift,
            );
            let norms = HeadNorms {
                fixed: head_value_norm(model, h, &fixed_side),
                free: head_value_norm(model, h, &distinct),
            };
            let bound = deviation_from_mass(&mass, &norms);
            let logits = logit_bounds_over(model, r, h, &distinct)?;
            Ok((
                HeadReport { head: h, logits, mass, norms, bound },
                PermHeadDetails { head: h, naive, lp },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (heads, alpha_comparison): (Vec<_>, Vec<_>) = per_head.into_iter().unzip();
    let report = finish_report(model, x, heads, opts.slack)?;
    Ok(PermReport {
        method,
        report,
        alpha_comparison,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::Verdict;
    use crate::toy::{random_model, ToyConfig};

    fn toks(ids: &[usize]) -> Vec<TokenId> {
        ids.iter().map(|&t| TokenId(t)).collect()
    }

    #[test]
    fn identical_free_tokens_pin_alpha() {
        let m = Model::new(random_model(&ToyConfig::default(), 21)).unwrap();
        let cls = PermutationClass::new(toks(&[0, 1]), toks(&[2, 2, 2]), TokenId(3));
        let naive = naive_alpha(&m, &cls, 0).unwrap();
        let lp = lp_alpha(&m, &cls, 0).unwrap().bounds;
        assert_eq!(naive.alpha_free_min, naive.alpha_free_max);
        assert_eq!(naive, lp);
    }

    #[test]
    fn two_by_two_scores() {
        let scores = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (alpha, lo, hi) = lp_alpha_from_scores(&scores, 0.0).unwrap();
        assert_eq!(alpha.alpha_free_min, 2.0);
        assert!((alpha.alpha_free_max - 5.436563656918091).abs() < 1e-12);
        assert_eq!((lo.col_of_row, hi.col_of_row), (vec![0, 1], vec![1, 0]));
        let naive = naive_alpha_from_scores(&scores, 0.0);
        assert_eq!(naive.alpha_free_min, 2.0);
        assert_eq!(naive.alpha_free_max, alpha.alpha_free_max);
    }

    #[test]
    fn lp_on_empty_class_is_refused() {
        let m = Model::new(random_model(&ToyConfig::default(), 2)).unwrap();
        let cls = PermutationClass::new(toks(&[0]), vec![], TokenId(1));
        assert!(lp_alpha(&m, &cls, 0).is_err());
        let rep = verify_overwhelmed_perm(&m, &cls, Method::Lp, &VerifyOptions::default()).unwrap();
        assert_eq!(rep.report.w, 0.0);
    }

    #[test]
    fn filler_outside_the_class_is_refused() {
        let m = Model::new(random_model(&ToyConfig::default(), 6)).unwrap();
        let cls = PermutationClass::new(toks(&[0]), toks(&[1, 2]), TokenId(3));
        let ok = VerifyOptions { sample: SamplePolicy::Filler(toks(&[2, 1])), ..VerifyOptions::default() };
        assert!(verify_overwhelmed_perm(&m, &cls, Method::Lp, &ok).is_ok());
        let bad = VerifyOptions { sample: SamplePolicy::Filler(toks(&[1, 1])), ..VerifyOptions::default() };
        assert!(matches!(
            verify_overwhelmed_perm(&m, &cls, Method::Lp, &bad),
            Err(Error::Restriction(_))
        ));
    }

    #[test]
    fn singleton_class_reports_positive_ptp() {
        let m = Model::new(random_model(&ToyConfig::default(), 6)).unwrap();
        let cls = PermutationClass::new(toks(&[0, 3]), toks(&[1]), TokenId(2));
        let rep = verify_overwhelmed_perm(&m, &cls, Method::Lp, &VerifyOptions::default()).unwrap();
        assert!(rep.report.ptp > 0.0);
        if rep.report.verdict == Verdict::Overwhelmed {
            assert!(rep.report.w_guarded < rep.report.threshold);
        }
    }

    #[test]
    fn mismatched_class_rejected() {
        let m = Model::new(random_model(&ToyConfig::default(), 6)).unwrap();
        let mut cls = PermutationClass::new(toks(&[0]), toks(&[1, 2]), TokenId(2));
        cls.base.n_free = 3;
        assert!(naive_alpha(&m, &cls, 0).is_err());
        let cls = PermutationClass::new(toks(&[0]), toks(&[1, 9]), TokenId(2));
        assert!(naive_alpha(&m, &cls, 0).is_err());
    }
}
