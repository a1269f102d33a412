mod common;

use common::{random_tokens, rng, small_config};
use overwhelm_core::bounds::{
    f_inf_norm_product, logit_bounds, logit_gap, verify_overwhelmed, InputRestriction, Verdict, VerifyOptions,
};
use overwhelm_core::convergence::{logit_envelope, mass_envelope, RepetitionRestriction};
use overwhelm_core::model::{Model, QueryLogits};
use overwhelm_core::oracle::{cross_check, enumerate_designed_space, CROSS_CHECK_TOL, DEFAULT_SPACE_LIMIT};
use overwhelm_core::tensor::Matrix;
use overwhelm_core::toy::{random_model, ToyConfig};
use overwhelm_core::TokenId;
use proptest::prelude::*;
use rand::Rng;

fn two_pass_gap(v: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    v[order[0]] - v[order[1]]
}

#[test]
fn gap_matches_sorted_reference() {
    let mut r = rng(77);
    for _ in 0..100 {
        let n = r.gen_range(2..20);
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
        assert_eq!(logit_gap(&QueryLogits(v.clone())).unwrap(), two_pass_gap(&v));
    }
}

#[test]
fn identity_value_and_unembedding_give_max_abs_entry() {
    let e = Matrix::from_rows(&[vec![0.5, -3.0, 1.0], vec![2.0, 0.0, -2.5]]).unwrap();
    let i = Matrix::identity(3);
    assert_eq!(f_inf_norm_product(&e, &i, &i), 3.0);
}

#[test]
fn large_values_with_flat_attention_are_inconclusive() {
    let cfg = ToyConfig { qk_scale: 0.0, value_scale: 50.0, ..ToyConfig::default() };
    let m = Model::new(random_model(&cfg, 3)).unwrap();
    let r = InputRestriction::new(vec![TokenId(0)], 3, TokenId(1));
    let rep = verify_overwhelmed(&m, &r, &VerifyOptions::default()).unwrap();
    assert_eq!(rep.verdict, Verdict::Inconclusive);
    assert!(rep.w > rep.threshold);
    let sweep = enumerate_designed_space(&m, &r, DEFAULT_SPACE_LIMIT).unwrap();
    assert!(cross_check(&rep, &sweep, CROSS_CHECK_TOL).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn realized_scores_lie_in_the_logit_box(seed in any::<u64>(), n_fix in 0usize..=3, n_free in 1usize..=2) {
        let mut r = rng(seed);
        let cfg = small_config(&mut r);
        let m = Model::new(random_model(&cfg, seed)).unwrap();
        let res = InputRestriction::new(random_tokens(&mut r, cfg.d_vocab, n_fix), n_free, TokenId(r.gen_range(0..cfg.d_vocab)));
        for h in 0..cfg.n_heads {
            let b = logit_bounds(&m, &res, h).unwrap();
            for _ in 0..8 {
                let x = res.sequence(&random_tokens(&mut r, cfg.d_vocab, n_free), m.weights()).unwrap();
                let qpos = x.len() - 1;
                for (k, &t) in x.tokens().iter().enumerate() {
                    let s = m.score(h, x.query(), qpos, t, k);
                    prop_assert!(b.l_min[k] <= s && s <= b.l_max[k]);
                }
            }
        }
    }

    #[test]
    fn repetition_envelope_contains_realized_masses(seed in any::<u64>(), n_fix in 0usize..=6, n_free in 0usize..=3, rep in 0usize..4) {
        let m = Model::new(random_model(&ToyConfig { rope: false, ..ToyConfig::default() }, seed)).unwrap();
        let rr = RepetitionRestriction::new(TokenId(rep), n_free, n_fix + n_free + 1).unwrap();
        let env = mass_envelope(&logit_envelope(&m, TokenId(rep), 0), rr.n_fix(), n_free);
        let res = InputRestriction::new(vec![TokenId(rep); rr.n_fix()], n_free, TokenId(rep));
        let sweep = enumerate_designed_space(&m, &res, DEFAULT_SPACE_LIMIT).unwrap();
        let (flo, fhi) = sweep.realized_free_mass_range[0];
        let (xlo, xhi) = sweep.realized_fixed_mass_range[0];
        prop_assert!(flo >= env.free.0 - 1e-12 && fhi <= env.free.1 + 1e-12);
        prop_assert!(xlo >= env.fixed.0 - 1e-12 && xhi <= env.fixed.1 + 1e-12);
    }
}
