use std::collections::BTreeMap;

use poore_core::data::{TokenSequence, Vocabulary, CLS, MASK, PAD};
use poore_core::keywords::{
    context_mask, keyword_mask, select_keywords, token_importance, ImportanceAccumulator, KeywordCriterion, KeywordSet,
    MaskingConfig,
};
use poore_core::seed::rng_from_seed;
use proptest::prelude::*;
use rand::Rng;

const V: u32 = 40;

fn corpus(seed: u64, n: usize) -> (Vec<TokenSequence>, Vec<Vec<f64>>, Vec<f64>) {
    let vocab = Vocabulary::new(V).unwrap();
    let mut rng = rng_from_seed(seed);
    let mut seqs = Vec::new();
    let mut att = Vec::new();
    let mut w = Vec::new();
    for _ in 0..n {
        let len = rng.gen_range(1..12);
        let mut ids = vec![CLS];
        ids.extend((0..len).map(|_| rng.gen_range(3..V)));
        ids.extend(std::iter::repeat_n(PAD, rng.gen_range(0..3)));
        let raw: Vec<f64> = (0..ids.len()).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        att.push(raw.into_iter().map(|a| a / total).collect());
        seqs.push(TokenSequence::new(ids, &vocab).unwrap());
        w.push(rng.gen::<f64>());
    }
    (seqs, att, w)
}

/// Per-token, per-example, per-position loop.
fn importance_loops(seqs: &[TokenSequence], att: &[Vec<f64>], w: &[f64]) -> BTreeMap<u32, f64> {
    let mut out = BTreeMap::new();
    for v in 3..V {
        let mut num = 0.0;
        let mut n = 0usize;
        for (k, s) in seqs.iter().enumerate() {
            let mut inner = 0.0;
            for (i, &id) in s.ids().iter().enumerate() {
                if id == v {
                    inner += att[k][i];
                    n += 1;
                }
            }
            num += inner * w[k];
        }
        if n > 0 {
            out.insert(v, num / n as f64);
        }
    }
    out
}

#[test]
fn importance_matches_triple_loop() {
    let (seqs, att, w) = corpus(11, 500);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let got = token_importance(&refs, &att, &w, KeywordCriterion::MahaWeighted).unwrap();
    let want = importance_loops(&seqs, &att, &w);
    assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
    for (v, x) in &want {
        assert!((got[v] - x).abs() < 1e-10, "token {v}");
    }
    let ones = vec![1.0; w.len()];
    let base = token_importance(&refs, &att, &[], KeywordCriterion::BaselineUnweighted).unwrap();
    for (v, x) in importance_loops(&seqs, &att, &ones) {
        assert!((base[&v] - x).abs() < 1e-10);
    }
}

#[test]
fn repeated_token_is_averaged_over_occurrences() {
    let vocab = Vocabulary::new(16).unwrap();
    let s = TokenSequence::new(vec![CLS, 7, 5, 7], &vocab).unwrap();
    let imp = token_importance(&[&s], &[vec![0.4, 0.1, 0.2, 0.3]], &[1.0], KeywordCriterion::MahaWeighted).unwrap();
    assert!((imp[&7] - 0.2).abs() < 1e-15);
    assert!(!imp.contains_key(&CLS));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constant_weight_gives_identical_rankings(seed in any::<u64>(), c in 0.01f64..1.0, m in 1usize..20) {
        let (seqs, att, _) = corpus(seed, 80);
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let w = vec![c; seqs.len()];
        let a = token_importance(&refs, &att, &w, KeywordCriterion::MahaWeighted).unwrap();
        let b = token_importance(&refs, &att, &w, KeywordCriterion::BaselineUnweighted).unwrap();
        let m = m.min(a.len());
        let ka = select_keywords(&a, m, KeywordCriterion::MahaWeighted).unwrap();
        let kb = select_keywords(&b, m, KeywordCriterion::BaselineUnweighted).unwrap();
        prop_assert_eq!(ka.ranked, kb.ranked);
    }

    #[test]
    fn importance_ignores_order_and_batching(seed in any::<u64>(), cut in 1usize..59) {
        let (seqs, att, w) = corpus(seed, 60);
        let mut whole = ImportanceAccumulator::default();
        for k in 0..seqs.len() {
            whole.add(&seqs[k], &att[k], w[k]);
        }
        let mut left = ImportanceAccumulator::default();
        let mut right = ImportanceAccumulator::default();
        for k in (0..seqs.len()).rev() {
            if k < cut { left.add(&seqs[k], &att[k], w[k]) } else { right.add(&seqs[k], &att[k], w[k]) }
        }
        right.merge(&left);
        let (a, b) = (whole.finish(), right.finish());
        prop_assert_eq!(a.len(), b.len());
        for (v, x) in &a {
            prop_assert!((x - b[v]).abs() < 1e-12);
        }
    }

    #[test]
    fn context_mask_invariants(seed in any::<u64>(), p in 0.0f64..=1.0, protect in any::<bool>()) {
        let (seqs, _, _) = corpus(seed, 30);
        let k = KeywordSet::new(vec![3, 4, 5, 6, 7], BTreeMap::new(), KeywordCriterion::MahaWeighted);
        let cfg = MaskingConfig { p_mask: p, protect_keywords: protect, ..MaskingConfig::default() };
        let mut rng = rng_from_seed(seed);
        for x in &seqs {
            let y = context_mask(x, &k, &cfg, &mut rng);
            prop_assert_eq!(y.len(), x.len());
            for (&a, &b) in x.ids().iter().zip(y.ids()) {
                if Vocabulary::is_reserved(a) || (protect && k.contains(a)) {
                    prop_assert_eq!(a, b);
                } else {
                    prop_assert!(b == a || b == MASK);
                }
            }
        }
    }

    #[test]
    fn keyword_mask_records_every_occurrence(seed in any::<u64>()) {
        let (seqs, _, _) = corpus(seed, 30);
        let k = KeywordSet::new(vec![3, 9, 12], BTreeMap::new(), KeywordCriterion::MahaWeighted);
        for x in &seqs {
            let m = keyword_mask(x, &k);
            let expected: Vec<usize> = x.ids().iter().enumerate().filter(|(_, id)| k.contains(**id)).map(|(i, _)| i).collect();
            prop_assert_eq!(&m.positions, &expected);
            for (&p, &t) in m.positions.iter().zip(&m.targets) {
                prop_assert_eq!(x.ids()[p], t);
                prop_assert_eq!(m.input.ids()[p], MASK);
            }
        }
    }
}

#[test]
fn mask_rate_and_keyword_protection() {
    let vocab = Vocabulary::new(V).unwrap();
    let k = KeywordSet::new(vec![3, 4, 5], BTreeMap::new(), KeywordCriterion::MahaWeighted);
    let cfg = MaskingConfig { p_mask: 0.37, ..MaskingConfig::default() };
    let mut rng = rng_from_seed(5);
    let (mut context, mut masked) = (0usize, 0usize);
    while context < 100_000 {
        let mut ids = vec![CLS];
        ids.extend((0..16).map(|_| rng.gen_range(3..V)));
        let x = TokenSequence::new(ids, &vocab).unwrap();
        let y = context_mask(&x, &k, &cfg, &mut rng);
        for (&a, &b) in x.ids().iter().zip(y.ids()) {
            if k.contains(a) {
                assert_eq!(a, b);
            } else if a != CLS {
                context += 1;
                masked += usize::from(b == MASK);
            }
        }
    }
    let rate = masked as f64 / context as f64;
    assert!((rate - 0.37).abs() < 0.02, "{rate}");
}

#[test]
fn mask_decisions_are_pairwise_uncorrelated() {
    let vocab = Vocabulary::new(V).unwrap();
    let x = TokenSequence::new(vec![CLS, 20, 21, 22, 23, 24, 25], &vocab).unwrap();
    let cfg = MaskingConfig { p_mask: 0.5, ..MaskingConfig::default() };
    let mut rng = rng_from_seed(9);
    let draws: Vec<Vec<f64>> = (0..10_000)
        .map(|_| {
            context_mask(&x, &KeywordSet::empty(), &cfg, &mut rng).ids()[1..]
                .iter()
                .map(|&t| f64::from(u8::from(t == MASK)))
                .collect()
        })
        .collect();
    let n = draws.len() as f64;
    for i in 0..6 {
        for j in i + 1..6 {
            let mi = draws.iter().map(|d| d[i]).sum::<f64>() / n;
            let mj = draws.iter().map(|d| d[j]).sum::<f64>() / n;
            let cov = draws.iter().map(|d| (d[i] - mi) * (d[j] - mj)).sum::<f64>() / n;
            let corr = cov / (mi * (1.0 - mi) * mj * (1.0 - mj)).sqrt();
            assert!(corr.abs() < 0.05, "{i},{j}: {corr}");
        }
    }
}

#[test]
fn extreme_mask_probabilities() {
    let vocab = Vocabulary::new(V).unwrap();
    let x = TokenSequence::new(vec![CLS, 3, 20, 21, PAD], &vocab).unwrap();
    let k = KeywordSet::new(vec![3], BTreeMap::new(), KeywordCriterion::MahaWeighted);
    let mut rng = rng_from_seed(1);
    let none = MaskingConfig { p_mask: 0.0, ..MaskingConfig::default() };
    assert_eq!(context_mask(&x, &k, &none, &mut rng), x);
    let all = MaskingConfig { p_mask: 1.0, ..MaskingConfig::default() };
    assert_eq!(context_mask(&x, &k, &all, &mut rng).ids(), &[CLS, 3, MASK, MASK, PAD]);
}
