use proptest::prelude::*;

mod common;

use common::oracle::{self, corpus, pairs, toy_corpus};
use nnfc_core::metrics::{bleu4, cider_d, clipped_counts, evaluate, lcs_len, rouge_l};

#[test]
fn library_matches_oracle_on_ten_sample_corpus() {
    let p = toy_corpus();
    let c = corpus(&p);
    let (b, r, cd) = (bleu4(&c).unwrap(), rouge_l(&c).unwrap(), cider_d(&c).unwrap());
    println!("toy corpus: BLEU-4 {b:.6}, ROUGE-L {r:.6}, CIDEr-D {cd:.6}");
    assert!((b - oracle::bleu(&p)).abs() < 1e-6);
    assert!((r - oracle::rouge(&p)).abs() < 1e-6);
    assert!((cd - oracle::cider(&p)).abs() < 1e-6);
    assert!(b > 0.0 && r > 0.0 && cd > 0.0);
}

#[test]
fn hand_derived_examples() {
    let identity = corpus(&pairs(&[("a b c d e", &["a b c d e"]), ("f g h i", &["f g h i"])]));
    assert_eq!(bleu4(&identity).unwrap(), 1.0);
    assert_eq!(rouge_l(&identity).unwrap(), 1.0);

    let bp = corpus(&pairs(&[("a b c d", &["a b c d e"])]));
    assert_eq!(format!("{:.4}", bleu4(&bp).unwrap()), "0.7788");
    assert!((bleu4(&bp).unwrap() - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);

    let r = corpus(&pairs(&[("a b c", &["a x c"])]));
    assert!((rouge_l(&r).unwrap() - 2.0 / 3.0).abs() < 1e-12);

    let single = corpus(&pairs(&[("a b c", &["a b c"])]));
    assert_eq!(cider_d(&single).unwrap(), 0.0);

    let no_overlap = pairs(&[("p q r", &["a b c"]), ("d e f", &["d e f"])]);
    let c = corpus(&no_overlap);
    // only the second sample contributes; the first shares nothing with its references
    let second_only = oracle::cider(&no_overlap) * 2.0;
    assert!((cider_d(&c).unwrap() * 2.0 - second_only).abs() < 1e-12);

    let disjoint = pairs(&[("a b c d e", &["a b c d e"]), ("v w x y z", &["v w x y z"])]);
    let got = cider_d(&corpus(&disjoint)).unwrap();
    // every n-gram has df 1 of N = 2, so each cosine is exactly 1: score 10
    assert!((got - oracle::cider(&disjoint)).abs() < 1e-12);
    assert!((got - 10.0).abs() < 1e-12);

    let smoothed = corpus(&pairs(&[("a c e g", &["a b c d e f g h"])]));
    assert!(bleu4(&smoothed).unwrap() < 1e-2);
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 1..9)
}

fn sample() -> impl Strategy<Value = (Vec<String>, Vec<Vec<String>>)> {
    (sentence(), prop::collection::vec(sentence(), 1..4))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn lcs_matches_recursive_oracle(a in sentence(), b in sentence()) {
        prop_assert_eq!(lcs_len(&a, &b), oracle::lcs(&a, &b));
    }

    #[test]
    fn scores_match_oracle_and_stay_bounded(p in prop::collection::vec(sample(), 2..8)) {
        let c = corpus(&p);
        let s = evaluate(&c).unwrap();
        prop_assert!((s.bleu4 - oracle::bleu(&p)).abs() < 1e-9);
        prop_assert!((s.rouge_l - oracle::rouge(&p)).abs() < 1e-9);
        prop_assert!((s.cider_d - oracle::cider(&p)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&s.bleu4));
        prop_assert!((0.0..=1.0).contains(&s.rouge_l));
        prop_assert!((0.0..=10.0 + 1e-9).contains(&s.cider_d));
    }

    #[test]
    fn sample_order_does_not_matter(p in prop::collection::vec(sample(), 2..8), rot in 0usize..8) {
        let mut q = p.clone();
        let k = rot % q.len();
        q.rotate_left(k);
        let (a, b) = (evaluate(&corpus(&p)).unwrap(), evaluate(&corpus(&q)).unwrap());
        prop_assert!((a.bleu4 - b.bleu4).abs() < 1e-12);
        prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
        prop_assert!((a.cider_d - b.cider_d).abs() < 1e-9);
    }

    #[test]
    fn appending_a_reference_ngram_never_lowers_matches(
        (cand, refs) in sample(),
        pick in 0usize..100,
        n in 1usize..=4,
    ) {
        let r = &refs[pick % refs.len()];
        prop_assume!(r.len() >= n);
        let start = pick % (r.len() - n + 1);
        let mut longer = cand.clone();
        longer.extend_from_slice(&r[start..start + n]);
        for m in 1..=4 {
            prop_assert!(clipped_counts(&longer, &refs, m).0 >= clipped_counts(&cand, &refs, m).0);
        }
    }
}
