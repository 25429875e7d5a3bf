mod common;

use common::*;
use ooc_core::metrics::{self, per_item, per_item_csv};
use ooc_core::{EvalCorpus, EvalItem};

#[test]
fn library_matches_independent_oracles() {
    check_metrics_oracle().assert();
}

#[test]
fn adding_an_exact_reference_never_lowers_a_score() {
    for item in toy_corpus().items() {
        let base = EvalCorpus::new(vec![item.clone()]).unwrap();
        let mut more = item.clone();
        more.refs.push(item.hyp.clone());
        let more = EvalCorpus::new(vec![more]).unwrap();
        assert!(metrics::bleu4(&more) >= metrics::bleu4(&base));
        assert!(metrics::rouge_l(&more) >= metrics::rouge_l(&base));
        assert!(metrics::cider(&more) >= metrics::cider(&base));
        assert!(metrics::meteor(&more) >= metrics::meteor(&base));
    }
}

#[test]
fn scores_ignore_item_order() {
    let toy = toy_corpus();
    let mut items = toy.items().to_vec();
    items.reverse();
    items.swap(1, 4);
    let shuffled = EvalCorpus::new(items).unwrap();
    let a = metrics::evaluate(&toy);
    let b = metrics::evaluate(&shuffled);
    assert_eq!(a.bleu4, b.bleu4);
    assert!((a.cider - b.cider).abs() < 1e-12);
    assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
    assert!((a.meteor - b.meteor).abs() < 1e-12);
}

#[test]
fn word_order_permutation_lowers_meteor() {
    let one = |h: &str| {
        metrics::meteor(
            &EvalCorpus::new(vec![EvalItem { id: "x".into(), hyp: h.into(), refs: vec!["a man walks his dog in the park".into()] }])
                .unwrap(),
        )
    };
    let straight = one("a man walks his dog in the park");
    let swapped = one("in the park a man walks his dog");
    let scrambled = one("park the in dog his walks man a");
    assert!(straight > swapped && swapped > scrambled);
}

#[test]
fn report_and_csv_carry_everything() {
    let toy = toy_corpus();
    let report = metrics::evaluate(&toy);
    assert_eq!(report.normalizer, metrics::NORMALIZER_VERSION);
    let json = serde_json::to_value(&report).unwrap();
    for key in ["bleu4", "cider", "rouge_l", "meteor"] {
        assert!(json[key].is_number());
    }
    let csv = per_item_csv(&per_item(&toy));
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("id,bleu4,cider,rouge_l,meteor\n"));
}

#[test]
fn bleu_hand_count() {
    let (corpus, expected) = bleu_hand_case();
    assert!((metrics::bleu4(&corpus) - expected).abs() < 1e-9);
}
