//! Property tests over the pipeline's invariants.

use std::collections::BTreeSet;

use adbert::encoder::{init_params, EncoderConfig};
use adbert::eval::{auc, confusion, split_dataset};
use adbert::finetune::{cases_per_batch, predict_patient, stratified_batches, PatientInput};
use adbert::preprocess::{clean, deidentify, phi_spans, preprocess_note};
use adbert::rng;
use adbert::tokenizer::{build_vocab, decode, encode_section_ids, normalize, tokenize};
use proptest::prelude::*;

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..6, n)
                .prop_map(|v| v.into_iter().map(|x| f64::from(x) / 5.0).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn both_classes(labels: &[bool]) -> bool {
    labels.iter().any(|&y| y) && labels.iter().any(|&y| !y)
}

proptest! {
    #[test]
    fn auc_bounded_and_antisymmetric((scores, labels) in scored()) {
        prop_assume!(both_classes(&labels));
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<bool> = labels.iter().map(|y| !y).collect();
        prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transform((scores, labels) in scored()) {
        prop_assume!(both_classes(&labels));
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).tanh()).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&squashed, &labels).unwrap());
    }

    #[test]
    fn confusion_partitions_the_sample((scores, labels) in scored(), t in 0.0f64..1.0) {
        let c = confusion(&scores, &labels, t).unwrap();
        prop_assert_eq!(c.total(), scores.len());
        prop_assert_eq!(c.tp + c.fn_, labels.iter().filter(|&&y| y).count());
    }

    #[test]
    fn split_is_a_disjoint_cover(labels in prop::collection::vec(prop::bool::weighted(0.2), 20..200), seed in any::<u64>()) {
        prop_assume!(labels.iter().filter(|&&y| y).count() >= 5 && labels.iter().filter(|&&y| !y).count() >= 5);
        let plan = split_dataset(&labels, seed).unwrap();
        let all: BTreeSet<usize> = plan.train.iter().chain(&plan.validation).chain(&plan.test).copied().collect();
        prop_assert_eq!(all.len(), labels.len());
        prop_assert_eq!(plan.len(), labels.len());
        prop_assert_eq!(plan, split_dataset(&labels, seed).unwrap());
    }

    #[test]
    fn sampler_batches_hold_k_cases(n_cases in 1usize..20, n_controls in 20usize..200, b in 2usize..9, seed in any::<u64>()) {
        let labels: Vec<bool> = (0..n_cases + n_controls).map(|i| i < n_cases).collect();
        let mut r = rng::stream(seed, "prop-sampler");
        let plan = stratified_batches(&labels, b, &mut r).unwrap();
        let p = n_cases as f64 / labels.len() as f64;
        prop_assert_eq!(plan.k, cases_per_batch(b, p));
        prop_assert!(plan.k >= 1 && plan.k < b);
        for batch in &plan.batches {
            prop_assert_eq!(batch.len(), b);
            prop_assert_eq!(batch.iter().filter(|&&i| labels[i]).count(), plan.k);
        }
    }

    #[test]
    fn clean_is_ascii_and_idempotent(raw in "\\PC{0,80}") {
        let c = clean(&raw);
        prop_assert!(c.is_ascii());
        prop_assert!(!c.contains("  "));
        prop_assert_eq!(clean(&c), c);
    }

    #[test]
    fn deidentify_leaves_no_detectable_phi(
        pieces in prop::collection::vec("Dr\\. [A-Z][a-z]{2,6}|[0-9]{3}-[0-9]{3}-[0-9]{4}|[0-9]{2}/[0-9]{2}/[0-9]{4}|memory loss|\\.", 0..12),
    ) {
        let raw = pieces.join(" ");
        prop_assert!(phi_spans(&deidentify(&raw)).is_empty());
        for s in preprocess_note(&raw) {
            prop_assert!(!s.text.trim().is_empty());
        }
    }

    #[test]
    fn tokenizer_round_trips_known_words(words in prop::collection::vec("[a-z]{1,8}", 1..12)) {
        let text = words.join(" ");
        let vocab = build_vocab(&[text.as_str()], 4096, 1).unwrap();
        let ids = tokenize(&text, &vocab);
        prop_assert_eq!(decode(&ids, &vocab).unwrap(), normalize(&text));
    }

    #[test]
    fn pooling_ignores_order_and_duplicates(
        sections in prop::collection::vec(prop::collection::vec(5u32..40, 0..6), 1..6),
        dup in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let cfg = EncoderConfig::tiny(40);
        let params = init_params(&cfg, seed).unwrap();
        let seqs: Vec<_> = sections.into_iter().map(|s| encode_section_ids(s, cfg.max_len)).collect();
        let base = PatientInput { patient_id: "P".into(), sections: seqs.clone(), label: false };
        let mut other = base.clone();
        other.sections.reverse();
        other.sections.push(seqs[dup.index(seqs.len())].clone());
        let a = predict_patient(&params, &base).unwrap();
        prop_assert_eq!(a.to_bits(), predict_patient(&params, &other).unwrap().to_bits());
    }
}
