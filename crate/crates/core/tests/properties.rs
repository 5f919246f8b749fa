use proptest::prelude::*;

use fcc::autodiff::Tensor;
use fcc::corpus::PairSampler;
use fcc::eval::{ranking, retrieval_from_scores, DEFAULT_KS};
use fcc::inspect::{normalize_min_max, specificity_scores};
use fcc::training::direct_score;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_monotone_and_ranks_are_permutations(m in 10usize..24, values in prop::collection::vec(0u8..5, 24 * 24)) {
        let scores: Vec<f32> = values[..m * m].iter().map(|&v| f32::from(v)).collect();
        let r = retrieval_from_scores(&Tensor::new([m, m], scores.clone()).unwrap(), &DEFAULT_KS).unwrap();
        prop_assert!(r.is_consistent());
        prop_assert!(r.caption_to_figure.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.figure_to_caption.windows(2).all(|w| w[0] <= w[1]));
        for q in 0..m {
            let mut order = ranking(&scores[q * m..(q + 1) * m]);
            order.sort_unstable();
            prop_assert_eq!(order, (0..m).collect::<Vec<_>>());
        }
    }

    #[test]
    fn every_full_batch_is_balanced(records in 2usize..200, seed in any::<u64>(), epoch in 0u64..5) {
        let sampler = PairSampler::new((0..records).collect(), 32, seed).unwrap();
        let batches = sampler.epoch(epoch);
        let mut positives = 0;
        for batch in &batches {
            if batch.len() == 32 {
                prop_assert_eq!((batch.positives(), batch.negatives()), (16, 16));
            }
            for pair in &batch.pairs {
                prop_assert!(pair.figure < records && pair.caption < records);
            }
            positives += batch.positives();
        }
        prop_assert_eq!(positives, records);
    }

    #[test]
    fn specificity_lies_in_the_unit_interval(docs in prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 2..6)) {
        let docs: Vec<Vec<String>> = docs.iter().map(|d| d.iter().map(|c| format!("kg:{c}")).collect()).collect();
        let s = specificity_scores(&docs);
        prop_assert_eq!(s.len(), docs.len());
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn min_max_normalization_spans_zero_to_one(values in prop::collection::vec(-100.0f32..100.0, 1..50)) {
        let n = normalize_min_max(&values);
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        let distinct = values.iter().any(|&v| v != values[0]);
        prop_assert_eq!(n.contains(&1.0), distinct);
    }

    #[test]
    fn direct_score_of_distributions_is_bounded(a in prop::collection::vec(0.0f32..1.0, 4), b in prop::collection::vec(0.0f32..1.0, 4)) {
        let norm = |v: &[f32]| {
            let s: f32 = v.iter().sum::<f32>() + 1e-3;
            v.iter().map(|x| (x + 2.5e-4) / s).collect::<Vec<_>>()
        };
        let score = direct_score(&norm(&a), &norm(&b)).unwrap();
        prop_assert!((0.0..=1.0 + 1e-6).contains(&score));
    }
}
