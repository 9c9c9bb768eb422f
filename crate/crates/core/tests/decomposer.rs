mod support;

use std::collections::BTreeMap;

use concept_lab::conceptor::combine;
use concept_lab::decomposer::{
    debias, edited_terms, generate, manipulate_seeds, single_image_decompose, subset_scan, RemovalOrder,
};
use concept_lab::oracle::{PooledCosine, SimilarityOracle};
use concept_lab::subject::TokenId;
use support::*;

#[test]
fn greedy_removal_contracts_hold() {
    let s = tiny_subject();
    let dec = tiny_decomposition(&s, "gleeb", 1);
    for (seed, tau) in [(1, 0.9), (2, 0.99), (3, 0.5)] {
        for order in [RemovalOrder::AscendingCoefficient, RemovalOrder::DescendingCoefficient] {
            single_image_contracts(&s, &dec, seed, tau, order).unwrap();
        }
    }
    // zero coefficients go in the first pass
    let zeroed = with_zeroed(&s, &dec, &[0, 2]);
    assert_eq!(zeroed.ranked.iter().filter(|r| r.coefficient == 0.0).count(), 2);
    single_image_contracts(&s, &zeroed, 4, 0.99, RemovalOrder::AscendingCoefficient).unwrap();
}

#[test]
fn greedy_result_is_reproducible_and_consistent() {
    let s = tiny_subject();
    let dec = tiny_decomposition(&s, "wump", 2);
    let oracle = PooledCosine::default();
    let a = single_image_decompose(&s, &dec, 7, 0.9, RemovalOrder::AscendingCoefficient, &oracle).unwrap();
    let b = single_image_decompose(&s, &dec, 7, 0.9, RemovalOrder::AscendingCoefficient, &oracle).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.decomposition_id, dec.content_id().unwrap());
    // the last pass removes nothing
    let last = a.trace.iter().filter(|e| e.pass_index == a.passes);
    assert!(a.surviving.is_empty() || last.clone().all(|e| !e.removed));
    let terms: Vec<(TokenId, f64)> = a.surviving.iter().map(|r| (r.token_id, r.coefficient)).collect();
    let reference = generate(&s, &dec, &dec.ranked.iter().map(|r| (r.token_id, r.coefficient)).collect::<Vec<_>>(), &[7]).unwrap();
    let last_image = generate(&s, &dec, &terms, &[7]).unwrap();
    assert_eq!(a.final_similarity, oracle.sim(&reference[0], &last_image[0]));
    assert!(single_image_decompose(&s, &dec, 7, 1.0, RemovalOrder::AscendingCoefficient, &oracle).is_err());
}

#[test]
fn subset_scan_covers_every_subset() {
    let s = tiny_subject();
    let dec = tiny_decomposition(&s, "trell", 3);
    let scan = subset_scan(&s, &dec, 5, &PooledCosine::default()).unwrap();
    assert_eq!(scan.similarities.len(), 1 << dec.ranked.len());
    assert_eq!(scan.similarity_of(&dec.ranked_ids()), Some(1.0));
    let minimal = scan.minimal_subsets(0.999_999);
    assert!(!minimal.is_empty());
    for m in &minimal {
        assert!(scan.similarity_of(m).unwrap() >= 0.999_999);
    }
}

#[test]
fn manipulation_scales_coefficients() {
    let s = tiny_subject();
    let dec = tiny_decomposition(&s, "gleeb", 1);
    let top = dec.ranked[0].token_id;
    let seeds = [3, 4];
    let plain = manipulate_seeds(&s, &dec, &BTreeMap::new(), &seeds).unwrap();
    let unit = manipulate_seeds(&s, &dec, &BTreeMap::from([(top, 1.0)]), &seeds).unwrap();
    assert_eq!(plain, unit);
    let terms = edited_terms(&dec, &BTreeMap::from([(top, 0.5)])).unwrap();
    assert_eq!(terms[0].1, 0.5 * dec.ranked[0].coefficient);
    assert_eq!(&terms[1..], &dec.ranked[1..].iter().map(|r| (r.token_id, r.coefficient)).collect::<Vec<_>>()[..]);
    // the edited images are the ones generated from the scaled terms
    let half = manipulate_seeds(&s, &dec, &BTreeMap::from([(top, 0.5)]), &seeds).unwrap();
    assert_eq!(half, generate(&s, &dec, &terms, &seeds).unwrap());

    for bad in [-1.0, f64::NAN, f64::INFINITY] {
        assert!(edited_terms(&dec, &BTreeMap::from([(top, bad)])).is_err());
    }
    let outside = *dec.candidates.iter().find(|c| dec.coefficient(**c).is_none()).unwrap();
    assert!(edited_terms(&dec, &BTreeMap::from([(outside, 0.5)])).is_err());
}

#[test]
fn debias_rescales_and_reranks() {
    let s = tiny_subject();
    let dec = tiny_decomposition(&s, "zorp", 2);
    let top = dec.ranked[0].token_id;
    let d = debias(&s, &dec, &[top], 0.25).unwrap();
    assert_eq!(d.ranked.len(), dec.ranked.len());
    assert_eq!(d.coefficient(top), Some(0.25 * dec.ranked[0].coefficient));
    for w in d.ranked.windows(2) {
        assert!(w[0].coefficient >= w[1].coefficient);
    }
    let terms: Vec<(TokenId, f64)> = d.ranked.iter().map(|r| (r.token_id, r.coefficient)).collect();
    let w = combine(s.vocab(), &terms).unwrap();
    for (a, b) in w.iter().zip(&d.w_star) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_ne!(d.content_id().unwrap(), dec.content_id().unwrap());
    assert!(debias(&s, &dec, &[top], 1.0).is_err());
    assert!(debias(&s, &dec, &[], 0.5).is_err());
}
