mod support;

use concept_lab::conceptor::{
    build_pseudo_tokens, combine, decompose, sparsity_loss, train_coefficients, CoefficientMlp, Decomposition,
    DecompositionConfig, Objective,
};
use concept_lab::oracle::PooledCosine;
use concept_lab::subject::NoiseSchedule;
use ndarray::Array1;
use proptest::prelude::*;
use support::*;

#[test]
fn gradients_match_central_differences() {
    let summary = gradient_check(8, 16, 8, 5).unwrap();
    println!("{summary}");
    // a second instance with a wider MLP
    gradient_check(8, 16, 32, 6).unwrap();
}

#[test]
fn linear_stub_reaches_least_squares_optimum() {
    let out = linear_oracle(5000, 21);
    println!("optimum {:.6} learned {:.6} initial {:.3}", out.optimum, out.learned, out.initial);
    // the reducible part must be large for the comparison to mean anything
    assert!(out.initial > 10.0 * out.optimum);
    // and the optimum must be a nonnegative token combination
    assert!(out.cone_optimum <= out.optimum * (1.0 + 1e-4));
    assert!(out.ratio() <= 1.01, "ratio {}", out.ratio());
    assert!(out.learned >= out.optimum * (1.0 - 1e-12));
}

#[test]
fn linear_stub_converges_on_every_instance() {
    for seed in 21..27 {
        let out = linear_oracle(20_000, seed);
        assert!(out.ratio() <= 1.01, "seed {seed}: ratio {}", out.ratio());
    }
}

#[test]
fn linear_stub_early_stop_is_far_from_optimum() {
    // the check above is not met trivially: a few steps are not enough
    let out = linear_oracle(20, 21);
    assert!(out.ratio() > 1.5, "ratio {}", out.ratio());
}

#[test]
fn decomposition_is_deterministic_and_consistent() {
    let s = tiny_subject();
    let a = tiny_decomposition(&s, "gleeb", 3);
    let b = tiny_decomposition(&s, "gleeb", 3);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let c = tiny_decomposition(&s, "gleeb", 4);
    assert_ne!(a.content_id().unwrap(), c.content_id().unwrap());

    a.verify_against(&s).unwrap();
    assert_eq!(a.ranked.len(), 4);
    assert!(!a.candidates.contains(&s.vocab().id("gleeb").unwrap()));
    assert!(!a.candidates.contains(&s.vocab().null_id()));
    assert_eq!(a.training_log.steps.len(), 20);
    assert_eq!(a.training_log.validations.len(), 2);
    let best = a.training_log.validations.iter().map(|v| v.score).fold(f64::MIN, f64::max);
    assert_eq!(a.training_log.selected_score, Some(best));

    // w* is the combination of the ranked tokens; w*_N of all candidates
    let mlp = CoefficientMlp::try_from(&a.mlp).unwrap();
    let x = concept_lab::conceptor::candidate_matrix(s.vocab(), &a.candidates).unwrap();
    let alpha = mlp.coefficients(x.view()).unwrap();
    let mut full = Array1::<f64>::zeros(s.vocab().dim());
    for (i, &id) in a.candidates.iter().enumerate() {
        full.scaled_add(alpha[i], &s.vocab().embedding(id));
    }
    for (u, v) in full.iter().zip(&a.w_star_full) {
        assert!((u - v).abs() < 1e-12);
    }
    let mut top: Vec<(usize, f64)> = alpha.iter().copied().enumerate().collect();
    top.sort_by(|p, q| q.1.total_cmp(&p.1).then(a.candidates[p.0].cmp(&a.candidates[q.0])));
    let top_ids: Vec<_> = top.iter().take(4).map(|(i, _)| a.candidates[*i]).collect();
    assert_eq!(top_ids, a.ranked_ids());

    // save and load round trip
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.json");
    a.save(&p).unwrap();
    assert_eq!(Decomposition::load(&p).unwrap(), a);
}

#[test]
fn decomposition_input_errors() {
    let s = tiny_subject();
    let oracle = PooledCosine::default();
    let run = |cfg: DecompositionConfig, concept: &str| decompose(&s, concept, &cfg, &oracle, &mut |_, _| {});
    let field = |r: concept_lab::Result<Decomposition>| match r {
        Err(concept_lab::Error::Invalid { field, .. }) => field,
        other => panic!("expected a validation error, got {:?}", other.map(|d| d.concept)),
    };
    assert_eq!(field(run(DecompositionConfig { n: 500, ..tiny_config(1) }, "gleeb")), "n");
    assert_eq!(field(run(DecompositionConfig { n: 0, ..tiny_config(1) }, "gleeb")), "n");
    assert_eq!(field(run(DecompositionConfig { batch: 10, ..tiny_config(1) }, "gleeb")), "corpus_size");
    assert_eq!(field(run(DecompositionConfig { top_m: Some(2), ..tiny_config(1) }, "gleeb")), "n");
    assert!(matches!(run(tiny_config(1), "nothing"), Err(concept_lab::Error::UnknownToken(_))));
}

#[test]
fn top_m_filter_keeps_the_lowest_loss_tokens() {
    let s = tiny_subject();
    let cfg = DecompositionConfig { top_m: Some(10), ..tiny_config(2) };
    let d = decompose(&s, "wump", &cfg, &PooledCosine::default(), &mut |_, _| {}).unwrap();
    // the concept token may be filtered in and is then dropped
    assert!(d.candidates.len() == 10 || d.candidates.len() == 9);
    assert!(d.candidates.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn zero_lambda_and_zero_coefficients_are_handled() {
    let vocab = plain_vocab(6, 4, 9);
    let cands = candidates(&vocab);
    let model = LinearStub {
        a: ndarray::Array2::eye(4),
        b: Array1::zeros(4),
        k: 0.0,
    };
    let schedule = NoiseSchedule::linear(10).unwrap();
    let images = ndarray::Array2::zeros((3, 4));
    let obj = Objective {
        model: &model,
        schedule: &schedule,
        vocab: &vocab,
        images: images.view(),
    };
    let cfg = DecompositionConfig {
        n: 2,
        max_steps: 30,
        batch: 2,
        val_every: 0,
        corpus_size: 3,
        lambda_sparsity: 0.0,
        hidden: 4,
        ..DecompositionConfig::default()
    };
    let t = train_coefficients(obj, &cands, &cfg, None, &mut |_, _| {}).unwrap();
    assert_eq!(t.log.steps.len(), 30);
    assert!(t.log.steps.iter().all(|s| s.total == s.reconstruction));
    assert_eq!(t.log.selected_step, 30);
    assert!(t.alpha.iter().all(|a| *a >= 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudo_tokens_are_consistent(alpha in proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..3.0], 10), n in 1usize..=10) {
        let vocab = plain_vocab(10, 5, 1);
        let cands = candidates(&vocab);
        let p = build_pseudo_tokens(&vocab, &cands, &alpha, n).unwrap();
        prop_assert_eq!(p.ranked.len(), n);
        // sorted by coefficient, ties by ascending id
        for w in p.ranked.windows(2) {
            prop_assert!(w[0].coefficient > w[1].coefficient || (w[0].coefficient == w[1].coefficient && w[0].token_id < w[1].token_id));
        }
        // no renormalization: the ranked coefficients are the raw ones
        for r in &p.ranked {
            let i = cands.iter().position(|c| *c == r.token_id).unwrap();
            prop_assert_eq!(r.coefficient, alpha[i]);
        }
        let kept: Vec<_> = p.ranked.iter().map(|r| (r.token_id, r.coefficient)).collect();
        let w = combine(&vocab, &kept).unwrap();
        for (a, b) in w.iter().zip(p.w_star.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        if n == 10 {
            prop_assert_eq!(&p.w_star, &p.w_star_full);
        }
    }

    #[test]
    fn coefficients_are_nonnegative(seed in 0u64..1000, scale in 0.01f64..5.0) {
        let vocab = plain_vocab(12, 6, seed);
        let cands = candidates(&vocab);
        let x = concept_lab::conceptor::candidate_matrix(&vocab, &cands).unwrap();
        let mlp = CoefficientMlp::init(6, 9, scale, &mut rng(seed)).unwrap();
        let mut m2 = mlp.clone();
        m2.w2.mapv_inplace(|v| -v);
        prop_assert!(mlp.coefficients(x.view()).unwrap().iter().all(|a| *a >= 0.0));
        prop_assert!(m2.coefficients(x.view()).unwrap().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn sparsity_loss_is_bounded(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
        let s = sparsity_loss(Array1::from(a).view(), Array1::from(b).view()).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&s.value));
    }
}
