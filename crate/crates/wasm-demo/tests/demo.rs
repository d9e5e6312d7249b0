use connectome_priors_wasm::{diffuse, rank_passages, verdict_confidence, DemoError};

#[test]
fn two_region_diffusion_matches_closed_form() {
    let values = diffuse("A,B,2", "A", 0.25).unwrap();
    let decay = (-2.0f64 * 2.0 * 0.25).exp();
    assert_eq!(values[0].region, "A");
    assert!((values[0].value - (0.5 + 0.5 * decay)).abs() < 1e-12);
    assert!((values[1].value - (0.5 - 0.5 * decay)).abs() < 1e-12);
}

#[test]
fn diffusion_conserves_mass_and_reports_bad_input() {
    let edges = "# chain\nA,B\nB,C\nC,D,0.5\n";
    let total: f64 = diffuse(edges, "B", 3.0).unwrap().iter().map(|v| v.value).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(matches!(diffuse(edges, "Z", 1.0), Err(DemoError::UnknownSeed(_))));
    assert!(matches!(diffuse(edges, "A", -1.0), Err(DemoError::InvalidTime(_))));
    assert!(matches!(diffuse("A,B\nC", "A", 1.0), Err(DemoError::Edge { line: 2, .. })));
    assert!(matches!(diffuse("A,A", "A", 1.0), Err(DemoError::Edge { line: 1, .. })));
}

#[test]
fn passages_rank_by_keyword_overlap() {
    let corpus = "Entorhinal tau\ntau spreads from the entorhinal cortex\n\nArcuate\nthe arcuate fasciculus links language areas\n\nNothing\nunrelated text";
    let ranked = rank_passages(corpus, "entorhinal tau", 5);
    assert_eq!(ranked.len(), 1);
    assert_eq!(ranked[0].title, "Entorhinal tau");
    assert!(rank_passages(corpus, "", 5).is_empty());
    assert_eq!(rank_passages(corpus, "the", 1).len(), 1);
}

#[test]
fn verdict_confidence_is_complementary() {
    let yes = verdict_confidence("Answer: True", -0.2).unwrap();
    let no = verdict_confidence("Answer: False", -0.2).unwrap();
    assert!((yes + no - 1.0).abs() < 1e-15);
    assert_eq!(verdict_confidence("I don't know", -0.1).unwrap(), 0.0);
    assert!(verdict_confidence("maybe", -0.1).is_err());
    assert!(matches!(verdict_confidence("True", 0.5), Err(DemoError::InvalidLogprob(_))));
}
