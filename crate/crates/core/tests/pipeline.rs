use std::sync::Arc;

use connectome_priors::filter::{added_edges, augment_filter};
use connectome_priors::gateway::{run_batch, BatchPlan, Recorder, ReplayBackend, ReplayStore, RequestParams};
use connectome_priors::ndm::{fit, DiffusionOperator, FitSettings, Normalization, RegionalVector};
use connectome_priors::prior::{aggregate, classify};
use connectome_priors::prompt::{PromptBase, PromptStrategy};
use connectome_priors::testing::ScriptedBackend;
use connectome_priors::{enumerate_pairs, Connectome, ConnectomeKind, Hemisphere, PairScope, Parcellation};

fn ring(n: usize) -> Arc<Parcellation> {
    let names = (0..n).map(|i| {
        let name = if i == 0 { "Entorhinal".to_string() } else { format!("Region{i}") };
        (name, Hemisphere::Left)
    });
    Arc::new(Parcellation::new("ring", names).unwrap())
}

/// Says "True" exactly for pairs of neighbours on the ring.
fn ring_backend(n: usize) -> ScriptedBackend {
    ScriptedBackend::new("ring").with_reply(move |req| {
        let text = serde_json::to_string(req).unwrap();
        let index_of = |k: usize| {
            let name = if k == 0 { "Entorhinal".to_string() } else { format!("Region{k}") };
            text.find(&format!("{name} ")).or_else(|| text.find(&format!("{name}\"")))
        };
        let present: Vec<usize> = (0..n).filter(|&k| index_of(k).is_some()).collect();
        let neighbours = present.len() == 2 && {
            let (a, b) = (present[0], present[1]);
            (b - a) == 1 || (a == 0 && b == n - 1)
        };
        if neighbours { "True".into() } else { "False".into() }
    })
}

#[test]
fn recorded_batch_replays_identically() {
    let n = 6;
    let parc = ring(n);
    let pairs = enumerate_pairs(&parc, PairScope::All);
    let plan = BatchPlan::new(
        pairs.clone(),
        PromptStrategy::new(PromptBase::Minimal, false),
        RequestParams::new("test-model"),
    );
    let dir = tempfile::tempdir().unwrap();
    let store_path = dir.path().join("responses.jsonl");

    let recorder = Recorder::new(ring_backend(n), ReplayStore::open(&store_path).unwrap());
    let live = run_batch(&plan, &recorder).unwrap();
    assert!(live.failures.is_empty());
    assert_eq!(live.records.len(), pairs.len() * 2);
    assert_eq!(recorder.live_calls(), pairs.len() * 2);

    let again = Recorder::new(ring_backend(n), ReplayStore::open(&store_path).unwrap());
    assert_eq!(run_batch(&plan, &again).unwrap().records, live.records);
    assert_eq!(again.live_calls(), 0);

    let replayed = run_batch(&plan, &ReplayBackend::load(&store_path).unwrap()).unwrap();
    assert_eq!(replayed.records, live.records);
}

#[test]
fn priors_restore_missing_edges_for_diffusion() {
    let n = 8;
    let parc = ring(n);
    let plan = BatchPlan::new(
        enumerate_pairs(&parc, PairScope::All),
        PromptStrategy::new(PromptBase::Minimal, false),
        RequestParams::new("test-model"),
    );
    let outcome = run_batch(&plan, &ring_backend(n)).unwrap();
    let priors = aggregate(&outcome.records, parc.clone()).unwrap();
    let predicted = classify(&priors, 0.5).unwrap();
    assert_eq!(predicted.edge_count(), n);

    let ring_edges: Vec<(usize, usize, f64)> = (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n), 1.0)).collect();
    let truth = Connectome::from_edges(parc.clone(), ConnectomeKind::Binary, ring_edges.clone()).unwrap();
    // tractography missed two ring edges
    let observed: Vec<(usize, usize, f64)> = ring_edges.iter().copied().filter(|&(i, _, _)| i != 2 && i != 5).collect();
    let weights = Connectome::from_edges(parc.clone(), ConnectomeKind::Commit2WeightSum, observed).unwrap();
    let filtered = augment_filter(&weights, &priors, 0.5, None).unwrap();
    assert_eq!(filtered.n_added_by_llm(), 2);
    assert_eq!(added_edges(&filtered).len(), 2);
    assert_eq!(filtered.filtered().weights(), truth.weights());

    let op = DiffusionOperator::from_connectome(&truth, Normalization::Unnormalized).unwrap();
    let mut x0 = vec![0.0; n];
    x0[0] = 1.0;
    let target = RegionalVector::full(parc, op.simulate(&x0, 0.8).unwrap()).unwrap();
    let settings = FitSettings::default();
    let with_priors = fit(filtered.filtered(), &target, &settings).unwrap();
    let without = fit(&weights, &target, &settings).unwrap();
    assert_eq!(with_priors.seed_region, "Entorhinal");
    assert!(with_priors.r > 0.999);
    assert!(with_priors.r > without.r);
    assert!(with_priors.sse < without.sse);
}
