//! Regenerates the files under `fixtures/`: a left-hemisphere DKT
//! parcellation, a synthetic atlas and evaluation set, replay stores for the
//! `priors` and `ground` commands, and inputs for `filter`, `ndm` and
//! `permute`.
//!
//! The priors store is scripted so that 91 of the 100 evaluation pairs are
//! answered correctly after aggregation, with replicate accuracies of
//! 0.89, 0.93, 0.89 and 0.93.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use connectome_priors::connectome::write_connectome;
use connectome_priors::eval::build_eval_set;
use connectome_priors::gateway::{run_batch, BatchPlan, ChatRequest, Recorder, ReplayStore, RequestParams};
use connectome_priors::ndm::DiffusionOperator;
use connectome_priors::prompt::{render, Ordering, PromptBase, PromptStrategy, Role, Templates};
use connectome_priors::rag::{
    run_grounded_batch, region_contexts, Chunking, CorpusIndex, GroundingOptions, HashEmbedder, SourceDocument,
};
use connectome_priors::testing::{verdict_response, ScriptedBackend};
use connectome_priors::{Connectome, ConnectomeKind, Hemisphere, Parcellation, RegionPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REGIONS: [&str; 31] = [
    "CaudalAnteriorCingulate",
    "CaudalMiddleFrontal",
    "Cuneus",
    "Entorhinal",
    "Fusiform",
    "InferiorParietal",
    "InferiorTemporal",
    "IsthmusCingulate",
    "LateralOccipital",
    "LateralOrbitofrontal",
    "Lingual",
    "MedialOrbitofrontal",
    "MiddleTemporal",
    "Parahippocampal",
    "Paracentral",
    "ParsOpercularis",
    "ParsOrbitalis",
    "ParsTriangularis",
    "Pericalcarine",
    "Postcentral",
    "PosteriorCingulate",
    "Precentral",
    "Precuneus",
    "RostralAnteriorCingulate",
    "RostralMiddleFrontal",
    "SuperiorFrontal",
    "SuperiorParietal",
    "SuperiorTemporal",
    "Supramarginal",
    "TransverseTemporal",
    "Insula",
];

const MODEL: &str = "gpt-4-turbo";

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) {
    std::fs::write(dir.join(name), contents).unwrap();
}

fn matrix_csv(c: &Connectome) -> Vec<u8> {
    let mut buf = Vec::new();
    write_connectome(&mut buf, c).unwrap();
    buf
}

fn request_tokens(req: &ChatRequest) -> u64 {
    req.messages.messages().iter().map(|m| m.content.len() as u64).sum::<u64>() / 4
}

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(dir.join("corpus")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut parc_csv = String::from("name,hemisphere\n");
    for r in REGIONS {
        parc_csv.push_str(&format!("{r},left\n"));
    }
    write(&dir, "dkt_left.csv", &parc_csv);
    let parc = Arc::new(Parcellation::new("dkt_left", REGIONS.map(|r| (r.to_string(), Hemisphere::Left))).unwrap());
    let n = parc.len();

    // atlas: about 55% of pairs connected, distinct heavy-tailed counts
    let mut atlas_edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < 0.55 {
                let count = (rng.random::<f64>() * 6.0).exp().round() + (i * n + j) as f64 * 1e-3;
                atlas_edges.push((i, j, (count * 1000.0).round()));
            }
        }
    }
    let atlas = Connectome::from_edges(parc.clone(), ConnectomeKind::StreamlineCount, atlas_edges.clone()).unwrap();
    write(&dir, "atlas.csv", matrix_csv(&atlas));
    let eval = build_eval_set(&atlas, 50, 50, 7, "atlas.csv").unwrap();
    write(&dir, "eval_set.json", eval.to_json());

    write_priors_store(&dir, &eval);
    write_ground_fixtures(&dir, &parc);
    write_ndm_fixtures(&dir, &parc, &atlas_edges, &mut rng);

    write(
        &dir,
        "prices.csv",
        "model_id,input_per_1k,output_per_1k\ngpt-4-turbo,0.01,0.03\nllama-3-70b,0,0\n",
    );
    println!("fixtures written to {}", dir.display());
}

/// Replicates in record order: (forward, 0), (forward, 1), (reverse, 0), (reverse, 1).
fn replicate_index(ordering: Ordering, repeat: u32) -> usize {
    match ordering {
        Ordering::Forward => repeat as usize,
        Ordering::Reverse => 2 + repeat as usize,
    }
}

fn write_priors_store(dir: &Path, eval: &connectome_priors::eval::EvaluationSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let pairs = eval.pairs();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for k in (1..order.len()).rev() {
        order.swap(k, rng.random_range(0..=k));
    }
    // wrong[pair][replicate]
    let mut wrong = vec![[false; 4]; pairs.len()];
    for &p in &order[0..5] {
        wrong[p] = [true; 4];
    }
    for &p in &order[5..7] {
        wrong[p] = [true, true, true, false];
    }
    for &p in &order[7..9] {
        wrong[p] = [true, false, true, true];
    }
    for &p in &order[9..11] {
        wrong[p] = [true, false, false, false];
    }
    for &p in &order[11..13] {
        wrong[p] = [false, false, true, false];
    }
    let mut verdicts: HashMap<(usize, usize), (bool, f64)> = HashMap::new();
    for (p, pair) in pairs.iter().enumerate() {
        let label = eval.label(pair).unwrap();
        for rep in 0..4 {
            let w = wrong[p][rep];
            let prob = if w { rng.random_range(0.70..0.80) } else { rng.random_range(0.90..0.99) };
            verdicts.insert((p, rep), (label != w, prob));
        }
    }

    let strategy = PromptStrategy::new(PromptBase::ChainOfThought, false);
    let templates = Templates::default();
    let mut first_turn: HashMap<String, (usize, Ordering)> = HashMap::new();
    for (p, pair) in pairs.iter().enumerate() {
        for o in [Ordering::Forward, Ordering::Reverse] {
            let seq = render(&templates, strategy, pair, o, None).unwrap();
            first_turn.insert(seq.messages()[0].content.clone(), (p, o));
        }
    }
    let names: Vec<(String, String)> = pairs.iter().map(|p| (p.a().name.clone(), p.b().name.clone())).collect();
    let backend = ScriptedBackend::new(MODEL).with_responder(move |req: &ChatRequest| {
        let users: Vec<&str> = req.messages.user_turns().map(|m| m.content.as_str()).collect();
        let (p, o) = first_turn[users[0]];
        let (a, b) = match o {
            Ordering::Forward => (&names[p].0, &names[p].1),
            Ordering::Reverse => (&names[p].1, &names[p].0),
        };
        let mut resp = match users.len() {
            1 => verdict_response(
                &format!(
                    "The {a} is a cortical region of the left hemisphere. The {b} is another cortical region; \
                     both send association fibres to neighbouring gyri."
                ),
                Some(0.0),
                MODEL,
            ),
            2 => verdict_response(
                &format!("Association pathways run near both the {a} and the {b}, so a direct bundle is plausible."),
                Some(0.0),
                MODEL,
            ),
            _ => {
                let (connected, prob) = verdicts[&(p, replicate_index(o, req.sample))];
                verdict_response(if connected { "True" } else { "False" }, Some(prob.ln()), MODEL)
            }
        };
        resp.usage.input_tokens = request_tokens(req);
        resp
    });
    let store_path = dir.join("priors_replay.jsonl");
    let _ = std::fs::remove_file(&store_path);
    let recorder = Recorder::new(backend, ReplayStore::open(&store_path).unwrap());
    let mut plan = BatchPlan::new(pairs, strategy, RequestParams::new(MODEL));
    plan.repeats_per_ordering = 2;
    let outcome = run_batch(&plan, &recorder).unwrap();
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.records.len(), 400);
    assert_eq!(recorder.store().len(), 1200);
}

fn documents() -> Vec<SourceDocument> {
    vec![
        SourceDocument {
            pmcid: "PMC3001001".into(),
            title: "Perforant path anatomy in the human medial temporal lobe".into(),
            keywords: vec!["entorhinal".into(), "parahippocampal".into()],
            text: "Post-mortem dissection and diffusion imaging in human subjects show that the entorhinal cortex \
                   receives dense input from the parahippocampal cortex. Fibres leave the parahippocampal gyrus and \
                   enter the entorhinal area through the angular bundle. In every human brain examined the \
                   connection between the parahippocampal and entorhinal cortex was present in both hemispheres.\n\n\
                   The perforant path then carries entorhinal output to the hippocampal formation. Lesions of the \
                   angular bundle disconnect the parahippocampal cortex from the entorhinal cortex."
                .into(),
        },
        SourceDocument {
            pmcid: "PMC3002002".into(),
            title: "The arcuate fasciculus and language networks in humans".into(),
            keywords: vec!["arcuate".into(), "pars opercularis".into(), "superior temporal".into()],
            text: "Tractography in forty healthy human volunteers traced the arcuate fasciculus from the posterior \
                   superior temporal gyrus to the pars opercularis of the inferior frontal gyrus. The long segment \
                   links superior temporal cortex directly with pars opercularis and pars triangularis.\n\n\
                   An indirect pathway relays through the supramarginal gyrus. Both segments were larger in the \
                   left hemisphere of right-handed participants."
                .into(),
        },
        SourceDocument {
            pmcid: "PMC3003003".into(),
            title: "Occipital white matter in the macaque".into(),
            keywords: vec!["cuneus".into(), "macaque".into()],
            text: "In macaque monkeys, tracer injections into the cuneus labelled fibres projecting to the lingual \
                   gyrus and pericalcarine cortex. No labelled fibres were found in the insula of the monkey brain.\n\n\
                   These animal results describe occipital association fibres and the vertical occipital fasciculus."
                .into(),
        },
    ]
}

fn write_ground_fixtures(dir: &Path, parc: &Arc<Parcellation>) {
    let docs = documents();
    for (k, d) in docs.iter().enumerate() {
        write(
            &dir.join("corpus"),
            &format!("doc{}.json", k + 1),
            serde_json::to_string_pretty(d).unwrap() + "\n",
        );
    }
    let pairs: Vec<RegionPair> = [
        ("Entorhinal", "Parahippocampal"),
        ("ParsOpercularis", "SuperiorTemporal"),
        ("Cuneus", "Insula"),
    ]
    .iter()
    .map(|(a, b)| parc.pair(a, b).unwrap())
    .collect();
    let mut csv = String::from("region_a,region_b\n");
    for p in &pairs {
        csv.push_str(&format!("{},{}\n", p.a().name, p.b().name));
    }
    write(dir, "ground_pairs.csv", csv);

    let backend = ScriptedBackend::new(MODEL).with_responder(|req: &ChatRequest| {
        let last = req.messages.messages().last().unwrap();
        let squashed = last.content.to_lowercase().replace(' ', "");
        let text = if req.messages.messages().iter().any(|m| m.role == Role::User && m.content.contains("documentation")) {
            "The region lies in the cerebral cortex of the left hemisphere, described in the cited literature.".to_string()
        } else if squashed.contains("entorhinal") && squashed.contains("parahippocampal") {
            r#"{"evidence": "the entorhinal cortex receives dense input from the parahippocampal cortex", "citations": [{"title": "Perforant path anatomy in the human medial temporal lobe", "pmcid": "PMC3001001"}], "connection": "True"}"#.to_string()
        } else if squashed.contains("parsopercularis") {
            r#"{"evidence": "The long segment links superior temporal cortex directly with pars opercularis", "citations": [{"title": "The arcuate fasciculus and language networks in humans", "pmcid": "PMC3002002"}, {"title": "Frontotemporal tracts revisited", "pmcid": "PMC9999999"}], "connection": "True"}"#.to_string()
        } else {
            r#"{"evidence": "", "citations": [], "connection": "don't know"}"#.to_string()
        };
        let mut resp = verdict_response(&text, Some(-0.05), MODEL);
        resp.usage.input_tokens = request_tokens(req);
        resp
    });
    let store_path = dir.join("ground_replay.jsonl");
    let _ = std::fs::remove_file(&store_path);
    let recorder = Recorder::new(backend, ReplayStore::open(&store_path).unwrap());

    let embedder = HashEmbedder::new(256);
    let index = CorpusIndex::ingest(
        &docs,
        Chunking::Recursive {
            chunk_size: 400,
            overlap: 50,
        },
        &embedder,
        Default::default(),
    )
    .unwrap();
    let templates = Templates::default();
    let params = RequestParams::new(MODEL);
    let retry = Default::default();
    let opts = GroundingOptions::new(&templates, &params, &retry, &embedder);
    let outcome = run_grounded_batch(&index, &pairs, &[Ordering::Forward, Ordering::Reverse], 2, &recorder, &opts, 4)
        .unwrap();
    assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
    let regions: BTreeSet<String> = pairs.iter().flat_map(|p| [p.a().name.clone(), p.b().name.clone()]).collect();
    let regions: Vec<String> = regions.into_iter().collect();
    region_contexts(&index, &regions, &recorder, &templates, &params, &retry, 4).unwrap();
}

fn write_ndm_fixtures(dir: &Path, parc: &Arc<Parcellation>, atlas_edges: &[(usize, usize, f64)], rng: &mut ChaCha8Rng) {
    let n = parc.len();
    let seed = parc.index_of("Entorhinal").unwrap();
    // strongest 90 atlas edges form the generating network
    let mut ranked = atlas_edges.to_vec();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
    let truth: Vec<(usize, usize)> = ranked.iter().take(90).map(|&(i, j, _)| (i, j)).collect();
    let truth_graph =
        Connectome::from_edges(parc.clone(), ConnectomeKind::Binary, truth.iter().map(|&(i, j)| (i, j, 1.0))).unwrap();

    // hide six edges near the seed from the microstructure filter
    let near: BTreeSet<usize> = truth
        .iter()
        .filter(|&&(i, j)| i == seed || j == seed)
        .flat_map(|&(i, j)| [i, j])
        .collect();
    let mut planted: Vec<(usize, usize)> =
        truth.iter().copied().filter(|&(i, j)| near.contains(&i) || near.contains(&j)).collect();
    planted.sort();
    planted.truncate(6);
    let commit2 = Connectome::from_edges(
        parc.clone(),
        ConnectomeKind::Commit2WeightSum,
        truth
            .iter()
            .filter(|e| !planted.contains(e))
            .map(|&(i, j)| (i, j, (rng.random_range(0.01..1.0f64) * 1e4).round() / 1e4)),
    )
    .unwrap();
    write(dir, "commit2.csv", matrix_csv(&commit2));
    let unfiltered = Connectome::from_edges(parc.clone(), ConnectomeKind::StreamlineCount, atlas_edges.iter().copied()).unwrap();
    write(dir, "unfiltered.csv", matrix_csv(&unfiltered));

    let mut prior_edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if planted.contains(&(i, j)) {
                rng.random_range(0.85..0.98)
            } else {
                rng.random_range(0.0..0.45)
            };
            prior_edges.push((i, j, (p * 1e4f64).round() / 1e4));
        }
    }
    let priors = Connectome::from_edges(parc.clone(), ConnectomeKind::PriorConfidence, prior_edges).unwrap();
    write(dir, "ndm_priors.csv", matrix_csv(&priors));

    let op = DiffusionOperator::from_connectome(&truth_graph, Default::default()).unwrap();
    let mut x0 = vec![0.0; n];
    x0[seed] = 1.0;
    let x = op.simulate(&x0, 0.3).unwrap();
    let mut tau = String::from("region,value\n");
    for (k, r) in parc.regions().iter().enumerate() {
        let noisy = 4.0 * x[k] * (1.0 + rng.random_range(-0.01..0.01));
        tau.push_str(&format!("{},{:.6}\n", r.name, noisy));
    }
    write(dir, "tau.csv", tau);
}
