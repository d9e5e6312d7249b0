use serde_json::Value;

use super::embed::{Embedder, Reranker};
use super::index::{bm25_search, hybrid_search, rerank, verify_citations, CorpusIndex};
use super::{CitationRecord, RagError};
use crate::connectome::RegionPair;
use crate::gateway::{
    fan_out, run_conversation, BatchOutcome, ChatBackend, GatewayError, RecordFailure, RequestParams,
    RetryPolicy, Usage,
};
use crate::prior::{confidence_from_response_at, PriorRecord, VerdictSearch};
use crate::prompt::{
    parse_classification, render_rag_citation, render_region_summary, Classification, ContextChunk, Ordering,
    PromptBase, PromptStrategy, Templates,
};

/// "SuperiorFrontal" -> "Superior Frontal"; underscores become spaces.
pub fn humanize_region(name: &str) -> String {
    let mut out = String::with_capacity(name.len() + 4);
    let mut prev: Option<char> = None;
    for c in name.chars() {
        let c = if c == '_' { ' ' } else { c };
        if let Some(p) = prev {
            if c.is_uppercase() && (p.is_lowercase() || p.is_ascii_digit()) {
                out.push(' ');
            }
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

/// The text between the first `{` and the last `}`, parsed as JSON.
pub fn extract_json_object(text: &str) -> Option<Value> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end < start {
        return None;
    }
    serde_json::from_str::<Value>(&text[start..=end])
        .ok()
        .filter(Value::is_object)
}

fn field<'v>(obj: &'v Value, key: &str) -> Option<&'v Value> {
    obj.as_object()?
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(key))
        .map(|(_, v)| v)
}

fn field_str(obj: &Value, keys: &[&str]) -> String {
    keys.iter()
        .find_map(|k| field(obj, k).and_then(Value::as_str))
        .unwrap_or_default()
        .to_string()
}

struct Answer {
    classification: Classification,
    evidence: Option<String>,
    citations: Vec<CitationRecord>,
}

fn parse_answer(text: &str) -> Option<Answer> {
    let obj = extract_json_object(text)?;
    let classification = match field(&obj, "connection")? {
        Value::Bool(true) => Classification::True,
        Value::Bool(false) => Classification::False,
        Value::String(s) => parse_classification(s, true).ok()?,
        _ => return None,
    };
    let evidence = field(&obj, "evidence").map(|v| match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    });
    let citations = field(&obj, "citations")
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter(|c| c.is_object())
                .map(|c| CitationRecord {
                    title: field_str(c, &["title"]),
                    pmcid: field_str(c, &["pmcid", "pmc_id", "pmc"]),
                    quote: field_str(c, &["quote", "snippet", "text"]),
                    verified: false,
                })
                .collect()
        })
        .unwrap_or_default();
    Some(Answer {
        classification,
        evidence,
        citations,
    })
}

/// Retrieval and decoding settings for grounded queries.
#[derive(Clone, Copy)]
pub struct GroundingOptions<'a> {
    pub templates: &'a Templates,
    pub params: &'a RequestParams,
    pub retry: &'a RetryPolicy,
    pub embedder: &'a dyn Embedder,
    pub reranker: Option<&'a dyn Reranker>,
    pub k_candidates: usize,
    pub top: usize,
}

impl<'a> GroundingOptions<'a> {
    pub fn new(
        templates: &'a Templates,
        params: &'a RequestParams,
        retry: &'a RetryPolicy,
        embedder: &'a dyn Embedder,
    ) -> Self {
        Self {
            templates,
            params,
            retry,
            embedder,
            reranker: None,
            k_candidates: 20,
            top: 5,
        }
    }
}

/// Asks whether `pair` is connected, showing the model the best literature
/// snippets and checking the citations it returns. A reply that is not a
/// JSON object is retried once with a fresh sample.
pub fn grounded_query(
    index: &CorpusIndex,
    pair: &RegionPair,
    ordering: Ordering,
    repeat: u32,
    backend: &dyn ChatBackend,
    opts: &GroundingOptions<'_>,
) -> Result<PriorRecord, RagError> {
    let (first, second) = ordering.names(pair);
    let query = format!("{} {}", humanize_region(first), humanize_region(second));
    let fused = hybrid_search(index, &query, opts.k_candidates, opts.embedder)?;
    let reranked = rerank(index, fused.hits, &query, opts.reranker, opts.embedder, opts.top)?;
    if reranked.hits.is_empty() {
        return Err(RagError::NoContext);
    }
    let chunks: Vec<ContextChunk> = reranked
        .hits
        .iter()
        .map(|h| {
            let c = index.chunk(h.chunk);
            ContextChunk {
                text: c.text.clone(),
                title: c.title.clone(),
                pmcid: c.pmcid.clone(),
            }
        })
        .collect();
    let seq = render_rag_citation(opts.templates, pair, ordering, &chunks)?;

    let mut usage = Usage::default();
    let mut last_text = String::new();
    for attempt in 0..2 {
        let conv = run_conversation(backend, &seq, opts.params, repeat * 2 + attempt, opts.retry)?;
        usage += conv.usage;
        let response = conv.final_response;
        let Some(answer) = parse_answer(&response.text) else {
            last_text = response.text;
            continue;
        };
        let confidence =
            confidence_from_response_at(&response, answer.classification, VerdictSearch::AfterKey("connection"))?;
        return Ok(PriorRecord {
            pair: pair.clone(),
            ordering,
            repeat,
            strategy: PromptStrategy::new(PromptBase::RagCitation, false),
            classification: answer.classification,
            verdict_token_logprob: confidence.verdict_token_logprob,
            confidence_connected: confidence.confidence_connected,
            abstained: confidence.abstained,
            no_logprobs: confidence.no_logprobs,
            reasoning_text: answer.evidence,
            citations: Some(verify_citations(answer.citations, index)),
            raw_response_digest: conv.request_digests.last().cloned().unwrap_or_default(),
            model_id: opts.params.model_id.clone(),
            usage,
        });
    }
    Err(RagError::MalformedAnswer {
        snippet: last_text.chars().take(120).collect(),
    })
}

/// Grounded queries for every (pair, ordering, repeat), at most `limit` at
/// once. Failed items are reported alongside the records.
#[allow(clippy::too_many_arguments)]
pub fn run_grounded_batch(
    index: &CorpusIndex,
    pairs: &[RegionPair],
    orderings: &[Ordering],
    repeats: u32,
    backend: &dyn ChatBackend,
    opts: &GroundingOptions<'_>,
    limit: usize,
) -> Result<BatchOutcome, GatewayError> {
    if limit == 0 || repeats == 0 || orderings.is_empty() {
        return Err(GatewayError::InvalidPlan(
            "limit, repeats and orderings must be non-empty".into(),
        ));
    }
    let mut items = Vec::new();
    for p in pairs {
        for &o in orderings {
            for r in 0..repeats {
                items.push((p, o, r));
            }
        }
    }
    let results = fan_out(&items, limit, |&(p, o, r)| grounded_query(index, p, o, r, backend, opts));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (&(p, o, r), result) in items.iter().zip(results) {
        match result {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(RecordFailure {
                pair: p.clone(),
                ordering: o,
                repeat: r,
                error: e.to_string(),
            }),
        }
    }
    if records.is_empty() && !failures.is_empty() {
        return Err(GatewayError::AllFailed(failures.len()));
    }
    Ok(BatchOutcome { records, failures })
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RegionContext {
    pub region: String,
    pub summary: String,
    pub chunk_ids: Vec<String>,
    /// Nothing in the documentation matched; the region goes ungrounded.
    pub empty_context: bool,
}

/// Summarises where `region` lies from the three best-matching
/// documentation chunks.
pub fn region_context(
    index: &CorpusIndex,
    region: &str,
    backend: &dyn ChatBackend,
    templates: &Templates,
    params: &RequestParams,
    retry: &RetryPolicy,
) -> Result<RegionContext, RagError> {
    let hits = bm25_search(index, &humanize_region(region), 3);
    if hits.is_empty() {
        return Ok(RegionContext {
            region: region.to_string(),
            summary: String::new(),
            chunk_ids: Vec::new(),
            empty_context: true,
        });
    }
    let context = hits
        .iter()
        .map(|h| index.chunk(h.chunk).text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    let seq = render_region_summary(templates, region, &context);
    let conv = run_conversation(backend, &seq, params, 0, retry)?;
    Ok(RegionContext {
        region: region.to_string(),
        summary: conv.final_response.text.trim().to_string(),
        chunk_ids: hits.into_iter().map(|h| h.chunk_id).collect(),
        empty_context: false,
    })
}

/// `region_context` for each region, at most `limit` at once.
pub fn region_contexts(
    index: &CorpusIndex,
    regions: &[String],
    backend: &dyn ChatBackend,
    templates: &Templates,
    params: &RequestParams,
    retry: &RetryPolicy,
    limit: usize,
) -> Result<Vec<RegionContext>, RagError> {
    fan_out(regions, limit.max(1), |r| {
        region_context(index, r, backend, templates, params, retry)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::{Hemisphere, Parcellation};
    use crate::gateway::{ChatRequest, Recorder, ReplayBackend, ReplayStore};
    use crate::rag::{Bm25Params, Chunking, HashEmbedder, SemanticChunking, SourceDocument};
    use crate::testing::{verdict_response, ScriptedBackend};
    use std::sync::Arc;

    fn literature() -> CorpusIndex {
        let docs = vec![
            SourceDocument {
                pmcid: "PMC111".into(),
                title: "Tracing the cingulum".into(),
                keywords: vec![],
                text: "The cingulum links the posterior cingulate with the parahippocampal cortex.".into(),
            },
            SourceDocument {
                pmcid: "PMC222".into(),
                title: "Frontal aslant tract".into(),
                keywords: vec![],
                text: "Frontal aslant fibres join the superior frontal gyrus to the pars opercularis.".into(),
            },
        ];
        CorpusIndex::ingest(&docs, Chunking::default(), &HashEmbedder::default(), Bm25Params::default()).unwrap()
    }

    fn pair() -> RegionPair {
        let p = Parcellation::new(
            "t",
            vec![
                ("Parahippocampal".into(), Hemisphere::Left),
                ("PosteriorCingulate".into(), Hemisphere::Left),
            ],
        )
        .unwrap();
        Arc::new(p).pair("Parahippocampal", "PosteriorCingulate").unwrap()
    }

    fn json_reply(connection: &str, pmcid: &str, title: &str) -> String {
        format!(
            r#"{{"connection": "{connection}", "evidence": "The cingulum links them.", "citations": [{{"title": "{title}", "pmcid": "{pmcid}", "quote": "The cingulum links"}}]}}"#
        )
    }

    fn run(backend: &ScriptedBackend) -> Result<PriorRecord, RagError> {
        let index = literature();
        let templates = Templates::default();
        let params = RequestParams::new("m");
        let retry = RetryPolicy::default();
        let e = HashEmbedder::default();
        let opts = GroundingOptions::new(&templates, &params, &retry, &e);
        grounded_query(&index, &pair(), Ordering::Forward, 0, backend, &opts)
    }

    #[test]
    fn humanized_names() {
        assert_eq!(humanize_region("SuperiorFrontal"), "Superior Frontal");
        assert_eq!(humanize_region("pars_opercularis"), "pars opercularis");
        assert_eq!(humanize_region("V1"), "V1");
    }

    #[test]
    fn verified_citation_and_confidence() {
        let b = ScriptedBackend::new("s").with_responder(|_| {
            verdict_response(&json_reply("True", "PMC111", "tracing the Cingulum"), Some(-0.1), "s")
        });
        let r = run(&b).unwrap();
        assert_eq!(r.classification, Classification::True);
        assert!((r.confidence_connected - (-0.1f64).exp()).abs() < 1e-12);
        let c = r.citations.unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].verified);
        assert_eq!(c[0].quote, "The cingulum links");
        assert_eq!(r.reasoning_text.as_deref(), Some("The cingulum links them."));

        let req = &b.requests()[0];
        let user = &req.messages.messages()[1].content;
        assert!(user.contains("pmcid: PMC111"));
    }

    #[test]
    fn unknown_pmcid_is_not_verified() {
        let b = ScriptedBackend::new("s")
            .with_responder(|_| verdict_response(&json_reply("False", "PMC000000", "Tracing the cingulum"), Some(-0.2), "s"));
        let r = run(&b).unwrap();
        assert_eq!(r.classification, Classification::False);
        assert!(!r.citations.unwrap()[0].verified);
    }

    #[test]
    fn dont_know_scores_zero() {
        let b = ScriptedBackend::new("s")
            .with_responder(|_| verdict_response(&json_reply("don't know", "PMC111", "x"), Some(-0.2), "s"));
        let r = run(&b).unwrap();
        assert_eq!(r.classification, Classification::DontKnow);
        assert_eq!(r.confidence_connected, 0.0);
        assert!(r.abstained);
    }

    #[test]
    fn malformed_json_is_retried_once() {
        let b = ScriptedBackend::new("s").with_responder(|req: &ChatRequest| {
            if req.sample == 0 {
                verdict_response("I think True", Some(-0.1), "s")
            } else {
                verdict_response(&json_reply("True", "PMC111", "Tracing the cingulum"), Some(-0.1), "s")
            }
        });
        assert!(run(&b).is_ok());
        assert_eq!(b.calls(), 2);

        let never = ScriptedBackend::new("s").with_reply(|_| "no json here".into());
        assert!(matches!(run(&never), Err(RagError::MalformedAnswer { .. })));
        assert_eq!(never.calls(), 2);
    }

    #[test]
    fn grounded_batch_collects_records() {
        let index = literature();
        let templates = Templates::default();
        let params = RequestParams::new("m");
        let retry = RetryPolicy::default();
        let e = HashEmbedder::default();
        let opts = GroundingOptions::new(&templates, &params, &retry, &e);
        let b = ScriptedBackend::new("s")
            .with_responder(|_| verdict_response(&json_reply("True", "PMC222", "Frontal aslant tract"), Some(-0.3), "s"));
        let out = run_grounded_batch(
            &index,
            &[pair()],
            &[Ordering::Forward, Ordering::Reverse],
            2,
            &b,
            &opts,
            3,
        )
        .unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.failures.is_empty());
    }

    fn supplement() -> CorpusIndex {
        let docs = vec![SourceDocument {
            pmcid: String::new(),
            title: "Atlas labels".into(),
            keywords: vec![],
            text: "The insula lies deep within the lateral sulcus. It is covered by the opercula.\n\n\
                   The superior frontal gyrus forms the upper part of the frontal lobe. \
                   The cuneus is a wedge of occipital cortex above the calcarine sulcus."
                .into(),
        }];
        let chunking = Chunking::Semantic(SemanticChunking {
            window: 1,
            ..Default::default()
        });
        CorpusIndex::ingest(&docs, chunking, &HashEmbedder::default(), Bm25Params::default()).unwrap()
    }

    #[test]
    fn region_context_uses_matching_chunks() {
        let index = supplement();
        let b = ScriptedBackend::new("s").with_reply(|_| " The insula is deep in the lateral sulcus. ".into());
        let t = Templates::default();
        let p = RequestParams::new("m");
        let ctx = region_context(&index, "Insula", &b, &t, &p, &RetryPolicy::default()).unwrap();
        assert!(!ctx.empty_context);
        assert_eq!(ctx.summary, "The insula is deep in the lateral sulcus.");
        let first = &ctx.chunk_ids[0];
        assert!(index.chunks().iter().any(|c| &c.chunk_id == first && c.text.contains("insula")));
        let prompt = b.requests()[0].messages.messages()[0].content.clone();
        assert!(prompt.contains("\"Insula\""));

        let none = region_context(&index, "Fusiform", &b, &t, &p, &RetryPolicy::default()).unwrap();
        assert!(none.empty_context);
        assert_eq!(b.calls(), 1);
    }

    #[test]
    fn replayed_region_context_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctx.jsonl");
        let index = supplement();
        let t = Templates::default();
        let p = RequestParams::new("m");
        let live = ScriptedBackend::new("s").with_reply(|_| "Superior frontal sits on top.".into());
        let regions = vec!["SuperiorFrontal".to_string(), "Insula".to_string()];
        let rec = Recorder::new(&live, ReplayStore::open(&path).unwrap());
        let first = region_contexts(&index, &regions, &rec, &t, &p, &RetryPolicy::default(), 2).unwrap();
        drop(rec);
        let replay = ReplayBackend::load(&path).unwrap();
        let second = region_contexts(&index, &regions, &replay, &t, &p, &RetryPolicy::default(), 2).unwrap();
        assert_eq!(first, second);
    }
}
