use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{run_conversation, ChatBackend, GatewayError, RequestParams, RetryPolicy};
use crate::connectome::RegionPair;
use crate::prior::{confidence_from_response, PriorRecord};
use crate::prompt::{parse_classification, render, Ordering, PromptBase, PromptStrategy, Templates};

/// Everything needed to query a set of pairs.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub pairs: Vec<RegionPair>,
    pub strategy: PromptStrategy,
    pub orderings: Vec<Ordering>,
    pub repeats_per_ordering: u32,
    pub concurrency_limit: usize,
    pub retry: RetryPolicy,
    pub params: RequestParams,
    pub templates: Templates,
    /// Per-region location summaries; a pair's system prompt joins both.
    pub region_context: BTreeMap<String, String>,
}

impl BatchPlan {
    pub fn new(pairs: Vec<RegionPair>, strategy: PromptStrategy, params: RequestParams) -> Self {
        Self {
            pairs,
            strategy,
            orderings: vec![Ordering::Forward, Ordering::Reverse],
            repeats_per_ordering: 1,
            concurrency_limit: 8,
            retry: RetryPolicy::default(),
            params,
            templates: Templates::default(),
            region_context: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.concurrency_limit == 0 {
            return Err(GatewayError::InvalidPlan("concurrency_limit must be at least 1".into()));
        }
        if self.repeats_per_ordering == 0 {
            return Err(GatewayError::InvalidPlan("repeats_per_ordering must be at least 1".into()));
        }
        if self.orderings.is_empty() {
            return Err(GatewayError::InvalidPlan("no orderings requested".into()));
        }
        if self.strategy.base == PromptBase::RagCitation {
            return Err(GatewayError::InvalidPlan(
                "citation-grounded queries run through the retrieval pipeline".into(),
            ));
        }
        Ok(())
    }

    fn system_context(&self, pair: &RegionPair) -> Option<String> {
        let parts: Vec<&str> = [&pair.a().name, &pair.b().name]
            .iter()
            .filter_map(|n| self.region_context.get(*n).map(String::as_str))
            .filter(|s| !s.is_empty())
            .collect();
        (!parts.is_empty()).then(|| parts.join("\n\n"))
    }

    /// Work items in output order: pair, then ordering, then repeat.
    fn items(&self) -> Vec<(usize, Ordering, u32)> {
        let mut items = Vec::new();
        for (p, _) in self.pairs.iter().enumerate() {
            for &o in &self.orderings {
                for r in 0..self.repeats_per_ordering {
                    items.push((p, o, r));
                }
            }
        }
        items
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub pair: RegionPair,
    pub ordering: Ordering,
    pub repeat: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub records: Vec<PriorRecord>,
    pub failures: Vec<RecordFailure>,
}

fn query_one(
    plan: &BatchPlan,
    backend: &dyn ChatBackend,
    pair: &RegionPair,
    ordering: Ordering,
    repeat: u32,
) -> Result<PriorRecord, String> {
    let context = plan.system_context(pair);
    let seq = render(&plan.templates, plan.strategy, pair, ordering, context.as_deref())
        .map_err(|e| e.to_string())?;
    let conv = run_conversation(backend, &seq, &plan.params, repeat, &plan.retry)
        .map_err(|e| e.to_string())?;
    let response = &conv.final_response;
    let classification = parse_classification(&response.text, plan.strategy.allows_dont_know())
        .map_err(|e| e.to_string())?;
    let confidence =
        confidence_from_response(response, classification).map_err(|e| e.to_string())?;
    Ok(PriorRecord {
        pair: pair.clone(),
        ordering,
        repeat,
        strategy: plan.strategy,
        classification,
        verdict_token_logprob: confidence.verdict_token_logprob,
        confidence_connected: confidence.confidence_connected,
        abstained: confidence.abstained,
        no_logprobs: confidence.no_logprobs,
        reasoning_text: conv.reasoning_text(),
        citations: None,
        raw_response_digest: conv.request_digests.last().cloned().unwrap_or_default(),
        model_id: plan.params.model_id.clone(),
        usage: conv.usage,
    })
}

/// Applies `f` to every item with at most `limit` calls running at once.
/// Results come back in item order.
pub fn fan_out<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = limit.min(items.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, AtomicOrdering::SeqCst);
                let Some(item) = items.get(k) else {
                    break;
                };
                let result = f(item);
                slots.lock().unwrap()[k] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

/// Queries every (pair, ordering, repeat) in isolation with at most
/// `concurrency_limit` sessions in flight. Individual failures are collected;
/// the batch only fails when nothing succeeds.
pub fn run_batch(plan: &BatchPlan, backend: &dyn ChatBackend) -> Result<BatchOutcome, GatewayError> {
    plan.validate()?;
    let items = plan.items();
    let results = fan_out(&items, plan.concurrency_limit, |&(p, ordering, repeat)| {
        query_one(plan, backend, &plan.pairs[p], ordering, repeat)
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (&(p, ordering, repeat), result) in items.iter().zip(results) {
        match result {
            Ok(r) => records.push(r),
            Err(error) => failures.push(RecordFailure {
                pair: plan.pairs[p].clone(),
                ordering,
                repeat,
                error,
            }),
        }
    }
    if records.is_empty() && !failures.is_empty() {
        return Err(GatewayError::AllFailed(failures.len()));
    }
    Ok(BatchOutcome { records, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::{enumerate_pairs, Hemisphere, PairScope, Parcellation};
    use crate::gateway::{Recorder, ReplayBackend, ReplayStore};
    use crate::prompt::Classification;
    use crate::testing::ScriptedBackend;
    use std::time::Duration;

    fn pairs(n: usize) -> Vec<RegionPair> {
        let p = Parcellation::new(
            "p",
            (0..n).map(|i| (format!("Region{i:02}"), Hemisphere::Left)),
        )
        .unwrap();
        enumerate_pairs(&p, PairScope::All)
    }

    fn plan(pairs: Vec<RegionPair>) -> BatchPlan {
        let mut plan = BatchPlan::new(
            pairs,
            PromptStrategy::new(PromptBase::Minimal, false),
            RequestParams::new("m"),
        );
        plan.retry.backoff_base = Duration::ZERO;
        plan
    }

    /// Says True when the first named region has an even number.
    fn parity_backend() -> ScriptedBackend {
        ScriptedBackend::new("parity").with_reply(|req| {
            let text = &req.messages.messages().last().unwrap().content;
            let at = text.find("Region").unwrap() + 6;
            let n: u32 = text[at..at + 2].parse().unwrap();
            if n.is_multiple_of(2) { "True".into() } else { "False".into() }
        })
    }

    #[test]
    fn one_record_per_pair_ordering_repeat() {
        // 15 choose 2 = 105; keep the first 100
        let mut ps = pairs(15);
        ps.truncate(100);
        let mut plan = plan(ps);
        plan.repeats_per_ordering = 2;
        let backend = ScriptedBackend::new("s");
        let out = run_batch(&plan, &backend).unwrap();
        assert_eq!(out.records.len(), 400);
        assert!(out.failures.is_empty());
        assert_eq!(backend.calls(), 400);
        assert_eq!(out.records[0].ordering, Ordering::Forward);
        assert_eq!(out.records[1].repeat, 1);
        assert_eq!(out.records[2].ordering, Ordering::Reverse);
    }

    #[test]
    fn sequential_when_limit_is_one() {
        let mut plan = plan(pairs(4));
        plan.concurrency_limit = 1;
        let backend = ScriptedBackend::new("s").with_delay(Duration::from_millis(2));
        run_batch(&plan, &backend).unwrap();
        let log = backend.log();
        for w in log.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        assert_eq!(backend.max_in_flight(), 1);
    }

    #[test]
    fn in_flight_never_exceeds_limit() {
        let mut plan = plan(pairs(8));
        plan.concurrency_limit = 3;
        let backend = ScriptedBackend::new("s").with_delay(Duration::from_millis(3));
        run_batch(&plan, &backend).unwrap();
        assert!(backend.max_in_flight() <= 3);
        assert!(backend.max_in_flight() >= 2);
    }

    #[test]
    fn responses_do_not_depend_on_other_pairs() {
        let all = pairs(6);
        let backend = parity_backend();
        let full = run_batch(&plan(all.clone()), &backend).unwrap();
        let target = all[9].clone();
        let alone = run_batch(&plan(vec![target.clone()]), &backend).unwrap();
        let from_full: Vec<_> = full.records.iter().filter(|r| r.pair == target).cloned().collect();
        assert_eq!(from_full, alone.records);
        // forward names the smaller region first
        assert_eq!(alone.records[0].classification, Classification::True);
    }

    #[test]
    fn warm_cache_makes_no_calls_and_matches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let plan = plan(pairs(5));
        let live = parity_backend();
        let first = {
            let rec = Recorder::new(&live, ReplayStore::open(&path).unwrap());
            run_batch(&plan, &rec).unwrap()
        };
        let calls = live.calls();
        let rec = Recorder::new(&live, ReplayStore::open(&path).unwrap());
        let second = run_batch(&plan, &rec).unwrap();
        assert_eq!(live.calls(), calls);
        assert_eq!(rec.live_calls(), 0);
        assert_eq!(first, second);

        let replayed = run_batch(&plan, &ReplayBackend::load(&path).unwrap()).unwrap();
        assert_eq!(first, replayed);
    }

    #[test]
    fn failures_are_collected() {
        let plan = plan(pairs(3));
        let backend = ScriptedBackend::new("s").with_reply(|req| {
            if req.messages.messages()[0].content.contains("Region00") {
                "no idea".into()
            } else {
                "True".into()
            }
        });
        let out = run_batch(&plan, &backend).unwrap();
        // pairs (0,1) and (0,2), two orderings each
        assert_eq!(out.failures.len(), 4);
        assert_eq!(out.records.len(), 2);

        let broken = ScriptedBackend::new("s").with_reply(|_| "maybe".into());
        assert!(matches!(run_batch(&plan, &broken), Err(GatewayError::AllFailed(6))));
    }

    #[test]
    fn multi_turn_records_keep_reasoning() {
        let mut plan = plan(pairs(2));
        plan.strategy = PromptStrategy::new(PromptBase::ChainOfThought, true);
        plan.orderings = vec![Ordering::Forward];
        let backend = ScriptedBackend::new("s").with_reply(|req| match req.messages.user_turns().count() {
            1 => "Region00 sits here.".into(),
            2 => "They are probably linked.".into(),
            _ => "don't know".into(),
        });
        let out = run_batch(&plan, &backend).unwrap();
        let r = &out.records[0];
        assert_eq!(r.classification, Classification::DontKnow);
        assert!(r.abstained);
        assert_eq!(r.confidence_connected, 0.0);
        assert_eq!(
            r.reasoning_text.as_deref(),
            Some("Region00 sits here.\n\nThey are probably linked.")
        );
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn region_context_becomes_system_prompt() {
        let mut plan = plan(pairs(2));
        plan.orderings = vec![Ordering::Forward];
        plan.region_context.insert("Region00".into(), "zero is frontal".into());
        plan.region_context.insert("Region01".into(), "one is occipital".into());
        let backend = ScriptedBackend::new("s");
        run_batch(&plan, &backend).unwrap();
        let req = &backend.requests()[0];
        assert_eq!(
            req.messages.messages()[0].content,
            "zero is frontal\n\none is occipital"
        );
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut p = plan(pairs(2));
        p.concurrency_limit = 0;
        assert!(run_batch(&p, &ScriptedBackend::new("s")).is_err());
        let mut p = plan(pairs(2));
        p.strategy = PromptStrategy::new(PromptBase::RagCitation, false);
        assert!(run_batch(&p, &ScriptedBackend::new("s")).is_err());
    }
}
