use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use connectome_priors::connectome::{load_parcellation, read_connectome, write_connectome};
use connectome_priors::digest::sha256_hex;
use connectome_priors::eval::{
    build_eval_set, confidence_separation, cost_report, disagreement_report, score_run, stability_report,
    EvalError, EvaluationReport, EvaluationSet, PriceTable,
};
use connectome_priors::filter::{added_edges, augment_filter, FilterOutcome};
use connectome_priors::gateway::http::HttpBackend;
use connectome_priors::gateway::{
    run_batch, BatchOutcome, BatchPlan, ChatBackend, Recorder, ReplayBackend, ReplayStore, RequestParams,
    RetryPolicy,
};
use connectome_priors::ndm::{fit, permutation_test, RegionalVector};
use connectome_priors::prior::{aggregate, PriorManifest, PriorMatrix, PriorRecord};
use connectome_priors::prompt::{PromptBase, PromptStrategy, Templates};
use connectome_priors::rag::{
    load_corpus_dir, region_contexts, run_grounded_batch, CorpusIndex, Embedder, GroundingOptions, HashEmbedder,
    HttpEmbedder, HttpReranker, RegionContext, Reranker,
};
use connectome_priors::{enumerate_pairs, ConnectomeKind, Parcellation, RegionPair};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{EmbedderKind, LoadedConfig};
use crate::manifest::{dir_digest, file_digest, write_entry, CommandManifest};
use crate::{CliError, Cli, Command};

struct Run {
    loaded: LoadedConfig,
    out: PathBuf,
    replay: Option<PathBuf>,
    record: Option<PathBuf>,
    config_digest: String,
    backend_desc: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Runs one subcommand to completion.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .global
        .config
        .clone()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut loaded = LoadedConfig::load(&config_path)?;
    if let Some(seed) = cli.global.seed {
        loaded.config.evaluate.eval_seed = seed;
        loaded.config.ndm.rng_seed = seed;
    }
    loaded.config.validate()?;
    let out = match (&cli.global.out, &loaded.config.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => loaded.resolve(o),
        (None, None) => return Err(CliError::Config("no run directory: pass --out or set output_dir".into())),
    };
    std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let config_digest = sha256_hex(serde_json::to_vec(&loaded.config).expect("config serializes"));
    let mut run = Run {
        loaded,
        out,
        replay: cli.global.replay.clone(),
        record: cli.global.record.clone(),
        config_digest,
        backend_desc: "none".into(),
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    let details = match &cli.command {
        Command::Priors { pairs } => run.priors(pairs.as_deref())?,
        Command::Evaluate { records, eval_set } => run.evaluate(records.as_deref(), eval_set.as_deref())?,
        Command::Ingest => run.ingest()?,
        Command::Ground { pairs, contexts } => run.ground(pairs.as_deref(), *contexts)?,
        Command::Filter => run.filter()?,
        Command::Ndm => run.ndm()?,
        Command::Permute => run.permute()?,
    };
    run.finish(cli.command.name(), details)
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("record serializes") + "\n")
        .collect()
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn read_pairs(path: &Path, parcellation: &Parcellation) -> Result<Vec<RegionPair>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(CliError::Data(format!(
                "{} line {}: expected `region_a,region_b`",
                path.display(),
                n + 1
            )));
        }
        if pairs.is_empty() && fields[0].eq_ignore_ascii_case("region_a") {
            continue;
        }
        pairs.push(parcellation.pair(fields[0], fields[1])?);
    }
    pairs.sort();
    pairs.dedup();
    if pairs.is_empty() {
        return Err(CliError::Data(format!("{} lists no pairs", path.display())));
    }
    Ok(pairs)
}

fn read_records(path: &Path) -> Result<Vec<PriorRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let records: Vec<PriorRecord> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect::<Result<_, _>>()?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{} holds no records", path.display())));
    }
    Ok(records)
}

/// Accepts either `{region: summary}` or the list written by `ground --contexts`.
fn read_region_context(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    if let Ok(map) = serde_json::from_str::<BTreeMap<String, String>>(&text) {
        return Ok(map);
    }
    let list: Vec<RegionContext> =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(list
        .into_iter()
        .filter(|c| !c.empty_context)
        .map(|c| (c.region, c.summary))
        .collect())
}

impl Run {
    fn cfg(&self) -> &crate::config::RunConfig {
        &self.loaded.config
    }

    fn input(&mut self, label: &str, path: &Path) -> Result<(), CliError> {
        let digest = if path.is_dir() { dir_digest(path)? } else { file_digest(path)? };
        self.inputs.insert(label.to_string(), digest);
        Ok(())
    }

    fn output(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, contents.as_ref()).map_err(CliError::io(&path))?;
        self.outputs.insert(name.to_string(), sha256_hex(contents));
        Ok(())
    }

    fn finish(self, command: &str, details: Value) -> Result<(), CliError> {
        let entry = CommandManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: now_unix(),
            config_digest: self.config_digest,
            backend: self.backend_desc,
            inputs: self.inputs,
            outputs: self.outputs,
            details,
        };
        write_entry(&self.out, command, entry)
    }

    fn parcellation(&mut self) -> Result<Arc<Parcellation>, CliError> {
        let path = self.loaded.resolve(&self.cfg().parcellation);
        self.input("parcellation", &path)?;
        Ok(Arc::new(load_parcellation(&path)?))
    }

    fn params(&self) -> Result<(RequestParams, RetryPolicy), CliError> {
        let b = &self.cfg().backend;
        if b.model_id.is_empty() {
            return Err(CliError::Config("backend.model_id is required".into()));
        }
        let params = RequestParams {
            model_id: b.model_id.clone(),
            temperature: b.temperature,
            want_logprobs: b.logprobs,
            max_output_tokens: b.max_output_tokens,
        };
        let retry = RetryPolicy {
            max_attempts: b.max_attempts,
            backoff_base: Duration::from_millis(b.backoff_ms),
        };
        Ok((params, retry))
    }

    /// Replay store, recording live backend, or live backend caching into
    /// the run directory. Credentials are checked here, before any request.
    fn backend(&mut self) -> Result<Box<dyn ChatBackend>, CliError> {
        if let Some(path) = self.replay.clone() {
            self.input("replay_store", &path)?;
            self.backend_desc = "replay".into();
            return Ok(Box::new(ReplayBackend::load(&path)?));
        }
        let b = &self.cfg().backend;
        let live = HttpBackend::from_env(b.endpoint.clone(), &b.api_key_env, Duration::from_secs(b.timeout_secs))?;
        let store_path = self.record.clone().unwrap_or_else(|| self.out.join("responses.jsonl"));
        self.backend_desc = format!("live:{}", b.endpoint);
        Ok(Box::new(Recorder::new(live, ReplayStore::open(&store_path)?)))
    }

    fn templates(&mut self) -> Result<Templates, CliError> {
        match self.loaded.resolve_opt(&self.cfg().priors.templates_dir) {
            Some(dir) => {
                self.input("templates", &dir)?;
                Ok(Templates::load_dir(&dir)?)
            }
            None => Ok(Templates::default()),
        }
    }

    fn eval_set(&mut self, flag: Option<&Path>, parc: &Arc<Parcellation>) -> Result<Option<EvaluationSet>, CliError> {
        let e = self.cfg().evaluate.clone();
        if let Some(path) = flag.map(Path::to_path_buf).or_else(|| self.loaded.resolve_opt(&e.eval_set)) {
            self.input("eval_set", &path)?;
            return Ok(Some(EvaluationSet::load(&path, parc.clone())?));
        }
        let Some(atlas_path) = self.loaded.resolve_opt(&e.atlas) else {
            return Ok(None);
        };
        self.input("atlas", &atlas_path)?;
        let file = std::fs::File::open(&atlas_path).map_err(CliError::io(&atlas_path))?;
        let atlas = read_connectome(file, parc.clone(), ConnectomeKind::StreamlineCount)?;
        let label = atlas_path
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let set = build_eval_set(&atlas, e.n_positive, e.n_negative, e.eval_seed, &label)?;
        self.output("eval_set.json", set.to_json())?;
        Ok(Some(set))
    }

    fn pairs(&mut self, flag: Option<&Path>, parc: &Arc<Parcellation>) -> Result<Vec<RegionPair>, CliError> {
        if let Some(path) = flag.map(Path::to_path_buf).or_else(|| self.loaded.resolve_opt(&self.cfg().priors.pairs)) {
            self.input("pairs", &path)?;
            return read_pairs(&path, parc);
        }
        if let Some(set) = self.eval_set(None, parc)? {
            let mut pairs = set.pairs();
            pairs.sort();
            return Ok(pairs);
        }
        Ok(enumerate_pairs(parc, self.cfg().priors.scope))
    }

    /// Writes records, the aggregated matrix and any failures; returns the
    /// manifest details.
    fn write_batch(
        &mut self,
        outcome: &BatchOutcome,
        pairs: &[RegionPair],
        parc: &Arc<Parcellation>,
        strategy: PromptStrategy,
    ) -> Result<Value, CliError> {
        self.output("records.jsonl", jsonl(&outcome.records))?;
        if !outcome.failures.is_empty() {
            self.output("failures.jsonl", jsonl(&outcome.failures))?;
        }
        let matrix = aggregate(&outcome.records, parc.clone())?;
        let mut csv = Vec::new();
        write_connectome(&mut csv, matrix.connectome())?;
        self.output("priors.csv", csv)?;

        let mut warnings = Vec::new();
        let no_lp = outcome.records.iter().filter(|r| r.no_logprobs).count();
        if no_lp > 0 {
            warnings.push(format!("{no_lp} records had no log-probabilities; their confidence is 0 or 1"));
        }
        if !outcome.failures.is_empty() {
            warnings.push(format!("{} queries failed", outcome.failures.len()));
        }
        let c = self.cfg();
        let manifest = PriorManifest {
            parcellation: parc.id().to_string(),
            strategy,
            model_id: c.backend.model_id.clone(),
            repeats: c.priors.repeats,
            orderings: c.orderings()?,
            created_at: now_unix().to_string(),
            record_digests: outcome.records.iter().map(|r| r.raw_response_digest.clone()).collect(),
            missing_pairs: matrix.missing_pairs(pairs).into_iter().cloned().collect(),
            warnings,
        };
        println!(
            "{} records for {} pairs ({} failed), strategy {strategy}",
            outcome.records.len(),
            pairs.len(),
            outcome.failures.len()
        );
        Ok(serde_json::to_value(manifest).expect("manifest serializes"))
    }

    fn priors(&mut self, pairs_flag: Option<&Path>) -> Result<Value, CliError> {
        let strategy = self.cfg().strategy()?;
        if strategy.base == PromptBase::RagCitation {
            return Err(CliError::Config("use `ground` for the rag_citation strategy".into()));
        }
        let (params, retry) = self.params()?;
        let parc = self.parcellation()?;
        let pairs = self.pairs(pairs_flag, &parc)?;
        let templates = self.templates()?;
        let region_context = match self.loaded.resolve_opt(&self.cfg().priors.region_context) {
            Some(path) => {
                self.input("region_context", &path)?;
                read_region_context(&path)?
            }
            None => BTreeMap::new(),
        };
        let backend = self.backend()?;
        let plan = BatchPlan {
            pairs: pairs.clone(),
            strategy,
            orderings: self.cfg().orderings()?,
            repeats_per_ordering: self.cfg().priors.repeats,
            concurrency_limit: self.cfg().priors.concurrency_limit,
            retry,
            params,
            templates,
            region_context,
        };
        let outcome = run_batch(&plan, backend.as_ref())?;
        let details = self.write_batch(&outcome, &pairs, &parc, strategy)?;
        if !outcome.failures.is_empty() {
            self.finish_partial("priors", details)?;
            return Err(CliError::Backend(format!("{} queries failed", outcome.failures.len())));
        }
        Ok(details)
    }

    /// Records what was written before a partial failure.
    fn finish_partial(&mut self, command: &str, details: Value) -> Result<(), CliError> {
        let entry = CommandManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: now_unix(),
            config_digest: self.config_digest.clone(),
            backend: self.backend_desc.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            details,
        };
        write_entry(&self.out, command, entry)
    }

    fn evaluate(&mut self, records_flag: Option<&Path>, eval_flag: Option<&Path>) -> Result<Value, CliError> {
        let parc = self.parcellation()?;
        let records_path = records_flag.map_or_else(|| self.out.join("records.jsonl"), Path::to_path_buf);
        if !records_path.exists() {
            return Err(CliError::Data(format!("missing records: {}", records_path.display())));
        }
        self.input("records", &records_path)?;
        let records = read_records(&records_path)?;
        let eval = self
            .eval_set(eval_flag, &parc)?
            .ok_or_else(|| CliError::Config("evaluate needs evaluate.eval_set or evaluate.atlas".into()))?;
        let e = self.cfg().evaluate.clone();
        let score = score_run(&records, &eval, e.cutoff)?;
        let stability = match stability_report(&records, &eval, e.cutoff) {
            Ok(s) => Some(s),
            Err(EvalError::TooFewReplicates(_)) => None,
            Err(other) => return Err(other.into()),
        };
        let separation = match confidence_separation(&records, &eval, e.cutoff) {
            Ok(m) => Some(m),
            Err(EvalError::DegenerateGroups { .. }) => None,
            Err(other) => return Err(other.into()),
        };
        let cost = match self.loaded.resolve_opt(&e.prices) {
            Some(path) => {
                self.input("prices", &path)?;
                Some(cost_report(&records, &PriceTable::load(&path)?)?)
            }
            None => None,
        };
        let report = EvaluationReport {
            strategy: records[0].strategy.to_string(),
            model_id: records[0].model_id.clone(),
            score,
            stability,
            separation,
            disagreements: disagreement_report(&records, &eval, e.cutoff, e.disagreement_fraction),
            cost,
        };
        self.output("scores.json", pretty(&report))?;
        self.output("scores.md", report.to_markdown())?;
        println!(
            "accuracy {:.4} ({}), FP rate {:.4}, FN rate {:.4}",
            report.score.accuracy, report.score.accuracy_spread, report.score.fp_rate, report.score.fn_rate
        );
        Ok(json!({ "eval_pairs": eval.len(), "records": records.len() }))
    }

    fn embedder(&self) -> Result<Box<dyn Embedder>, CliError> {
        let r = &self.cfg().retrieval;
        Ok(match r.embedder {
            EmbedderKind::Hash => Box::new(HashEmbedder::new(r.embed_dim)),
            EmbedderKind::Http => Box::new(HttpEmbedder::from_env(
                r.embed_endpoint.clone(),
                r.embed_model.clone(),
                r.embed_dim,
                &r.embed_api_key_env,
                Duration::from_secs(self.cfg().backend.timeout_secs),
            )?),
        })
    }

    fn reranker(&self) -> Result<Option<Box<dyn Reranker>>, CliError> {
        let r = &self.cfg().retrieval;
        let Some(endpoint) = &r.rerank_endpoint else {
            return Ok(None);
        };
        Ok(Some(Box::new(HttpReranker::from_env(
            endpoint.clone(),
            r.rerank_model.clone(),
            &r.rerank_api_key_env,
            Duration::from_secs(self.cfg().backend.timeout_secs),
        )?)))
    }

    fn index_dir(&self) -> PathBuf {
        self.loaded
            .resolve_opt(&self.cfg().retrieval.index_dir)
            .unwrap_or_else(|| self.out.join("index"))
    }

    fn ingest(&mut self) -> Result<Value, CliError> {
        let r = self.cfg().retrieval.clone();
        let corpus = self
            .loaded
            .resolve_opt(&r.corpus_dir)
            .ok_or_else(|| CliError::Config("ingest needs retrieval.corpus_dir".into()))?;
        self.input("corpus", &corpus)?;
        let docs = load_corpus_dir(&corpus)?;
        let embedder = self.embedder()?;
        let index = CorpusIndex::ingest(&docs, r.chunking(), embedder.as_ref(), r.bm25())?;
        let dir = self.index_dir();
        index.save(&dir)?;
        let digest = dir_digest(&dir)?;
        let name = dir
            .strip_prefix(&self.out)
            .map_or_else(|_| dir.display().to_string(), |p| p.display().to_string());
        self.outputs.insert(name, digest);
        println!("indexed {} documents into {} chunks", docs.len(), index.len());
        Ok(json!({ "documents": docs.len(), "chunks": index.len(), "embedder": index.embedder_id() }))
    }

    fn ground(&mut self, pairs_flag: Option<&Path>, contexts: bool) -> Result<Value, CliError> {
        let (params, retry) = self.params()?;
        let parc = self.parcellation()?;
        let pairs = self.pairs(pairs_flag, &parc)?;
        let templates = self.templates()?;
        let dir = self.index_dir();
        self.input("index", &dir)?;
        let index = CorpusIndex::load(&dir)?;
        let embedder = self.embedder()?;
        if embedder.id() != index.embedder_id() {
            return Err(CliError::Config(format!(
                "index was built with embedder `{}`, configured embedder is `{}`",
                index.embedder_id(),
                embedder.id()
            )));
        }
        let reranker = self.reranker()?;
        let backend = self.backend()?;
        let r = self.cfg().retrieval.clone();
        let mut opts = GroundingOptions::new(&templates, &params, &retry, embedder.as_ref());
        opts.reranker = reranker.as_deref();
        opts.k_candidates = r.k_candidates;
        opts.top = r.top;
        let limit = self.cfg().priors.concurrency_limit;
        let orderings = self.cfg().orderings()?;
        let outcome = run_grounded_batch(
            &index,
            &pairs,
            &orderings,
            self.cfg().priors.repeats,
            backend.as_ref(),
            &opts,
            limit,
        )?;
        let strategy = PromptStrategy::new(PromptBase::RagCitation, false);
        let mut details = self.write_batch(&outcome, &pairs, &parc, strategy)?;
        let verified = outcome
            .records
            .iter()
            .flat_map(|r| r.citations.iter().flatten())
            .fold((0, 0), |(v, n), c| (v + usize::from(c.verified), n + 1));
        println!("{} of {} citations verified", verified.0, verified.1);
        details["citations_verified"] = json!(verified.0);
        details["citations_total"] = json!(verified.1);
        if contexts {
            let mut regions: Vec<String> = pairs
                .iter()
                .flat_map(|p| [p.a().name.clone(), p.b().name.clone()])
                .collect();
            regions.sort();
            regions.dedup();
            let ctx = region_contexts(&index, &regions, backend.as_ref(), &templates, &params, &retry, limit)?;
            self.output("region_context.json", pretty(&ctx))?;
        }
        if !outcome.failures.is_empty() {
            self.finish_partial("ground", details)?;
            return Err(CliError::Backend(format!("{} queries failed", outcome.failures.len())));
        }
        Ok(details)
    }

    fn read_matrix(&mut self, label: &str, path: &Path, parc: &Arc<Parcellation>, kind: ConnectomeKind) -> Result<connectome_priors::Connectome, CliError> {
        self.input(label, path)?;
        let file = std::fs::File::open(path).map_err(CliError::io(path))?;
        Ok(read_connectome(file, parc.clone(), kind)?)
    }

    /// Weights, priors and the augmented result as configured under `filter`.
    fn filter_outcome(&mut self, parc: &Arc<Parcellation>) -> Result<(connectome_priors::Connectome, FilterOutcome), CliError> {
        let f = self.cfg().filter.clone();
        let weights_path = self
            .loaded
            .resolve_opt(&f.weights)
            .ok_or_else(|| CliError::Config("filter.weights is required".into()))?;
        let weights = self.read_matrix("weights", &weights_path, parc, ConnectomeKind::Commit2WeightSum)?;
        let priors_path = self.loaded.resolve_opt(&f.priors).unwrap_or_else(|| self.out.join("priors.csv"));
        let priors = self.read_matrix("priors", &priors_path, parc, ConnectomeKind::PriorConfidence)?;
        let priors = PriorMatrix::dense(priors, self.cfg().strategy()?);
        let unfiltered = match self.loaded.resolve_opt(&f.unfiltered) {
            Some(p) => Some(self.read_matrix("unfiltered", &p, parc, ConnectomeKind::StreamlineCount)?),
            None => None,
        };
        let outcome = augment_filter(&weights, &priors, f.cutoff, unfiltered.as_ref())?;
        Ok((weights, outcome))
    }

    fn filter(&mut self) -> Result<Value, CliError> {
        let parc = self.parcellation()?;
        let (_, outcome) = self.filter_outcome(&parc)?;
        let mut buf = Vec::new();
        write_connectome(&mut buf, outcome.filtered())?;
        self.output("filtered.csv", buf)?;
        let mut buf = Vec::new();
        outcome.write_provenance(&mut buf)?;
        self.output("provenance.csv", buf)?;
        let mut added = String::from("region_a,region_b\n");
        for p in added_edges(&outcome) {
            added.push_str(&format!("{},{}\n", p.a().name, p.b().name));
        }
        self.output("added_edges.csv", added)?;
        let counts: BTreeMap<String, usize> = outcome
            .counts()
            .iter()
            .map(|(p, n)| (serde_json::to_value(p).unwrap().as_str().unwrap().to_string(), *n))
            .collect();
        println!(
            "{} edges retained, {} added by the prior at cutoff {}",
            outcome.filtered().edge_count(),
            outcome.n_added_by_llm(),
            outcome.cutoff()
        );
        Ok(json!({ "cutoff": outcome.cutoff(), "counts": counts, "n_added_by_llm": outcome.n_added_by_llm() }))
    }

    fn target(&mut self, parc: &Arc<Parcellation>) -> Result<RegionalVector, CliError> {
        let n = self.cfg().ndm.clone();
        let path = self
            .loaded
            .resolve_opt(&n.target)
            .ok_or_else(|| CliError::Config("ndm.target is required".into()))?;
        self.input("target", &path)?;
        Ok(RegionalVector::load_csv(&path, parc.clone())?.excluding(&n.exclude)?)
    }

    fn ndm(&mut self) -> Result<Value, CliError> {
        let parc = self.parcellation()?;
        let target = self.target(&parc)?;
        let n = self.cfg().ndm.clone();
        if n.connectomes.is_empty() && !n.include_augmented {
            return Err(CliError::Config("ndm.connectomes is empty".into()));
        }
        let settings = n.settings();
        let mut graphs = Vec::new();
        for entry in &n.connectomes {
            let path = self.loaded.resolve(&entry.path);
            let c = self.read_matrix(&format!("connectome:{}", entry.label), &path, &parc, entry.kind)?;
            graphs.push((entry.label.clone(), c));
        }
        if n.include_augmented {
            let (_, outcome) = self.filter_outcome(&parc)?;
            graphs.push(("augmented".to_string(), outcome.filtered().clone()));
        }
        let mut rows = Vec::new();
        let mut table = String::from("| connectome | edges | r | SSE | t* |\n|---|---|---|---|---|\n");
        for (label, c) in &graphs {
            let f = fit(c, &target, &settings)?;
            table.push_str(&format!(
                "| {label} | {} | {:.4} | {:.4e} | {:.4} |\n",
                c.edge_count(),
                f.r,
                f.sse,
                f.t_star
            ));
            rows.push(json!({ "label": label, "edges": c.edge_count(), "fit": f }));
        }
        let report = json!({
            "seed_region": rows[0]["fit"]["seed_region"],
            "grid": settings.grid,
            "normalization": settings.normalization,
            "fits": rows,
        });
        self.output("fit.json", pretty(&report))?;
        self.output("fit.md", &table)?;
        print!("{table}");
        Ok(json!({ "connectomes": graphs.len() }))
    }

    fn permute(&mut self) -> Result<Value, CliError> {
        let parc = self.parcellation()?;
        let target = self.target(&parc)?;
        let (base, outcome) = self.filter_outcome(&parc)?;
        let n = self.cfg().ndm.clone();
        let result = permutation_test(&base, &outcome, &target, &n.settings(), n.trials, n.rng_seed)?;
        let mut buf = Vec::new();
        result.write_null_csv(&mut buf)?;
        self.output("null.csv", buf)?;
        let summary = json!({
            "n_added": result.n_added,
            "trials": result.trials,
            "rng_seed": result.rng_seed,
            "observed_r": result.observed_r,
            "observed_sse": result.observed_sse,
            "p_r": result.p_r,
            "p_sse": result.p_sse,
        });
        self.output("permutation.json", pretty(&summary))?;
        println!(
            "{} added edges, {} trials: p(r) = {:.4}, p(SSE) = {:.4}",
            result.n_added, result.trials, result.p_r, result.p_sse
        );
        Ok(summary)
    }
}
