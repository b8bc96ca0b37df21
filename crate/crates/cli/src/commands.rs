use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::Path;

use log::info;

use socialalign_core::dataset::io::{read_jsonl, read_splits, to_jsonl, write_splits, SPLITS_FILE};
use socialalign_core::dataset::{parse_keywords, split_dataset, Corpus, Split, SplitAssignment, NOISE_KEYWORDS_V1};
use socialalign_core::dataset::{synth_generate, SynthConfig};
use socialalign_core::error::{Error, Result};
use socialalign_core::model::train::fit;
use socialalign_core::model::{Ablations, ToyModel, ToyModelConfig, TrainState};
use socialalign_core::pac_lora::utilization_stats;
use socialalign_core::persona::{Extractor, Persona, PersonaCache};
use socialalign_core::pipeline::{
    build_examples, build_personas, evaluate_labeled, gate_records, generate_responses, label_generations, Example,
    Generation,
};
use socialalign_core::provider::{EndpointConfig, HttpTransport, ProviderClient};
use socialalign_core::retrieval::Bm25Index;
use socialalign_core::sentiment::Classifier;
use socialalign_core::Execution;

use crate::manifest::Run;
use crate::report;
use crate::{Backend, Cli, Command, Global, SplitUnit};

pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const PERSONAS_FILE: &str = "personas.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

impl Global {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// The config file (or defaults) with command-line overrides applied.
    fn model_config(&self) -> Result<ToyModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ToyModelConfig::parse(&fs::read_to_string(p)?)?,
            None => ToyModelConfig::default(),
        };
        self.apply_overrides(&mut cfg)?;
        Ok(cfg)
    }

    fn apply_overrides(&self, cfg: &mut ToyModelConfig) -> Result<()> {
        if let Some(k) = self.topk {
            cfg.top_k = k;
        }
        if let Some(n) = self.experts {
            cfg.n_experts = n;
        }
        if let Some(r) = self.rank {
            cfg.rank = r;
        }
        if let Some(a) = &self.ablate {
            cfg.ablations = Ablations::parse(a)?;
        }
        cfg.validate()
    }

    fn top_k(&self) -> usize {
        self.topk.unwrap_or(socialalign_core::retrieval::DEFAULT_TOP_K)
    }

    fn provider(&self) -> Result<ProviderClient> {
        match &self.fixtures {
            Some(dir) => Ok(ProviderClient::replay(dir)),
            None => Ok(ProviderClient::live(EndpointConfig::from_env()?, Box::new(HttpTransport))),
        }
    }
}

fn extractor<'a>(backend: Backend, client: Option<&'a ProviderClient>) -> Extractor<'a> {
    match (backend, client) {
        (Backend::Provider, Some(c)) => Extractor::Provider(c),
        _ => Extractor::Stub,
    }
}

fn classifier<'a>(backend: Backend, client: Option<&'a ProviderClient>) -> Classifier<'a> {
    match (backend, client) {
        (Backend::Provider, Some(c)) => Classifier::Provider(c),
        _ => Classifier::Lexicon,
    }
}

fn load_corpus(run: &mut Run, dir: &Path, strict: bool) -> Result<Corpus> {
    for f in Corpus::files(dir) {
        run.input(&f)?;
    }
    Corpus::load(dir, strict)
}

fn load_splits(run: &mut Run, dir: &Path) -> Result<SplitAssignment> {
    let path = dir.join(SPLITS_FILE);
    run.input(&path)?;
    read_splits(&path)
}

fn personas(
    g: &Global,
    run: &mut Run,
    corpus: &Corpus,
    stored: Option<&Path>,
    k: usize,
) -> Result<BTreeMap<String, Persona>> {
    let cache = match stored {
        Some(p) => {
            run.input(p)?;
            PersonaCache::load(p)?
        }
        None => PersonaCache::new(),
    };
    let client = (g.extractor == Backend::Provider).then(|| g.provider()).transpose()?;
    build_personas(corpus, k, extractor(g.extractor, client.as_ref()), &cache, g.exec())
}

/// An example belongs to a split when its topic or its user is assigned to it.
fn in_split(e: &Example, splits: &SplitAssignment, want: Option<Split>) -> bool {
    match want {
        None => true,
        Some(s) => splits.get(&e.topic_id) == Some(s) || splits.get(&e.user_id) == Some(s),
    }
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    if s == "all" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("unknown split {s:?}; expected train, valid, test or all")))
}

fn split_ids(corpus: &Corpus, unit: SplitUnit) -> Vec<String> {
    match unit {
        SplitUnit::Topic => corpus.topics.iter().map(|t| t.topic_id.clone()).collect(),
        SplitUnit::User => corpus.histories.iter().map(|h| h.user_id.clone()).collect(),
    }
}

fn corpus_outputs(run: &mut Run, corpus: &Corpus, splits: &SplitAssignment) -> Result<()> {
    let tmp = tempfile::tempdir()?;
    corpus.save(tmp.path())?;
    for f in Corpus::files(tmp.path()) {
        let name = f.file_name().expect("corpus file name").to_string_lossy().into_owned();
        run.output(&name, fs::read(&f)?);
    }
    let sp = tmp.path().join(SPLITS_FILE);
    write_splits(&sp, splits)?;
    run.output(SPLITS_FILE, fs::read(&sp)?);
    Ok(())
}

pub fn run(cli: &Cli) -> Result<String> {
    let g = &cli.global;
    let mut summary = String::new();
    match &cli.command {
        Command::Preprocess { data, keywords, unit } => {
            let mut run = Run::new("preprocess", g.seed, &g.out);
            let corpus = load_corpus(&mut run, data, false)?;
            let kws = match keywords {
                Some(p) => {
                    run.input(p)?;
                    parse_keywords(&fs::read_to_string(p)?)
                }
                None => parse_keywords(NOISE_KEYWORDS_V1),
            };
            let (kept, outcome) = corpus.filtered(&kws, g.exec());
            run.lap("filter");
            let splits = split_dataset(&split_ids(&kept, *unit), g.seed)?;
            let mut dropped = String::from("post_id\treason\n");
            for (p, reason) in &outcome.dropped {
                let _ = writeln!(dropped, "{}\t{reason}", p.post_id);
            }
            run.output("dropped.tsv", dropped);
            corpus_outputs(&mut run, &kept, &splits)?;
            let (a, b, c) = splits.sizes();
            let _ = write!(
                summary,
                "kept {} of {} posts; split {a}/{b}/{c}",
                outcome.kept.len(),
                corpus.posts.len()
            );
            run.finish()?;
        }
        Command::Synth {
            topics,
            users,
            posts_per_user,
            unit,
        } => {
            let mut run = Run::new("synth", g.seed, &g.out);
            let s = synth_generate(&SynthConfig {
                n_topics: *topics,
                n_users: *users,
                posts_per_user: *posts_per_user,
                seed: g.seed,
            })?;
            let splits = split_dataset(&split_ids(&s.corpus, *unit), g.seed)?;
            corpus_outputs(&mut run, &s.corpus, &splits)?;
            let _ = write!(summary, "{} topics, {} users, {} posts", topics, users, s.corpus.posts.len());
            run.finish()?;
        }
        Command::Retrieve { data } => {
            let mut run = Run::new("retrieve", g.seed, &g.out);
            let corpus = load_corpus(&mut run, data, false)?;
            let k = g.top_k();
            let histories = corpus.history_map();
            let mut tsv = String::from("topic\tuser\trank\tpost_id\tscore\n");
            for t in &corpus.topics {
                for post in &t.posts {
                    let older: Vec<_> = histories
                        .get(post.user_id.as_str())
                        .map(|h| h.posts.iter().filter(|p| p.timestamp < post.timestamp).collect())
                        .unwrap_or_default();
                    let texts: Vec<&str> = older.iter().map(|p| p.text.as_str()).collect();
                    let hits = Bm25Index::with_defaults(&texts).retrieve_topk_with(&t.hashtag, k, g.exec())?;
                    for (i, h) in hits.hits.iter().enumerate() {
                        let _ = writeln!(tsv, "{}\t{}\t{}\t{}\t{}", t.topic_id, post.user_id, i + 1, older[h.doc_id].post_id, h.score);
                    }
                }
            }
            run.output("retrieval.tsv", tsv);
            let _ = write!(summary, "retrieved top-{k} for {} topics", corpus.topics.len());
            run.finish()?;
        }
        Command::Persona { data } => {
            let mut run = Run::new("persona", g.seed, &g.out);
            let corpus = load_corpus(&mut run, data, false)?;
            let cache = PersonaCache::new();
            let client = (g.extractor == Backend::Provider).then(|| g.provider()).transpose()?;
            let ps = build_personas(&corpus, g.top_k(), extractor(g.extractor, client.as_ref()), &cache, g.exec())?;
            run.output(PERSONAS_FILE, to_jsonl(&cache.records())?);
            let _ = write!(summary, "{} personas", ps.len());
            run.finish()?;
        }
        Command::Train { data, personas: stored } => {
            let mut run = Run::new("train", g.seed, &g.out);
            let cfg = g.model_config()?;
            run.config(cfg.to_text());
            let corpus = load_corpus(&mut run, data, false)?;
            let splits = load_splits(&mut run, data)?;
            let ps = personas(g, &mut run, &corpus, stored.as_deref(), cfg.top_k)?;
            let ids: Vec<String> = corpus.topics.iter().map(|t| t.topic_id.clone()).collect();
            let examples: Vec<Example> = build_examples(&corpus, &ids, &ps, &cfg, true)?
                .into_iter()
                .filter(|e| in_split(e, &splits, Some(Split::Train)) && !e.prompt.response.is_empty())
                .collect();
            run.lap("prepare");
            let seqs: Vec<_> = examples.iter().map(|e| e.prompt.clone()).collect();
            let mut model = ToyModel::init(&cfg, g.seed)?;
            let mut state = TrainState::new(&model, g.seed);
            let log = fit(&mut model, &mut state, &seqs, g.exec(), |l| {
                info!("step {} loss {}", l.step, l.loss)
            })?;
            run.lap("train");
            let model_dir = g.out.join("model");
            model.save(&model_dir)?;
            for f in ["config.txt", "adapters.pacl", "adapters.pacl.manifest", "base.bin"] {
                let p = model_dir.join(f);
                if p.exists() {
                    run.existing_output(&p)?;
                }
            }
            let mut tsv = String::from("step\tloss\tlr\n");
            log.iter().for_each(|l| tsv.push_str(&l.to_tsv()));
            run.output("train_log.tsv", tsv);
            let last = log.last().map_or(f64::NAN, |l| l.loss);
            let _ = write!(summary, "trained {} steps on {} examples; final loss {last:.4}", log.len(), seqs.len());
            run.finish()?;
        }
        Command::Generate {
            data,
            model,
            personas: stored,
            split,
            temperature,
        } => {
            let mut run = Run::new("generate", g.seed, &g.out);
            let want = parse_split(split)?;
            let mut m = ToyModel::load(model)?;
            let mut cfg = m.config().clone();
            g.apply_overrides(&mut cfg)?;
            m = m.with_config(cfg.clone())?;
            run.config(cfg.to_text());
            let corpus = load_corpus(&mut run, data, false)?;
            let splits = load_splits(&mut run, data)?;
            let ps = personas(g, &mut run, &corpus, stored.as_deref(), cfg.top_k)?;
            let ids: Vec<String> = corpus.topics.iter().map(|t| t.topic_id.clone()).collect();
            let examples: Vec<Example> = build_examples(&corpus, &ids, &ps, &cfg, false)?
                .into_iter()
                .filter(|e| in_split(e, &splits, want))
                .collect();
            if examples.is_empty() {
                return Err(Error::EmptyCollection("examples in the requested split"));
            }
            run.lap("prepare");
            let gens = generate_responses(&m, &examples, *temperature, g.seed, g.exec())?;
            run.lap("generate");
            run.output(GENERATIONS_FILE, to_jsonl(&gens)?);
            let _ = write!(summary, "{} generations", gens.len());
            run.finish()?;
        }
        Command::Evaluate { data, generations } => {
            let mut run = Run::new("evaluate", g.seed, &g.out);
            let corpus = load_corpus(&mut run, data, false)?;
            run.input(generations)?;
            let gens: Vec<Generation> = read_jsonl(generations, |r: Generation, _| Ok(r))?;
            let client = (g.classifier == Backend::Provider).then(|| g.provider()).transpose()?;
            let labeled = label_generations(&corpus, &gens, classifier(g.classifier, client.as_ref()), g.exec())?;
            let ev = evaluate_labeled(&corpus, &labeled)?;
            run.lap("evaluate");
            run.output("predictions.tsv", report::predictions_tsv(&labeled));
            run.output(METRICS_FILE, report::metrics_json(&ev));
            run.output("distributions.tsv", report::distributions_tsv(&ev));
            let text = report::report_txt(&ev);
            run.output("report.txt", text.clone());
            summary.push_str(text.trim_end());
            run.finish()?;
        }
        Command::Experts {
            data,
            model,
            personas: stored,
        } => {
            let mut run = Run::new("experts", g.seed, &g.out);
            let mut m = ToyModel::load(model)?;
            let mut cfg = m.config().clone();
            g.apply_overrides(&mut cfg)?;
            m = m.with_config(cfg.clone())?;
            run.config(cfg.to_text());
            let corpus = load_corpus(&mut run, data, false)?;
            let ps = personas(g, &mut run, &corpus, stored.as_deref(), cfg.top_k)?;
            let ids: Vec<String> = corpus.topics.iter().map(|t| t.topic_id.clone()).collect();
            let examples = build_examples(&corpus, &ids, &ps, &cfg, false)?;
            let records = gate_records(&m, &examples, g.exec())?;
            let stats = utilization_stats(&records)?;
            run.output("gates.jsonl", to_jsonl(&records)?);
            let tsv = report::utilization_tsv(&stats);
            run.output("utilization.tsv", tsv);
            let _ = writeln!(summary, "topic\tmean_ga");
            for (t, u) in &stats {
                let ga: Vec<String> = u.mean_ga.iter().map(|x| format!("{x:.3}")).collect();
                let _ = writeln!(summary, "{t}\t{}", ga.join(" "));
            }
            let _ = write!(
                summary,
                "max pairwise L1 {:.4}",
                socialalign_core::pac_lora::max_pairwise_l1(&stats)
            );
            run.finish()?;
        }
    }
    Ok(summary)
}
