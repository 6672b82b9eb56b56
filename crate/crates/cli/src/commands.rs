use std::path::{Path, PathBuf};

use latent_critic::corpus::{build_vocabulary, load_corpus, read_corpus, save_corpus, write_atomic, Document};
use latent_critic::critic::{rank_outliers, ScoredCorpus};
use latent_critic::hsmm::sections::{
    fit_section_classifier, fit_transition_prior, transition_diff_report, SectionClassifier, SectionCritic,
};
use latent_critic::hsmm::{fit_hsmm, generate_synthetic, Hsmm, SyntheticConfig};
use latent_critic::math::{rng, sample_dirichlet, sample_weights, stream_seed};
use latent_critic::ngram::{
    chain_latent_nll, chains_from_jsonl, chains_to_jsonl, contribution_ranking, extract_chain, fit_chain_model,
    fit_word_lm, sample_segments, ChainCritic, ChainRecord, ChainSymbol, SymbolRecord,
};
use latent_critic::topics::{covariance_report, fit_ctm, fit_lda, CtmModel, LdaModel};
use latent_critic::{compare as compare_scores, score_documents, Critic, CriticScore, OnUnscorable, ProjectionMode};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::container::Model;
use crate::error::{CliError, CliResult, Context};
use crate::{CompareArgs, Common, CriticArgs, FitArgs, FitKind, ReportArgs, ReportKind, SampleArgs, ScoreArgs, SynthArgs};

fn setup(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.resolve_seed(common.seed)?;
    if let Some(out) = &common.out {
        cfg.paths.output = Some(out.clone());
    }
    Ok(cfg)
}

/// Flag first, then the config file.
fn pick(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| CliError::usage("missing-argument", format!("no {what} path given (flag or [paths] entry)")))
}

fn check_inputs(paths: &[&Path]) -> CliResult<()> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::usage("missing-path", format!("input {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn check_output_file(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        return Err(CliError::usage("bad-output", format!("{} is a directory", path.display())));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::usage("missing-path", format!("output directory {} does not exist", parent.display())));
    }
    Ok(())
}

fn check_output_dir(path: &Path) -> CliResult<()> {
    if path.exists() && !path.is_dir() {
        return Err(CliError::usage("bad-output", format!("{} is not a directory", path.display())));
    }
    std::fs::create_dir_all(path).map_err(|e| CliError::usage("missing-path", format!("{}: {e}", path.display())))
}

fn output_file(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = pick(&None, &cfg.paths.output, "output")?;
    check_output_file(&out)?;
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes()).at(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(latent_critic::Error::from)?;
    s.push('\n');
    write_text(path, &s)
}

fn docs(path: &Path) -> CliResult<Vec<Document>> {
    load_corpus(path).at(path)
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(latent_critic::Error::from).at(path)
}

/// Chain JSONL has a `chain` field on every record; anything else is read
/// as a document corpus with mention annotations.
fn is_chain_jsonl(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .is_some_and(|v| v.get("chain").is_some())
}

fn load_chains(path: &Path) -> CliResult<Vec<(String, Vec<ChainSymbol>)>> {
    let text = read(path)?;
    if is_chain_jsonl(&text) {
        let records = chains_from_jsonl(text.as_bytes()).at(path)?;
        records
            .into_iter()
            .map(|r| Ok((r.doc_id.clone(), r.symbols().at(path)?)))
            .collect()
    } else {
        read_corpus(text.as_bytes())
            .at(path)?
            .iter()
            .map(|d| Ok((d.id.clone(), extract_chain(d).at(path)?)))
            .collect()
    }
}

fn chains_only(path: &Path) -> CliResult<Vec<Vec<ChainSymbol>>> {
    Ok(load_chains(path)?.into_iter().map(|(_, c)| c).collect())
}

/// `--paper-scale` replaces the configured generator; size flags apply last.
fn synth_config(cfg: &RunConfig, a: &SynthArgs) -> SyntheticConfig {
    let mut synth = if a.paper_scale {
        SyntheticConfig::paper_scale(cfg.seed)
    } else {
        cfg.synth.clone()
    };
    synth.train_size = a.train_size.unwrap_or(synth.train_size);
    synth.val_size = a.val_size.unwrap_or(synth.val_size);
    synth.test_size = a.test_size.unwrap_or(synth.test_size);
    synth
}

pub fn synth_gen(a: &SynthArgs) -> CliResult<()> {
    let cfg = setup(&a.common)?;
    let dir = pick(&None, &cfg.paths.output, "output directory")?;
    let synth = synth_config(&cfg, a);
    synth.validate()?;
    check_output_dir(&dir)?;

    let data = generate_synthetic(&synth)?;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let path = dir.join(format!("{name}.jsonl"));
        save_corpus(&path, &split.docs).at(&path)?;
    }
    let metadata = json!({
        "config": synth,
        "assignment": data.assignment,
        "states": {"train": data.train.states, "val": data.val.states, "test": data.test.states},
    });
    Model::Hsmm(data.model).save(&dir.join("ground_truth.json"), Some(metadata))
}

pub fn fit(a: &FitArgs) -> CliResult<()> {
    let mut cfg = setup(&a.common)?;
    let train = pick(&a.train, &cfg.paths.train, "training corpus")?;
    let val = a.val.clone().or_else(|| cfg.paths.val.clone());
    let mut inputs = vec![train.as_path()];
    if let (FitKind::Hsmm, Some(v)) = (a.kind, &val) {
        inputs.push(v);
    }
    check_inputs(&inputs)?;
    let out = output_file(&cfg)?;

    if let Some(k) = a.num_states {
        cfg.hsmm.num_states = k;
    }
    if let Some(m) = a.num_topics {
        cfg.lda.num_topics = m;
        cfg.ctm.num_topics = m;
    }
    if let Some(n) = a.order {
        cfg.markov_lm.order = n;
        cfg.kn_chain.order = n;
    }

    let (model, metadata) = match a.kind {
        FitKind::KnChain => {
            let chains = chains_only(&train)?;
            let model = fit_chain_model(&chains, cfg.kn_chain.order, cfg.kn_chain.discount)?;
            (Model::KnChain(ChainCritic { model }), None)
        }
        kind => {
            let train_docs = docs(&train)?;
            match kind {
                FitKind::Hsmm => {
                    let val_docs = match &val {
                        Some(v) => docs(v)?,
                        None => train_docs.clone(),
                    };
                    let (model, trace) = fit_hsmm(&train_docs, &val_docs, &cfg.hsmm)?;
                    (Model::Hsmm(model), Some(json!({"config": cfg.hsmm, "trace": trace})))
                }
                FitKind::MarkovLm => (Model::MarkovLm(fit_word_lm(&train_docs, cfg.markov_lm.order)?), None),
                FitKind::Lda => {
                    let vocab = build_vocabulary(&train_docs, cfg.vocab.min_count, cfg.vocab.max_doc_fraction)?;
                    let model = fit_lda(&train_docs, &vocab, &cfg.lda)?;
                    (Model::Lda(model), Some(json!({"config": cfg.lda})))
                }
                FitKind::Ctm => {
                    let vocab = build_vocabulary(&train_docs, cfg.vocab.min_count, cfg.vocab.max_doc_fraction)?;
                    let (model, trace) = fit_ctm(&train_docs, &vocab, &cfg.ctm)?;
                    (Model::Ctm(model), Some(json!({"config": cfg.ctm, "trace": trace})))
                }
                FitKind::SectionPrior => {
                    (Model::SectionPrior(fit_transition_prior(&train_docs, cfg.sections.smoothing)?), None)
                }
                FitKind::SectionClassifier => (
                    Model::SectionClassifier(fit_section_classifier(&train_docs, cfg.sections.classifier_alpha)?),
                    None,
                ),
                FitKind::KnChain => unreachable!(),
            }
        }
    };
    model.save(&out, metadata)
}

fn sample_id(i: usize) -> String {
    format!("sample-{:06}", i + 1)
}

fn sample_hsmm(model: &Hsmm, n: usize, segments: usize, seed: u64) -> Vec<Document> {
    (0..n)
        .map(|i| {
            let (_, tokens) = model.sample_document(&mut rng(stream_seed(seed, i as u64)), segments);
            Document::from_tokens(sample_id(i), tokens)
        })
        .collect()
}

fn sample_lda(model: &LdaModel, n: usize, len: usize, seed: u64) -> Vec<Document> {
    let phi: Vec<Vec<f64>> = model.log_phi.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
    (0..n)
        .map(|i| {
            let mut r = rng(stream_seed(seed, i as u64));
            let theta = sample_dirichlet(&mut r, &model.alpha);
            let tokens = (0..len)
                .map(|_| {
                    let t = sample_weights(&mut r, &theta);
                    model.vocab.content_token(sample_weights(&mut r, &phi[t])).to_owned()
                })
                .collect();
            Document::from_tokens(sample_id(i), tokens)
        })
        .collect()
}

/// `he_1` -> (`he`, 1); `.` and `<pad>` carry no entity.
fn symbol_record(s: &str) -> SymbolRecord {
    match s.rsplit_once('_') {
        Some((sym, id)) if !sym.is_empty() && id.parse::<u32>().is_ok() => SymbolRecord {
            sym: sym.to_owned(),
            entity: id.parse().ok(),
        },
        _ => SymbolRecord {
            sym: s.to_owned(),
            entity: None,
        },
    }
}

pub fn sample(a: &SampleArgs) -> CliResult<()> {
    let cfg = setup(&a.common)?;
    let path = pick(&a.model, &cfg.paths.model, "model")?;
    check_inputs(&[&path])?;
    let out = output_file(&cfg)?;
    let n = a.num_docs.unwrap_or(cfg.sample.num_docs);
    let s = &cfg.sample;
    let seed = cfg.seed;

    let docs = match Model::load(&path)? {
        Model::Hsmm(m) => sample_hsmm(&m, n, s.num_segments, seed),
        Model::MarkovLm(m) => (0..n)
            .map(|i| sample_segments(&m, sample_id(i), s.num_segments, s.max_len, stream_seed(seed, i as u64)))
            .collect(),
        Model::Lda(m) => sample_lda(&m, n, s.doc_len, seed),
        Model::Ctm(m) => m.sample_corpus(&vec![s.doc_len; n], seed),
        Model::KnChain(c) => {
            let records: Vec<ChainRecord> = (0..n)
                .map(|i| ChainRecord {
                    doc_id: sample_id(i),
                    chain: c.model.sample(s.max_len, stream_seed(seed, i as u64)).iter().map(|t| symbol_record(t)).collect(),
                })
                .collect();
            return write_text(&out, &chains_to_jsonl(&records)?);
        }
        m @ (Model::SectionPrior(_) | Model::SectionClassifier(_)) => {
            return Err(CliError::usage("not-generative", format!("cannot sample from a {} model", m.kind())));
        }
    };
    let docs: Vec<Document> = docs.into_iter().filter(|d| d.tokens().next().is_some()).collect();
    save_corpus(&out, &docs).at(&out)
}

/// A model usable as a critic.
enum LoadedCritic {
    Hsmm(Hsmm),
    Chain(ChainCritic),
    Lda(LdaModel),
    Ctm(CtmModel),
    Section(SectionCritic),
}

impl LoadedCritic {
    fn as_dyn(&self) -> &dyn Critic {
        match self {
            LoadedCritic::Hsmm(m) => m,
            LoadedCritic::Chain(m) => m,
            LoadedCritic::Lda(m) => m,
            LoadedCritic::Ctm(m) => m,
            LoadedCritic::Section(m) => m,
        }
    }
}

fn critic_paths(args: &CriticArgs, cfg: &RunConfig) -> CliResult<(PathBuf, Option<PathBuf>)> {
    let model = pick(&args.model, &cfg.paths.model, "model")?;
    let classifier = args.classifier.clone().or_else(|| cfg.paths.classifier.clone());
    Ok((model, classifier))
}

fn load_classifier(path: &Path) -> CliResult<SectionClassifier> {
    match Model::load(path)? {
        Model::SectionClassifier(c) => Ok(c),
        m => Err(CliError::usage("wrong-model", format!("{} holds a {} model, not a section classifier", path.display(), m.kind()))),
    }
}

fn load_critic(model: &Path, classifier: Option<&Path>) -> CliResult<LoadedCritic> {
    Ok(match Model::load(model)? {
        Model::Hsmm(m) => LoadedCritic::Hsmm(m),
        Model::KnChain(m) => LoadedCritic::Chain(m),
        Model::Lda(m) => LoadedCritic::Lda(m),
        Model::Ctm(m) => LoadedCritic::Ctm(m),
        Model::SectionPrior(prior) => {
            let path = classifier
                .ok_or_else(|| CliError::usage("missing-argument", "a section prior needs --classifier"))?;
            LoadedCritic::Section(SectionCritic::new(prior, load_classifier(path)?)?)
        }
        m => {
            return Err(CliError::usage(
                "not-a-critic",
                format!("a {} model cannot be used as a critic", m.kind()),
            ))
        }
    })
}

fn project(critic: &LoadedCritic, path: &Path, cfg: &RunConfig) -> CliResult<ScoredCorpus> {
    let mode = cfg.score.projection_mode();
    if let LoadedCritic::Chain(c) = critic {
        if is_chain_jsonl(&read(path)?) {
            let projections = load_chains(path)?
                .into_iter()
                .map(|(id, chain)| {
                    let mut p = chain_latent_nll(&c.model, &chain);
                    p.mode = mode;
                    (id, p)
                })
                .collect();
            return Ok(ScoredCorpus {
                projections,
                skipped: Vec::new(),
            });
        }
    }
    let on_unscorable = if cfg.score.skip_unscorable {
        OnUnscorable::Skip
    } else {
        OnUnscorable::Fail
    };
    score_documents(critic.as_dyn(), &docs(path)?, mode, cfg.seed, on_unscorable).at(path)
}

#[derive(Serialize)]
struct Skipped<'a> {
    id: &'a str,
    reason: &'a str,
}

#[derive(Serialize)]
struct DocScore<'a> {
    id: &'a str,
    latent_nll: f64,
    positions: usize,
}

#[derive(Serialize)]
struct ScoreReport<'a> {
    kind: &'static str,
    mode: ProjectionMode,
    seed: u64,
    score: CriticScore,
    skipped: Vec<Skipped<'a>>,
    documents: Vec<DocScore<'a>>,
}

pub fn score(a: &ScoreArgs) -> CliResult<()> {
    let cfg = setup(&a.common)?;
    let (model, classifier) = critic_paths(&a.critic, &cfg)?;
    let input = pick(&a.input, &cfg.paths.input, "input corpus")?;
    let mut inputs = vec![model.as_path(), input.as_path()];
    inputs.extend(classifier.as_deref());
    check_inputs(&inputs)?;
    let out = output_file(&cfg)?;

    let critic = load_critic(&model, classifier.as_deref())?;
    let scored = project(&critic, &input, &cfg)?;
    let report = ScoreReport {
        kind: critic.as_dyn().kind(),
        mode: cfg.score.projection_mode(),
        seed: cfg.seed,
        score: scored.score(&critic.as_dyn().fingerprint()).at(&input)?,
        skipped: scored.skipped.iter().map(|(id, reason)| Skipped { id, reason }).collect(),
        documents: scored
            .projections
            .iter()
            .map(|(id, p)| DocScore {
                id,
                latent_nll: latent_critic::latent_nll(p),
                positions: p.num_positions(),
            })
            .collect(),
    };
    write_json(&out, &report)
}

pub fn compare(a: &CompareArgs) -> CliResult<()> {
    let cfg = setup(&a.common)?;
    let (model, classifier) = critic_paths(&a.critic, &cfg)?;
    let reference = pick(&a.reference, &cfg.paths.reference, "reference corpus")?;
    let samples = pick(&a.samples, &cfg.paths.samples, "sample corpus")?;
    let mut inputs = vec![model.as_path(), reference.as_path(), samples.as_path()];
    inputs.extend(classifier.as_deref());
    check_inputs(&inputs)?;
    let out = output_file(&cfg)?;

    let critic = load_critic(&model, classifier.as_deref())?;
    let fp = critic.as_dyn().fingerprint();
    let r = project(&critic, &reference, &cfg)?;
    let s = project(&critic, &samples, &cfg)?;
    let comparison = compare_scores(&r.score(&fp).at(&reference)?, &s.score(&fp).at(&samples)?)?;
    write_json(
        &out,
        &json!({
            "kind": critic.as_dyn().kind(),
            "mode": cfg.score.projection_mode(),
            "seed": cfg.seed,
            "comparison": comparison,
            "reference_skipped": r.skipped.len(),
            "samples_skipped": s.skipped.len(),
        }),
    )
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    let cfg = setup(&a.common)?;
    let top_k = a.top_k.unwrap_or(cfg.report.top_k);
    let (model, classifier) = critic_paths(&a.critic, &cfg)?;
    match a.kind {
        ReportKind::TransitionsDot | ReportKind::ErrorsCsv => {
            let classifier = classifier
                .ok_or_else(|| CliError::usage("missing-argument", "transition reports need --classifier"))?;
            let samples = pick(&a.samples, &cfg.paths.samples, "sample corpus")?;
            check_inputs(&[&model, &classifier, &samples])?;
            let out = output_file(&cfg)?;
            let prior = match Model::load(&model)? {
                Model::SectionPrior(p) => p,
                m => return Err(CliError::usage("wrong-model", format!("expected a section-prior model, got {}", m.kind()))),
            };
            let clf = load_classifier(&classifier)?;
            let docs = docs(&samples)?;
            let r = transition_diff_report(&prior, &docs, &clf, cfg.report.unlikely_threshold, cfg.report.error_threshold)
                .at(&samples)?;
            let text = if a.kind == ReportKind::TransitionsDot {
                r.to_dot(top_k)
            } else {
                r.errors_csv()
            };
            write_text(&out, &text)
        }
        ReportKind::Outliers => {
            let input = pick(&a.input, &cfg.paths.input, "input corpus")?;
            let mut inputs = vec![model.as_path(), input.as_path()];
            inputs.extend(classifier.as_deref());
            check_inputs(&inputs)?;
            let out = output_file(&cfg)?;
            let critic = load_critic(&model, classifier.as_deref())?;
            let scored = project(&critic, &input, &cfg)?;
            let ranked: Vec<_> = rank_outliers(&scored.projections, top_k)
                .into_iter()
                .enumerate()
                .map(|(i, (id, t))| json!({"rank": i + 1, "id": id, "latent_nll": t}))
                .collect();
            write_json(
                &out,
                &json!({"kind": critic.as_dyn().kind(), "mode": cfg.score.projection_mode(), "outliers": ranked}),
            )
        }
        ReportKind::NgramRanking => {
            let reference = pick(&a.reference, &cfg.paths.reference, "reference chains")?;
            let samples = pick(&a.samples, &cfg.paths.samples, "sample chains")?;
            check_inputs(&[&model, &reference, &samples])?;
            let out = output_file(&cfg)?;
            let critic = match Model::load(&model)? {
                Model::KnChain(c) => c,
                m => return Err(CliError::usage("wrong-model", format!("expected a kn-chain model, got {}", m.kind()))),
            };
            let ranking = contribution_ranking(
                &critic.model,
                &chains_only(&reference)?,
                &chains_only(&samples)?,
                top_k,
                cfg.report.min_count,
            )?;
            if out.extension().is_some_and(|e| e == "json") {
                write_json(&out, &ranking)
            } else {
                write_text(&out, &ranking.to_csv())
            }
        }
        ReportKind::CovarianceCsv => {
            let reference = pick(&a.reference, &cfg.paths.reference, "reference corpus")?;
            let samples = pick(&a.samples, &cfg.paths.samples, "sample corpus")?;
            check_inputs(&[&model, &reference, &samples])?;
            let dir = pick(&None, &cfg.paths.output, "output directory")?;
            check_output_dir(&dir)?;
            let ctm = match Model::load(&model)? {
                Model::Ctm(m) => m,
                m => return Err(CliError::usage("wrong-model", format!("expected a ctm model, got {}", m.kind()))),
            };
            let r = covariance_report(&ctm, &docs(&reference)?, &docs(&samples)?, cfg.report.proportions)?;
            write_text(&dir.join("reference.csv"), &r.to_csv(false))?;
            write_text(&dir.join("samples.csv"), &r.to_csv(true))?;
            write_json(
                &dir.join("summary.json"),
                &json!({
                    "distance": r.distance,
                    "order": r.order,
                    "labels": r.labels(),
                    "proportions": r.proportions,
                }),
            )
        }
    }
}
