//! Section-level critic: a label Markov chain with begin and end states,
//! paired with a bag-of-words classifier that projects sections to labels.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TransitionTable;
use crate::corpus::{label_set, Document, Section};
use crate::critic::{fingerprint_of, Critic, LatentProjection, ProjectionMode};
use crate::error::{Error, Result};
use crate::math::{log_normalize, logp_serde, rng, sample_weights, softmax};

pub const BEGIN_LABEL: &str = "<bos>";
pub const END_LABEL: &str = "<eos>";

/// Multinomial naive Bayes over section tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ClassifierRepr", into = "ClassifierRepr")]
pub struct SectionClassifier {
    labels: Vec<String>,
    log_prior: Vec<f64>,
    vocab: Vec<String>,
    /// `log_likelihood[l][w]`; the last column is the out-of-vocabulary slot.
    log_likelihood: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierRepr {
    labels: Vec<String>,
    #[serde(with = "logp_serde::vec")]
    log_prior: Vec<f64>,
    vocab: Vec<String>,
    #[serde(with = "logp_serde::matrix")]
    log_likelihood: Vec<Vec<f64>>,
}

impl From<ClassifierRepr> for SectionClassifier {
    fn from(r: ClassifierRepr) -> Self {
        let index = r.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        SectionClassifier {
            labels: r.labels,
            log_prior: r.log_prior,
            vocab: r.vocab,
            log_likelihood: r.log_likelihood,
            index,
        }
    }
}

impl From<SectionClassifier> for ClassifierRepr {
    fn from(c: SectionClassifier) -> Self {
        ClassifierRepr {
            labels: c.labels,
            log_prior: c.log_prior,
            vocab: c.vocab,
            log_likelihood: c.log_likelihood,
        }
    }
}

fn labeled_sections(docs: &[Document]) -> Result<Vec<(&str, &Section)>> {
    let mut out = Vec::new();
    for doc in docs {
        for (index, sec) in doc.sections.iter().enumerate() {
            let label = sec.label.as_deref().ok_or_else(|| Error::UnlabeledSection {
                id: doc.id.clone(),
                index,
            })?;
            out.push((label, sec));
        }
    }
    Ok(out)
}

pub fn fit_section_classifier(docs: &[Document], alpha: f64) -> Result<SectionClassifier> {
    if !(alpha > 0.0) {
        return Err(Error::Config("classifier smoothing must be positive".into()));
    }
    let sections = labeled_sections(docs)?;
    let labels = label_set(docs);
    if labels.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let lab_index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut vocab: Vec<String> = sections
        .iter()
        .flat_map(|(_, s)| s.tokens.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    vocab.shrink_to_fit();
    let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();

    let v = vocab.len();
    let mut doc_counts = vec![0.0; labels.len()];
    let mut counts = vec![vec![0.0; v + 1]; labels.len()];
    for (label, sec) in &sections {
        let l = lab_index[label];
        doc_counts[l] += 1.0;
        for tok in &sec.tokens {
            counts[l][index[tok]] += 1.0;
        }
    }
    let total_sections = sections.len() as f64;
    let log_prior = doc_counts.iter().map(|c| (c / total_sections).ln()).collect();
    let log_likelihood = counts
        .into_iter()
        .map(|row| {
            let z: f64 = row.iter().sum::<f64>() + alpha * (v + 1) as f64;
            row.into_iter().map(|c| ((c + alpha) / z).ln()).collect()
        })
        .collect();
    Ok(SectionClassifier {
        labels,
        log_prior,
        vocab,
        log_likelihood,
        index,
    })
}

impl SectionClassifier {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn log_likelihood(&self, label: usize, token: &str) -> f64 {
        let w = self.index.get(token).copied().unwrap_or(self.vocab.len());
        self.log_likelihood[label][w]
    }

    /// Normalized posterior over labels.
    pub fn classify(&self, tokens: &[String]) -> Vec<f64> {
        let scores: Vec<f64> = (0..self.labels.len())
            .map(|l| self.log_prior[l] + tokens.iter().map(|t| self.log_likelihood(l, t)).sum::<f64>())
            .collect();
        softmax(&scores)
    }

    /// MAP label index; ties go to the lowest index.
    pub fn predict(&self, tokens: &[String]) -> usize {
        let post = self.classify(tokens);
        let mut best = 0;
        for (i, &p) in post.iter().enumerate() {
            if p > post[best] {
                best = i;
            }
        }
        best
    }

    /// Fraction of labeled sections whose MAP label matches the gold label.
    pub fn accuracy(&self, docs: &[Document]) -> Result<f64> {
        let sections = labeled_sections(docs)?;
        if sections.is_empty() {
            return Err(Error::EmptyInput("no sections".into()));
        }
        let correct = sections
            .iter()
            .filter(|(label, sec)| self.labels[self.predict(&sec.tokens)] == *label)
            .count();
        Ok(correct as f64 / sections.len() as f64)
    }
}

/// Label bigram prior with begin and end states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTransitionPrior {
    pub labels: Vec<String>,
    pub table: TransitionTable,
}

/// Maximum-likelihood label bigrams with additive smoothing `smoothing`.
/// Rows without observations fall back to uniform.
pub fn fit_transition_prior(docs: &[Document], smoothing: f64) -> Result<LabelTransitionPrior> {
    if smoothing < 0.0 {
        return Err(Error::Config("smoothing must be non-negative".into()));
    }
    labeled_sections(docs)?;
    let labels = label_set(docs);
    if labels.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let k = labels.len();
    let idx: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut start = vec![0.0; k];
    let mut rows = vec![vec![0.0; k + 1]; k];
    for doc in docs {
        let seq: Vec<usize> = doc.sections.iter().map(|s| idx[s.label.as_deref().unwrap()]).collect();
        if seq.is_empty() {
            continue;
        }
        start[seq[0]] += 1.0;
        for w in seq.windows(2) {
            rows[w[0]][w[1]] += 1.0;
        }
        rows[*seq.last().unwrap()][k] += 1.0;
    }
    let finish = |counts: &mut Vec<f64>| {
        counts.iter_mut().for_each(|c| *c += smoothing);
        let z: f64 = counts.iter().sum();
        if z == 0.0 {
            let n = counts.len() as f64;
            counts.iter_mut().for_each(|c| *c = -n.ln());
        } else {
            counts.iter_mut().for_each(|c| *c = (*c / z).ln());
        }
    };
    finish(&mut start);
    let mut end = Vec::with_capacity(k);
    let rows = rows
        .into_iter()
        .map(|mut r| {
            finish(&mut r);
            end.push(r.pop().unwrap());
            r
        })
        .collect();
    Ok(LabelTransitionPrior {
        labels,
        table: TransitionTable {
            start,
            rows,
            end: Some(end),
        },
    })
}

impl LabelTransitionPrior {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// `P(to | from)` with `None` standing for the begin or end state.
    pub fn prob(&self, from: Option<usize>, to: Option<usize>) -> f64 {
        self.table.log_prob(from, to).exp()
    }
}

/// Section critic: projects each section to a label and scores the label
/// sequence under the transition prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionCritic {
    pub prior: LabelTransitionPrior,
    pub classifier: SectionClassifier,
}

impl SectionCritic {
    pub fn new(prior: LabelTransitionPrior, classifier: SectionClassifier) -> Result<Self> {
        if prior.labels != classifier.labels {
            return Err(Error::CriticMismatch("prior and classifier label sets differ".into()));
        }
        Ok(SectionCritic { prior, classifier })
    }

    /// MAP label path of a document.
    pub fn label_path(&self, doc: &Document) -> Vec<usize> {
        doc.sections.iter().map(|s| self.classifier.predict(&s.tokens)).collect()
    }
}

impl Critic for SectionCritic {
    fn kind(&self) -> &'static str {
        "section"
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(self.kind(), self)
    }

    fn project(&self, doc: &Document, mode: ProjectionMode, seed: u64) -> Result<LatentProjection> {
        let nll = match mode {
            ProjectionMode::MapEstimate => self.prior.table.per_position_nll(&self.label_path(doc)),
            ProjectionMode::MonteCarlo { num_samples } => {
                if num_samples == 0 {
                    return Err(Error::Config("Monte Carlo projection needs at least one sample".into()));
                }
                let posts: Vec<Vec<f64>> = doc.sections.iter().map(|s| self.classifier.classify(&s.tokens)).collect();
                let mut r = rng(seed);
                let mut acc = vec![0.0; posts.len()];
                for _ in 0..num_samples {
                    let path: Vec<usize> = posts.iter().map(|p| sample_weights(&mut r, p)).collect();
                    for (a, v) in acc.iter_mut().zip(self.prior.table.per_position_nll(&path)) {
                        *a += v;
                    }
                }
                acc.iter().map(|a| a / num_samples as f64).collect()
            }
        };
        Ok(LatentProjection::discrete(nll, mode))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDiff {
    pub from: String,
    pub to: String,
    pub prior: f64,
    pub sample_count: usize,
    /// Empirical `P_samples(to | from)`.
    pub sample_prob: f64,
    pub difference: f64,
    /// `sqrt(p (1 - p) / n_from)` under the prior.
    pub standard_error: f64,
    pub unlikely: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub from: String,
    pub to: String,
    pub prior: f64,
    pub count: usize,
    /// Share of all sample transitions.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub unlikely_threshold: f64,
    pub error_threshold: f64,
    pub total_transitions: usize,
    /// Occurrences of each label among sample sections, in label order.
    pub label_counts: Vec<(String, usize)>,
    /// Every (from, to) edge including begin and end, row-major.
    pub edges: Vec<EdgeDiff>,
    /// Error transitions, most frequent first.
    pub errors: Vec<ErrorRow>,
    pub total_failure_frequency: f64,
    pub repetition_fraction: f64,
}

pub fn transition_diff_report(
    prior: &LabelTransitionPrior,
    samples: &[Document],
    classifier: &SectionClassifier,
    unlikely_threshold: f64,
    error_threshold: f64,
) -> Result<TransitionReport> {
    if prior.labels != classifier.labels {
        return Err(Error::CriticMismatch("prior and classifier label sets differ".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("no sample documents".into()));
    }
    let k = prior.labels.len();
    // Index k is the begin state on the from side and the end state on the to side.
    let mut counts = vec![vec![0usize; k + 1]; k + 1];
    let mut label_counts = vec![0usize; k];
    for doc in samples {
        let path: Vec<usize> = doc.sections.iter().map(|s| classifier.predict(&s.tokens)).collect();
        let mut from = k;
        for &z in &path {
            counts[from][z] += 1;
            label_counts[z] += 1;
            from = z;
        }
        counts[from][k] += 1;
    }
    let total: usize = counts.iter().flatten().sum();
    let name = |i: usize, begin: bool| -> String {
        match (i == k, begin) {
            (false, _) => prior.labels[i].clone(),
            (true, true) => BEGIN_LABEL.into(),
            (true, false) => END_LABEL.into(),
        }
    };
    let opt = |i: usize| if i == k { None } else { Some(i) };

    let mut edges = Vec::new();
    let mut errors = Vec::new();
    for (from, row) in counts.iter().enumerate() {
        let n_from: usize = row.iter().sum();
        for (to, &count) in row.iter().enumerate() {
            if from == k && to == k {
                continue;
            }
            let p = prior.prob(opt(from), opt(to));
            let sample_prob = if n_from == 0 { 0.0 } else { count as f64 / n_from as f64 };
            edges.push(EdgeDiff {
                from: name(from, true),
                to: name(to, false),
                prior: p,
                sample_count: count,
                sample_prob,
                difference: sample_prob - p,
                standard_error: if n_from == 0 { 0.0 } else { (p * (1.0 - p) / n_from as f64).sqrt() },
                unlikely: p < unlikely_threshold,
            });
            if p < error_threshold && count > 0 {
                errors.push(ErrorRow {
                    from: name(from, true),
                    to: name(to, false),
                    prior: p,
                    count,
                    frequency: count as f64 / total as f64,
                });
            }
        }
    }
    errors.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| (&a.from, &a.to).cmp(&(&b.from, &b.to))));
    let error_count: usize = errors.iter().map(|e| e.count).sum();
    let repeats: usize = errors.iter().filter(|e| e.from == e.to).map(|e| e.count).sum();
    Ok(TransitionReport {
        unlikely_threshold,
        error_threshold,
        total_transitions: total,
        label_counts: prior.labels.iter().cloned().zip(label_counts).collect(),
        edges,
        total_failure_frequency: error_count as f64 / total as f64,
        repetition_fraction: if error_count == 0 { 0.0 } else { repeats as f64 / error_count as f64 },
        errors,
    })
}

fn dot_id(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl TransitionReport {
    /// Graphviz digraph over the `top_k` most frequent labels. Edges are those
    /// observed in the samples; nodes left without edges are dropped.
    pub fn to_dot(&self, top_k: usize) -> String {
        let mut ranked: Vec<&(String, usize)> = self.label_counts.iter().filter(|(_, c)| *c > 0).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep: BTreeMap<&str, usize> = ranked.iter().take(top_k).map(|(l, c)| (l.as_str(), *c)).collect();
        let drawn: Vec<&EdgeDiff> = self
            .edges
            .iter()
            .filter(|e| e.sample_count > 0 && keep.contains_key(e.from.as_str()) && keep.contains_key(e.to.as_str()))
            .collect();
        let mut out = String::from("digraph transitions {\n");
        for label in keep.keys() {
            if drawn.iter().any(|e| e.from == *label || e.to == *label) {
                let _ = writeln!(out, "  {};", dot_id(label));
            }
        }
        for e in drawn {
            let _ = write!(
                out,
                "  {} -> {} [label=\"{:.2}\", penwidth={:.3}",
                dot_id(&e.from),
                dot_id(&e.to),
                e.difference,
                10.0 * e.difference.abs()
            );
            if e.unlikely {
                out.push_str(", color=red");
            }
            out.push_str("];\n");
        }
        out.push_str("}\n");
        out
    }

    /// Error table with a closing total row.
    pub fn errors_csv(&self) -> String {
        let mut out = String::from("from,to,prior,count,frequency\n");
        for e in &self.errors {
            let _ = writeln!(out, "{},{},{:.6},{},{:.6}", csv_field(&e.from), csv_field(&e.to), e.prior, e.count, e.frequency);
        }
        let count: usize = self.errors.iter().map(|e| e.count).sum();
        let _ = writeln!(out, "total failures,,,{},{:.6}", count, self.total_failure_frequency);
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Synthetic section corpora: a label chain with label-specific unigram
/// emissions. Used to exercise the section critic without real data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionGenerator {
    pub prior: LabelTransitionPrior,
    /// Per label: (word, probability).
    pub words: Vec<Vec<(String, f64)>>,
    pub section_len: (usize, usize),
    pub max_sections: usize,
}

impl SectionGenerator {
    /// Random generator: each label owns `own_words` words and shares
    /// `shared_words` common words; `shared_share` of the mass is common.
    pub fn random(num_labels: usize, own_words: usize, shared_words: usize, shared_share: f64, seed: u64) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::EmptyLabelSet);
        }
        let mut r = rng(seed);
        let labels: Vec<String> = (0..num_labels).map(|i| format!("label{i:02}")).collect();
        let mut logits = |n: usize| {
            let mut v: Vec<f64> = (0..n).map(|_| 2.0 * r.random::<f64>()).collect();
            log_normalize(&mut v);
            v
        };
        let mut start = logits(num_labels);
        start.iter_mut().for_each(|v| *v = v.exp());
        let mut rows = Vec::new();
        let mut end = Vec::new();
        for _ in 0..num_labels {
            let mut row: Vec<f64> = logits(num_labels + 1).iter().map(|v| v.exp()).collect();
            // Keep documents a few sections long on average.
            let stop = 0.2;
            let rest: f64 = row[..num_labels].iter().sum();
            row[..num_labels].iter_mut().for_each(|v| *v *= (1.0 - stop) / rest);
            row[num_labels] = stop;
            end.push(stop.ln());
            row.pop();
            rows.push(row.iter().map(|v| v.ln()).collect());
        }
        let table = TransitionTable {
            start: start.iter().map(|v| v.ln()).collect(),
            rows,
            end: Some(end),
        };
        let words = (0..num_labels)
            .map(|l| {
                let mut w: Vec<(String, f64)> = (0..own_words)
                    .map(|i| (format!("w{l}x{i}"), (1.0 - shared_share) / own_words as f64))
                    .collect();
                w.extend((0..shared_words).map(|i| (format!("common{i}"), shared_share / shared_words.max(1) as f64)));
                w
            })
            .collect();
        Ok(SectionGenerator {
            prior: LabelTransitionPrior { labels, table },
            words,
            section_len: (5, 15),
            max_sections: 30,
        })
    }

    pub fn sample_docs(&self, n: usize, seed: u64) -> Vec<Document> {
        let mut r = rng(seed);
        (0..n)
            .map(|i| {
                let path = self.prior.table.sample_path(&mut r, self.max_sections);
                let sections = path
                    .iter()
                    .map(|&z| {
                        let len = r.random_range(self.section_len.0..=self.section_len.1);
                        let weights: Vec<f64> = self.words[z].iter().map(|w| w.1).collect();
                        let tokens = (0..len).map(|_| self.words[z][sample_weights(&mut r, &weights)].0.clone()).collect();
                        Section {
                            label: Some(self.prior.labels[z].clone()),
                            tokens,
                        }
                    })
                    .collect();
                Document {
                    id: format!("doc-{i:05}"),
                    sections,
                    mentions: None,
                }
            })
            .filter(|d: &Document| !d.sections.is_empty())
            .collect()
    }
}
