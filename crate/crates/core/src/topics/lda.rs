use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::corpus::{Document, Vocabulary};
use crate::critic::{fingerprint_of, Critic, LatentProjection, ProjectionMode};
use crate::error::{Error, Result};
use crate::hsmm::sections::csv_field;
use crate::math::{entropy, logp_serde, rng, sample_dirichlet, sample_weights, stream_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaConfig {
    pub num_topics: usize,
    pub iterations: usize,
    pub beta: f64,
    /// Re-optimize alpha every this many sweeps; 0 keeps alpha fixed.
    pub alpha_interval: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            num_topics: 3,
            iterations: 1000,
            beta: 0.01,
            alpha_interval: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub vocab: Vocabulary,
    pub alpha: Vec<f64>,
    pub beta: f64,
    /// `log_phi[topic][word]` over content ids.
    #[serde(with = "logp_serde::matrix")]
    pub log_phi: Vec<Vec<f64>>,
}

/// Normalized collapsed-Gibbs conditional for one token of word `w`, with
/// the token already removed from the counts.
pub fn collapsed_conditional(
    doc_topic: &[f64],
    topic_word: &[f64],
    topic_total: &[f64],
    alpha: &[f64],
    beta: f64,
    vocab_size: usize,
) -> Vec<f64> {
    let mut p: Vec<f64> = (0..alpha.len())
        .map(|i| (doc_topic[i] + alpha[i]) * (topic_word[i] + beta) / (topic_total[i] + vocab_size as f64 * beta))
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Fixed-point update of an asymmetric Dirichlet from per-document topic counts.
fn optimize_alpha(alpha: &mut [f64], doc_topic: &[Vec<f64>], doc_len: &[f64]) {
    for _ in 0..20 {
        let a0: f64 = alpha.iter().sum();
        let denom: f64 = doc_len
            .iter()
            .filter(|&&n| n > 0.0)
            .map(|&n| digamma(n + a0) - digamma(a0))
            .sum();
        if denom <= 0.0 {
            return;
        }
        let mut change = 0.0f64;
        for k in 0..alpha.len() {
            let num: f64 = doc_topic
                .iter()
                .zip(doc_len)
                .filter(|(_, &n)| n > 0.0)
                .map(|(c, _)| digamma(c[k] + alpha[k]) - digamma(alpha[k]))
                .sum();
            let next = (alpha[k] * num / denom).max(1e-10);
            change = change.max((next - alpha[k]).abs() / alpha[k]);
            alpha[k] = next;
        }
        if change < 1e-8 {
            return;
        }
    }
}

/// Collapsed Gibbs sampling over topic assignments with alpha re-estimated
/// periodically. Topic-word distributions are the posterior mean
/// `(n + beta) / (n_topic + V beta)` of the final sweep.
pub fn fit_lda(docs: &[Document], vocab: &Vocabulary, cfg: &LdaConfig) -> Result<LdaModel> {
    let m = cfg.num_topics;
    if m < 2 {
        return Err(Error::Config("LDA needs at least two topics".into()));
    }
    if !(cfg.beta > 0.0) {
        return Err(Error::Config("beta must be positive".into()));
    }
    let v = vocab.num_content();
    if v == 0 {
        return Err(Error::EmptyVocabulary);
    }
    let corpus: Vec<Vec<usize>> = docs.iter().map(|d| vocab.encode_content(d)).collect();
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::EmptyTrainingData);
    }
    let mut r = rng(cfg.seed);
    let mut alpha = vec![1.0 / m as f64; m];
    let mut topic_word = vec![0.0; m * v];
    let mut topic_total = vec![0.0; m];
    let mut doc_topic = vec![vec![0.0; m]; corpus.len()];
    let mut assign: Vec<Vec<usize>> = corpus
        .iter()
        .enumerate()
        .map(|(d, words)| {
            words
                .iter()
                .map(|&w| {
                    let t = r.random_range(0..m);
                    topic_word[t * v + w] += 1.0;
                    topic_total[t] += 1.0;
                    doc_topic[d][t] += 1.0;
                    t
                })
                .collect()
        })
        .collect();
    let doc_len: Vec<f64> = corpus.iter().map(|w| w.len() as f64).collect();
    let vb = v as f64 * cfg.beta;
    let mut weights = vec![0.0; m];
    for iter in 0..cfg.iterations {
        for (d, words) in corpus.iter().enumerate() {
            for (n, &w) in words.iter().enumerate() {
                let old = assign[d][n];
                topic_word[old * v + w] -= 1.0;
                topic_total[old] -= 1.0;
                doc_topic[d][old] -= 1.0;
                for (i, wt) in weights.iter_mut().enumerate() {
                    *wt = (doc_topic[d][i] + alpha[i]) * (topic_word[i * v + w] + cfg.beta) / (topic_total[i] + vb);
                }
                let t = sample_weights(&mut r, &weights);
                assign[d][n] = t;
                topic_word[t * v + w] += 1.0;
                topic_total[t] += 1.0;
                doc_topic[d][t] += 1.0;
            }
        }
        if cfg.alpha_interval > 0 && (iter + 1) % cfg.alpha_interval == 0 {
            optimize_alpha(&mut alpha, &doc_topic, &doc_len);
        }
    }
    let log_phi = (0..m)
        .map(|i| (0..v).map(|w| ((topic_word[i * v + w] + cfg.beta) / (topic_total[i] + vb)).ln()).collect())
        .collect();
    Ok(LdaModel {
        vocab: vocab.clone(),
        alpha,
        beta: cfg.beta,
        log_phi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorConfig {
    pub burn_in: usize,
    pub num_samples: usize,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        PosteriorConfig {
            burn_in: 50,
            num_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaPosterior {
    /// `alpha + topic counts` after each retained sweep.
    pub alpha_prime: Vec<Vec<f64>>,
    /// One Dirichlet draw of z per retained sweep.
    pub z_samples: Vec<Vec<f64>>,
    /// Per-token topic marginals, averaged from the Gibbs conditionals.
    pub token_marginals: Vec<Vec<f64>>,
    /// Posterior mean of z (average Dirichlet mean over sweeps).
    pub mean_z: Vec<f64>,
}

/// Two-stage posterior sampling: Gibbs over assignments given the fitted
/// topics, then `z ~ Dirichlet(alpha + counts)`.
pub fn lda_posterior(model: &LdaModel, doc: &Document, cfg: &PosteriorConfig, seed: u64) -> LdaPosterior {
    let words = model.vocab.encode_content(doc);
    let m = model.alpha.len();
    let mut r = rng(seed);
    let phi: Vec<Vec<f64>> = words
        .iter()
        .map(|&w| (0..m).map(|i| model.log_phi[i][w].exp()).collect())
        .collect();
    let mut counts = vec![0.0; m];
    let mut assign: Vec<usize> = phi
        .iter()
        .map(|p| {
            let w: Vec<f64> = p.iter().zip(&model.alpha).map(|(a, b)| a * b).collect();
            let t = sample_weights(&mut r, &w);
            counts[t] += 1.0;
            t
        })
        .collect();
    let mut token_marginals = vec![vec![0.0; m]; words.len()];
    let mut alpha_prime = Vec::with_capacity(cfg.num_samples);
    let mut z_samples = Vec::with_capacity(cfg.num_samples);
    let mut mean_z = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for sweep in 0..cfg.burn_in + cfg.num_samples {
        let keep = sweep >= cfg.burn_in;
        for n in 0..words.len() {
            counts[assign[n]] -= 1.0;
            for i in 0..m {
                weights[i] = (counts[i] + model.alpha[i]) * phi[n][i];
            }
            if keep {
                let z: f64 = weights.iter().sum();
                for i in 0..m {
                    token_marginals[n][i] += weights[i] / z;
                }
            }
            let t = sample_weights(&mut r, &weights);
            assign[n] = t;
            counts[t] += 1.0;
        }
        if keep {
            let ap: Vec<f64> = model.alpha.iter().zip(&counts).map(|(a, c)| a + c).collect();
            let a0: f64 = ap.iter().sum();
            mean_z.iter_mut().zip(&ap).for_each(|(mz, a)| *mz += a / a0);
            z_samples.push(sample_dirichlet(&mut r, &ap));
            alpha_prime.push(ap);
        }
    }
    let s = cfg.num_samples.max(1) as f64;
    token_marginals.iter_mut().flatten().for_each(|v| *v /= s);
    if cfg.num_samples == 0 {
        let a0: f64 = model.alpha.iter().sum();
        mean_z = model.alpha.iter().map(|a| a / a0).collect();
    } else {
        mean_z.iter_mut().for_each(|v| *v /= s);
    }
    LdaPosterior {
        alpha_prime,
        z_samples,
        token_marginals,
        mean_z,
    }
}

/// `log P(t_1..t_N | x)` up to normalization for every assignment, by
/// enumeration: the product of topic-word probabilities and the
/// Dirichlet-multinomial probability of the assignment sequence.
pub fn exact_assignment_posterior(model: &LdaModel, doc: &Document) -> Result<Vec<(Vec<usize>, f64)>> {
    let words = model.vocab.encode_content(doc);
    let m = model.alpha.len();
    let total = (m as f64).powi(words.len() as i32);
    if total > 1e5 {
        return Err(Error::Config("too many assignments to enumerate".into()));
    }
    let a0: f64 = model.alpha.iter().sum();
    let n = words.len();
    let mut out = Vec::with_capacity(total as usize);
    for t in all_assignments(n, m) {
        let mut counts = vec![0.0; m];
        let mut lp = 0.0;
        for (k, &w) in words.iter().enumerate() {
            counts[t[k]] += 1.0;
            lp += model.log_phi[t[k]][w];
        }
        lp += ln_gamma(a0) - ln_gamma(a0 + n as f64);
        for i in 0..m {
            lp += ln_gamma(model.alpha[i] + counts[i]) - ln_gamma(model.alpha[i]);
        }
        out.push((t, lp));
    }
    let z = crate::math::log_sum_exp(&out.iter().map(|o| o.1).collect::<Vec<_>>());
    for o in out.iter_mut() {
        o.1 = (o.1 - z).exp();
    }
    Ok(out)
}

/// Every assignment in the enumeration order of [`exact_assignment_posterior`].
fn all_assignments(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut t = vec![0usize; n];
    loop {
        out.push(t.clone());
        let mut k = 0;
        while k < n {
            t[k] += 1;
            if t[k] < m {
                break;
            }
            t[k] = 0;
            k += 1;
        }
        if k == n {
            return out;
        }
    }
}

/// Gibbs estimate of the assignment posterior for short documents.
///
/// Before every single-site update the chain contributes the full
/// transition row of one systematic sweep starting at that site, rather than
/// the single state it moves to. Each such row averages to the stationary
/// distribution and is much less noisy than a visit count.
pub fn gibbs_assignment_distribution(
    model: &LdaModel,
    doc: &Document,
    sweeps: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let words = model.vocab.encode_content(doc);
    let (n, m) = (words.len(), model.alpha.len());
    if (m as f64).powi(n as i32) > 1e5 {
        return Err(Error::Config("too many assignments to enumerate".into()));
    }
    if sweeps == 0 {
        return Err(Error::Config("need at least one sweep".into()));
    }
    let phi: Vec<Vec<f64>> = words
        .iter()
        .map(|&w| (0..m).map(|i| model.log_phi[i][w].exp()).collect())
        .collect();
    let states = all_assignments(n, m);
    let mut acc = vec![0.0; states.len()];
    let mut r = rng(seed);
    let mut t: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let mut weights = vec![0.0; m];
    let conditional = |t: &[usize], k: usize, weights: &mut [f64]| {
        let mut counts = vec![0.0; m];
        for (j, &tj) in t.iter().enumerate() {
            if j != k {
                counts[tj] += 1.0;
            }
        }
        for i in 0..m {
            weights[i] = (counts[i] + model.alpha[i]) * phi[k][i];
        }
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
    };
    for _ in 0..sweeps {
        for first in 0..n {
            for (s, target) in states.iter().enumerate() {
                let mut path = t.clone();
                let mut p = 1.0;
                for k in (first..n).chain(0..first) {
                    conditional(&path, k, &mut weights);
                    p *= weights[target[k]];
                    path[k] = target[k];
                }
                acc[s] += p;
            }
            conditional(&t, first, &mut weights);
            t[first] = sample_weights(&mut r, &weights);
        }
    }
    let rows = (sweeps * n.max(1)) as f64;
    Ok(states
        .into_iter()
        .zip(acc)
        .map(|(s, a)| (s, if n == 0 { 1.0 } else { a / rows }))
        .collect())
}

fn log_dirichlet_normalizer(alpha: &[f64]) -> f64 {
    ln_gamma(alpha.iter().sum()) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
}

impl LdaModel {
    /// `-log Dirichlet(z; alpha)`.
    pub fn neg_log_prior(&self, z: &[f64]) -> f64 {
        -log_dirichlet_normalizer(&self.alpha)
            - self
                .alpha
                .iter()
                .zip(z)
                .map(|(a, zi)| (a - 1.0) * zi.max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
    }

    /// `E_{z ~ Dirichlet(alpha_prime)}[-log Dirichlet(z; alpha)]` in closed form.
    pub fn expected_neg_log_prior(&self, alpha_prime: &[f64]) -> f64 {
        let a0: f64 = alpha_prime.iter().sum();
        -log_dirichlet_normalizer(&self.alpha)
            - self
                .alpha
                .iter()
                .zip(alpha_prime)
                .map(|(a, ap)| (a - 1.0) * (digamma(*ap) - digamma(a0)))
                .sum::<f64>()
    }
}

impl Critic for LdaModel {
    fn kind(&self) -> &'static str {
        "lda"
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(self.kind(), self)
    }

    /// Monte Carlo averages the exact expectation under each sweep's
    /// `Dirichlet(alpha')`; the point estimate scores the posterior mean of z.
    fn project(&self, doc: &Document, mode: ProjectionMode, seed: u64) -> Result<LatentProjection> {
        let cfg = match mode {
            ProjectionMode::MapEstimate => PosteriorConfig::default(),
            ProjectionMode::MonteCarlo { num_samples } if num_samples > 0 => PosteriorConfig {
                num_samples,
                ..Default::default()
            },
            ProjectionMode::MonteCarlo { .. } => {
                return Err(Error::Config("Monte Carlo projection needs at least one sample".into()))
            }
        };
        let post = lda_posterior(self, doc, &cfg, seed);
        let nll = match mode {
            ProjectionMode::MapEstimate => self.neg_log_prior(&post.mean_z),
            ProjectionMode::MonteCarlo { .. } => {
                post.alpha_prime.iter().map(|ap| self.expected_neg_log_prior(ap)).sum::<f64>()
                    / post.alpha_prime.len() as f64
            }
        };
        Ok(LatentProjection::continuous(nll, mode))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocMixing {
    pub id: String,
    pub mean_z: Vec<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeMixing {
    pub docs: Vec<DocMixing>,
    pub mean_entropy: f64,
}

impl CodeMixing {
    /// Scatter data: `doc_id` followed by the posterior-mean proportions.
    pub fn to_scatter_csv(&self) -> String {
        let m = self.docs.first().map_or(0, |d| d.mean_z.len());
        let mut out = String::from("doc_id");
        for i in 0..m {
            let _ = write!(out, ",topic{i}");
        }
        out.push('\n');
        for d in &self.docs {
            out.push_str(&csv_field(&d.id));
            for z in &d.mean_z {
                let _ = write!(out, ",{z:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Entropy of each document's posterior-mean topic proportions.
pub fn code_mixing_statistic(model: &LdaModel, docs: &[Document], cfg: &PosteriorConfig, seed: u64) -> Result<CodeMixing> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("no documents".into()));
    }
    let out: Vec<DocMixing> = docs
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let post = lda_posterior(model, d, cfg, stream_seed(seed, i as u64));
            DocMixing {
                id: d.id.clone(),
                entropy: entropy(&post.mean_z),
                mean_z: post.mean_z,
            }
        })
        .collect();
    let mean_entropy = out.iter().map(|d| d.entropy).sum::<f64>() / out.len() as f64;
    Ok(CodeMixing {
        docs: out,
        mean_entropy,
    })
}
