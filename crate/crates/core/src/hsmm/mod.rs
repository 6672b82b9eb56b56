//! Hidden semi-Markov models with observed segmentation.
//!
//! Every segment ends in the `<s>` marker, so segment boundaries are known and
//! inference runs over a segment-level chain: `P(x, z) = prod_m P(z_m | z_{m-1}) P(seg_m | z_m)`.
//! The same model type serves as synthetic data generator, critic, and
//! baseline language model.

mod fit;
pub mod sections;
mod synthetic;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, SEGMENT_END};
use crate::critic::{fingerprint_of, Critic, Decomposition, LatentProjection, ProjectionMode};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, logp_serde, rng, sample_log_weights, sample_weights};

pub use fit::{fit_hsmm, FitConfig, FitTrace, InitMethod};
pub use synthetic::{generate_synthetic, letter_alphabet, SyntheticConfig, SyntheticData, SyntheticSplit};

/// Log transition probabilities with an implicit begin state and an optional end state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTable {
    /// `log P(z_1 = j | begin)`.
    #[serde(with = "logp_serde::vec")]
    pub start: Vec<f64>,
    /// `rows[i][j] = log P(z_m = j | z_{m-1} = i)`.
    #[serde(with = "logp_serde::matrix")]
    pub rows: Vec<Vec<f64>>,
    /// `log P(end | z_M = i)`; each row of `rows` plus its end entry normalizes.
    #[serde(with = "logp_serde::opt_vec")]
    pub end: Option<Vec<f64>>,
}

impl TransitionTable {
    pub fn num_states(&self) -> usize {
        self.start.len()
    }

    pub fn uses_end_state(&self) -> bool {
        self.end.is_some()
    }

    /// `None` as `from` is the begin state; `None` as `to` is the end state.
    pub fn log_prob(&self, from: Option<usize>, to: Option<usize>) -> f64 {
        match (from, to) {
            (None, Some(j)) => self.start[j],
            (Some(i), Some(j)) => self.rows[i][j],
            (Some(i), None) => self.end.as_ref().map_or(0.0, |e| e[i]),
            (None, None) => f64::NEG_INFINITY,
        }
    }

    /// Negative log prior of each position of a state path. The end
    /// transition, when modelled, is folded into the last position.
    pub fn per_position_nll(&self, path: &[usize]) -> Vec<f64> {
        let mut out: Vec<f64> = path
            .iter()
            .enumerate()
            .map(|(m, &z)| {
                let from = if m == 0 { None } else { Some(path[m - 1]) };
                -self.log_prob(from, Some(z))
            })
            .collect();
        if let (Some(end), Some(&last), Some(slot)) = (&self.end, path.last(), out.last_mut()) {
            *slot -= end[last];
        }
        out
    }

    pub fn path_log_prob(&self, path: &[usize]) -> f64 {
        -self.per_position_nll(path).iter().sum::<f64>()
    }

    /// Largest deviation of any row's total probability from 1.
    pub fn max_row_error(&self) -> f64 {
        let mut worst = (self.start.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs();
        for (i, row) in self.rows.iter().enumerate() {
            let mut total: f64 = row.iter().map(|v| v.exp()).sum();
            if let Some(end) = &self.end {
                total += end[i].exp();
            }
            worst = worst.max((total - 1.0).abs());
        }
        worst
    }

    /// Draws a state path; with an end state the path stops when the end is
    /// drawn or after `max_len` states, otherwise it has exactly `max_len` states.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R, max_len: usize) -> Vec<usize> {
        let k = self.num_states();
        let mut path = Vec::with_capacity(max_len);
        let mut weights = vec![0.0; k + 1];
        while path.len() < max_len {
            let from = path.last().copied();
            for (j, w) in weights.iter_mut().enumerate().take(k) {
                *w = self.log_prob(from, Some(j)).exp();
            }
            weights[k] = match (from, &self.end) {
                (Some(i), Some(end)) => end[i].exp(),
                _ => 0.0,
            };
            let next = sample_weights(rng, &weights);
            if next == k {
                break;
            }
            path.push(next);
        }
        path
    }
}

/// Fallback emission for segments outside the table: a per-state mass spread
/// over all strings by a spelling model (geometric length, uniform symbols).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownSegmentModel {
    #[serde(with = "logp_serde::vec")]
    pub log_mass: Vec<f64>,
    pub num_symbols: usize,
    /// Probability that a segment ends after the current symbol.
    pub stop_prob: f64,
}

impl UnknownSegmentModel {
    /// Log spelling probability of a segment with `letters` symbols before `<s>`.
    pub fn log_spelling(&self, letters: usize) -> f64 {
        let l = letters as f64;
        l * (1.0 - self.stop_prob).ln() + self.stop_prob.ln() - l * (self.num_symbols as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "EmissionRepr", into = "EmissionRepr")]
pub struct EmissionTable {
    segments: Vec<String>,
    /// `log_probs[s][j] = log P(segment s | state j)`.
    log_probs: Vec<Vec<f64>>,
    unknown: Option<UnknownSegmentModel>,
    index: HashMap<String, usize>,
    /// Per state: (segment, cumulative probability) over its support, for sampling.
    samplers: Vec<Vec<(usize, f64)>>,
}

#[derive(Serialize, Deserialize)]
struct EmissionRepr {
    segments: Vec<String>,
    #[serde(with = "logp_serde::matrix")]
    log_probs: Vec<Vec<f64>>,
    unknown: Option<UnknownSegmentModel>,
}

impl From<EmissionRepr> for EmissionTable {
    fn from(r: EmissionRepr) -> Self {
        EmissionTable::new(r.segments, r.log_probs, r.unknown)
    }
}

impl From<EmissionTable> for EmissionRepr {
    fn from(t: EmissionTable) -> Self {
        EmissionRepr {
            segments: t.segments,
            log_probs: t.log_probs,
            unknown: t.unknown,
        }
    }
}

impl EmissionTable {
    pub fn new(segments: Vec<String>, log_probs: Vec<Vec<f64>>, unknown: Option<UnknownSegmentModel>) -> Self {
        let index = segments
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let num_states = log_probs.first().map_or(0, Vec::len);
        let samplers = (0..num_states)
            .map(|j| {
                let mut acc = 0.0;
                let mut cum = Vec::new();
                for (s, row) in log_probs.iter().enumerate() {
                    let p = row[j].exp();
                    if p > 0.0 {
                        acc += p;
                        cum.push((s, acc));
                    }
                }
                cum
            })
            .collect();
        EmissionTable {
            segments,
            log_probs,
            unknown,
            index,
            samplers,
        }
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn segment_index(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn log_prob(&self, segment: usize, state: usize) -> f64 {
        self.log_probs[segment][state]
    }

    pub fn row(&self, segment: usize) -> &[f64] {
        &self.log_probs[segment]
    }

    pub fn unknown(&self) -> Option<&UnknownSegmentModel> {
        self.unknown.as_ref()
    }

    /// Largest deviation of any state's emission mass (table plus fallback) from 1.
    pub fn max_state_error(&self) -> f64 {
        let k = self.log_probs.first().map_or(0, Vec::len);
        (0..k)
            .map(|j| {
                let mut total: f64 = self.log_probs.iter().map(|row| row[j].exp()).sum();
                if let Some(u) = &self.unknown {
                    total += u.log_mass[j].exp();
                }
                (total - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, state: usize) -> usize {
        let cum = &self.samplers[state];
        let total = cum.last().map_or(0.0, |c| c.1);
        let u = rng.random::<f64>() * total;
        let pos = cum.partition_point(|&(_, c)| c <= u).min(cum.len() - 1);
        cum[pos].0
    }
}

/// A segment of a document, resolved against an emission table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    Known(usize),
    /// Outside the table; carries the spelling log-probability.
    Unknown(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hsmm {
    pub transitions: TransitionTable,
    pub emissions: EmissionTable,
}

/// Splits a document's token stream into segment keys (tokens joined by
/// spaces, each ending in `<s>`).
pub fn segment_keys(doc: &Document) -> Result<Vec<String>> {
    let mut keys = Vec::new();
    let mut current = String::new();
    for tok in doc.tokens() {
        if !current.is_empty() {
            current.push(' ');
        }
        current.push_str(tok);
        if tok == SEGMENT_END {
            keys.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        return Err(Error::InvalidDocument {
            id: doc.id.clone(),
            reason: format!("trailing tokens without `{SEGMENT_END}`"),
        });
    }
    if keys.is_empty() {
        return Err(Error::InvalidDocument {
            id: doc.id.clone(),
            reason: "no segments".into(),
        });
    }
    Ok(keys)
}

/// Posterior over the latent state sequence of one document.
#[derive(Debug, Clone, PartialEq)]
pub enum StatePosterior {
    /// Every segment has a single possible state.
    Delta(Vec<usize>),
    /// Per-position marginals `P(z_m = j | x)`.
    Marginals(Vec<Vec<f64>>),
}

impl StatePosterior {
    pub fn marginals(&self, num_states: usize) -> Vec<Vec<f64>> {
        match self {
            StatePosterior::Delta(path) => path
                .iter()
                .map(|&z| {
                    let mut row = vec![0.0; num_states];
                    row[z] = 1.0;
                    row
                })
                .collect(),
            StatePosterior::Marginals(m) => m.clone(),
        }
    }
}

pub(crate) struct LogLattice {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub log_marginal: f64,
}

impl Hsmm {
    pub fn num_states(&self) -> usize {
        self.transitions.num_states()
    }

    pub fn uses_end_state(&self) -> bool {
        self.transitions.uses_end_state()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_states();
        if self.transitions.rows.len() != k
            || self.transitions.rows.iter().any(|r| r.len() != k)
            || self.transitions.end.as_ref().is_some_and(|e| e.len() != k)
            || self.emissions.log_probs.iter().any(|r| r.len() != k)
        {
            return Err(Error::Config("inconsistent table shapes".into()));
        }
        if self.transitions.max_row_error() > 1e-10 {
            return Err(Error::Numeric("transition rows do not normalize".into()));
        }
        if self.emissions.max_state_error() > 1e-8 {
            return Err(Error::Numeric("emission distributions do not normalize".into()));
        }
        Ok(())
    }

    pub fn observations(&self, doc: &Document) -> Result<Vec<Observation>> {
        segment_keys(doc)?
            .into_iter()
            .map(|key| match self.emissions.segment_index(&key) {
                Some(s) => Ok(Observation::Known(s)),
                None => match &self.emissions.unknown {
                    Some(u) => {
                        let letters = key.split(' ').count() - 1;
                        Ok(Observation::Unknown(u.log_spelling(letters)))
                    }
                    None => Err(Error::UnknownSegment(key)),
                },
            })
            .collect()
    }

    pub fn emission_log_prob(&self, obs: Observation, state: usize) -> f64 {
        match obs {
            Observation::Known(s) => self.emissions.log_probs[s][state],
            Observation::Unknown(spell) => {
                self.emissions.unknown.as_ref().map_or(f64::NEG_INFINITY, |u| u.log_mass[state]) + spell
            }
        }
    }

    fn emission_matrix(&self, obs: &[Observation]) -> Vec<Vec<f64>> {
        obs.iter()
            .map(|&o| (0..self.num_states()).map(|j| self.emission_log_prob(o, j)).collect())
            .collect()
    }

    /// `log sum_z P(z) P(x|z)` by the log-space forward recursion.
    pub fn log_marginal(&self, doc: &Document) -> Result<f64> {
        let obs = self.observations(doc)?;
        Ok(self.log_forward(&self.emission_matrix(&obs)).1)
    }

    fn log_forward(&self, emit: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
        let k = self.num_states();
        let t = &self.transitions;
        let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(emit.len());
        alpha.push((0..k).map(|j| t.start[j] + emit[0][j]).collect());
        let mut terms = vec![0.0; k];
        for e in &emit[1..] {
            let prev = alpha.last().unwrap();
            let row: Vec<f64> = (0..k)
                .map(|j| {
                    for (i, term) in terms.iter_mut().enumerate() {
                        *term = prev[i] + t.rows[i][j];
                    }
                    log_sum_exp(&terms) + e[j]
                })
                .collect();
            alpha.push(row);
        }
        let last = alpha.last().unwrap();
        let total = match &t.end {
            Some(end) => log_sum_exp(&last.iter().zip(end).map(|(a, e)| a + e).collect::<Vec<_>>()),
            None => log_sum_exp(last),
        };
        (alpha, total)
    }

    pub(crate) fn log_lattice(&self, emit: &[Vec<f64>]) -> LogLattice {
        let k = self.num_states();
        let t = &self.transitions;
        let (alpha, log_marginal) = self.log_forward(emit);
        let n = emit.len();
        let mut beta = vec![vec![0.0; k]; n];
        if let Some(end) = &t.end {
            beta[n - 1].copy_from_slice(end);
        }
        let mut terms = vec![0.0; k];
        for m in (0..n - 1).rev() {
            for i in 0..k {
                for (j, term) in terms.iter_mut().enumerate() {
                    *term = t.rows[i][j] + emit[m + 1][j] + beta[m + 1][j];
                }
                beta[m][i] = log_sum_exp(&terms);
            }
        }
        LogLattice {
            alpha,
            beta,
            log_marginal,
        }
    }

    /// Most probable state path (Viterbi).
    pub fn viterbi(&self, obs: &[Observation]) -> Vec<usize> {
        let k = self.num_states();
        let t = &self.transitions;
        let emit = self.emission_matrix(obs);
        let mut score: Vec<f64> = (0..k).map(|j| t.start[j] + emit[0][j]).collect();
        let mut back: Vec<Vec<usize>> = Vec::with_capacity(obs.len());
        for e in &emit[1..] {
            let mut next = vec![f64::NEG_INFINITY; k];
            let mut arg = vec![0; k];
            for j in 0..k {
                for i in 0..k {
                    let s = score[i] + t.rows[i][j];
                    if s > next[j] {
                        next[j] = s;
                        arg[j] = i;
                    }
                }
                next[j] += e[j];
            }
            back.push(arg);
            score = next;
        }
        if let Some(end) = &t.end {
            score.iter_mut().zip(end).for_each(|(s, e)| *s += e);
        }
        let mut best = 0;
        for j in 1..k {
            if score[j] > score[best] {
                best = j;
            }
        }
        let mut path = vec![best];
        for arg in back.iter().rev() {
            let prev = arg[*path.last().unwrap()];
            path.push(prev);
        }
        path.reverse();
        path
    }

    /// Segment-level posterior. When every segment has exactly one state with
    /// nonzero emission the posterior is a delta found by lookup.
    pub fn segment_posterior(&self, doc: &Document) -> Result<StatePosterior> {
        let obs = self.observations(doc)?;
        if let Some(path) = self.lookup_path(&obs) {
            return Ok(StatePosterior::Delta(path));
        }
        let emit = self.emission_matrix(&obs);
        let lat = self.log_lattice(&emit);
        Ok(StatePosterior::Marginals(
            lat.alpha
                .iter()
                .zip(&lat.beta)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y - lat.log_marginal).exp()).collect())
                .collect(),
        ))
    }

    fn lookup_path(&self, obs: &[Observation]) -> Option<Vec<usize>> {
        obs.iter()
            .map(|&o| match o {
                Observation::Known(s) => {
                    let mut support = self.emissions.log_probs[s]
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| v.is_finite());
                    match (support.next(), support.next()) {
                        (Some((j, _)), None) => Some(j),
                        _ => None,
                    }
                }
                Observation::Unknown(_) => None,
            })
            .collect()
    }

    /// Forward-filter backward-sample one state path from the posterior.
    pub fn sample_posterior_path<R: Rng + ?Sized>(&self, rng: &mut R, obs: &[Observation]) -> Vec<usize> {
        let k = self.num_states();
        let t = &self.transitions;
        let emit = self.emission_matrix(obs);
        let (alpha, _) = self.log_forward(&emit);
        let n = obs.len();
        let mut last: Vec<f64> = alpha[n - 1].clone();
        if let Some(end) = &t.end {
            last.iter_mut().zip(end).for_each(|(a, e)| *a += e);
        }
        let mut path = vec![0; n];
        path[n - 1] = sample_log_weights(rng, &last);
        let mut w = vec![0.0; k];
        for m in (0..n - 1).rev() {
            let next = path[m + 1];
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = alpha[m][i] + t.rows[i][next];
            }
            path[m] = sample_log_weights(rng, &w);
        }
        path
    }

    /// Samples `(states, tokens)`; segments are drawn from the emission table only.
    pub fn sample_document<R: Rng + ?Sized>(&self, rng: &mut R, max_segments: usize) -> (Vec<usize>, Vec<String>) {
        let path = self.transitions.sample_path(rng, max_segments);
        let mut tokens = Vec::new();
        for &z in &path {
            let s = self.emissions.sample(rng, z);
            tokens.extend(self.emissions.segments[s].split(' ').map(str::to_owned));
        }
        (path, tokens)
    }

    /// `exp(-sum log P(x) / sum tokens)` over a corpus.
    pub fn word_perplexity(&self, docs: &[Document]) -> Result<f64> {
        use rayon::prelude::*;
        let lls: Vec<Result<f64>> = docs.par_iter().map(|d| self.log_marginal(d)).collect();
        let mut total = 0.0;
        let mut tokens = 0usize;
        for (doc, ll) in docs.iter().zip(lls) {
            total += ll?;
            tokens += doc.num_tokens();
        }
        if tokens == 0 {
            return Err(Error::EmptyInput("no tokens".into()));
        }
        Ok((-total / tokens as f64).exp())
    }
}

impl Critic for Hsmm {
    fn kind(&self) -> &'static str {
        "hsmm"
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(self.kind(), self)
    }

    fn project(&self, doc: &Document, mode: ProjectionMode, seed: u64) -> Result<LatentProjection> {
        let obs = self.observations(doc)?;
        let nll = match (self.lookup_path(&obs), mode) {
            (Some(path), _) => self.transitions.per_position_nll(&path),
            (None, ProjectionMode::MapEstimate) => self.transitions.per_position_nll(&self.viterbi(&obs)),
            (None, ProjectionMode::MonteCarlo { num_samples }) => {
                if num_samples == 0 {
                    return Err(Error::Config("Monte Carlo projection needs at least one sample".into()));
                }
                let mut r = rng(seed);
                let mut acc = vec![0.0; obs.len()];
                for _ in 0..num_samples {
                    let path = self.sample_posterior_path(&mut r, &obs);
                    for (a, v) in acc.iter_mut().zip(self.transitions.per_position_nll(&path)) {
                        *a += v;
                    }
                }
                acc.iter().map(|a| a / num_samples as f64).collect()
            }
        };
        if nll.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric(format!("document `{}` has a zero-prior projection", doc.id)));
        }
        Ok(LatentProjection::discrete(nll, mode))
    }

    /// Exact decomposition from forward-backward marginals over the observed
    /// segmentation; the posterior entropy uses the chain rule over the
    /// posterior Markov chain, independently of the log-marginal.
    fn decompose(&self, doc: &Document) -> Result<Decomposition> {
        let obs = self.observations(doc)?;
        let emit = self.emission_matrix(&obs);
        let lat = self.log_lattice(&emit);
        let t = &self.transitions;
        let k = self.num_states();
        let z = lat.log_marginal;
        let xlogy = |w: f64, lv: f64| if w > 0.0 { w * lv } else { 0.0 };

        let gamma: Vec<Vec<f64>> = lat
            .alpha
            .iter()
            .zip(&lat.beta)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y - z).exp()).collect())
            .collect();

        let mut prior = 0.0;
        let mut recon = 0.0;
        let mut entropy = 0.0;
        for j in 0..k {
            let g = gamma[0][j];
            prior += xlogy(g, t.start[j]);
            entropy -= xlogy(g, g.ln());
        }
        for m in 0..obs.len() {
            for j in 0..k {
                recon += xlogy(gamma[m][j], emit[m][j]);
            }
            if m == 0 {
                continue;
            }
            for i in 0..k {
                for j in 0..k {
                    let log_xi = lat.alpha[m - 1][i] + t.rows[i][j] + emit[m][j] + lat.beta[m][j] - z;
                    let xi = log_xi.exp();
                    prior += xlogy(xi, t.rows[i][j]);
                    // H(z_m | z_{m-1}, x) term: -xi log(xi / gamma_{m-1}(i))
                    entropy -= xlogy(xi, log_xi - gamma[m - 1][i].ln());
                }
            }
        }
        if let Some(end) = &t.end {
            for j in 0..k {
                prior += xlogy(gamma[obs.len() - 1][j], end[j]);
            }
        }
        Ok(Decomposition {
            prior_term: prior,
            reconstruction_term: recon,
            posterior_entropy: entropy,
            log_marginal: z,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::critic::ProjectionMode;

    /// Two states, two segments ("a <s>", "b <s>") with overlapping support.
    pub(crate) fn toy(end: bool) -> Hsmm {
        let ln = f64::ln;
        let (rows, end_row) = if end {
            (
                vec![vec![ln(0.6), ln(0.3)], vec![ln(0.2), ln(0.5)]],
                Some(vec![ln(0.1), ln(0.3)]),
            )
        } else {
            (vec![vec![ln(0.7), ln(0.3)], vec![ln(0.4), ln(0.6)]], None)
        };
        Hsmm {
            transitions: TransitionTable {
                start: vec![ln(0.8), ln(0.2)],
                rows,
                end: end_row,
            },
            emissions: EmissionTable::new(
                vec!["a <s>".into(), "b <s>".into()],
                vec![vec![ln(0.9), ln(0.25)], vec![ln(0.1), ln(0.75)]],
                None,
            ),
        }
    }

    pub(crate) fn doc(segs: &str) -> Document {
        let tokens = segs
            .chars()
            .flat_map(|c| [c.to_string(), SEGMENT_END.to_string()])
            .collect();
        Document::from_tokens("t", tokens)
    }

    fn enumerate_paths(k: usize, n: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |j| {
                        let mut q = p.clone();
                        q.push(j);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn joint_terms(h: &Hsmm, d: &Document) -> Vec<(Vec<usize>, f64, f64)> {
        let obs = h.observations(d).unwrap();
        enumerate_paths(h.num_states(), obs.len())
            .into_iter()
            .map(|p| {
                let lp = h.transitions.path_log_prob(&p);
                let ll: f64 = p.iter().zip(&obs).map(|(&z, &o)| h.emission_log_prob(o, z)).sum();
                (p, lp, ll)
            })
            .collect()
    }

    #[test]
    fn toy_tables_normalize() {
        toy(true).validate().unwrap();
        toy(false).validate().unwrap();
    }

    #[test]
    fn single_segment_marginal() {
        let h = toy(false);
        let direct = (0.8f64 * 0.9 + 0.2 * 0.25).ln();
        assert!((h.log_marginal(&doc("a")).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_path_enumeration() {
        for end in [false, true] {
            let h = toy(end);
            let d = doc("abba");
            let terms = joint_terms(&h, &d);
            let brute = log_sum_exp(&terms.iter().map(|(_, a, b)| a + b).collect::<Vec<_>>());
            let fwd = h.log_marginal(&d).unwrap();
            assert!(((fwd - brute) / brute).abs() < 1e-12, "{fwd} vs {brute}");
        }
    }

    #[test]
    fn posteriors_match_enumeration_over_eight_paths() {
        let h = toy(false);
        let d = doc("aba");
        let terms = joint_terms(&h, &d);
        assert_eq!(terms.len(), 8);
        let z = log_sum_exp(&terms.iter().map(|(_, a, b)| a + b).collect::<Vec<_>>());
        let mut brute = vec![vec![0.0; 2]; 3];
        for (p, a, b) in &terms {
            let w = (a + b - z).exp();
            for (m, &s) in p.iter().enumerate() {
                brute[m][s] += w;
            }
        }
        let StatePosterior::Marginals(post) = h.segment_posterior(&d).unwrap() else {
            panic!("overlapping supports must give marginals");
        };
        for m in 0..3 {
            for j in 0..2 {
                assert!((post[m][j] - brute[m][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decomposition_matches_enumeration() {
        for end in [false, true] {
            let h = toy(end);
            let d = doc("ab");
            let terms = joint_terms(&h, &d);
            let brute = Decomposition::from_enumeration(terms.iter().map(|(_, a, b)| (*a, *b)));
            let fb = h.decompose(&d).unwrap();
            for (x, y) in [
                (fb.prior_term, brute.prior_term),
                (fb.reconstruction_term, brute.reconstruction_term),
                (fb.posterior_entropy, brute.posterior_entropy),
                (fb.log_marginal, brute.log_marginal),
            ] {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
            assert!(fb.residual().abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_segment_is_an_error_without_fallback() {
        let h = toy(false);
        assert!(matches!(h.log_marginal(&doc("c")), Err(Error::UnknownSegment(k)) if k == "c <s>"));
    }

    #[test]
    fn trailing_tokens_are_rejected() {
        let d = Document::from_tokens("t", vec!["a".into(), SEGMENT_END.into(), "b".into()]);
        assert!(matches!(segment_keys(&d), Err(Error::InvalidDocument { .. })));
    }

    #[test]
    fn map_projection_scores_viterbi_path() {
        let h = toy(true);
        let d = doc("aab");
        let obs = h.observations(&d).unwrap();
        let terms = joint_terms(&h, &d);
        let best = terms
            .iter()
            .max_by(|x, y| (x.1 + x.2).total_cmp(&(y.1 + y.2)))
            .unwrap();
        assert_eq!(h.viterbi(&obs), best.0);
        let p = h.project(&d, ProjectionMode::MapEstimate, 0).unwrap();
        assert_eq!(p.num_positions(), 3);
        assert!((crate::critic::latent_nll(&p) + best.1).abs() < 1e-12);
    }

    #[test]
    fn serde_round_trip_keeps_neg_infinity() {
        let mut h = toy(false);
        h.emissions = EmissionTable::new(
            vec!["a <s>".into(), "b <s>".into()],
            vec![vec![0.0, f64::NEG_INFINITY], vec![f64::NEG_INFINITY, 0.0]],
            None,
        );
        let json = serde_json::to_string(&h).unwrap();
        let back: Hsmm = serde_json::from_str(&json).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.fingerprint(), h.fingerprint());
    }
}
