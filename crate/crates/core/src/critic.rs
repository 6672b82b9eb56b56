//! Critic-agnostic criticism statistics.
//!
//! A critic projects a document into its latent space through the posterior
//! and scores the projection under its prior. The resulting Latent NLL of a
//! document is `T(x) = -E_{z ~ P(z|x)} log P(z)`; over a corpus the per-position
//! values pool into a Latent PPL for discrete latent sequences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Document;
use crate::error::{Error, ErrorClass, Result};
use crate::math::{log_sum_exp, stream_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Score the single most probable latent configuration.
    MapEstimate,
    /// Average over draws from the posterior.
    MonteCarlo { num_samples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSpace {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentProjection {
    /// Negative log prior probability (nats) of each scored latent position.
    pub per_position_nll: Vec<f64>,
    pub mode: ProjectionMode,
    pub space: LatentSpace,
}

impl LatentProjection {
    pub fn discrete(per_position_nll: Vec<f64>, mode: ProjectionMode) -> Self {
        LatentProjection {
            per_position_nll,
            mode,
            space: LatentSpace::Discrete,
        }
    }

    /// A continuous latent scored as a single position; `nll` may be negative.
    pub fn continuous(nll: f64, mode: ProjectionMode) -> Self {
        LatentProjection {
            per_position_nll: vec![nll],
            mode,
            space: LatentSpace::Continuous,
        }
    }

    pub fn num_positions(&self) -> usize {
        self.per_position_nll.len()
    }
}

/// `T(x)`: the document's Latent NLL.
pub fn latent_nll(projection: &LatentProjection) -> f64 {
    projection.per_position_nll.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticScore {
    /// Fingerprint of the critic that produced the projections.
    pub critic: String,
    pub latent_nll: f64,
    pub latent_ppl: Option<f64>,
    pub num_docs: usize,
    pub total_positions: usize,
}

/// Pools per-document projections. The Latent NLL is the mean of the document
/// sums; the Latent PPL is `exp(total NLL / total positions)` and is reported
/// only when every projection is over a discrete latent space.
pub fn corpus_score(critic: &str, projections: &[LatentProjection]) -> Result<CriticScore> {
    if projections.is_empty() {
        return Err(Error::EmptyInput("no projections to score".into()));
    }
    let mut total = 0.0;
    let mut positions = 0;
    for p in projections {
        total += latent_nll(p);
        positions += p.num_positions();
    }
    let discrete = projections.iter().all(|p| p.space == LatentSpace::Discrete);
    let latent_ppl = (discrete && positions > 0).then(|| (total / positions as f64).exp());
    Ok(CriticScore {
        critic: critic.to_owned(),
        latent_nll: total / projections.len() as f64,
        latent_ppl,
        num_docs: projections.len(),
        total_positions: positions,
    })
}

/// The log-marginal split into prior, reconstruction and posterior-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `E_{P(z|x)} log P(z)`, i.e. `-T(x)`.
    pub prior_term: f64,
    /// `E_{P(z|x)} log P(x|z)`.
    pub reconstruction_term: f64,
    /// `H(P(z|x))`.
    pub posterior_entropy: f64,
    pub log_marginal: f64,
}

impl Decomposition {
    /// Exact decomposition from an enumeration of `(log P(z), log P(x|z))` over
    /// every latent configuration.
    pub fn from_enumeration<I>(terms: I) -> Self
    where
        I: IntoIterator<Item = (f64, f64)>,
    {
        let terms: Vec<(f64, f64)> = terms.into_iter().collect();
        let joint: Vec<f64> = terms.iter().map(|(p, l)| p + l).collect();
        let log_marginal = log_sum_exp(&joint);
        let mut prior_term = 0.0;
        let mut reconstruction_term = 0.0;
        let mut posterior_entropy = 0.0;
        for (&(lp, ll), &lj) in terms.iter().zip(&joint) {
            let log_w = lj - log_marginal;
            let w = log_w.exp();
            if w > 0.0 {
                prior_term += w * lp;
                reconstruction_term += w * ll;
                posterior_entropy -= w * log_w;
            }
        }
        Decomposition {
            prior_term,
            reconstruction_term,
            posterior_entropy,
            log_marginal,
        }
    }

    /// `prior + reconstruction + entropy - log_marginal`.
    pub fn residual(&self) -> f64 {
        self.prior_term + self.reconstruction_term + self.posterior_entropy - self.log_marginal
    }
}

pub trait Critic: Sync {
    fn kind(&self) -> &'static str;

    /// Hash of fitted parameters and configuration.
    fn fingerprint(&self) -> String;

    fn project(&self, doc: &Document, mode: ProjectionMode, seed: u64) -> Result<LatentProjection>;

    fn decompose(&self, _doc: &Document) -> Result<Decomposition> {
        Err(Error::UnsupportedCritic(format!(
            "{} critic has no exact posterior",
            self.kind()
        )))
    }
}

pub fn decompose(critic: &dyn Critic, doc: &Document) -> Result<Decomposition> {
    critic.decompose(doc)
}

pub fn fingerprint_of<T: Serialize + ?Sized>(kind: &str, value: &T) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_bytes());
    hasher.update([0u8]);
    // Serialization of our model types is deterministic (no hash maps).
    hasher.update(serde_json::to_vec(value).expect("model types serialize"));
    hex::encode(&hasher.finalize()[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnUnscorable {
    Fail,
    /// Skip documents whose projection fails with a data error
    /// (for example a segment outside the critic's support).
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCorpus {
    pub projections: Vec<(String, LatentProjection)>,
    pub skipped: Vec<(String, String)>,
}

impl ScoredCorpus {
    pub fn score(&self, critic: &str) -> Result<CriticScore> {
        let p: Vec<LatentProjection> = self.projections.iter().map(|(_, p)| p.clone()).collect();
        corpus_score(critic, &p)
    }
}

/// Projects every document (in parallel). Document `i` draws its randomness
/// from `stream_seed(seed, i)`, so results do not depend on worker count.
pub fn score_documents(
    critic: &dyn Critic,
    docs: &[Document],
    mode: ProjectionMode,
    seed: u64,
    on_unscorable: OnUnscorable,
) -> Result<ScoredCorpus> {
    let results: Vec<Result<LatentProjection>> = docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| critic.project(doc, mode, stream_seed(seed, i as u64)))
        .collect();
    let mut projections = Vec::with_capacity(docs.len());
    let mut skipped = Vec::new();
    for (doc, res) in docs.iter().zip(results) {
        match res {
            Ok(p) => projections.push((doc.id.clone(), p)),
            Err(e) if on_unscorable == OnUnscorable::Skip && e.class() == ErrorClass::Data => {
                skipped.push((doc.id.clone(), e.to_string()))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ScoredCorpus {
        projections,
        skipped,
    })
}

/// Highest `T(x)` first; ties by ascending document id.
pub fn rank_outliers(projections: &[(String, LatentProjection)], top_k: usize) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = projections
        .iter()
        .map(|(id, p)| (id.clone(), latent_nll(p)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(top_k);
    scored
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub latent_nll: f64,
    pub latent_ppl: Option<f64>,
    pub num_docs: usize,
}

impl From<&CriticScore> for ScoreSummary {
    fn from(s: &CriticScore) -> Self {
        ScoreSummary {
            latent_nll: s.latent_nll,
            latent_ppl: s.latent_ppl,
            num_docs: s.num_docs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub critic: String,
    pub reference: ScoreSummary,
    pub samples: ScoreSummary,
    /// `samples.latent_nll - reference.latent_nll`.
    pub delta_nll: f64,
    /// `samples.latent_ppl / reference.latent_ppl`, when both exist.
    pub ppl_ratio: Option<f64>,
}

pub fn compare(reference: &CriticScore, samples: &CriticScore) -> Result<ComparisonReport> {
    if reference.critic != samples.critic {
        return Err(Error::CriticMismatch(format!(
            "reference scored by {}, samples by {}",
            reference.critic, samples.critic
        )));
    }
    let ppl_ratio = match (reference.latent_ppl, samples.latent_ppl) {
        (Some(r), Some(s)) => Some(s / r),
        _ => None,
    };
    Ok(ComparisonReport {
        critic: reference.critic.clone(),
        reference: reference.into(),
        samples: samples.into(),
        delta_nll: samples.latent_nll - reference.latent_nll,
        ppl_ratio,
    })
}

/// Mean of a set of discrete posteriors over a shared finite latent space.
pub fn aggregated_posterior(posteriors: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = posteriors.first() else {
        return Vec::new();
    };
    let mut agg = vec![0.0; first.len()];
    for p in posteriors {
        for (a, v) in agg.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = posteriors.len() as f64;
    agg.iter_mut().for_each(|a| *a /= n);
    agg
}

/// `H(p, q) = -sum p log q`, with `0 log 0 = 0`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| -pi * qi.ln())
        .sum()
}

/// Total Latent NLL of a posterior set under prior `q`: `sum_i H(p_i, q)`.
pub fn prior_objective(posteriors: &[Vec<f64>], q: &[f64]) -> f64 {
    posteriors.iter().map(|p| cross_entropy(p, q)).sum()
}
