//! Coreference chains as critic latents: mentions become gender or pronoun
//! symbols with entity ids, scored by a Kneser-Ney model over relabeled windows.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{fit_kn_windows, DiscountRule, KnConfig, NgramModel, PAD_ID, UNK_ID};
use crate::corpus::{Document, Mention, MentionKind, PAD};
use crate::critic::{fingerprint_of, Critic, LatentProjection, ProjectionMode};
use crate::error::{Error, Result};
use crate::hsmm::sections::csv_field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
    P,
    N,
}

impl Gender {
    fn as_str(self) -> &'static str {
        match self {
            Gender::M => "M",
            Gender::F => "F",
            Gender::P => "P",
            Gender::N => "N",
        }
    }

    fn parse(s: &str) -> Option<Gender> {
        match s {
            "M" => Some(Gender::M),
            "F" => Some(Gender::F),
            "P" => Some(Gender::P),
            "N" => Some(Gender::N),
            _ => None,
        }
    }

    fn of_pronoun(surface: &str) -> Option<Gender> {
        match surface.to_lowercase().as_str() {
            "he" | "him" | "his" | "himself" => Some(Gender::M),
            "she" | "her" | "hers" | "herself" => Some(Gender::F),
            "they" | "them" | "their" | "themselves" => Some(Gender::P),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChainSymbol {
    /// Proper-noun mention, replaced by its entity's gender.
    Mention { gender: Gender, entity: u32 },
    Pronoun { surface: String, entity: u32 },
    SentenceBoundary,
    Pad,
}

impl ChainSymbol {
    pub fn entity(&self) -> Option<u32> {
        match self {
            ChainSymbol::Mention { entity, .. } | ChainSymbol::Pronoun { entity, .. } => Some(*entity),
            _ => None,
        }
    }

    fn with_entity(&self, id: u32) -> ChainSymbol {
        match self {
            ChainSymbol::Mention { gender, .. } => ChainSymbol::Mention { gender: *gender, entity: id },
            ChainSymbol::Pronoun { surface, .. } => ChainSymbol::Pronoun {
                surface: surface.clone(),
                entity: id,
            },
            other => other.clone(),
        }
    }

    fn sym(&self) -> &str {
        match self {
            ChainSymbol::Mention { gender, .. } => gender.as_str(),
            ChainSymbol::Pronoun { surface, .. } => surface,
            ChainSymbol::SentenceBoundary => ".",
            ChainSymbol::Pad => PAD,
        }
    }

    fn from_parts(sym: &str, entity: Option<u32>) -> Result<ChainSymbol> {
        let bad = |why: &str| Error::Parse {
            line: 0,
            cause: format!("chain symbol `{sym}`: {why}"),
        };
        Ok(match (sym, entity) {
            (".", None) => ChainSymbol::SentenceBoundary,
            (PAD, None) => ChainSymbol::Pad,
            (".", Some(_)) | (PAD, Some(_)) => return Err(bad("boundary symbols carry no entity")),
            (s, Some(entity)) => match Gender::parse(s) {
                Some(gender) => ChainSymbol::Mention { gender, entity },
                None => ChainSymbol::Pronoun {
                    surface: s.to_owned(),
                    entity,
                },
            },
            (_, None) => return Err(bad("mentions need an entity")),
        })
    }
}

/// Token form used by the n-gram model: `M_0`, `he_1`, `.`, `<pad>`.
impl fmt::Display for ChainSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.entity() {
            Some(e) => write!(f, "{}_{e}", self.sym()),
            None => f.write_str(self.sym()),
        }
    }
}

/// Majority gender of the gendered pronouns coreferring with `entity`.
/// Ties go to M, then F, then P; no gendered pronoun gives N.
pub fn assign_gender(mentions: &[Mention], entity: u32) -> Gender {
    let mut tally = [0usize; 3];
    for m in mentions.iter().filter(|m| m.entity_id == entity && m.kind == MentionKind::Pronoun) {
        match Gender::of_pronoun(&m.surface) {
            Some(Gender::M) => tally[0] += 1,
            Some(Gender::F) => tally[1] += 1,
            Some(Gender::P) => tally[2] += 1,
            _ => {}
        }
    }
    let best = tally.iter().copied().max().unwrap();
    if best == 0 {
        return Gender::N;
    }
    [Gender::M, Gender::F, Gender::P][tally.iter().position(|&c| c == best).unwrap()]
}

/// One symbol per mention in document order, with a `.` at each change of
/// sentence (the document starts in sentence 0).
pub fn extract_chain(doc: &Document) -> Result<Vec<ChainSymbol>> {
    let mentions = doc.mentions.as_ref().ok_or_else(|| Error::MissingMentions(doc.id.clone()))?;
    let mut ordered: Vec<&Mention> = mentions.iter().collect();
    ordered.sort_by_key(|m| (m.section, m.token));
    let mut genders: HashMap<u32, Gender> = HashMap::new();
    let mut chain = Vec::with_capacity(ordered.len());
    let mut sentence = 0;
    for m in ordered {
        if m.sentence != sentence {
            chain.push(ChainSymbol::SentenceBoundary);
            sentence = m.sentence;
        }
        chain.push(match m.kind {
            MentionKind::Proper => ChainSymbol::Mention {
                gender: *genders
                    .entry(m.entity_id)
                    .or_insert_with(|| assign_gender(mentions, m.entity_id)),
                entity: m.entity_id,
            },
            MentionKind::Pronoun => ChainSymbol::Pronoun {
                surface: m.surface.to_lowercase(),
                entity: m.entity_id,
            },
        });
    }
    Ok(chain)
}

/// Renumbers entity ids by first occurrence, starting at 0.
pub fn relabel(symbols: &[ChainSymbol]) -> Vec<ChainSymbol> {
    let mut map: HashMap<u32, u32> = HashMap::new();
    symbols
        .iter()
        .map(|s| match s.entity() {
            Some(e) => {
                let next = map.len() as u32;
                s.with_entity(*map.entry(e).or_insert(next))
            }
            None => s.clone(),
        })
        .collect()
}

/// Relabeled, stringified windows ending at each chain position.
fn windows(chain: &[ChainSymbol], order: usize) -> Vec<Vec<String>> {
    let padded: Vec<ChainSymbol> = std::iter::repeat_n(ChainSymbol::Pad, order - 1)
        .chain(chain.iter().cloned())
        .collect();
    (0..chain.len())
        .map(|i| relabel(&padded[i..i + order]).iter().map(ToString::to_string).collect())
        .collect()
}

/// Chain critic: unseen symbols keep a small unigram mass via `<unk>`.
pub fn fit_chain_model(chains: &[Vec<ChainSymbol>], order: usize, discount: DiscountRule) -> Result<NgramModel> {
    if order == 0 {
        return Err(Error::Config("order must be at least 1".into()));
    }
    fit_kn_windows(
        chains.iter().flat_map(|c| windows(c, order)),
        &KnConfig {
            order,
            discount,
            unk_pseudo_count: 1.0,
        },
    )
}

fn window_log_prob(model: &NgramModel, w: &[String]) -> f64 {
    let n = w.len();
    model.log_prob(&w[..n - 1], &w[n - 1])
}

/// Per-position `-log P(z_i | z_{i-n+1..i-1})`, relabeling each window independently.
pub fn chain_latent_nll(model: &NgramModel, chain: &[ChainSymbol]) -> LatentProjection {
    let nll = windows(chain, model.order())
        .iter()
        .map(|w| -window_log_prob(model, w))
        .collect();
    LatentProjection::discrete(nll, ProjectionMode::MapEstimate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainCritic {
    pub model: NgramModel,
}

impl Critic for ChainCritic {
    fn kind(&self) -> &'static str {
        "kn-chain"
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(self.kind(), &self.model)
    }

    /// The chain is read off the annotations, so both modes coincide.
    fn project(&self, doc: &Document, mode: ProjectionMode, _seed: u64) -> Result<LatentProjection> {
        let mut p = chain_latent_nll(&self.model, &extract_chain(doc)?);
        p.mode = mode;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolRecord {
    pub sym: String,
    pub entity: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub doc_id: String,
    pub chain: Vec<SymbolRecord>,
}

impl ChainRecord {
    pub fn new(doc_id: impl Into<String>, chain: &[ChainSymbol]) -> Self {
        ChainRecord {
            doc_id: doc_id.into(),
            chain: chain
                .iter()
                .map(|s| SymbolRecord {
                    sym: s.sym().to_owned(),
                    entity: s.entity(),
                })
                .collect(),
        }
    }

    pub fn symbols(&self) -> Result<Vec<ChainSymbol>> {
        self.chain.iter().map(|r| ChainSymbol::from_parts(&r.sym, r.entity)).collect()
    }
}

pub fn chains_to_jsonl(records: &[ChainRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn chains_from_jsonl<R: BufRead>(reader: R) -> Result<Vec<ChainRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChainRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            cause: e.to_string(),
        })?;
        rec.symbols().map_err(|e| match e {
            Error::Parse { cause, .. } => Error::Parse { line: i + 1, cause },
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRow {
    pub gram: Vec<String>,
    pub freq_data: f64,
    pub freq_samples: f64,
    pub neg_log_prob: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbDiffRow {
    pub gram: Vec<String>,
    pub count_data: usize,
    pub count_samples: usize,
    pub log_prob_data: f64,
    pub log_prob_samples: f64,
    /// `log P_samples - log P_data`.
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRanking {
    pub order: usize,
    /// Largest contribution to the Latent NLL gap first.
    pub contributions: Vec<ContributionRow>,
    /// Largest positive difference first.
    pub log_prob_diffs: Vec<LogProbDiffRow>,
}

impl ContributionRanking {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 1..=self.order {
            let _ = write!(out, "z{i},");
        }
        out.push_str("freq_data,freq_samples,contribution\n");
        for row in &self.contributions {
            for g in &row.gram {
                let _ = write!(out, "{},", csv_field(g));
            }
            let _ = writeln!(out, "{:.6e},{:.6e},{:.6e}", row.freq_data, row.freq_samples, row.contribution);
        }
        out
    }
}

fn window_counts(chains: &[Vec<ChainSymbol>], order: usize) -> (BTreeMap<Vec<String>, usize>, usize) {
    let mut counts = BTreeMap::new();
    let mut total = 0;
    for c in chains {
        for w in windows(c, order) {
            *counts.entry(w).or_insert(0) += 1;
            total += 1;
        }
    }
    (counts, total)
}

/// Ranks n-grams by `(f_samples - f_data) * (-log P_data)`; these terms sum
/// to the gap in per-position Latent NLL. Also ranks n-grams seen at least
/// `min_count` times in both sets by the log-probability difference between
/// a critic refit on the samples and the data critic.
pub fn contribution_ranking(
    model_data: &NgramModel,
    data: &[Vec<ChainSymbol>],
    samples: &[Vec<ChainSymbol>],
    top_k: usize,
    min_count: usize,
) -> Result<ContributionRanking> {
    let n = model_data.order();
    let (cd, td) = window_counts(data, n);
    let (cs, ts) = window_counts(samples, n);
    if td == 0 || ts == 0 {
        return Err(Error::EmptyInput("both chain sets need at least one mention".into()));
    }
    let mut grams: Vec<&Vec<String>> = cd.keys().chain(cs.keys()).collect();
    grams.sort();
    grams.dedup();
    let mut contributions: Vec<ContributionRow> = grams
        .iter()
        .map(|g| {
            let fd = cd.get(*g).copied().unwrap_or(0) as f64 / td as f64;
            let fs = cs.get(*g).copied().unwrap_or(0) as f64 / ts as f64;
            let nlp = -window_log_prob(model_data, g);
            ContributionRow {
                gram: (*g).clone(),
                freq_data: fd,
                freq_samples: fs,
                neg_log_prob: nlp,
                contribution: if fs == fd { 0.0 } else { (fs - fd) * nlp },
            }
        })
        .collect();
    contributions.sort_by(|a, b| b.contribution.total_cmp(&a.contribution).then_with(|| a.gram.cmp(&b.gram)));
    contributions.truncate(top_k);

    let model_samples = fit_chain_model(samples, n, model_data.config().discount)?;
    let mut log_prob_diffs: Vec<LogProbDiffRow> = cd
        .iter()
        .filter_map(|(g, &a)| {
            let b = cs.get(g).copied().unwrap_or(0);
            if a < min_count || b < min_count {
                return None;
            }
            let lpd = window_log_prob(model_data, g);
            let lps = window_log_prob(&model_samples, g);
            Some(LogProbDiffRow {
                gram: g.clone(),
                count_data: a,
                count_samples: b,
                log_prob_data: lpd,
                log_prob_samples: lps,
                difference: lps - lpd,
            })
        })
        .collect();
    log_prob_diffs.sort_by(|a, b| b.difference.total_cmp(&a.difference).then_with(|| a.gram.cmp(&b.gram)));
    Ok(ContributionRanking {
        order: n,
        contributions,
        log_prob_diffs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlikelyWindow {
    pub context: Vec<String>,
    pub symbol: String,
    pub log_prob: f64,
    pub argmax: String,
    pub argmax_log_prob: f64,
}

/// Windows whose conditional log-probability is below `threshold`, in
/// corpus order, with the critic's preferred continuation.
pub fn unlikely_chains(model: &NgramModel, chains: &[Vec<ChainSymbol>], threshold: f64) -> Vec<UnlikelyWindow> {
    let n = model.order();
    let mut out = Vec::new();
    for chain in chains {
        for w in windows(chain, n) {
            let lp = window_log_prob(model, &w);
            if lp >= threshold {
                continue;
            }
            let dist = model.distribution(&w[..n - 1]);
            let mut best = None;
            for (i, &p) in dist.iter().enumerate() {
                if i == PAD_ID as usize || i == UNK_ID as usize {
                    continue;
                }
                if best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((i, p));
                }
            }
            let (arg, p) = best.unwrap_or((UNK_ID as usize, dist[UNK_ID as usize]));
            out.push(UnlikelyWindow {
                context: w[..n - 1].to_vec(),
                symbol: w[n - 1].clone(),
                log_prob: lp,
                argmax: model.alphabet()[arg].clone(),
                argmax_log_prob: p.ln(),
            });
        }
    }
    out
}
