//! Interpolated Kneser-Ney n-gram models over string alphabets.

mod chain;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, EOS, PAD, SEGMENT_END};
use crate::error::{Error, Result};
use crate::math::{rng, sample_weights};

pub use chain::{
    assign_gender, chain_latent_nll, chains_from_jsonl, chains_to_jsonl, contribution_ranking, extract_chain,
    fit_chain_model, relabel, unlikely_chains, ChainCritic, ChainRecord, ChainSymbol, ContributionRanking,
    ContributionRow, Gender, LogProbDiffRow, SymbolRecord, UnlikelyWindow,
};

pub const UNK: &str = "<unk>";
const PAD_ID: u32 = 0;
const UNK_ID: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiscountRule {
    /// `U_{k-1} / (U_{k-1} + 2 U_k)` with `U_k` the number of unique k-grams.
    #[default]
    UniqueGrams,
    /// `n1 / (n1 + 2 n2)` from the count-of-counts at each order.
    CountOfCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnConfig {
    pub order: usize,
    pub discount: DiscountRule,
    /// Pseudo-count given to `<unk>` in the unigram base; zero leaves unseen
    /// symbols with probability zero.
    pub unk_pseudo_count: f64,
}

impl Default for KnConfig {
    fn default() -> Self {
        KnConfig {
            order: 5,
            discount: DiscountRule::UniqueGrams,
            unk_pseudo_count: 0.0,
        }
    }
}

/// Counts for one order, sorted by (context, target).
#[derive(Debug, Clone, PartialEq)]
struct Level {
    /// Context length (order - 1).
    width: usize,
    contexts: Vec<u32>,
    /// Per context: gram range, total count, number of distinct followers.
    spans: Vec<(usize, usize)>,
    totals: Vec<f64>,
    targets: Vec<u32>,
    counts: Vec<f64>,
}

impl Level {
    fn from_sorted(width: usize, grams: &[u32], counts: Vec<f64>) -> Level {
        let stride = width + 1;
        let n = counts.len();
        let mut contexts = Vec::new();
        let mut spans = Vec::new();
        let mut totals = Vec::new();
        let mut targets = Vec::with_capacity(n);
        let mut i = 0;
        while i < n {
            let ctx = &grams[i * stride..i * stride + width];
            let mut j = i;
            let mut total = 0.0;
            while j < n && &grams[j * stride..j * stride + width] == ctx {
                targets.push(grams[j * stride + width]);
                total += counts[j];
                j += 1;
            }
            contexts.extend_from_slice(ctx);
            spans.push((i, j));
            totals.push(total);
            i = j;
        }
        Level {
            width,
            contexts,
            spans,
            totals,
            targets,
            counts,
        }
    }

    fn num_grams(&self) -> usize {
        self.counts.len()
    }

    fn find(&self, ctx: &[u32]) -> Option<usize> {
        let w = self.width;
        if w == 0 {
            return (!self.spans.is_empty()).then_some(0);
        }
        let n = self.spans.len();
        let pos = partition_point(n, |c| &self.contexts[c * w..(c + 1) * w] < ctx);
        (pos < n && &self.contexts[pos * w..(pos + 1) * w] == ctx).then_some(pos)
    }

    fn count(&self, c: usize, target: u32) -> f64 {
        let (a, b) = self.spans[c];
        match self.targets[a..b].binary_search(&target) {
            Ok(i) => self.counts[a + i],
            Err(_) => 0.0,
        }
    }
}

fn partition_point(n: usize, pred: impl Fn(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Sorts flat grams of length `stride` and merges duplicates into counts.
fn sort_and_count(stride: usize, grams: Vec<u32>) -> (Vec<u32>, Vec<f64>) {
    let n = grams.len() / stride;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| grams[a * stride..(a + 1) * stride].cmp(&grams[b * stride..(b + 1) * stride]));
    let mut out: Vec<u32> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for idx in order {
        let g = &grams[idx * stride..(idx + 1) * stride];
        if !counts.is_empty() && &out[out.len() - stride..] == g {
            *counts.last_mut().unwrap() += 1.0;
        } else {
            out.extend_from_slice(g);
            counts.push(1.0);
        }
    }
    (out, counts)
}

/// Serialized form: the top-order counts determine every lower order.
#[derive(Serialize, Deserialize)]
struct NgramRepr {
    config: KnConfig,
    alphabet: Vec<String>,
    grams: Vec<u32>,
    counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NgramRepr", into = "NgramRepr")]
pub struct NgramModel {
    config: KnConfig,
    alphabet: Vec<String>,
    index: HashMap<String, u32>,
    /// `levels[k - 1]` holds order-k counts.
    levels: Vec<Level>,
    /// `discounts[k - 1]` for order k; order 1 is undiscounted.
    discounts: Vec<f64>,
    unigram: Vec<f64>,
}

impl TryFrom<NgramRepr> for NgramModel {
    type Error = Error;

    fn try_from(r: NgramRepr) -> Result<Self> {
        NgramModel::build(r.config, r.alphabet, r.grams, r.counts)
    }
}

impl From<NgramModel> for NgramRepr {
    fn from(m: NgramModel) -> Self {
        let top = m.levels.last().unwrap();
        let stride = top.width + 1;
        let mut grams = Vec::with_capacity(top.num_grams() * stride);
        for (c, &(a, b)) in top.spans.iter().enumerate() {
            for i in a..b {
                grams.extend_from_slice(&top.contexts[c * top.width..(c + 1) * top.width]);
                grams.push(top.targets[i]);
            }
        }
        let counts = if m.config.order == 1 && m.config.unk_pseudo_count > 0.0 {
            // The unigram base carries the pseudo-count; strip it again.
            top.targets
                .iter()
                .zip(&top.counts)
                .map(|(&t, &c)| if t == UNK_ID { c - m.config.unk_pseudo_count } else { c })
                .collect()
        } else {
            top.counts.clone()
        };
        let (grams, counts): (Vec<u32>, Vec<f64>) = if m.config.order == 1 {
            grams
                .chunks(1)
                .zip(counts)
                .filter(|(_, c)| *c > 0.0)
                .map(|(g, c)| (g[0], c))
                .unzip()
        } else {
            (grams, counts)
        };
        NgramRepr {
            config: m.config,
            alphabet: m.alphabet,
            grams,
            counts,
        }
    }
}

/// Fits a model on symbol sequences, each left-padded with `order - 1` pads.
pub fn fit_kn<S: AsRef<str>>(sequences: &[Vec<S>], config: &KnConfig) -> Result<NgramModel> {
    let n = config.order;
    check_config(config)?;
    let alphabet = build_alphabet(sequences.iter().flatten().map(|s| s.as_ref()));
    let index: HashMap<&str, u32> = alphabet.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
    let mut grams = Vec::new();
    for seq in sequences {
        let ids: Vec<u32> = std::iter::repeat_n(PAD_ID, n - 1)
            .chain(seq.iter().map(|s| index[s.as_ref()]))
            .collect();
        for w in ids.windows(n) {
            if w[n - 1] == PAD_ID {
                return Err(Error::Config("padding cannot be a target".into()));
            }
            grams.extend_from_slice(w);
        }
    }
    if grams.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    let (grams, counts) = sort_and_count(n, grams);
    NgramModel::build(config.clone(), alphabet, grams, counts)
}

fn check_config(config: &KnConfig) -> Result<()> {
    if config.order == 0 {
        return Err(Error::Config("order must be at least 1".into()));
    }
    if !(config.unk_pseudo_count >= 0.0) {
        return Err(Error::Config("unk_pseudo_count must be non-negative".into()));
    }
    Ok(())
}

/// `<pad>`, `<unk>`, then the remaining symbols sorted.
fn build_alphabet<'a>(symbols: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut symbols: Vec<&str> = symbols.filter(|s| *s != PAD && *s != UNK).collect();
    symbols.sort_unstable();
    symbols.dedup();
    [PAD, UNK].into_iter().chain(symbols).map(str::to_owned).collect()
}

/// Fits a model directly from n-gram windows (context followed by target).
pub fn fit_kn_windows<I>(windows: I, config: &KnConfig) -> Result<NgramModel>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let n = config.order;
    check_config(config)?;
    let windows: Vec<Vec<String>> = windows.into_iter().collect();
    if windows.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    let alphabet = build_alphabet(windows.iter().flatten().map(String::as_str));
    let index: HashMap<&str, u32> = alphabet.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
    let mut grams = Vec::with_capacity(windows.len() * n);
    for w in &windows {
        if w.len() != n {
            return Err(Error::Config(format!("window of length {} for order {n}", w.len())));
        }
        if w[n - 1] == PAD {
            return Err(Error::Config("padding cannot be a target".into()));
        }
        grams.extend(w.iter().map(|s| index[s.as_str()]));
    }
    let (grams, counts) = sort_and_count(n, grams);
    NgramModel::build(config.clone(), alphabet, grams, counts)
}

impl NgramModel {
    fn build(config: KnConfig, alphabet: Vec<String>, grams: Vec<u32>, counts: Vec<f64>) -> Result<Self> {
        let n = config.order;
        if n == 0 || alphabet.len() < 2 || alphabet[0] != PAD || alphabet[1] != UNK {
            return Err(Error::Config("malformed n-gram model".into()));
        }
        if counts.is_empty() {
            return Err(Error::EmptyTrainingData);
        }
        let index: HashMap<String, u32> = alphabet.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();

        // Top order: raw counts. Lower orders: continuation counts, i.e. the
        // number of distinct left extensions among the unique grams above.
        let mut levels = vec![Level::from_sorted(n - 1, &grams, counts)];
        let mut above = grams;
        for k in (1..n).rev() {
            let stride = k + 1;
            let suffixes: Vec<u32> = above.chunks(stride).flat_map(|g| g[1..].to_vec()).collect();
            let (g, c) = sort_and_count(k, suffixes);
            levels.push(Level::from_sorted(k - 1, &g, c));
            above = g;
        }
        levels.reverse();

        if config.unk_pseudo_count > 0.0 {
            let (grams1, mut counts1): (Vec<u32>, Vec<f64>) =
                levels[0].targets.iter().copied().zip(levels[0].counts.iter().copied()).unzip();
            let mut grams1 = grams1;
            match grams1.binary_search(&UNK_ID) {
                Ok(i) => counts1[i] += config.unk_pseudo_count,
                Err(i) => {
                    grams1.insert(i, UNK_ID);
                    counts1.insert(i, config.unk_pseudo_count);
                }
            }
            levels[0] = Level::from_sorted(0, &grams1, counts1);
        }

        let mut unigram = vec![0.0; alphabet.len()];
        let l1 = &levels[0];
        for (&t, &c) in l1.targets.iter().zip(&l1.counts) {
            unigram[t as usize] = c / l1.totals[0];
        }

        let discounts = (1..=n)
            .map(|k| {
                if k == 1 {
                    return 0.0;
                }
                let level = &levels[k - 1];
                match config.discount {
                    DiscountRule::UniqueGrams => {
                        let below = levels[k - 2].num_grams() as f64;
                        below / (below + 2.0 * level.num_grams() as f64)
                    }
                    DiscountRule::CountOfCounts => {
                        let n1 = level.counts.iter().filter(|&&c| c == 1.0).count() as f64;
                        let n2 = level.counts.iter().filter(|&&c| c == 2.0).count() as f64;
                        if n1 == 0.0 {
                            0.0
                        } else {
                            (n1 / (n1 + 2.0 * n2)).min(MAX_DISCOUNT)
                        }
                    }
                }
            })
            .collect();

        Ok(NgramModel {
            config,
            alphabet,
            index,
            levels,
            discounts,
            unigram,
        })
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    pub fn config(&self) -> &KnConfig {
        &self.config
    }

    pub fn discounts(&self) -> &[f64] {
        &self.discounts
    }

    /// All symbols, including `<pad>` (never predicted) and `<unk>`.
    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn symbol_id(&self, s: &str) -> u32 {
        self.index.get(s).copied().unwrap_or(UNK_ID)
    }

    /// Number of unique k-grams.
    pub fn unique_grams(&self, k: usize) -> usize {
        self.levels[k - 1].num_grams()
    }

    /// Symbols never observed as a target (only in contexts) score as `<unk>`.
    fn target_id(&self, s: &str) -> u32 {
        match self.symbol_id(s) {
            id if self.unigram[id as usize] > 0.0 => id,
            _ => UNK_ID,
        }
    }

    fn context_ids<S: AsRef<str>>(&self, context: &[S]) -> Vec<u32> {
        let w = self.order() - 1;
        let take = context.len().min(w);
        let mut ids = vec![PAD_ID; w - take];
        ids.extend(context[context.len() - take..].iter().map(|s| self.symbol_id(s.as_ref())));
        ids
    }

    /// Probability under the interpolated recursion truncated at `max_order`.
    fn prob_ids(&self, ctx: &[u32], w: u32, max_order: usize) -> f64 {
        let mut p = self.unigram[w as usize];
        for k in 2..=max_order {
            let level = &self.levels[k - 1];
            let suffix = &ctx[ctx.len() - (k - 1)..];
            let Some(c) = level.find(suffix) else { break };
            let d = self.discounts[k - 1];
            let total = level.totals[c];
            let (a, b) = level.spans[c];
            let types = (b - a) as f64;
            p = (level.count(c, w) - d).max(0.0) / total + d * types / total * p;
        }
        p
    }

    fn distribution_ids(&self, ctx: &[u32], max_order: usize) -> Vec<f64> {
        let mut p = self.unigram.clone();
        for k in 2..=max_order {
            let level = &self.levels[k - 1];
            let suffix = &ctx[ctx.len() - (k - 1)..];
            let Some(c) = level.find(suffix) else { break };
            let d = self.discounts[k - 1];
            let total = level.totals[c];
            let (a, b) = level.spans[c];
            let backoff = d * (b - a) as f64 / total;
            p.iter_mut().for_each(|v| *v *= backoff);
            for i in a..b {
                p[level.targets[i] as usize] += (level.counts[i] - d).max(0.0) / total;
            }
        }
        p
    }

    /// `P(symbol | context)`; only the last `order - 1` context symbols
    /// matter and shorter contexts are left-padded.
    pub fn prob<S: AsRef<str>>(&self, context: &[S], symbol: &str) -> f64 {
        self.prob_ids(&self.context_ids(context), self.target_id(symbol), self.order())
    }

    pub fn log_prob<S: AsRef<str>>(&self, context: &[S], symbol: &str) -> f64 {
        self.prob(context, symbol).ln()
    }

    /// Conditional using only orders `1..=max_order` of this model.
    pub fn prob_at_order<S: AsRef<str>>(&self, context: &[S], symbol: &str, max_order: usize) -> f64 {
        self.prob_ids(&self.context_ids(context), self.target_id(symbol), max_order.clamp(1, self.order()))
    }

    /// Full conditional over `alphabet()`.
    pub fn distribution<S: AsRef<str>>(&self, context: &[S]) -> Vec<f64> {
        self.distribution_ids(&self.context_ids(context), self.order())
    }

    /// Copy with the top-order counts removed: its conditionals are the
    /// order-(n-1) level of this model.
    pub fn without_top_order(&self) -> Result<NgramModel> {
        if self.order() == 1 {
            return Err(Error::Config("an order-1 model has no lower order".into()));
        }
        let mut m = self.clone();
        m.levels.pop();
        m.discounts.pop();
        m.config.order -= 1;
        Ok(m)
    }

    /// Log-probability of each symbol of a sequence, left-padded.
    pub fn sequence_log_probs<S: AsRef<str>>(&self, seq: &[S]) -> Vec<f64> {
        let n = self.order();
        let mut ctx = vec![PAD_ID; n - 1];
        let mut out = Vec::with_capacity(seq.len());
        for s in seq {
            let w = self.symbol_id(s.as_ref());
            out.push(self.prob_ids(&ctx, self.target_id(s.as_ref()), n).ln());
            if n > 1 {
                ctx.remove(0);
                ctx.push(w);
            }
        }
        out
    }

    /// Ancestral sampling until `stop` returns true for a generated symbol
    /// or `max_len` symbols have been drawn. `<unk>` is never drawn.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, max_len: usize, mut stop: impl FnMut(&str) -> bool) -> Vec<String> {
        let n = self.order();
        let mut ctx = vec![PAD_ID; n - 1];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut dist = self.distribution_ids(&ctx, n);
            dist[UNK_ID as usize] = 0.0;
            let w = sample_weights(rng, &dist) as u32;
            let sym = &self.alphabet[w as usize];
            out.push(sym.clone());
            if stop(sym) {
                break;
            }
            if n > 1 {
                ctx.remove(0);
                ctx.push(w);
            }
        }
        out
    }

    /// Samples until `<eos>` or `max_len`.
    pub fn sample(&self, max_len: usize, seed: u64) -> Vec<String> {
        self.sample_with(&mut rng(seed), max_len, |s| s == EOS)
    }
}

const MAX_DISCOUNT: f64 = 0.999;

/// Word-level baseline LM over document tokens (including `<s>` markers).
pub fn fit_word_lm(docs: &[Document], order: usize) -> Result<NgramModel> {
    if docs.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    let seqs: Vec<Vec<&str>> = docs.iter().map(|d| d.tokens().collect()).collect();
    fit_kn(
        &seqs,
        &KnConfig {
            order,
            discount: DiscountRule::UniqueGrams,
            unk_pseudo_count: 1.0,
        },
    )
}

/// `exp(-sum log P / sum tokens)` over documents.
pub fn word_perplexity(model: &NgramModel, docs: &[Document]) -> Result<f64> {
    use rayon::prelude::*;
    let parts: Vec<(f64, usize)> = docs
        .par_iter()
        .map(|d| {
            let toks: Vec<&str> = d.tokens().collect();
            (model.sequence_log_probs(&toks).iter().sum(), toks.len())
        })
        .collect();
    let (ll, n) = parts.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    if n == 0 {
        return Err(Error::EmptyInput("no tokens".into()));
    }
    Ok((-ll / n as f64).exp())
}

/// Samples a document of `num_segments` segments (or `max_len` tokens).
pub fn sample_segments(model: &NgramModel, id: impl Into<String>, num_segments: usize, max_len: usize, seed: u64) -> Document {
    let mut seen = 0;
    let tokens = model.sample_with(&mut rng(seed), max_len, |s| {
        if s == SEGMENT_END {
            seen += 1;
        }
        seen == num_segments
    });
    Document::from_tokens(id, tokens)
}
