use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{segment_keys, EmissionTable, Hsmm, Observation, TransitionTable, UnknownSegmentModel};
use crate::corpus::{Document, SEGMENT_END};
use crate::error::{Error, Result};
use crate::math::{rng, stream_seed, SeededRng};

const CHUNK: usize = 64;
const DEAD_MASS: f64 = 1e-8;
const EXCHANGE_PASSES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub num_states: usize,
    pub max_iters: usize,
    /// Stop once the relative validation improvement drops below this.
    pub tol: f64,
    pub transition_smoothing: f64,
    pub emission_smoothing: f64,
    /// Keep only the most frequent segment types; the rest fall to the
    /// unknown-segment model.
    pub max_segment_types: Option<usize>,
    /// Independent initializations; the best by validation likelihood wins.
    pub restarts: usize,
    pub init: InitMethod,
    pub seed: u64,
}

/// How EM parameters are initialized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    /// Perturbed corpus frequencies for every state.
    Random,
    /// Hard clustering of segment types by the exchange algorithm for a
    /// class bigram model, started from a random partition.
    #[default]
    Exchange,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            num_states: 32,
            max_iters: 200,
            tol: 1e-5,
            transition_smoothing: 1e-3,
            emission_smoothing: 1e-6,
            max_segment_types: None,
            restarts: 1,
            init: InitMethod::Exchange,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// Training log-marginal of the parameters entering each iteration.
    pub train_log_marginal: Vec<f64>,
    /// Validation log-marginal after each iteration.
    pub val_log_marginal: Vec<f64>,
    /// (iteration, state) pairs of re-seeded dead states.
    pub reseeded: Vec<(usize, usize)>,
    pub restart: usize,
}

/// Linear-space parameters used during EM.
#[derive(Clone)]
struct Params {
    k: usize,
    start: Vec<f64>,
    /// Row-major `k x k`.
    trans: Vec<f64>,
    /// Row-major `segments x k`.
    emit: Vec<f64>,
    unk: Vec<f64>,
}

struct Encoded {
    /// Known segment index, or `None` with its spelling log-probability.
    obs: Vec<Vec<Observation>>,
}

struct Stats {
    start: Vec<f64>,
    trans: Vec<f64>,
    emit_seg: Vec<usize>,
    emit_post: Vec<f64>,
    log_lik: f64,
}

impl Params {
    fn emission_row(&self, o: Observation, out: &mut [f64]) -> f64 {
        match o {
            Observation::Known(s) => {
                out.copy_from_slice(&self.emit[s * self.k..(s + 1) * self.k]);
                0.0
            }
            Observation::Unknown(spell) => {
                out.copy_from_slice(&self.unk);
                spell
            }
        }
    }

    /// Scaled forward-backward; accumulates expected counts into `stats` when given.
    fn forward_backward(&self, obs: &[Observation], stats: Option<&mut Stats>) -> f64 {
        let k = self.k;
        let n = obs.len();
        let mut alpha = vec![0.0; n * k];
        let mut e = vec![0.0; n * k];
        let mut scale = vec![0.0; n];
        let mut log_lik = 0.0;
        for m in 0..n {
            log_lik += self.emission_row(obs[m], &mut e[m * k..(m + 1) * k]);
            let (done, rest) = alpha.split_at_mut(m * k);
            let cur = &mut rest[..k];
            if m == 0 {
                cur.copy_from_slice(&self.start);
            } else {
                let prev = &done[(m - 1) * k..];
                cur.iter_mut().for_each(|v| *v = 0.0);
                for (i, &a) in prev.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let row = &self.trans[i * k..(i + 1) * k];
                    for (c, &t) in cur.iter_mut().zip(row) {
                        *c += a * t;
                    }
                }
            }
            let mut c = 0.0;
            for (v, &em) in cur.iter_mut().zip(&e[m * k..(m + 1) * k]) {
                *v *= em;
                c += *v;
            }
            scale[m] = c;
            if c > 0.0 {
                cur.iter_mut().for_each(|v| *v /= c);
            }
            log_lik += c.ln();
        }
        let Some(stats) = stats else {
            return log_lik;
        };
        if !log_lik.is_finite() {
            stats.log_lik += log_lik;
            return log_lik;
        }

        let mut beta = vec![1.0; k];
        let mut w = vec![0.0; k];
        for m in (0..n).rev() {
            let a = &alpha[m * k..(m + 1) * k];
            stats.emit_seg.push(match obs[m] {
                Observation::Known(s) => s,
                Observation::Unknown(_) => usize::MAX,
            });
            stats.emit_post.extend(a.iter().zip(&beta).map(|(x, y)| x * y));
            if m == 0 {
                for (s, (x, y)) in stats.start.iter_mut().zip(a.iter().zip(&beta)) {
                    *s += x * y;
                }
                break;
            }
            for j in 0..k {
                w[j] = e[m * k + j] * beta[j] / scale[m];
            }
            let prev = &alpha[(m - 1) * k..m * k];
            for i in 0..k {
                let row = &self.trans[i * k..(i + 1) * k];
                let acc = &mut stats.trans[i * k..(i + 1) * k];
                let mut b = 0.0;
                for j in 0..k {
                    let tw = row[j] * w[j];
                    b += tw;
                    acc[j] += prev[i] * tw;
                }
                beta[i] = b;
            }
        }
        stats.log_lik += log_lik;
        log_lik
    }

    fn into_model(self, segments: Vec<String>, num_symbols: usize, stop_prob: f64) -> Hsmm {
        let k = self.k;
        let ln = |v: &f64| v.ln();
        Hsmm {
            transitions: TransitionTable {
                start: self.start.iter().map(ln).collect(),
                rows: self.trans.chunks(k).map(|r| r.iter().map(ln).collect()).collect(),
                end: None,
            },
            emissions: EmissionTable::new(
                segments,
                self.emit.chunks(k).map(|r| r.iter().map(ln).collect()).collect(),
                Some(UnknownSegmentModel {
                    log_mass: self.unk.iter().map(ln).collect(),
                    num_symbols,
                    stop_prob,
                }),
            ),
        }
    }
}

fn normalize(v: &mut [f64]) {
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
}

fn init_params(r: &mut SeededRng, k: usize, seg_counts: &[f64], eps: f64) -> Params {
    let mut noise = |scale: f64| (scale * r.sample::<f64, _>(StandardNormal)).exp();
    let mut start: Vec<f64> = (0..k).map(|_| noise(0.5)).collect();
    normalize(&mut start);
    let mut trans = vec![0.0; k * k];
    for row in trans.chunks_mut(k) {
        row.iter_mut().for_each(|v| *v = noise(0.5));
        normalize(row);
    }
    let s = seg_counts.len();
    let mut emit = vec![0.0; s * k];
    let mut unk = vec![0.0; k];
    for j in 0..k {
        let mut col: Vec<f64> = seg_counts.iter().map(|&c| (c + eps) * noise(1.0)).collect();
        let total: f64 = col.iter().sum::<f64>() + eps;
        col.iter_mut().for_each(|v| *v /= total);
        unk[j] = eps / total;
        for (si, v) in col.into_iter().enumerate() {
            emit[si * k + j] = v;
        }
    }
    Params { k, start, trans, emit, unk }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Class-bigram sufficient statistics of a hard segment-type partition.
struct ClassCounts {
    k: usize,
    bigram: Vec<f64>,
    out: Vec<f64>,
    tokens: Vec<f64>,
}

impl ClassCounts {
    fn shift(&mut self, c: usize, w: &TypeLinks, sign: f64) {
        let k = self.k;
        for (d, &v) in w.succ.iter().enumerate() {
            self.bigram[c * k + d] += sign * v;
        }
        for (d, &v) in w.pred.iter().enumerate() {
            self.bigram[d * k + c] += sign * v;
        }
        self.bigram[c * k + c] += sign * w.self_loops;
        self.out[c] += sign * w.out;
        self.tokens[c] += sign * w.count;
    }

    /// Objective change from adding `w` to class `c`.
    fn gain(&self, c: usize, w: &TypeLinks) -> f64 {
        let k = self.k;
        let mut g = 0.0;
        for d in 0..k {
            if d == c {
                continue;
            }
            let (a, b) = (self.bigram[c * k + d], self.bigram[d * k + c]);
            g += xlogx(a + w.succ[d]) - xlogx(a) + xlogx(b + w.pred[d]) - xlogx(b);
        }
        let cc = self.bigram[c * k + c];
        g += xlogx(cc + w.succ[c] + w.pred[c] + w.self_loops) - xlogx(cc);
        g -= xlogx(self.out[c] + w.out) - xlogx(self.out[c]);
        g -= xlogx(self.tokens[c] + w.count) - xlogx(self.tokens[c]);
        g
    }
}

/// Neighbour counts of one segment type, by class of the neighbour.
struct TypeLinks {
    succ: Vec<f64>,
    pred: Vec<f64>,
    self_loops: f64,
    out: f64,
    count: f64,
}

/// Greedy exchange clustering of segment types into `k` classes,
/// maximizing the likelihood of a class bigram model.
fn exchange_clusters(r: &mut SeededRng, data: &Encoded, num_types: usize, k: usize) -> Vec<usize> {
    let mut succ: Vec<HashMap<usize, f64>> = vec![HashMap::new(); num_types];
    let mut count = vec![0.0; num_types];
    for obs in &data.obs {
        for pair in obs.windows(2) {
            if let (Observation::Known(a), Observation::Known(b)) = (pair[0], pair[1]) {
                *succ[a].entry(b).or_default() += 1.0;
            }
        }
        for o in obs {
            if let Observation::Known(s) = o {
                count[*s] += 1.0;
            }
        }
    }
    let mut pred: Vec<Vec<(usize, f64)>> = vec![Vec::new(); num_types];
    let mut succ_list: Vec<Vec<(usize, f64)>> = Vec::with_capacity(num_types);
    for (a, m) in succ.iter().enumerate() {
        let mut list: Vec<(usize, f64)> = m.iter().map(|(&b, &c)| (b, c)).collect();
        list.sort_unstable_by_key(|e| e.0);
        for &(b, c) in &list {
            pred[b].push((a, c));
        }
        succ_list.push(list);
    }
    let mut class: Vec<usize> = (0..num_types).map(|_| r.random_range(0..k)).collect();
    let links = |w: usize, class: &[usize]| -> TypeLinks {
        let mut t = TypeLinks {
            succ: vec![0.0; k],
            pred: vec![0.0; k],
            self_loops: 0.0,
            out: 0.0,
            count: count[w],
        };
        for &(b, c) in &succ_list[w] {
            t.out += c;
            if b == w {
                t.self_loops += c;
            } else {
                t.succ[class[b]] += c;
            }
        }
        for &(a, c) in &pred[w] {
            if a != w {
                t.pred[class[a]] += c;
            }
        }
        t
    };
    let mut counts = ClassCounts {
        k,
        bigram: vec![0.0; k * k],
        out: vec![0.0; k],
        tokens: vec![0.0; k],
    };
    for (a, list) in succ_list.iter().enumerate() {
        for &(b, c) in list {
            counts.bigram[class[a] * k + class[b]] += c;
            counts.out[class[a]] += c;
        }
        counts.tokens[class[a]] += count[a];
    }
    for _ in 0..EXCHANGE_PASSES {
        let mut moved = 0;
        for w in 0..num_types {
            let t = links(w, &class);
            let from = class[w];
            counts.shift(from, &t, -1.0);
            let mut best = (from, counts.gain(from, &t));
            for c in 0..k {
                let g = counts.gain(c, &t);
                if g > best.1 + 1e-9 {
                    best = (c, g);
                }
            }
            counts.shift(best.0, &t, 1.0);
            if best.0 != from {
                class[w] = best.0;
                moved += 1;
            }
        }
        if moved == 0 {
            break;
        }
    }
    class
}

fn hard_params(data: &Encoded, class: &[usize], k: usize, cfg: &FitConfig) -> Params {
    let s = class.len();
    let mut start = vec![cfg.transition_smoothing; k];
    let mut trans = vec![cfg.transition_smoothing; k * k];
    let mut seg = vec![0.0; s];
    for obs in &data.obs {
        let cls: Vec<Option<usize>> = obs
            .iter()
            .map(|o| match o {
                Observation::Known(i) => Some(class[*i]),
                Observation::Unknown(_) => None,
            })
            .collect();
        if let Some(Some(c)) = cls.first() {
            start[*c] += 1.0;
        }
        for pair in cls.windows(2) {
            if let (Some(a), Some(b)) = (pair[0], pair[1]) {
                trans[a * k + b] += 1.0;
            }
        }
        for o in obs {
            if let Observation::Known(i) = o {
                seg[*i] += 1.0;
            }
        }
    }
    normalize(&mut start);
    trans.chunks_mut(k).for_each(normalize);
    let ee = cfg.emission_smoothing;
    let mut emit = vec![0.0; s * k];
    let mut unk = vec![0.0; k];
    for j in 0..k {
        let total: f64 = (0..s).filter(|&i| class[i] == j).map(|i| seg[i]).sum::<f64>() + ee * (s + 1) as f64;
        for i in 0..s {
            let c = if class[i] == j { seg[i] } else { 0.0 };
            emit[i * k + j] = (c + ee) / total;
        }
        unk[j] = ee / total;
    }
    Params { k, start, trans, emit, unk }
}

fn e_step(params: &Params, data: &Encoded) -> Stats {
    let k = params.k;
    let partials: Vec<Stats> = data
        .obs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut st = Stats {
                start: vec![0.0; k],
                trans: vec![0.0; k * k],
                emit_seg: Vec::new(),
                emit_post: Vec::new(),
                log_lik: 0.0,
            };
            for obs in chunk {
                params.forward_backward(obs, Some(&mut st));
            }
            st
        })
        .collect();
    let mut total = Stats {
        start: vec![0.0; k],
        trans: vec![0.0; k * k],
        emit_seg: Vec::new(),
        emit_post: Vec::new(),
        log_lik: 0.0,
    };
    for p in partials {
        total.start.iter_mut().zip(&p.start).for_each(|(a, b)| *a += b);
        total.trans.iter_mut().zip(&p.trans).for_each(|(a, b)| *a += b);
        total.emit_seg.extend(p.emit_seg);
        total.emit_post.extend(p.emit_post);
        total.log_lik += p.log_lik;
    }
    total
}

fn log_likelihood(params: &Params, data: &Encoded) -> f64 {
    let parts: Vec<f64> = data
        .obs
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|o| params.forward_backward(o, None)).sum())
        .collect();
    parts.iter().sum()
}

fn entropy_of_state(params: &Params, j: usize) -> f64 {
    let k = params.k;
    params
        .emit
        .iter()
        .skip(j)
        .step_by(k)
        .chain(std::iter::once(&params.unk[j]))
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

fn m_step(params: &mut Params, stats: &Stats, cfg: &FitConfig, r: &mut SeededRng, iter: usize, trace: &mut FitTrace) {
    let k = params.k;
    let s = params.emit.len() / k;
    let et = cfg.transition_smoothing;
    let ee = cfg.emission_smoothing;

    let mut counts = vec![0.0; s * k];
    let mut mass = vec![0.0; k];
    for (seg, post) in stats.emit_seg.iter().zip(stats.emit_post.chunks(k)) {
        for j in 0..k {
            mass[j] += post[j];
        }
        if *seg != usize::MAX {
            let row = &mut counts[seg * k..(seg + 1) * k];
            row.iter_mut().zip(post).for_each(|(a, b)| *a += b);
        }
    }

    for (p, c) in params.start.iter_mut().zip(&stats.start) {
        *p = c + et;
    }
    normalize(&mut params.start);
    for (row, c) in params.trans.chunks_mut(k).zip(stats.trans.chunks(k)) {
        row.iter_mut().zip(c).for_each(|(p, c)| *p = c + et);
        normalize(row);
    }
    for j in 0..k {
        let total: f64 = (0..s).map(|si| counts[si * k + j]).sum::<f64>() + ee * (s + 1) as f64;
        for si in 0..s {
            params.emit[si * k + j] = (counts[si * k + j] + ee) / total;
        }
        params.unk[j] = ee / total;
    }

    for j in 0..k {
        if mass[j] >= DEAD_MASS {
            continue;
        }
        let donor = (0..k)
            .filter(|&h| mass[h] >= DEAD_MASS)
            .max_by(|&a, &b| entropy_of_state(params, a).total_cmp(&entropy_of_state(params, b)));
        let Some(h) = donor else { continue };
        let mut col: Vec<f64> = (0..s)
            .map(|si| params.emit[si * k + h] * (0.1 * r.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        col.push(params.unk[h]);
        normalize(&mut col);
        for si in 0..s {
            params.emit[si * k + j] = col[si];
        }
        params.unk[j] = col[s];
        let donor_row: Vec<f64> = params.trans[h * k..(h + 1) * k].to_vec();
        let row = &mut params.trans[j * k..(j + 1) * k];
        for (p, d) in row.iter_mut().zip(donor_row) {
            *p = d * (0.1 * r.sample::<f64, _>(StandardNormal)).exp();
        }
        normalize(row);
        trace.reseeded.push((iter, j));
    }
}

/// Fits an HSMM language model by EM over the observed segmentation.
/// Validation likelihood drives stopping and restart selection; pass an
/// empty validation set to use the training likelihood instead.
pub fn fit_hsmm(train: &[Document], val: &[Document], cfg: &FitConfig) -> Result<(Hsmm, FitTrace)> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    if cfg.num_states == 0 || cfg.restarts == 0 {
        return Err(Error::Config("num_states and restarts must be positive".into()));
    }
    if !(cfg.transition_smoothing > 0.0 && cfg.emission_smoothing > 0.0) {
        return Err(Error::Config("smoothing constants must be positive".into()));
    }

    let train_keys: Vec<Vec<String>> = train.iter().map(segment_keys).collect::<Result<_>>()?;
    let mut freq: HashMap<&str, usize> = HashMap::new();
    let mut symbols: HashSet<&str> = HashSet::new();
    let mut letters = 0usize;
    let mut num_segs = 0usize;
    for key in train_keys.iter().flatten() {
        *freq.entry(key.as_str()).or_default() += 1;
        for tok in key.split(' ').filter(|t| *t != SEGMENT_END) {
            symbols.insert(tok);
            letters += 1;
        }
        num_segs += 1;
    }
    let mut support: Vec<(&str, usize)> = freq.into_iter().collect();
    support.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if let Some(cap) = cfg.max_segment_types {
        support.truncate(cap);
    }
    support.sort_by(|a, b| a.0.cmp(b.0));
    let segments: Vec<String> = support.iter().map(|(s, _)| s.to_string()).collect();
    let index: HashMap<&str, usize> = segments.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut seg_counts = vec![0.0; segments.len()];
    for (s, c) in &support {
        seg_counts[index[s]] = *c as f64;
    }

    let num_symbols = symbols.len().max(1);
    let stop_prob = 1.0 / (1.0 + letters as f64 / num_segs as f64);
    let spelling = UnknownSegmentModel {
        log_mass: vec![],
        num_symbols,
        stop_prob,
    };
    let encode = |keys: &[String]| -> Vec<Observation> {
        keys.iter()
            .map(|key| match index.get(key.as_str()) {
                Some(&s) => Observation::Known(s),
                None => Observation::Unknown(spelling.log_spelling(key.split(' ').count() - 1)),
            })
            .collect()
    };
    let train_data = Encoded {
        obs: train_keys.iter().map(|k| encode(k)).collect(),
    };
    let val_data = Encoded {
        obs: val
            .iter()
            .map(|d| segment_keys(d).map(|k| encode(&k)))
            .collect::<Result<_>>()?,
    };
    let held_out = if val.is_empty() { &train_data } else { &val_data };

    let mut best: Option<(f64, Params, FitTrace)> = None;
    for restart in 0..cfg.restarts {
        let mut r = rng(stream_seed(cfg.seed, restart as u64));
        let mut params = match cfg.init {
            InitMethod::Random => init_params(&mut r, cfg.num_states, &seg_counts, cfg.emission_smoothing),
            InitMethod::Exchange => {
                let class = exchange_clusters(&mut r, &train_data, segments.len(), cfg.num_states);
                hard_params(&train_data, &class, cfg.num_states, cfg)
            }
        };
        let mut trace = FitTrace {
            restart,
            ..Default::default()
        };
        let mut best_val = log_likelihood(&params, held_out);
        let mut best_params = params.clone();
        for iter in 0..cfg.max_iters {
            let stats = e_step(&params, &train_data);
            if !stats.log_lik.is_finite() {
                return Err(Error::Numeric("training likelihood is not finite".into()));
            }
            trace.train_log_marginal.push(stats.log_lik);
            m_step(&mut params, &stats, cfg, &mut r, iter, &mut trace);
            let v = log_likelihood(&params, held_out);
            trace.val_log_marginal.push(v);
            let improvement = (v - best_val) / best_val.abs();
            if v > best_val {
                best_val = v;
                best_params = params.clone();
            }
            if improvement < cfg.tol {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| best_val > b.0) {
            best = Some((best_val, best_params, trace));
        }
    }
    let (_, params, trace) = best.expect("at least one restart");
    let model = params.into_model(segments, num_symbols, stop_prob);
    model.validate()?;
    Ok((model, trace))
}
