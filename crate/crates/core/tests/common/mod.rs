#![allow(dead_code)]

use latent_critic::corpus::{Document, SEGMENT_END};
use latent_critic::hsmm::{EmissionTable, Hsmm, TransitionTable};
use latent_critic::math::{rng, sample_dirichlet, SeededRng};
use rand::Rng;

fn log_simplex(r: &mut SeededRng, n: usize) -> Vec<f64> {
    sample_dirichlet(r, &vec![1.0; n]).iter().map(|p| p.ln()).collect()
}

/// HSMM with Dirichlet(1) rows over `num_segments` one-letter segments,
/// every state able to emit every segment.
pub fn random_hsmm(seed: u64, k: usize, num_segments: usize, end: bool) -> Hsmm {
    let mut r = rng(seed);
    let start = log_simplex(&mut r, k);
    let mut rows = Vec::new();
    let mut end_row = Vec::new();
    for _ in 0..k {
        let mut row = log_simplex(&mut r, k + usize::from(end));
        if end {
            end_row.push(row.pop().unwrap());
        }
        rows.push(row);
    }
    let columns: Vec<Vec<f64>> = (0..k).map(|_| log_simplex(&mut r, num_segments)).collect();
    let log_probs = (0..num_segments).map(|s| (0..k).map(|j| columns[j][s]).collect()).collect();
    Hsmm {
        transitions: TransitionTable {
            start,
            rows,
            end: end.then_some(end_row),
        },
        emissions: EmissionTable::new(segment_names(num_segments), log_probs, None),
    }
}

pub fn segment_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i} {SEGMENT_END}")).collect()
}

pub fn random_doc(seed: u64, num_segments: usize, len: usize) -> (Document, Vec<usize>) {
    let mut r = rng(seed);
    let segs: Vec<usize> = (0..len).map(|_| r.random_range(0..num_segments)).collect();
    let tokens = segs
        .iter()
        .flat_map(|s| [format!("s{s}"), SEGMENT_END.to_string()])
        .collect();
    (Document::from_tokens("doc", tokens), segs)
}

/// All `k^n` state paths.
pub fn all_paths(k: usize, n: usize) -> Vec<Vec<usize>> {
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

/// `(log P(z), log P(x | z))` for every path, by direct products.
pub fn path_terms(model: &Hsmm, segs: &[usize]) -> Vec<(f64, f64)> {
    let t = &model.transitions;
    all_paths(t.start.len(), segs.len())
        .into_iter()
        .map(|path| {
            let mut prior = t.start[path[0]];
            for w in path.windows(2) {
                prior += t.rows[w[0]][w[1]];
            }
            if let Some(end) = &t.end {
                prior += end[*path.last().unwrap()];
            }
            let lik: f64 = path.iter().zip(segs).map(|(&z, &s)| model.emissions.log_prob(s, z)).sum();
            (prior, lik)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Relative closeness, measured against 1 for values near zero.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn quiet_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}
