use std::fmt::Write as _;

use kodama::{linkage, Method};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CtmModel;
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::math::softmax;

pub fn clamp_for_display(v: f64) -> f64 {
    v.clamp(-5.0, 5.0)
}

/// Empirical topic covariances of two corpora under one CTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    /// Unclamped covariances in the model's topic order.
    pub cov_a: Vec<Vec<f64>>,
    pub cov_b: Vec<Vec<f64>>,
    /// Display order of topics, from clustering the rows of `cov_a`.
    pub order: Vec<usize>,
    /// Frobenius distance between the unclamped matrices.
    pub distance: f64,
    pub proportions: bool,
}

impl CovarianceReport {
    pub fn labels(&self) -> Vec<String> {
        self.order.iter().map(|i| format!("topic{i}")).collect()
    }

    /// One matrix in display order, clamped to [-5, 5].
    pub fn display_matrix(&self, second: bool) -> Vec<Vec<f64>> {
        let cov = if second { &self.cov_b } else { &self.cov_a };
        self.order
            .iter()
            .map(|&i| self.order.iter().map(|&j| clamp_for_display(cov[i][j])).collect())
            .collect()
    }

    pub fn to_csv(&self, second: bool) -> String {
        let mut out = self.labels().join(",");
        out.push('\n');
        for row in self.display_matrix(second) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

fn posterior_means(model: &CtmModel, docs: &[Document], proportions: bool) -> Vec<Vec<f64>> {
    docs.par_iter()
        .map(|d| {
            let q = model.posterior(d);
            if proportions {
                softmax(&q.lambda)
            } else {
                q.lambda
            }
        })
        .collect()
}

fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let m = rows[0].len();
    let mean: Vec<f64> = (0..m).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; m]; m];
    for r in rows {
        for i in 0..m {
            for j in 0..m {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    cov
}

/// Leaf order of an average-linkage tree over the matrix rows.
fn cluster_order(cov: &[Vec<f64>]) -> Vec<usize> {
    let m = cov.len();
    let mut condensed = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let d: f64 = cov[i].iter().zip(&cov[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            condensed.push(d.sqrt());
        }
    }
    let dend = linkage(&mut condensed, m, Method::Average);
    let steps = dend.steps();
    let mut order = Vec::with_capacity(m);
    let mut stack = vec![m + steps.len() - 1];
    while let Some(c) = stack.pop() {
        if c < m {
            order.push(c);
        } else {
            let s = &steps[c - m];
            stack.push(s.cluster2);
            stack.push(s.cluster1);
        }
    }
    order
}

/// Covariance of per-document posterior means over each corpus. Raw `z`
/// means by default; `proportions` uses `softmax` of the means instead.
pub fn covariance_report(
    model: &CtmModel,
    docs_a: &[Document],
    docs_b: &[Document],
    proportions: bool,
) -> Result<CovarianceReport> {
    if docs_a.len() < 2 || docs_b.len() < 2 {
        return Err(Error::EmptyInput("covariance needs at least two documents per corpus".into()));
    }
    let cov_a = covariance(&posterior_means(model, docs_a, proportions));
    let cov_b = covariance(&posterior_means(model, docs_b, proportions));
    let distance = cov_a
        .iter()
        .flatten()
        .zip(cov_b.iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(CovarianceReport {
        order: cluster_order(&cov_a),
        cov_a,
        cov_b,
        distance,
        proportions,
    })
}
