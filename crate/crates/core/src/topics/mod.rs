//! Topic-model critics: LDA for code-mixing and the correlated topic model
//! for topic co-occurrence.

mod ctm;
mod lda;
mod report;

use crate::corpus::{Document, Vocabulary};

pub use ctm::{fit_ctm, CtmConfig, CtmModel, CtmTrace, EStepConfig, VariationalPosterior};
pub use lda::{
    code_mixing_statistic, collapsed_conditional, exact_assignment_posterior, fit_lda, gibbs_assignment_distribution, lda_posterior, CodeMixing,
    DocMixing, LdaConfig, LdaModel, LdaPosterior, PosteriorConfig,
};
pub use report::{clamp_for_display, covariance_report, CovarianceReport};

/// Word-count view of a document over vocabulary content ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BowDoc {
    pub words: Vec<usize>,
    pub counts: Vec<f64>,
    pub total: f64,
}

pub fn bag_of_words(vocab: &Vocabulary, doc: &Document) -> BowDoc {
    let mut ids = vocab.encode_content(doc);
    ids.sort_unstable();
    let mut words: Vec<usize> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for id in ids {
        if words.last() == Some(&id) {
            *counts.last_mut().unwrap() += 1.0;
        } else {
            words.push(id);
            counts.push(1.0);
        }
    }
    let total = counts.iter().sum();
    BowDoc { words, counts, total }
}
