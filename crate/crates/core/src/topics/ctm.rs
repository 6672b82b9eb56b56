use std::cell::RefCell;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bag_of_words, fit_lda, BowDoc, LdaConfig};
use crate::corpus::{Document, Vocabulary};
use crate::critic::{fingerprint_of, Critic, LatentProjection, ProjectionMode};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, logp_serde, rng, sample_weights, softmax, stream_seed};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_LOG_VAR: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EStepConfig {
    pub max_iters: u64,
    pub grad_tol: f64,
}

impl Default for EStepConfig {
    fn default() -> Self {
        EStepConfig {
            max_iters: 200,
            grad_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtmConfig {
    pub num_topics: usize,
    pub max_em_iters: usize,
    /// Stop when the relative ELBO change falls below this.
    pub tol: f64,
    pub estep: EStepConfig,
    /// Monte Carlo draws per document when scoring.
    pub mc_samples: usize,
    /// Collapsed Gibbs sweeps of an LDA run used to initialize the topics;
    /// 0 seeds each topic from two random documents instead.
    pub init_sweeps: usize,
    pub seed: u64,
}

impl Default for CtmConfig {
    fn default() -> Self {
        CtmConfig {
            num_topics: 10,
            max_em_iters: 100,
            tol: 1e-5,
            estep: EStepConfig::default(),
            mc_samples: 64,
            init_sweeps: 50,
            seed: 0,
        }
    }
}

/// Per-document mean-field Gaussian posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub lambda: Vec<f64>,
    pub nu2: Vec<f64>,
    pub elbo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtmTrace {
    /// Corpus ELBO after each E-step.
    pub elbo: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
struct Gaussian {
    chol: DMatrix<f64>,
    /// Row-major inverse covariance.
    inv: Vec<f64>,
    log_det: f64,
}

impl Gaussian {
    fn new(sigma: &[Vec<f64>]) -> Result<Self> {
        let m = sigma.len();
        let mat = DMatrix::from_fn(m, m, |i, j| 0.5 * (sigma[i][j] + sigma[j][i]));
        let chol = match mat.clone().cholesky() {
            Some(c) => c,
            None => (mat + DMatrix::identity(m, m) * 1e-6)
                .cholesky()
                .ok_or(Error::SingularCovariance)?,
        };
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inv_m = chol.inverse();
        let inv = (0..m * m).map(|k| inv_m[(k / m, k % m)]).collect();
        if !log_det.is_finite() {
            return Err(Error::SingularCovariance);
        }
        Ok(Gaussian { chol: l, inv, log_det })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CtmRepr {
    vocab: Vocabulary,
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    #[serde(with = "logp_serde::matrix")]
    log_phi: Vec<Vec<f64>>,
}

/// Correlated topic model: `z ~ N(mu, Sigma)`, topic proportions
/// `softmax(z)`, and per-topic word distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CtmRepr", into = "CtmRepr")]
pub struct CtmModel {
    vocab: Vocabulary,
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    log_phi: Vec<Vec<f64>>,
    gauss: Gaussian,
}

impl PartialEq for CtmModel {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.mu == other.mu && self.sigma == other.sigma && self.log_phi == other.log_phi
    }
}

impl TryFrom<CtmRepr> for CtmModel {
    type Error = Error;

    fn try_from(r: CtmRepr) -> Result<Self> {
        CtmModel::new(r.vocab, r.mu, r.sigma, r.log_phi)
    }
}

impl From<CtmModel> for CtmRepr {
    fn from(m: CtmModel) -> Self {
        CtmRepr {
            vocab: m.vocab,
            mu: m.mu,
            sigma: m.sigma,
            log_phi: m.log_phi,
        }
    }
}

/// Topic-word probabilities of one document's distinct words, row-major
/// `words x topics`.
struct DocPhi<'a> {
    bow: &'a BowDoc,
    phi: Vec<f64>,
}

struct ElboProblem<'a> {
    model: &'a CtmModel,
    doc: DocPhi<'a>,
    last: RefCell<Option<(Vec<f64>, f64, Vec<f64>)>>,
}

impl ElboProblem<'_> {
    fn split(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.model.num_topics();
        let nu2 = x[m..].iter().map(|r| r.clamp(-MAX_LOG_VAR, MAX_LOG_VAR).exp()).collect();
        (x[..m].to_vec(), nu2)
    }

    /// Negated ELBO and its gradient in `(lambda, log nu2)`, memoized on `x`.
    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        if let Some((lx, c, g)) = self.last.borrow().as_ref() {
            if lx.as_slice() == x {
                return (*c, g.clone());
            }
        }
        let m = self.model.num_topics();
        let (lambda, nu2) = self.split(x);
        let (elbo, gl, gv) = self.model.elbo_parts(&self.doc, &lambda, &nu2, true);
        let mut g: Vec<f64> = gl.into_iter().map(|v| -v).collect();
        for i in 0..m {
            let inside = x[m + i].abs() < MAX_LOG_VAR;
            g.push(if inside { -gv[i] * nu2[i] } else { 0.0 });
        }
        *self.last.borrow_mut() = Some((x.to_vec(), -elbo, g.clone()));
        (-elbo, g)
    }
}

impl CostFunction for ElboProblem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let v = self.eval(x).0;
        if v.is_nan() {
            return Err(argmin::core::Error::msg("ELBO is NaN"));
        }
        Ok(v)
    }
}

impl Gradient for ElboProblem<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, x: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(x).1)
    }
}

impl CtmModel {
    pub fn new(vocab: Vocabulary, mu: Vec<f64>, sigma: Vec<Vec<f64>>, log_phi: Vec<Vec<f64>>) -> Result<Self> {
        let m = mu.len();
        if m < 2 {
            return Err(Error::Config("CTM needs at least two topics".into()));
        }
        if sigma.len() != m || sigma.iter().any(|r| r.len() != m) || log_phi.len() != m {
            return Err(Error::Config("CTM parameter shapes disagree".into()));
        }
        if log_phi.iter().any(|r| r.len() != vocab.num_content()) {
            return Err(Error::Config("topic rows do not match the vocabulary".into()));
        }
        let gauss = Gaussian::new(&sigma)?;
        Ok(CtmModel {
            vocab,
            mu,
            sigma,
            log_phi,
            gauss,
        })
    }

    pub fn num_topics(&self) -> usize {
        self.mu.len()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[Vec<f64>] {
        &self.sigma
    }

    pub fn log_phi(&self) -> &[Vec<f64>] {
        &self.log_phi
    }

    fn inv(&self, i: usize, j: usize) -> f64 {
        self.gauss.inv[i * self.num_topics() + j]
    }

    fn mahalanobis(&self, d: &[f64]) -> f64 {
        let m = d.len();
        (0..m)
            .map(|i| d[i] * (0..m).map(|j| self.inv(i, j) * d[j]).sum::<f64>())
            .sum()
    }

    /// `-log N(z; mu, Sigma)`.
    pub fn neg_log_prior(&self, z: &[f64]) -> f64 {
        let d: Vec<f64> = z.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        0.5 * (self.num_topics() as f64 * LN_2PI + self.gauss.log_det + self.mahalanobis(&d))
    }

    /// `E_q[-log N(z; mu, Sigma)]` for `q = N(lambda, diag nu2)`.
    pub fn expected_neg_log_prior(&self, lambda: &[f64], nu2: &[f64]) -> f64 {
        let trace: f64 = nu2.iter().enumerate().map(|(i, v)| self.inv(i, i) * v).sum();
        self.neg_log_prior(lambda) + 0.5 * trace
    }

    fn doc_phi<'a>(&self, bow: &'a BowDoc) -> DocPhi<'a> {
        let phi = bow
            .words
            .iter()
            .flat_map(|&w| self.log_phi.iter().map(move |row| row[w].exp()))
            .collect();
        DocPhi { bow, phi }
    }

    /// ELBO and (optionally) its gradients with respect to `lambda` and `nu2`.
    fn elbo_parts(&self, doc: &DocPhi, lambda: &[f64], nu2: &[f64], grad: bool) -> (f64, Vec<f64>, Vec<f64>) {
        let m = self.num_topics();
        let bow = doc.bow;
        let d: Vec<f64> = lambda.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let sd: Vec<f64> = (0..m).map(|i| (0..m).map(|j| self.inv(i, j) * d[j]).sum()).collect();
        let quad: f64 = d.iter().zip(&sd).map(|(a, b)| a * b).sum();
        let trace: f64 = (0..m).map(|i| self.inv(i, i) * nu2[i]).sum();
        let prior = -0.5 * (m as f64 * LN_2PI + self.gauss.log_det + quad + trace);

        let top = lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lambda.iter().map(|l| (l - top).exp()).collect();
        let mut words = 0.0;
        let mut gl: Vec<f64> = if grad { sd.iter().map(|v| -v).collect() } else { Vec::new() };
        for (row, &c) in doc.phi.chunks(m).zip(&bow.counts) {
            let z: f64 = row.iter().zip(&e).map(|(p, x)| p * x).sum();
            words += c * (z.ln() + top);
            if grad {
                for i in 0..m {
                    gl[i] += c * row[i] * e[i] / z;
                }
            }
        }
        let shifted: Vec<f64> = (0..m).map(|i| lambda[i] + 0.5 * nu2[i]).collect();
        let norm = bow.total * log_sum_exp(&shifted);
        let ent: f64 = nu2.iter().map(|v| 0.5 * (LN_2PI + 1.0 + v.ln())).sum();
        let elbo = prior + words - norm + ent;
        if !grad {
            return (elbo, Vec::new(), Vec::new());
        }
        let s = softmax(&shifted);
        let mut gv = vec![0.0; m];
        for i in 0..m {
            gl[i] -= bow.total * s[i];
            gv[i] = -0.5 * self.inv(i, i) - 0.5 * bow.total * s[i] + 0.5 / nu2[i];
        }
        (elbo, gl, gv)
    }

    /// Per-document evidence lower bound. The log of the topic mixture is
    /// bounded by Jensen at the posterior mean and the softmax normalizer by
    /// the first-order bound at its optimal auxiliary value.
    pub fn elbo(&self, bow: &BowDoc, lambda: &[f64], nu2: &[f64]) -> f64 {
        self.elbo_parts(&self.doc_phi(bow), lambda, nu2, false).0
    }

    /// Gradients of [`CtmModel::elbo`] with respect to `lambda` and `nu2`.
    pub fn elbo_gradient(&self, bow: &BowDoc, lambda: &[f64], nu2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (_, gl, gv) = self.elbo_parts(&self.doc_phi(bow), lambda, nu2, true);
        (gl, gv)
    }

    /// Fits the variational posterior of one document by L-BFGS over
    /// `(lambda, log nu2)`. The start point is kept if the optimizer does not
    /// improve on it.
    pub fn infer(&self, bow: &BowDoc, start: Option<&VariationalPosterior>, cfg: &EStepConfig) -> VariationalPosterior {
        let m = self.num_topics();
        let (lambda0, nu20) = match start {
            Some(q) => (q.lambda.clone(), q.nu2.clone()),
            None => (self.mu.clone(), vec![1.0; m]),
        };
        let doc = self.doc_phi(bow);
        let start_elbo = self.elbo_parts(&doc, &lambda0, &nu20, false).0;
        let mut x0 = lambda0.clone();
        x0.extend(nu20.iter().map(|v| v.ln()));
        let problem = ElboProblem {
            model: self,
            doc,
            last: RefCell::new(None),
        };
        let solved = LBFGS::new(MoreThuenteLineSearch::new(), 7)
            .with_tolerance_grad(cfg.grad_tol)
            .and_then(|s| s.with_tolerance_cost(1e-9))
            .and_then(|solver| {
                Executor::new(problem, solver)
                    .configure(|st| st.param(x0).max_iters(cfg.max_iters))
                    .run()
            });
        if let Ok(res) = solved {
            if let Some(x) = res.state().get_best_param() {
                let lambda = x[..m].to_vec();
                let nu2: Vec<f64> = x[m..].iter().map(|r| r.clamp(-MAX_LOG_VAR, MAX_LOG_VAR).exp()).collect();
                let elbo = self.elbo_parts(&self.doc_phi(bow), &lambda, &nu2, false).0;
                if elbo.is_finite() && elbo >= start_elbo {
                    return VariationalPosterior { lambda, nu2, elbo };
                }
            }
        }
        VariationalPosterior {
            lambda: lambda0,
            nu2: nu20,
            elbo: start_elbo,
        }
    }

    pub fn posterior(&self, doc: &Document) -> VariationalPosterior {
        self.infer(&bag_of_words(&self.vocab, doc), None, &EStepConfig::default())
    }

    /// Draws a document of `num_tokens` words from the generative process.
    pub fn sample_document<R: Rng + ?Sized>(&self, rng: &mut R, id: &str, num_tokens: usize) -> Document {
        let m = self.num_topics();
        let eps: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        let z = &self.gauss.chol * DVector::from_vec(eps) + DVector::from_column_slice(&self.mu);
        let theta = softmax(z.as_slice());
        let phi: Vec<Vec<f64>> = self.log_phi.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
        let tokens = (0..num_tokens)
            .map(|_| {
                let t = sample_weights(rng, &theta);
                self.vocab.content_token(sample_weights(rng, &phi[t])).to_string()
            })
            .collect();
        Document::from_tokens(id, tokens)
    }

    /// One document per entry of `lengths`, each from its own seed stream.
    pub fn sample_corpus(&self, lengths: &[usize], seed: u64) -> Vec<Document> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let mut r = rng(stream_seed(seed, i as u64));
                self.sample_document(&mut r, &format!("ctm-{:06}", i + 1), n)
            })
            .collect()
    }

    /// Latent NLL of one document under its variational posterior.
    pub fn latent_nll(&self, q: &VariationalPosterior, mode: ProjectionMode, seed: u64) -> Result<f64> {
        match mode {
            ProjectionMode::MapEstimate => Ok(self.neg_log_prior(&q.lambda)),
            ProjectionMode::MonteCarlo { num_samples: 0 } => {
                Err(Error::Config("Monte Carlo projection needs at least one sample".into()))
            }
            ProjectionMode::MonteCarlo { num_samples } => {
                let mut r = rng(seed);
                let sd: Vec<f64> = q.nu2.iter().map(|v| v.sqrt()).collect();
                let mut z = vec![0.0; q.lambda.len()];
                let mut acc = 0.0;
                for _ in 0..num_samples {
                    for i in 0..z.len() {
                        let e: f64 = StandardNormal.sample(&mut r);
                        z[i] = q.lambda[i] + sd[i] * e;
                    }
                    acc += self.neg_log_prior(&z);
                }
                Ok(acc / num_samples as f64)
            }
        }
    }
}

impl Critic for CtmModel {
    fn kind(&self) -> &'static str {
        "ctm"
    }

    fn fingerprint(&self) -> String {
        fingerprint_of(self.kind(), self)
    }

    fn project(&self, doc: &Document, mode: ProjectionMode, seed: u64) -> Result<LatentProjection> {
        let q = self.posterior(doc);
        Ok(LatentProjection::continuous(self.latent_nll(&q, mode, seed)?, mode))
    }
}

fn initial_topics(bows: &[BowDoc], m: usize, v: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..m)
        .map(|_| {
            let mut row = vec![0.1; v];
            for _ in 0..2 {
                let d = &bows[r.random_range(0..bows.len())];
                for (&w, &c) in d.words.iter().zip(&d.counts) {
                    row[w] += c;
                }
            }
            let z: f64 = row.iter().sum();
            row.iter().map(|x| (x / z).ln()).collect()
        })
        .collect()
}

/// Prior moments from the posteriors. `softmax` ignores shifts along the
/// all-ones direction, so the prior keeps mean 0 and variance 1 there and is
/// estimated only on the orthogonal complement.
fn gaussian_m_step(posts: &[VariationalPosterior], m: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = posts.len() as f64;
    let mf = m as f64;
    let center = |v: &[f64]| -> Vec<f64> {
        let avg = v.iter().sum::<f64>() / mf;
        v.iter().map(|x| x - avg).collect()
    };
    let mut mean = vec![0.0; m];
    for q in posts {
        mean.iter_mut().zip(&q.lambda).for_each(|(a, l)| *a += l / n);
    }
    let mu = center(&mean);
    let mut second = vec![vec![0.0; m]; m];
    for q in posts {
        let d: Vec<f64> = q.lambda.iter().zip(&mu).map(|(l, u)| l - u).collect();
        for i in 0..m {
            for j in 0..m {
                second[i][j] += d[i] * d[j] / n;
            }
            second[i][i] += q.nu2[i] / n;
        }
    }
    let rows: Vec<Vec<f64>> = second.iter().map(|r| center(r)).collect();
    let mut sigma = vec![vec![0.0; m]; m];
    for j in 0..m {
        let col = center(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
        for i in 0..m {
            sigma[i][j] = col[i] + 1.0 / mf;
        }
    }
    (mu, sigma)
}

/// Variational EM. Posteriors are warm-started from the previous iteration,
/// so the recorded ELBO cannot decrease beyond the covariance jitter.
pub fn fit_ctm(docs: &[Document], vocab: &Vocabulary, cfg: &CtmConfig) -> Result<(CtmModel, CtmTrace)> {
    let m = cfg.num_topics;
    if m < 2 {
        return Err(Error::Config("CTM needs at least two topics".into()));
    }
    let v = vocab.num_content();
    if v == 0 {
        return Err(Error::EmptyVocabulary);
    }
    let bows: Vec<BowDoc> = docs
        .iter()
        .map(|d| bag_of_words(vocab, d))
        .filter(|b| b.total > 0.0)
        .collect();
    if bows.is_empty() {
        return Err(Error::EmptyTrainingData);
    }
    let identity: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let topics = if cfg.init_sweeps > 0 {
        let lda = LdaConfig {
            num_topics: m,
            iterations: cfg.init_sweeps,
            alpha_interval: 0,
            seed: cfg.seed,
            ..Default::default()
        };
        fit_lda(docs, vocab, &lda)?.log_phi
    } else {
        initial_topics(&bows, m, v, cfg.seed)
    };
    let mut model = CtmModel::new(vocab.clone(), vec![0.0; m], identity, topics)?;
    let mut posts: Vec<Option<VariationalPosterior>> = vec![None; bows.len()];
    let mut trace = CtmTrace {
        elbo: Vec::new(),
        converged: false,
    };
    for _ in 0..cfg.max_em_iters {
        let next: Vec<VariationalPosterior> = bows
            .par_iter()
            .zip(posts.par_iter())
            .map(|(b, q)| model.infer(b, q.as_ref(), &cfg.estep))
            .collect();
        let total: f64 = next.iter().map(|q| q.elbo).sum();
        if !total.is_finite() {
            return Err(Error::Numeric("non-finite ELBO in variational EM".into()));
        }
        if let Some(&prev) = trace.elbo.last() {
            if ((total - prev) / prev.abs().max(1e-300)).abs() < cfg.tol {
                trace.elbo.push(total);
                trace.converged = true;
                break;
            }
        }
        trace.elbo.push(total);

        let (mu, sigma) = gaussian_m_step(&next, m);
        let mut expected = vec![vec![0.0; v]; m];
        for (b, q) in bows.iter().zip(&next) {
            for (&w, &c) in b.words.iter().zip(&b.counts) {
                let logits: Vec<f64> = (0..m).map(|i| q.lambda[i] + model.log_phi[i][w]).collect();
                for (i, r) in softmax(&logits).into_iter().enumerate() {
                    expected[i][w] += c * r;
                }
            }
        }
        let log_phi: Vec<Vec<f64>> = expected
            .iter()
            .zip(&model.log_phi)
            .map(|(row, old)| {
                let z: f64 = row.iter().sum();
                if z > 0.0 {
                    row.iter().map(|x| (x / z).ln()).collect()
                } else {
                    old.clone()
                }
            })
            .collect();
        model = CtmModel::new(vocab.clone(), mu, sigma, log_phi)?;
        posts = next.into_iter().map(Some).collect();
    }
    Ok((model, trace))
}
