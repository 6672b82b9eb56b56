//! Model files: a JSON envelope naming the kind, a format version and the
//! fingerprint of the embedded parameters.

use std::path::Path;

use latent_critic::corpus::write_atomic;
use latent_critic::critic::fingerprint_of;
use latent_critic::hsmm::sections::{LabelTransitionPrior, SectionClassifier};
use latent_critic::hsmm::Hsmm;
use latent_critic::ngram::{ChainCritic, NgramModel};
use latent_critic::topics::{CtmModel, LdaModel};
use latent_critic::Critic;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult, Context};

pub const FORMAT: &str = "latent-critic-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format: String,
    version: u32,
    kind: String,
    fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<Value>,
    model: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Hsmm(Hsmm),
    MarkovLm(NgramModel),
    KnChain(ChainCritic),
    Lda(LdaModel),
    Ctm(CtmModel),
    SectionPrior(LabelTransitionPrior),
    SectionClassifier(SectionClassifier),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Hsmm(_) => "hsmm",
            Model::MarkovLm(_) => "markov-lm",
            Model::KnChain(_) => "kn-chain",
            Model::Lda(_) => "lda",
            Model::Ctm(_) => "ctm",
            Model::SectionPrior(_) => "section-prior",
            Model::SectionClassifier(_) => "section-classifier",
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            Model::Hsmm(m) => m.fingerprint(),
            Model::MarkovLm(m) => fingerprint_of(self.kind(), m),
            Model::KnChain(m) => m.fingerprint(),
            Model::Lda(m) => m.fingerprint(),
            Model::Ctm(m) => m.fingerprint(),
            Model::SectionPrior(m) => fingerprint_of(self.kind(), m),
            Model::SectionClassifier(m) => fingerprint_of(self.kind(), m),
        }
    }

    fn to_value(&self) -> serde_json::Result<Value> {
        match self {
            Model::Hsmm(m) => serde_json::to_value(m),
            Model::MarkovLm(m) => serde_json::to_value(m),
            Model::KnChain(m) => serde_json::to_value(m),
            Model::Lda(m) => serde_json::to_value(m),
            Model::Ctm(m) => serde_json::to_value(m),
            Model::SectionPrior(m) => serde_json::to_value(m),
            Model::SectionClassifier(m) => serde_json::to_value(m),
        }
    }

    fn from_value(kind: &str, v: Value) -> serde_json::Result<Option<Model>> {
        Ok(Some(match kind {
            "hsmm" => Model::Hsmm(serde_json::from_value(v)?),
            "markov-lm" => Model::MarkovLm(serde_json::from_value(v)?),
            "kn-chain" => Model::KnChain(serde_json::from_value(v)?),
            "lda" => Model::Lda(serde_json::from_value(v)?),
            "ctm" => Model::Ctm(serde_json::from_value(v)?),
            "section-prior" => Model::SectionPrior(serde_json::from_value(v)?),
            "section-classifier" => Model::SectionClassifier(serde_json::from_value(v)?),
            _ => return Ok(None),
        }))
    }

    pub fn to_json(&self, metadata: Option<Value>) -> CliResult<String> {
        let env = Envelope {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind().into(),
            fingerprint: self.fingerprint(),
            metadata,
            model: self.to_value().map_err(latent_critic::Error::from)?,
        };
        let mut s = serde_json::to_string(&env).map_err(latent_critic::Error::from)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path, metadata: Option<Value>) -> CliResult<()> {
        write_atomic(path, self.to_json(metadata)?.as_bytes()).at(path)
    }

    /// Reads a model file and checks its format, version and fingerprint.
    pub fn load(path: &Path) -> CliResult<Model> {
        let bad = |code, msg: String| CliError::data(code, format!("{}: {msg}", path.display()));
        let text = std::fs::read_to_string(path).map_err(latent_critic::Error::from).at(path)?;
        let env: Envelope = serde_json::from_str(&text).map_err(|e| bad("model-format", e.to_string()))?;
        if env.format != FORMAT {
            return Err(bad("model-format", format!("not a model file (format `{}`)", env.format)));
        }
        if env.version != VERSION {
            return Err(bad("model-version", format!("unsupported version {}", env.version)));
        }
        let model = Model::from_value(&env.kind, env.model)
            .map_err(|e| bad("model-format", e.to_string()))?
            .ok_or_else(|| bad("model-format", format!("unknown model kind `{}`", env.kind)))?;
        if model.fingerprint() != env.fingerprint {
            return Err(bad("fingerprint-mismatch", "stored fingerprint does not match the parameters".into()));
        }
        Ok(model)
    }
}
