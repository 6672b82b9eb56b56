use std::path::{Path, PathBuf};

use latent_critic::hsmm::{FitConfig, SyntheticConfig};
use latent_critic::ngram::DiscountRule;
use latent_critic::topics::{CtmConfig, LdaConfig, PosteriorConfig};
use latent_critic::ProjectionMode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "LATENT_CRITIC_SEED";

/// Everything a command needs besides its input files. Loaded from TOML;
/// command-line flags are applied on top.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The single seed of a run. Per-section `seed` fields are overwritten by it.
    pub seed: u64,
    pub paths: Paths,
    pub synth: SyntheticConfig,
    pub hsmm: FitConfig,
    pub markov_lm: MarkovLmConfig,
    pub kn_chain: ChainConfig,
    pub vocab: VocabConfig,
    pub lda: LdaConfig,
    pub lda_posterior: PosteriorConfig,
    pub ctm: CtmConfig,
    pub sections: SectionConfig,
    pub sample: SampleConfig,
    pub score: ScoreConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkovLmConfig {
    pub order: usize,
}

impl Default for MarkovLmConfig {
    fn default() -> Self {
        MarkovLmConfig { order: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub order: usize,
    pub discount: DiscountRule,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            order: 5,
            discount: DiscountRule::UniqueGrams,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_count: u64,
    pub max_doc_fraction: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_count: 1,
            max_doc_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SectionConfig {
    /// Additive smoothing of the label transition counts.
    pub smoothing: f64,
    /// Dirichlet smoothing of the naive Bayes section classifier.
    pub classifier_alpha: f64,
}

impl Default for SectionConfig {
    fn default() -> Self {
        SectionConfig {
            smoothing: 0.1,
            classifier_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub num_docs: usize,
    /// Segments per document for hsmm and markov-lm samples.
    pub num_segments: usize,
    /// Token cap per sampled markov-lm document or kn-chain chain.
    pub max_len: usize,
    /// Tokens per lda or ctm document.
    pub doc_len: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            num_docs: 1000,
            num_segments: 20,
            max_len: 400,
            doc_len: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Map,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub mode: ModeName,
    pub num_samples: usize,
    /// Drop documents the critic cannot project instead of failing.
    pub skip_unscorable: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            mode: ModeName::Map,
            num_samples: 64,
            skip_unscorable: true,
        }
    }
}

impl ScoreConfig {
    pub fn projection_mode(&self) -> ProjectionMode {
        match self.mode {
            ModeName::Map => ProjectionMode::MapEstimate,
            ModeName::MonteCarlo => ProjectionMode::MonteCarlo {
                num_samples: self.num_samples,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub top_k: usize,
    /// Edges with prior below this are drawn red.
    pub unlikely_threshold: f64,
    /// Transitions with prior below this count as errors.
    pub error_threshold: f64,
    pub min_count: usize,
    /// Covariance of topic proportions rather than raw coefficients.
    pub proportions: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            top_k: 20,
            unlikely_threshold: 0.05,
            error_threshold: 0.01,
            min_count: 5,
            proportions: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage("missing-path", format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage("config", format!("{}: {e}", path.display())))
    }

    /// Seed precedence: flag, then `LATENT_CRITIC_SEED`, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> CliResult<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::usage("config", format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        self.synth.seed = self.seed;
        self.hsmm.seed = self.seed;
        self.lda.seed = self.seed;
        self.ctm.seed = self.seed;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let c: RunConfig = toml::from_str(
            "seed = 4\n[kn_chain]\norder = 3\ndiscount = \"count-of-counts\"\n[score]\nmode = \"monte-carlo\"\n[paths]\ntrain = \"t.jsonl\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.kn_chain.discount, DiscountRule::CountOfCounts);
        assert_eq!(c.score.projection_mode(), ProjectionMode::MonteCarlo { num_samples: 64 });
        assert_eq!(c.paths.train.as_deref(), Some(Path::new("t.jsonl")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 4").is_err());
        assert!(toml::from_str::<RunConfig>("[hsmm]\nstates = 4").is_err());
    }
}
