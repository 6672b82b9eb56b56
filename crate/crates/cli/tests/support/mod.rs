#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use latent_critic::corpus::{save_corpus, Document, Mention, MentionKind};
use latent_critic::hsmm::sections::{LabelTransitionPrior, SectionGenerator};
use latent_critic::hsmm::TransitionTable;
use latent_critic::math::rng;
use rand::Rng;

pub const BIN: &str = env!("CARGO_BIN_EXE_latent-critic");

/// Runs the binary in `dir` with `LATENT_CRITIC_SEED` removed unless given.
pub fn run_in(dir: &Path, args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.current_dir(dir).args(args).env_remove("LATENT_CRITIC_SEED");
    if let Some(s) = env_seed {
        cmd.env("LATENT_CRITIC_SEED", s);
    }
    cmd.output().expect("spawn latent-critic")
}

/// Runs and panics with stderr on a nonzero exit.
pub fn ok(dir: &Path, args: &[&str]) {
    let out = run_in(dir, args, None);
    assert!(
        out.status.success(),
        "latent-critic {} failed ({:?}): {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A generator small enough for fast end-to-end runs.
pub const SMALL_CONFIG: &str = r#"seed = 3

[synth]
num_states = 5
segments_per_seq = 8
num_segment_types = 40
train_size = 60
val_size = 20
test_size = 30

[hsmm]
num_states = 5
max_iters = 15

[markov_lm]
order = 3

[lda]
num_topics = 3
iterations = 40

[lda_posterior]
burn_in = 10
num_samples = 8

[ctm]
num_topics = 3
max_em_iters = 5
init_sweeps = 10

[sample]
num_docs = 12
num_segments = 6
max_len = 60
doc_len = 30

[score]
num_samples = 8

[report]
min_count = 1
top_k = 5
"#;

/// Three labels with disjoint words; the prior has a few rare transitions.
pub fn section_generator() -> SectionGenerator {
    let ln = f64::ln;
    let labels: Vec<String> = ["career", "early", "personal"].iter().map(|s| s.to_string()).collect();
    let table = TransitionTable {
        start: vec![ln(0.08), ln(0.9), ln(0.02)],
        rows: vec![
            vec![ln(0.008), ln(0.03), ln(0.662)],
            vec![ln(0.8), ln(0.004), ln(0.096)],
            vec![ln(0.2), ln(0.1), ln(0.2)],
        ],
        end: Some(vec![ln(0.3), ln(0.1), ln(0.5)]),
    };
    let words = labels
        .iter()
        .map(|l| (0..6).map(|i| (format!("{l}{i}"), 1.0 / 6.0)).collect())
        .collect();
    SectionGenerator {
        prior: LabelTransitionPrior { labels, table },
        words,
        section_len: (5, 10),
        max_sections: 40,
    }
}

pub fn mention(entity: u32, token: usize, sentence: usize, surface: &str) -> Mention {
    let proper = surface.chars().next().is_some_and(char::is_uppercase);
    Mention {
        entity_id: entity,
        section: 0,
        token,
        kind: if proper { MentionKind::Proper } else { MentionKind::Pronoun },
        surface: surface.to_string(),
        sentence,
    }
}

pub fn doc_with(id: &str, mentions: Vec<Mention>) -> Document {
    let n = mentions.iter().map(|m| m.token + 1).max().unwrap_or(1);
    let mut doc = Document::from_tokens(id, vec!["w".to_string(); n]);
    doc.mentions = Some(mentions);
    doc
}

/// The worked example: Lisa, Josh and a group over two sentences.
pub fn figure_four_doc() -> Document {
    doc_with(
        "fig4",
        vec![
            mention(0, 0, 0, "Lisa"),
            mention(1, 2, 0, "him"),
            mention(2, 4, 0, "they"),
            mention(1, 6, 1, "Josh"),
            mention(0, 8, 1, "her"),
            mention(1, 9, 1, "he"),
            mention(2, 11, 1, "their"),
            mention(0, 13, 1, "Lisa"),
        ],
    )
}

/// Documents whose pronouns follow their entity's introduction; with
/// `perturb`, extra pronouns refer to entities never named.
pub fn chain_corpus(seed: u64, n: usize, perturb: bool) -> Vec<Document> {
    let mut r = rng(seed);
    let pronouns = [["he", "him", "his"], ["she", "her", "hers"], ["they", "them", "their"]];
    (0..n)
        .map(|index| {
            let num_entities = r.random_range(2..=3);
            let genders: Vec<usize> = (0..num_entities).map(|_| r.random_range(0..3)).collect();
            let mut introduced = vec![false; num_entities];
            let mut mentions = Vec::new();
            let mut token = 0;
            let mut fresh = num_entities as u32;
            for sentence in 0..6 {
                for _ in 0..r.random_range(1..=3) {
                    let e = r.random_range(0..num_entities);
                    let surface = if !introduced[e] || r.random_bool(0.3) {
                        introduced[e] = true;
                        format!("Name{e}")
                    } else {
                        pronouns[genders[e]][r.random_range(0..3)].to_string()
                    };
                    mentions.push(mention(e as u32, token, sentence, &surface));
                    token += 2;
                    if perturb && r.random_bool(0.25) {
                        fresh += 1;
                        let surface = pronouns[r.random_range(0..3)][r.random_range(0..3)];
                        mentions.push(mention(fresh, token, sentence, surface));
                        token += 2;
                    }
                }
            }
            let prefix = if perturb { "sample" } else { "data" };
            doc_with(&format!("{prefix}-{index:04}"), mentions)
        })
        .collect()
}

/// Writes the fixture corpora every end-to-end run needs into `dir`.
pub fn write_fixtures(dir: &Path) {
    std::fs::write(dir.join("config.toml"), SMALL_CONFIG).unwrap();
    let g = section_generator();
    save_corpus(&dir.join("sections_train.jsonl"), &g.sample_docs(150, 4)).unwrap();
    save_corpus(&dir.join("sections_samples.jsonl"), &g.sample_docs(80, 5)).unwrap();
    save_corpus(&dir.join("chains_data.jsonl"), &chain_corpus(6, 40, false)).unwrap();
    save_corpus(&dir.join("chains_samples.jsonl"), &chain_corpus(7, 40, true)).unwrap();
}
