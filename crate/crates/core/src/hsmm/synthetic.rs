use std::collections::HashSet;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EmissionTable, Hsmm, TransitionTable};
use crate::corpus::{Document, SEGMENT_END};
use crate::error::{Error, Result};
use crate::math::{log_normalize, rng, stream_seed, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_states: usize,
    pub segments_per_seq: usize,
    pub num_segment_types: usize,
    /// Inclusive segment length range, counting the final `<s>`.
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    /// Number of symbols including `<s>`.
    pub alphabet_size: usize,
    pub transition_temperature: f64,
    pub emission_temperature: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_states: 32,
            segments_per_seq: 20,
            num_segment_types: 2000,
            min_segment_len: 4,
            max_segment_len: 11,
            alphabet_size: 53,
            transition_temperature: 0.5,
            emission_temperature: 0.3,
            train_size: 8000,
            val_size: 1000,
            test_size: 1000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn paper_scale(seed: u64) -> Self {
        SyntheticConfig {
            num_states: 256,
            segments_per_seq: 50,
            num_segment_types: 10_000,
            train_size: 51_200,
            val_size: 6_400,
            test_size: 6_400,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.segments_per_seq == 0 {
            return Err(Error::Config("num_states and segments_per_seq must be positive".into()));
        }
        if self.num_segment_types < self.num_states {
            return Err(Error::Config("num_segment_types must be at least num_states".into()));
        }
        if self.min_segment_len < 1 || self.min_segment_len > self.max_segment_len {
            return Err(Error::Config("invalid segment length range".into()));
        }
        if self.alphabet_size < 2 {
            return Err(Error::Config("alphabet needs at least one symbol besides `<s>`".into()));
        }
        if !(self.transition_temperature > 0.0 && self.emission_temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        let letters = (self.alphabet_size - 1) as f64;
        let possible: f64 = (self.min_segment_len..=self.max_segment_len)
            .map(|l| letters.powi(l as i32 - 1))
            .sum();
        if possible < self.num_segment_types as f64 {
            return Err(Error::Config(format!(
                "only {possible} distinct segments exist, {} requested",
                self.num_segment_types
            )));
        }
        Ok(())
    }
}

/// `n` distinct symbols: `a..z`, `A..Z`, then `x52`, `x53`, ...
pub fn letter_alphabet(n: usize) -> Vec<String> {
    ('a'..='z')
        .chain('A'..='Z')
        .map(String::from)
        .chain((52..).map(|i| format!("x{i}")))
        .take(n)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub docs: Vec<Document>,
    /// Generating state path of each document.
    pub states: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    pub model: Hsmm,
    /// State assigned to each segment of the inventory, in table order.
    pub assignment: Vec<usize>,
    pub train: SyntheticSplit,
    pub val: SyntheticSplit,
    pub test: SyntheticSplit,
}

fn random_logits(r: &mut SeededRng, n: usize, temperature: f64) -> Vec<f64> {
    (0..n)
        .map(|_| r.sample::<f64, _>(StandardNormal) / temperature)
        .collect()
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let k = config.num_states;
    let mut r = rng(config.seed);
    let letters = letter_alphabet(config.alphabet_size - 1);

    let mut seen = HashSet::new();
    let mut segments = Vec::with_capacity(config.num_segment_types);
    while segments.len() < config.num_segment_types {
        let len = r.random_range(config.min_segment_len..=config.max_segment_len);
        let mut toks: Vec<&str> = (0..len - 1)
            .map(|_| letters[r.random_range(0..letters.len())].as_str())
            .collect();
        toks.push(SEGMENT_END);
        let key = toks.join(" ");
        if seen.insert(key.clone()) {
            segments.push(key);
        }
    }

    // Redraw the assignment until every state owns at least one segment.
    let mut assignment;
    let mut tries = 0;
    loop {
        assignment = (0..segments.len()).map(|_| r.random_range(0..k)).collect::<Vec<_>>();
        let mut used = vec![false; k];
        assignment.iter().for_each(|&z| used[z] = true);
        if used.iter().all(|&u| u) {
            break;
        }
        tries += 1;
        if tries == 1000 {
            return Err(Error::Config("could not give every state a segment".into()));
        }
    }

    let mut start = random_logits(&mut r, k, config.transition_temperature);
    log_normalize(&mut start);
    let rows = (0..k)
        .map(|_| {
            let mut row = random_logits(&mut r, k, config.transition_temperature);
            log_normalize(&mut row);
            row
        })
        .collect();

    let mut by_state = vec![vec![f64::NEG_INFINITY; segments.len()]; k];
    for (s, &z) in assignment.iter().enumerate() {
        by_state[z][s] = r.sample::<f64, _>(StandardNormal) / config.emission_temperature;
    }
    by_state.iter_mut().for_each(|row| log_normalize(row));
    let log_probs = (0..segments.len())
        .map(|s| (0..k).map(|j| by_state[j][s]).collect())
        .collect();

    let model = Hsmm {
        transitions: TransitionTable {
            start,
            rows,
            end: None,
        },
        emissions: EmissionTable::new(segments, log_probs, None),
    };

    let split_seed = r.random::<u64>();
    let mut offset = 0u64;
    let mut split = |name: &str, n: usize| {
        let base = offset;
        offset += n as u64;
        let (docs, states) = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut dr = rng(stream_seed(split_seed, base + i as u64));
                let (path, tokens) = model.sample_document(&mut dr, config.segments_per_seq);
                (Document::from_tokens(format!("{name}-{i:06}"), tokens), path)
            })
            .unzip();
        SyntheticSplit { docs, states }
    };
    let train = split("train", config.train_size);
    let val = split("val", config.val_size);
    let test = split("test", config.test_size);

    Ok(SyntheticData {
        config: config.clone(),
        model,
        assignment,
        train,
        val,
        test,
    })
}
