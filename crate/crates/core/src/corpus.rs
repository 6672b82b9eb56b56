//! Documents, JSONL ingestion, vocabularies and corpus filtering.
//!
//! Corpora arrive pre-tokenized, one JSON record per line:
//!
//! ```text
//! {"id": "d1", "sections": [{"label": "abstract", "tokens": ["a", "b"]}], "mentions": null}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment terminator; marks the end of every emitted segment.
pub const SEGMENT_END: &str = "<s>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

/// Reserved symbols, in their fixed vocabulary order.
pub const RESERVED: [&str; 4] = [SEGMENT_END, BOS, EOS, PAD];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub label: Option<String>,
    pub tokens: Vec<String>,
}

impl Section {
    pub fn new(label: Option<&str>, tokens: Vec<String>) -> Self {
        Section {
            label: label.map(str::to_owned),
            tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MentionKind {
    Proper,
    Pronoun,
}

/// Root of one resolved entity mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub entity_id: u32,
    pub section: usize,
    pub token: usize,
    pub kind: MentionKind,
    pub surface: String,
    pub sentence: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sections: Vec<Section>,
    #[serde(default)]
    pub mentions: Option<Vec<Mention>>,
}

impl Document {
    /// A single unlabeled section holding `tokens`.
    pub fn from_tokens(id: impl Into<String>, tokens: Vec<String>) -> Self {
        Document {
            id: id.into(),
            sections: vec![Section {
                label: None,
                tokens,
            }],
            mentions: None,
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sections
            .iter()
            .flat_map(|s| s.tokens.iter().map(String::as_str))
    }

    pub fn num_tokens(&self) -> usize {
        self.sections.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidDocument {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.sections.is_empty() {
            return Err(invalid("no sections".into()));
        }
        for (i, section) in self.sections.iter().enumerate() {
            if section.tokens.is_empty() {
                return Err(invalid(format!("section {i} has no tokens")));
            }
            for tok in &section.tokens {
                if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                    return Err(invalid(format!("malformed token {tok:?} in section {i}")));
                }
                // `<s>` is legitimate corpus content: it marks segment ends.
                if tok != SEGMENT_END && RESERVED.contains(&tok.as_str()) {
                    return Err(invalid(format!("reserved symbol {tok} in section {i}")));
                }
            }
        }
        if let Some(mentions) = &self.mentions {
            let mut last_sentence = 0;
            for (k, m) in mentions.iter().enumerate() {
                let section = self
                    .sections
                    .get(m.section)
                    .ok_or_else(|| invalid(format!("mention {k} addresses section {}", m.section)))?;
                if m.token >= section.tokens.len() {
                    return Err(invalid(format!(
                        "mention {k} addresses token {} of a {}-token section",
                        m.token,
                        section.tokens.len()
                    )));
                }
                if m.sentence < last_sentence {
                    return Err(invalid(format!("mention {k} moves back to sentence {}", m.sentence)));
                }
                last_sentence = m.sentence;
            }
        }
        Ok(())
    }
}

/// Reads a JSONL corpus. Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let file = fs::File::open(path.as_ref())?;
    read_corpus(BufReader::new(file))
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            cause: e.to_string(),
        })?;
        doc.validate().map_err(|e| Error::Parse {
            line: idx + 1,
            cause: e.to_string(),
        })?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn corpus_to_jsonl(docs: &[Document]) -> Result<String> {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    write_atomic(path, corpus_to_jsonl(docs)?.as_bytes())
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Closed label set of a corpus, sorted.
pub fn label_set(docs: &[Document]) -> Vec<String> {
    let labels: std::collections::BTreeSet<&str> = docs
        .iter()
        .flat_map(|d| d.sections.iter().filter_map(|s| s.label.as_deref()))
        .collect();
    labels.into_iter().map(str::to_owned).collect()
}

/// Dense token ids. Reserved symbols always occupy ids `0..RESERVED.len()`;
/// the remaining tokens follow in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    doc_frequency: Vec<u32>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    doc_frequency: Vec<u32>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_parts(r.tokens, r.doc_frequency)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            doc_frequency: v.doc_frequency,
        }
    }
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, doc_frequency: Vec<u32>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            doc_frequency,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn doc_frequency(&self, id: u32) -> u32 {
        self.doc_frequency[id as usize]
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// Number of non-reserved tokens.
    pub fn num_content(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    /// Token of content id `id` (ids counted from the first non-reserved entry).
    pub fn content_token(&self, id: usize) -> &str {
        &self.tokens[id + RESERVED.len()]
    }

    /// Content ids of the document's in-vocabulary, non-reserved tokens.
    pub fn encode_content(&self, doc: &Document) -> Vec<usize> {
        doc.tokens()
            .filter_map(|t| self.id(t))
            .filter(|&id| !Self::is_reserved(id))
            .map(|id| id as usize - RESERVED.len())
            .collect()
    }
}

pub fn build_vocabulary(docs: &[Document], min_count: u64, max_doc_fraction: f64) -> Result<Vocabulary> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(max_doc_fraction > 0.0 && max_doc_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "max_doc_fraction must lie in (0, 1], got {max_doc_fraction}"
        )));
    }
    let mut counts: BTreeMap<&str, (u64, u32)> = BTreeMap::new();
    for doc in docs {
        let mut in_doc = HashSet::new();
        for tok in doc.tokens() {
            let entry = counts.entry(tok).or_insert((0, 0));
            entry.0 += 1;
            if in_doc.insert(tok) {
                entry.1 += 1;
            }
        }
    }
    let n_docs = docs.len() as f64;
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut doc_frequency: Vec<u32> = RESERVED
        .iter()
        .map(|r| counts.get(r).map_or(0, |c| c.1))
        .collect();
    for (tok, (count, df)) in counts {
        if RESERVED.contains(&tok) {
            continue;
        }
        if count < min_count || f64::from(df) / n_docs > max_doc_fraction {
            continue;
        }
        tokens.push(tok.to_owned());
        doc_frequency.push(df);
    }
    Ok(Vocabulary::from_parts(tokens, doc_frequency))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionFilter {
    pub min_sections: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_label_count: usize,
}

impl SectionFilter {
    /// Thresholds that keep every well-formed document.
    pub fn permissive() -> Self {
        SectionFilter {
            min_sections: 0,
            min_tokens: 0,
            max_tokens: usize::MAX,
            min_label_count: 0,
        }
    }
}

/// Drops documents that are too short, have out-of-range sections, or use a
/// rare label. Label counts are taken over the corpus being filtered; the pass
/// repeats until nothing changes, so the output is a fixed point.
pub fn filter_by_section_stats(docs: &[Document], filter: &SectionFilter) -> Result<Vec<Document>> {
    for doc in docs {
        if let Some(index) = doc.sections.iter().position(|s| s.label.is_none()) {
            return Err(Error::UnlabeledSection {
                id: doc.id.clone(),
                index,
            });
        }
    }
    let mut current: Vec<&Document> = docs.iter().collect();
    loop {
        let mut label_counts: HashMap<&str, usize> = HashMap::new();
        for doc in &current {
            for s in &doc.sections {
                *label_counts.entry(s.label.as_deref().unwrap()).or_default() += 1;
            }
        }
        let kept: Vec<&Document> = current
            .iter()
            .copied()
            .filter(|doc| {
                doc.sections.len() >= filter.min_sections
                    && doc.sections.iter().all(|s| {
                        (filter.min_tokens..=filter.max_tokens).contains(&s.tokens.len())
                            && label_counts[s.label.as_deref().unwrap()] >= filter.min_label_count
                    })
            })
            .collect();
        if kept.len() == current.len() {
            return Ok(kept.into_iter().cloned().collect());
        }
        current = kept;
    }
}
