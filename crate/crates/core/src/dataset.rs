//! Corpus records, label vocabulary and dataset split construction.
//!
//! Corpus files are line-delimited JSON, one sentence per line:
//! `{"doc_id": "...", "tokens": [...], "mentions": [{"start": 0, "end": 1, "labels": ["/person"]}]}`.
//! `doc_id` is optional on input; missing ids become `<file stem>:<line>`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Records taken from the auxiliary corpus for the wiki-like training split.
pub const WIKI_LIKE_TRAIN: usize = 50_000;
/// Records following the training block used as the wiki-like dev split.
pub const WIKI_LIKE_DEV: usize = 434;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub labels: Vec<String>,
}

impl Mention {
    pub fn covers(&self, token: usize) -> bool {
        (self.start..self.end).contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<Mention>,
}

#[derive(Deserialize)]
struct RawRecord {
    doc_id: Option<String>,
    tokens: Vec<String>,
    #[serde(default)]
    mentions: Vec<Mention>,
}

impl Document {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("record has no tokens".into());
        }
        for (i, m) in self.mentions.iter().enumerate() {
            if m.end <= m.start {
                return Err(format!("mention {i}: end {} <= start {}", m.end, m.start));
            }
            if m.end > self.tokens.len() {
                return Err(format!(
                    "mention {i}: end {} beyond {} tokens",
                    m.end,
                    self.tokens.len()
                ));
            }
            if m.labels.is_empty() {
                return Err(format!("mention {i} has no labels"));
            }
            if let Some(l) = m.labels.iter().find(|l| !l.starts_with('/')) {
                return Err(format!("mention {i}: label {l:?} does not start with '/'"));
            }
        }
        Ok(())
    }

    /// Index pairs of mentions whose spans overlap.
    pub fn overlapping_mentions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, a) in self.mentions.iter().enumerate() {
            for (j, b) in self.mentions.iter().enumerate().skip(i + 1) {
                if a.start < b.end && b.start < a.end {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Union of the labels of every mention covering `token`.
    pub fn token_labels(&self, token: usize) -> BTreeSet<&str> {
        self.mentions
            .iter()
            .filter(|m| m.covers(token))
            .flat_map(|m| m.labels.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub documents: usize,
    pub mentions: usize,
    /// `(doc_id, mention_a, mention_b)` for overlapping spans (kept verbatim).
    pub overlapping: Vec<(String, usize, usize)>,
}

pub fn load_corpus(path: &Path) -> Result<(Vec<Document>, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "doc".into());
    let shown = path.display().to_string();
    let mut docs = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: shown.clone(),
            line: lineno,
            msg,
        };
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let doc = Document {
            doc_id: raw.doc_id.unwrap_or_else(|| format!("{stem}:{lineno}")),
            tokens: raw.tokens,
            mentions: raw.mentions,
        };
        doc.validate().map_err(parse_err)?;
        for (a, b) in doc.overlapping_mentions() {
            report.overlapping.push((doc.doc_id.clone(), a, b));
        }
        report.mentions += doc.mentions.len();
        docs.push(doc);
    }
    report.documents = docs.len();
    if !report.overlapping.is_empty() {
        log::warn!(
            "{}: {} overlapping mention pairs loaded verbatim",
            shown,
            report.overlapping.len()
        );
    }
    Ok((docs, report))
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        let line = serde_json::to_string(d).expect("documents serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dense index over label strings, built from a training split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelVocab {
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelVocab {
    /// Labels are indexed in sorted order.
    pub fn from_documents(docs: &[Document]) -> Self {
        let set: BTreeSet<&str> = docs
            .iter()
            .flat_map(|d| d.mentions.iter())
            .flat_map(|m| m.labels.iter().map(String::as_str))
            .collect();
        Self::from_labels(set.into_iter().map(str::to_string).collect())
    }

    /// Keeps the given order; duplicates after the first are ignored.
    pub fn from_labels(labels: Vec<String>) -> Self {
        let mut v = LabelVocab::default();
        for l in labels {
            if !v.index.contains_key(&l) {
                v.index.insert(l.clone(), v.labels.len());
                v.labels.push(l);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Multi-hot target row; labels missing from the vocabulary are counted.
    pub fn binarize<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> (Vec<f64>, usize) {
        let mut row = vec![0.0; self.len()];
        let mut oov = 0;
        for l in labels {
            match self.index(l) {
                Some(i) => row[i] = 1.0,
                None => oov += 1,
            }
        }
        (row, oov)
    }
}

/// Assigns ids `>= vocab.len()` to gold labels the vocabulary has never
/// seen, so evaluation counts them as unpredictable ground truth.
#[derive(Debug, Clone, Default)]
pub struct OovLabels {
    ids: BTreeMap<String, usize>,
    pub occurrences: usize,
}

impl OovLabels {
    pub fn gold_ids<'a>(
        &mut self,
        vocab: &LabelVocab,
        labels: impl IntoIterator<Item = &'a str>,
    ) -> BTreeSet<usize> {
        labels
            .into_iter()
            .map(|l| match vocab.index(l) {
                Some(i) => i,
                None => {
                    self.occurrences += 1;
                    let next = vocab.len() + self.ids.len();
                    *self.ids.entry(l.to_string()).or_insert(next)
                }
            })
            .collect()
    }

    pub fn distinct(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Rebuild train/dev/test from a clean test set (small corpora).
    OntonotesLike,
    /// Truncated auxiliary training set, original test set.
    WikiLike,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m_ontonotes_like" | "ontonotes" | "bbn" => Ok(SplitKind::OntonotesLike),
            "m_wiki_like" | "wiki" => Ok(SplitKind::WikiLike),
            other => Err(Error::Usage(format!(
                "unknown split kind {other} (expected m_ontonotes_like or m_wiki_like)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
    pub provenance: Provenance,
}

impl SplitSpec {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.dev.len(), self.test.len())
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for d in self.train.iter().chain(&self.dev).chain(&self.test) {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(Error::Data(format!(
                    "document {} appears in more than one split",
                    d.doc_id
                )));
            }
        }
        Ok(())
    }
}

/// `(train, dev, test)` sizes for a clean corpus of `n` records:
/// dev = test = ceil(n / 10), train takes the rest.
pub fn ontonotes_like_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 records to split, got {n}")));
    }
    let tenth = n.div_ceil(10);
    Ok((n - 2 * tenth, tenth, tenth))
}

pub fn make_modified_split(
    corpus_test: &[Document],
    kind: SplitKind,
    aux: Option<&[Document]>,
) -> Result<SplitSpec> {
    let split = match kind {
        SplitKind::OntonotesLike => {
            let (tr, dv, _) = ontonotes_like_sizes(corpus_test.len())?;
            SplitSpec {
                train: corpus_test[..tr].to_vec(),
                dev: corpus_test[tr..tr + dv].to_vec(),
                test: corpus_test[tr + dv..].to_vec(),
                provenance: Provenance::Modified,
            }
        }
        SplitKind::WikiLike => {
            let aux = aux.ok_or_else(|| {
                Error::Usage("m_wiki_like needs the original training corpus".into())
            })?;
            let need = WIKI_LIKE_TRAIN + WIKI_LIKE_DEV;
            if aux.len() < need {
                return Err(Error::Data(format!(
                    "m_wiki_like needs {need} training records, got {}",
                    aux.len()
                )));
            }
            SplitSpec {
                train: aux[..WIKI_LIKE_TRAIN].to_vec(),
                dev: aux[WIKI_LIKE_TRAIN..need].to_vec(),
                test: corpus_test.to_vec(),
                provenance: Provenance::Modified,
            }
        }
    };
    split.check_disjoint()?;
    Ok(split)
}

/// One mention-level example: a document and the index of one of its mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MentionExample<'a> {
    pub doc: &'a Document,
    pub mention_index: usize,
}

impl<'a> MentionExample<'a> {
    pub fn mention(&self) -> &'a Mention {
        &self.doc.mentions[self.mention_index]
    }
}

/// One example per mention, in document order then mention order.
pub fn extract_mention_examples(docs: &[Document]) -> Vec<MentionExample<'_>> {
    docs.iter()
        .flat_map(|doc| (0..doc.mentions.len()).map(move |mention_index| MentionExample { doc, mention_index }))
        .collect()
}

/// Per-token multi-hot label rows (`len(tokens) x N`) and the number of
/// label occurrences missing from `vocab`.
pub fn token_label_matrix(doc: &Document, vocab: &LabelVocab) -> Result<(Tensor, usize)> {
    if vocab.is_empty() {
        return Err(Error::Data("empty label vocabulary".into()));
    }
    let n = vocab.len();
    let mut data = vec![0.0; doc.tokens.len() * n];
    let mut oov = 0;
    for m in &doc.mentions {
        for l in &m.labels {
            match vocab.index(l) {
                Some(j) => (m.start..m.end).for_each(|t| data[t * n + j] = 1.0),
                None => oov += 1,
            }
        }
    }
    if oov > 0 {
        log::debug!("{}: {oov} label occurrences outside the vocabulary", doc.doc_id);
    }
    Ok((Tensor::new(vec![doc.tokens.len(), n], data)?, oov))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub tokens: usize,
    pub mentions: usize,
    pub entity_tokens: usize,
    pub distinct_labels: usize,
}

pub fn corpus_stats(docs: &[Document]) -> CorpusStats {
    let mut labels = BTreeSet::new();
    let mut s = CorpusStats::default();
    for d in docs {
        s.documents += 1;
        s.tokens += d.tokens.len();
        s.mentions += d.mentions.len();
        s.entity_tokens += (0..d.tokens.len())
            .filter(|&t| d.mentions.iter().any(|m| m.covers(t)))
            .count();
        for m in &d.mentions {
            labels.extend(m.labels.iter().map(String::as_str));
        }
    }
    s.distinct_labels = labels.len();
    s
}
