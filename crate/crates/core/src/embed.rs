//! Frozen embedding providers.
//!
//! * `uniform`: a fixed vector per wordpiece string, drawn from U(-0.1, 0.1)
//!   by a PRNG seeded from a SHA-256 hash of the string. Stable across runs.
//! * `word_vectors`: word-level lookup in a GloVe-style text file; unknown
//!   words embed as zeros.
//! * `contextual`: a precomputed per-document store of wordpiece vectors.
//!   Its segmentation is used verbatim.
//!
//! Contextual store format: line-delimited JSON (optionally gzip), first a
//! header `{"format_version": 1, "dim": d}`, then one record per document
//! `{"doc_id": ..., "pieces": [...], "word_index": [...], "vectors": [[...], ...]}`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::MultiGzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Document;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wordpiece::{WordpieceSeq, WordpieceVocab, DEFAULT_MAX_WORD_CHARS};

pub const STORE_FORMAT_VERSION: u32 = 1;
pub const UNIFORM_RANGE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct UniformEmbeddings {
    pub dim: usize,
    pub seed: u64,
    pub vocab: Option<WordpieceVocab>,
    pub max_word_chars: usize,
}

impl UniformEmbeddings {
    pub fn new(dim: usize, seed: u64, vocab: Option<WordpieceVocab>) -> Self {
        UniformEmbeddings {
            dim,
            seed,
            vocab,
            max_word_chars: DEFAULT_MAX_WORD_CHARS,
        }
    }

    pub fn vector(&self, piece: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(piece.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        (0..self.dim)
            .map(|_| rng.gen_range(-UNIFORM_RANGE..UNIFORM_RANGE))
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
    pub duplicates: usize,
}

impl WordVectors {
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Loads `token v1 ... vd` lines. `d` comes from the first vector line; a
/// leading word2vec-style `count dim` header is skipped.
pub fn load_word_vectors(path: &Path) -> Result<WordVectors> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = open_maybe_gz(file, path)?;
    let shown = path.display().to_string();
    let mut wv = WordVectors::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if lineno == 1 && values.len() == 1 && token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = values.iter().map(|v| v.parse::<f64>()).collect();
        let parsed = parsed.map_err(|e| Error::Parse {
            path: shown.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if wv.dim == 0 {
            if parsed.is_empty() {
                return Err(Error::Parse {
                    path: shown,
                    line: lineno,
                    msg: "no vector values".into(),
                });
            }
            wv.dim = parsed.len();
        } else if parsed.len() != wv.dim {
            return Err(Error::Parse {
                path: shown,
                line: lineno,
                msg: format!("expected {} values, found {}", wv.dim, parsed.len()),
            });
        }
        if wv.vectors.insert(token.to_string(), parsed).is_some() {
            wv.duplicates += 1;
        }
    }
    if wv.duplicates > 0 {
        log::warn!("{shown}: {} duplicate tokens, last occurrence kept", wv.duplicates);
    }
    if wv.dim == 0 {
        return Err(Error::Data(format!("{shown}: no vectors")));
    }
    Ok(wv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub format_version: u32,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub doc_id: String,
    pub pieces: Vec<String>,
    pub word_index: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct ContextualStore {
    pub dim: usize,
    records: HashMap<String, StoreRecord>,
}

impl ContextualStore {
    pub fn new(dim: usize) -> Self {
        ContextualStore {
            dim,
            records: HashMap::new(),
        }
    }

    pub fn insert(&mut self, record: StoreRecord) -> Result<()> {
        let n = record.pieces.len();
        if record.word_index.len() != n || record.vectors.len() != n {
            return Err(Error::Data(format!(
                "store record {}: pieces/word_index/vectors lengths {}/{}/{}",
                record.doc_id,
                n,
                record.word_index.len(),
                record.vectors.len()
            )));
        }
        if let Some(v) = record.vectors.iter().find(|v| v.len() != self.dim) {
            return Err(Error::Config(format!(
                "store record {} has a {}-dim vector, store declares {}",
                record.doc_id,
                v.len(),
                self.dim
            )));
        }
        self.records.insert(record.doc_id.clone(), record);
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<&StoreRecord> {
        self.records.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = open_maybe_gz(file, path)?;
        let shown = path.display().to_string();
        let mut store: Option<ContextualStore> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: shown.clone(),
                line: i + 1,
                msg,
            };
            match store.as_mut() {
                None => {
                    let h: StoreHeader = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
                    if h.format_version != STORE_FORMAT_VERSION {
                        return Err(perr(format!("unsupported store version {}", h.format_version)));
                    }
                    store = Some(ContextualStore::new(h.dim));
                }
                Some(s) => {
                    let r: StoreRecord = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
                    s.insert(r).map_err(|e| perr(e.to_string()))?;
                }
            }
        }
        store.ok_or_else(|| Error::Data(format!("{shown}: missing store header")))
    }

    /// Writes the store with records sorted by `doc_id`; gzip when the path ends in `.gz`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let sink: Box<dyn Write> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(flate2::write::GzEncoder::new(file, flate2::Compression::default()))
        } else {
            Box::new(file)
        };
        let mut w = BufWriter::new(sink);
        let io = |e| Error::io(path, e);
        let header = StoreHeader {
            format_version: STORE_FORMAT_VERSION,
            dim: self.dim,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("json")).map_err(io)?;
        let mut ids: Vec<&String> = self.records.keys().collect();
        ids.sort();
        for id in ids {
            writeln!(w, "{}", serde_json::to_string(&self.records[id]).expect("json")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn open_maybe_gz(mut file: File, path: &Path) -> Result<Box<dyn BufRead>> {
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(if n == 2 && magic == [0x1f, 0x8b] {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Uniform(UniformEmbeddings),
    WordVectors(WordVectors),
    Contextual(ContextualStore),
}

impl EmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Uniform(u) => u.dim,
            EmbeddingProvider::WordVectors(w) => w.dim,
            EmbeddingProvider::Contextual(c) => c.dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EmbeddingProvider::Uniform(_) => "uniform",
            EmbeddingProvider::WordVectors(_) => "word_vectors",
            EmbeddingProvider::Contextual(_) => "contextual",
        }
    }
}

/// Wordpiece segmentation of `doc` and its `T x d` embedding matrix.
pub fn embed_sequence(doc: &Document, provider: &EmbeddingProvider) -> Result<(WordpieceSeq, Tensor)> {
    let d = provider.dim();
    let (seq, rows): (WordpieceSeq, Vec<f64>) = match provider {
        EmbeddingProvider::Uniform(u) => {
            let seq = match &u.vocab {
                Some(v) => WordpieceSeq::tokenize(&doc.tokens, v, u.max_word_chars)?,
                None => WordpieceSeq::identity(&doc.tokens),
            };
            let rows = seq.pieces.iter().flat_map(|p| u.vector(p)).collect();
            (seq, rows)
        }
        EmbeddingProvider::WordVectors(w) => {
            let seq = WordpieceSeq::identity(&doc.tokens);
            let zero = vec![0.0; d];
            let rows = doc
                .tokens
                .iter()
                .flat_map(|t| w.get(t).unwrap_or(&zero).to_vec())
                .collect();
            (seq, rows)
        }
        EmbeddingProvider::Contextual(c) => {
            let r = c
                .get(&doc.doc_id)
                .ok_or_else(|| Error::Data(format!("contextual store has no document {}", doc.doc_id)))?;
            let seq = WordpieceSeq {
                pieces: r.pieces.clone(),
                word_index: r.word_index.clone(),
                is_pad: vec![false; r.pieces.len()],
            };
            seq.validate(doc.tokens.len())
                .map_err(|e| Error::Data(format!("store record {}: {e}", doc.doc_id)))?;
            (seq, r.vectors.concat())
        }
    };
    let t = seq.len();
    Ok((seq, Tensor::new(vec![t, d], rows)?))
}

/// Parsed `--embedding` value: `uniform:<dim>[:<vocab.txt>]`,
/// `glove:<path>` / `word2vec:<path>` / `word_vectors:<path>`, or `contextual:<path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingSpec {
    Uniform { dim: usize, vocab: Option<PathBuf> },
    WordVectors(PathBuf),
    Contextual(PathBuf),
}

impl FromStr for EmbeddingSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let missing = || Error::Usage(format!("embedding spec {s:?} needs an argument"));
        match kind {
            "uniform" => {
                let (dim, vocab) = match rest.split_once(':') {
                    Some((d, v)) => (d, Some(PathBuf::from(v))),
                    None => (rest, None),
                };
                let dim = dim
                    .parse()
                    .map_err(|_| Error::Usage(format!("uniform embedding needs a dimension, got {dim:?}")))?;
                Ok(EmbeddingSpec::Uniform { dim, vocab })
            }
            "glove" | "word2vec" | "word_vectors" if !rest.is_empty() => {
                Ok(EmbeddingSpec::WordVectors(rest.into()))
            }
            "contextual" | "bert" if !rest.is_empty() => Ok(EmbeddingSpec::Contextual(rest.into())),
            "glove" | "word2vec" | "word_vectors" | "contextual" | "bert" => Err(missing()),
            other => Err(Error::Usage(format!("unknown embedding kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for EmbeddingSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbeddingSpec::Uniform { dim, vocab: None } => write!(f, "uniform:{dim}"),
            EmbeddingSpec::Uniform { dim, vocab: Some(v) } => write!(f, "uniform:{dim}:{}", v.display()),
            EmbeddingSpec::WordVectors(p) => write!(f, "word_vectors:{}", p.display()),
            EmbeddingSpec::Contextual(p) => write!(f, "contextual:{}", p.display()),
        }
    }
}

impl EmbeddingSpec {
    pub fn load(&self, seed: u64) -> Result<EmbeddingProvider> {
        Ok(match self {
            EmbeddingSpec::Uniform { dim, vocab } => {
                if *dim == 0 {
                    return Err(Error::Config("embedding dimension must be positive".into()));
                }
                let vocab = vocab.as_deref().map(WordpieceVocab::load).transpose()?;
                EmbeddingProvider::Uniform(UniformEmbeddings::new(*dim, seed, vocab))
            }
            EmbeddingSpec::WordVectors(p) => EmbeddingProvider::WordVectors(load_word_vectors(p)?),
            EmbeddingSpec::Contextual(p) => EmbeddingProvider::Contextual(ContextualStore::load(p)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Mention;

    fn doc(id: &str, words: &[&str]) -> Document {
        Document {
            doc_id: id.into(),
            tokens: words.iter().map(|s| s.to_string()).collect(),
            mentions: Vec::<Mention>::new(),
        }
    }

    #[test]
    fn uniform_is_deterministic_and_bounded() {
        let u = UniformEmbeddings::new(8, 0, None);
        let a = u.vector("bank");
        assert_eq!(a, u.vector("bank"));
        assert_ne!(a, u.vector("banks"));
        assert!(a.iter().all(|v| v.abs() < UNIFORM_RANGE));
        let p = EmbeddingProvider::Uniform(u);
        let (_, e) = embed_sequence(&doc("d", &["bank", "x", "bank"]), &p).unwrap();
        assert_eq!(e.row(0), e.row(2));
    }

    #[test]
    fn uniform_values_are_pinned() {
        // Frozen output: a change here silently changes every uniform run.
        let bits: Vec<u64> = UniformEmbeddings::new(2, 7, None)
            .vector("the")
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(bits, [13812031109253784000, 4591794313381769642]);
    }

    #[test]
    fn word_vector_lookup_and_oov() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "the 0.1 0.2\ncat 1 2").unwrap();
        let wv = load_word_vectors(f.path()).unwrap();
        assert_eq!((wv.len(), wv.dim), (2, 2));
        let p = EmbeddingProvider::WordVectors(wv);
        let (seq, e) = embed_sequence(&doc("d", &["the", "the", "dog"]), &p).unwrap();
        assert_eq!(seq.pieces, vec!["the", "the", "dog"]);
        assert_eq!(e.to_rows(), vec![vec![0.1, 0.2], vec![0.1, 0.2], vec![0.0, 0.0]]);
    }

    #[test]
    fn word_vectors_dimension_from_first_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a 1 2 3\nb 4 5 6").unwrap();
        let wv = load_word_vectors(f.path()).unwrap();
        assert_eq!((wv.len(), wv.dim), (2, 3));
    }

    #[test]
    fn ragged_word_vectors_name_the_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a 1 2 3\nb 4 5").unwrap();
        match load_word_vectors(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn duplicate_word_last_wins() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a 1\na 2").unwrap();
        let wv = load_word_vectors(f.path()).unwrap();
        assert_eq!(wv.get("a"), Some(&[2.0][..]));
        assert_eq!(wv.duplicates, 1);
    }

    #[test]
    fn word2vec_header_skipped() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "2 3\na 1 2 3\nb 4 5 6").unwrap();
        assert_eq!(load_word_vectors(f.path()).unwrap().dim, 3);
    }

    fn bank_store() -> ContextualStore {
        let mut s = ContextualStore::new(2);
        s.insert(StoreRecord {
            doc_id: "s1".into(),
            pieces: vec!["bank".into(), "by".into(), "the".into(), "bank".into()],
            word_index: vec![0, 1, 2, 3],
            vectors: vec![vec![1.0, 0.0], vec![0.1, 0.1], vec![0.2, 0.2], vec![0.0, 1.0]],
        })
        .unwrap();
        s
    }

    #[test]
    fn contextual_store_returns_context_distinct_vectors() {
        let p = EmbeddingProvider::Contextual(bank_store());
        let (seq, e) = embed_sequence(&doc("s1", &["bank", "by", "the", "bank"]), &p).unwrap();
        assert_eq!(seq.pieces[0], seq.pieces[3]);
        assert_ne!(e.row(0), e.row(3));
    }

    #[test]
    fn contextual_store_missing_doc() {
        let p = EmbeddingProvider::Contextual(bank_store());
        let err = embed_sequence(&doc("nope", &["x"]), &p).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn contextual_store_rejects_bad_records() {
        let mut s = ContextualStore::new(2);
        let bad_len = StoreRecord {
            doc_id: "x".into(),
            pieces: vec!["a".into()],
            word_index: vec![0, 0],
            vectors: vec![vec![0.0, 0.0]],
        };
        assert!(matches!(s.insert(bad_len), Err(Error::Data(_))));
        let bad_dim = StoreRecord {
            doc_id: "x".into(),
            pieces: vec!["a".into()],
            word_index: vec![0],
            vectors: vec![vec![0.0; 3]],
        };
        assert!(matches!(s.insert(bad_dim), Err(Error::Config(_))));
    }

    #[test]
    fn store_round_trip_plain_and_gzip() {
        let s = bank_store();
        let dir = tempfile::tempdir().unwrap();
        for name in ["store.jsonl", "store.jsonl.gz"] {
            let path = dir.path().join(name);
            s.save(&path).unwrap();
            let back = ContextualStore::load(&path).unwrap();
            assert_eq!(back.dim, 2);
            assert_eq!(back.get("s1"), s.get("s1"));
        }
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "uniform:300".parse::<EmbeddingSpec>().unwrap(),
            EmbeddingSpec::Uniform { dim: 300, vocab: None }
        );
        assert_eq!(
            "glove:/x/g.txt".parse::<EmbeddingSpec>().unwrap(),
            EmbeddingSpec::WordVectors("/x/g.txt".into())
        );
        assert!("contextual".parse::<EmbeddingSpec>().is_err());
        assert!("elmo:x".parse::<EmbeddingSpec>().is_err());
        let s: EmbeddingSpec = "uniform:16:v.txt".parse().unwrap();
        assert_eq!(s.to_string().parse::<EmbeddingSpec>().unwrap(), s);
    }
}
