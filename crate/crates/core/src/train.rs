//! Training loops with early stopping, checkpoint-backed models, and
//! prediction files.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, DType};
use crate::config::{parse_pairs, ModelKind, TrainConfig};
use crate::context::{build_context_triple, ContextTriple};
use crate::dataset::{Document, LabelVocab, OovLabels};
use crate::e2e::{concat_layer, e2e_loss, e2e_predict, piece_targets, E2eModel, SeqInput};
use crate::embed::{embed_sequence, EmbeddingProvider, EmbeddingSpec};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::mention::{mention_loss, mention_predict, MentionModel};
use crate::metrics::{self, EvalUnit, MetricReport};
use crate::parallel::Exec;
use crate::params::{Adam, ParamStore};
use crate::tensor::Tensor;
use crate::wordpiece::WordpieceSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    EntityLevel,
    AllToken,
    E2eAsMention,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity_level" | "entity" => Ok(EvalMode::EntityLevel),
            "all_token" | "token" => Ok(EvalMode::AllToken),
            "e2e_as_mention" => Ok(EvalMode::E2eAsMention),
            other => Err(Error::Usage(format!(
                "unknown evaluation mode {other:?} (expected entity_level, all_token or e2e_as_mention)"
            ))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::EntityLevel => "entity_level",
            EvalMode::AllToken => "all_token",
            EvalMode::E2eAsMention => "e2e_as_mention",
        })
    }
}

impl EvalMode {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Mention => EvalMode::EntityLevel,
            ModelKind::E2e => EvalMode::AllToken,
        }
    }

    fn model_kind(self) -> ModelKind {
        match self {
            EvalMode::EntityLevel => ModelKind::Mention,
            EvalMode::AllToken | EvalMode::E2eAsMention => ModelKind::E2e,
        }
    }
}

/// Context triples and label rows for every gold mention, in document
/// then mention order.
#[derive(Debug, Clone, Default)]
pub struct MentionData {
    pub triples: Vec<ContextTriple>,
    pub targets: Vec<Vec<f64>>,
}

pub fn prepare_mentions(
    docs: &[Document],
    provider: &EmbeddingProvider,
    vocab: &LabelVocab,
    window: usize,
    exec: Exec,
) -> Result<MentionData> {
    let per_doc = exec.map(docs, |doc| -> Result<Vec<(ContextTriple, Vec<f64>)>> {
        let (seq, emb) = embed_sequence(doc, provider)?;
        doc.mentions
            .iter()
            .map(|m| {
                let triple = build_context_triple(&seq, &emb, m.start, m.end, window)?;
                let (row, _) = vocab.binarize(m.labels.iter().map(String::as_str));
                Ok((triple, row))
            })
            .collect()
    });
    let mut data = MentionData::default();
    for part in per_doc {
        for (t, r) in part? {
            data.triples.push(t);
            data.targets.push(r);
        }
    }
    Ok(data)
}

/// One sentence ready for the end-to-end model, truncated to at most
/// `max_seq_len` wordpieces.
#[derive(Debug, Clone)]
pub struct SeqData {
    pub seq: WordpieceSeq,
    pub emb: Tensor,
    pub targets: Tensor,
    /// Words that kept at least one wordpiece after truncation.
    pub num_words: usize,
    /// Mentions lying wholly past the cut.
    pub dropped_mentions: usize,
}

impl SeqData {
    pub fn input(&self) -> SeqInput<'_> {
        SeqInput {
            emb: &self.emb,
            is_pad: &self.seq.is_pad,
        }
    }

    fn active(&self) -> Vec<bool> {
        self.seq.is_pad.iter().map(|p| !p).collect()
    }
}

pub fn prepare_sequence(
    doc: &Document,
    provider: &EmbeddingProvider,
    vocab: &LabelVocab,
    max_seq_len: usize,
) -> Result<SeqData> {
    let (mut seq, mut emb) = embed_sequence(doc, provider)?;
    if seq.len() > max_seq_len {
        seq.truncate(max_seq_len);
        let d = emb.cols();
        emb = Tensor::new(vec![max_seq_len, d], emb.data()[..max_seq_len * d].to_vec())?;
    }
    let num_words = seq.word_index.iter().max().map_or(0, |w| w + 1);
    let dropped_mentions = doc.mentions.iter().filter(|m| m.start >= num_words).count();
    let (word_targets, _) = crate::dataset::token_label_matrix(doc, vocab)?;
    let targets = piece_targets(&word_targets, &seq)?;
    Ok(SeqData {
        seq,
        emb,
        targets,
        num_words,
        dropped_mentions,
    })
}

pub fn prepare_sequences(
    docs: &[Document],
    provider: &EmbeddingProvider,
    vocab: &LabelVocab,
    max_seq_len: usize,
    exec: Exec,
) -> Result<Vec<SeqData>> {
    exec.map(docs, |d| prepare_sequence(d, provider, vocab, max_seq_len))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Model {
    Mention(MentionModel),
    E2e(E2eModel),
}

/// A model with its parameters, label vocabulary and the config it was
/// trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub config: TrainConfig,
    pub labels: LabelVocab,
    pub store: ParamStore,
    pub model: Model,
}

impl Trained {
    pub fn init<R: rand::Rng>(config: &TrainConfig, labels: LabelVocab, dim: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = match config.model {
            ModelKind::Mention => Model::Mention(MentionModel::new(
                &mut store,
                config.attention,
                dim,
                config.hidden,
                labels.len(),
                rng,
            )?),
            ModelKind::E2e => Model::E2e(E2eModel::new(&mut store, dim, config.hidden, labels.len(), rng)?),
        };
        Ok(Trained {
            config: config.clone(),
            labels,
            store,
            model,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.model {
            Model::Mention(_) => ModelKind::Mention,
            Model::E2e(_) => ModelKind::E2e,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            Model::Mention(m) => m.dim,
            Model::E2e(m) => m.dim,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.store.clone())
            .with_meta("model", json!(self.kind().to_string()))
            .with_meta("attention", json!(self.config.attention.to_string()))
            .with_meta("labels", json!(self.labels.labels()))
            .with_meta("config", json!(self.config.to_string()))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_pairs(&parse_pairs(ckpt.meta_str("config")?, "checkpoint config")?)?;
        let kind: ModelKind = ckpt.meta_str("model")?.parse()?;
        let labels = ckpt
            .meta
            .get("labels")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(|v| v.as_str().map(String::from)).collect::<Option<Vec<_>>>())
            .ok_or_else(|| Error::Data("checkpoint has no label list".into()))?;
        let store = ckpt.params.clone();
        let model = match kind {
            ModelKind::Mention => Model::Mention(MentionModel::from_store(&store, ckpt.meta_str("attention")?.parse()?)?),
            ModelKind::E2e => Model::E2e(E2eModel::from_store(&store)?),
        };
        Ok(Trained {
            config,
            labels: LabelVocab::from_labels(labels),
            store,
            model,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trained::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Predictions for every gold mention (mention model) or every token
    /// (end-to-end model) of `docs`.
    pub fn predict(&self, docs: &[Document], provider: &EmbeddingProvider, exec: Exec) -> Result<PredictionSet> {
        if provider.dim() != self.dim() {
            return Err(Error::Config(format!(
                "embedding dimension {} does not match the model's {}",
                provider.dim(),
                self.dim()
            )));
        }
        match &self.model {
            Model::Mention(m) => {
                let data = prepare_mentions(docs, provider, &self.labels, self.config.window, exec)?;
                let scores = m.score_all(&self.store, &data.triples, exec)?;
                let mut it = scores.into_iter();
                let mut set = PredictionSet::new(ModelKind::Mention);
                for doc in docs {
                    let (mut labels, mut rows) = (Vec::new(), Vec::new());
                    for _ in &doc.mentions {
                        let s = it.next().ok_or_else(|| Error::State("score count mismatch".into()))?;
                        labels.push(mention_predict(&s));
                        rows.push(s);
                    }
                    set.labels.push(labels);
                    set.scores.push(rows);
                }
                Ok(set)
            }
            Model::E2e(m) => {
                let seqs = prepare_sequences(docs, provider, &self.labels, self.config.max_seq_len, exec)?;
                let inputs: Vec<SeqInput> = seqs.iter().map(SeqData::input).collect();
                let piece_scores = m.score_all(&self.store, &inputs, exec)?;
                let mut set = PredictionSet::new(ModelKind::E2e);
                for ((doc, s), ps) in docs.iter().zip(&seqs).zip(&piece_scores) {
                    let word = e2e_predict(concat_layer(ps, &s.seq, s.num_words)?);
                    let mut labels = word.word_labels;
                    let mut rows = word.word_scores.to_rows();
                    // Tokens cut off by max_seq_len are never scored.
                    labels.resize(doc.tokens.len(), Vec::new());
                    rows.resize(doc.tokens.len(), Vec::new());
                    set.labels.push(labels);
                    set.scores.push(rows);
                }
                Ok(set)
            }
        }
    }

    pub fn evaluate(
        &self,
        docs: &[Document],
        provider: &EmbeddingProvider,
        mode: EvalMode,
        exec: Exec,
    ) -> Result<MetricReport> {
        check_mode(self.kind(), mode)?;
        evaluate_predictions(&self.predict(docs, provider, exec)?, docs, &self.labels, mode)
    }
}

fn check_mode(kind: ModelKind, mode: EvalMode) -> Result<()> {
    if mode.model_kind() != kind {
        return Err(Error::Usage(format!("evaluation mode {mode} does not apply to a {kind} model")));
    }
    Ok(())
}

/// Label ids and scores per document, per unit: mentions for the mention
/// model, tokens for the end-to-end model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub kind: ModelKind,
    pub labels: Vec<Vec<Vec<usize>>>,
    pub scores: Vec<Vec<Vec<f64>>>,
}

/// One line of a mention-model prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub doc_id: String,
    pub mention_index: usize,
    pub predicted_labels: Vec<String>,
    pub scores: Vec<f64>,
}

/// One line of an end-to-end prediction file. `scores` is empty for
/// tokens past the sequence-length cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub doc_id: String,
    pub token_index: usize,
    pub predicted_labels: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyRecord {
    Mention(MentionRecord),
    Token(TokenRecord),
}

impl PredictionSet {
    pub fn new(kind: ModelKind) -> Self {
        PredictionSet {
            kind,
            labels: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn write_jsonl(&self, path: &Path, docs: &[Document], vocab: &LabelVocab) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (d, doc) in docs.iter().enumerate() {
            for (i, (labels, scores)) in self.labels[d].iter().zip(&self.scores[d]).enumerate() {
                let predicted_labels = labels.iter().map(|&l| vocab.label(l).to_string()).collect();
                let line = match self.kind {
                    ModelKind::Mention => serde_json::to_string(&MentionRecord {
                        doc_id: doc.doc_id.clone(),
                        mention_index: i,
                        predicted_labels,
                        scores: scores.clone(),
                    }),
                    ModelKind::E2e => serde_json::to_string(&TokenRecord {
                        doc_id: doc.doc_id.clone(),
                        token_index: i,
                        predicted_labels,
                        scores: scores.clone(),
                    }),
                }
                .map_err(|e| Error::State(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a prediction file back against the corpus it was made for.
    /// Units without a line predict the empty set.
    pub fn read_jsonl(path: &Path, docs: &[Document], vocab: &LabelVocab) -> Result<Self> {
        let mut by_id = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.doc_id.as_str(), i).is_some() {
                return Err(Error::Data(format!("duplicate doc_id {} in corpus", d.doc_id)));
            }
        }
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut kind = None;
        let mut labels: Vec<Vec<Vec<usize>>> = Vec::new();
        let mut scores: Vec<Vec<Vec<f64>>> = Vec::new();
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnyRecord = serde_json::from_str(&line).map_err(|e| parse_err(n + 1, e.to_string()))?;
            let (k, doc_id, idx, names, sc) = match rec {
                AnyRecord::Mention(r) => (ModelKind::Mention, r.doc_id, r.mention_index, r.predicted_labels, r.scores),
                AnyRecord::Token(r) => (ModelKind::E2e, r.doc_id, r.token_index, r.predicted_labels, r.scores),
            };
            if *kind.get_or_insert(k) != k {
                return Err(parse_err(n + 1, "mixed mention and token records".into()));
            }
            if labels.is_empty() {
                let units = |d: &Document| match k {
                    ModelKind::Mention => d.mentions.len(),
                    ModelKind::E2e => d.tokens.len(),
                };
                labels = docs.iter().map(|d| vec![Vec::new(); units(d)]).collect();
                scores = docs.iter().map(|d| vec![Vec::new(); units(d)]).collect();
            }
            let d = *by_id
                .get(doc_id.as_str())
                .ok_or_else(|| parse_err(n + 1, format!("unknown doc_id {doc_id}")))?;
            if idx >= labels[d].len() {
                return Err(parse_err(n + 1, format!("index {idx} out of range for {doc_id}")));
            }
            labels[d][idx] = names
                .iter()
                .map(|l| {
                    vocab
                        .index(l)
                        .ok_or_else(|| parse_err(n + 1, format!("label {l} is not in the model vocabulary")))
                })
                .collect::<Result<_>>()?;
            scores[d][idx] = sc;
        }
        let kind = kind.ok_or_else(|| Error::Data(format!("{} holds no predictions", path.display())))?;
        Ok(PredictionSet { kind, labels, scores })
    }
}

/// Metric report for a prediction set; the same path serves live models
/// and prediction files.
pub fn evaluate_predictions(
    preds: &PredictionSet,
    docs: &[Document],
    vocab: &LabelVocab,
    mode: EvalMode,
) -> Result<MetricReport> {
    check_mode(preds.kind, mode)?;
    if preds.labels.len() != docs.len() {
        return Err(Error::Data(format!(
            "{} documents of predictions for a corpus of {}",
            preds.labels.len(),
            docs.len()
        )));
    }
    let mut oov = OovLabels::default();
    let units: Vec<EvalUnit> = match mode {
        EvalMode::EntityLevel => metrics::entity_level_units(docs, vocab, &preds.labels, &mut oov),
        EvalMode::AllToken => metrics::all_token_units(docs, vocab, &preds.labels, &mut oov),
        EvalMode::E2eAsMention => metrics::e2e_mention_units(docs, vocab, &preds.labels, &mut oov),
    };
    if oov.occurrences > 0 {
        log::info!("{} gold label occurrences outside the model vocabulary", oov.occurrences);
    }
    metrics::evaluate_units(&units)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub steps: u64,
    pub dev: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainRunRecord {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest dev micro-F1 (earliest on ties).
    pub best_epoch: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub best: Trained,
    pub config: TrainConfig,
    pub seed: u64,
    pub dropped_mentions: usize,
}

enum Prepared {
    Mention(MentionData),
    E2e(Vec<SeqData>),
}

impl Prepared {
    fn len(&self) -> usize {
        match self {
            Prepared::Mention(d) => d.triples.len(),
            Prepared::E2e(s) => s.len(),
        }
    }
}

/// Label vocabulary over the training and dev corpora.
pub fn label_vocab(train: &[Document], dev: &[Document]) -> LabelVocab {
    let all: Vec<Document> = train.iter().chain(dev).cloned().collect();
    LabelVocab::from_documents(&all)
}

/// Trains under `config`, evaluating on `dev` after every epoch and keeping
/// the parameters with the best dev micro-F1. When `out` is given, the best
/// checkpoint is rewritten there each time it improves, so a run that later
/// diverges still leaves its last good checkpoint behind.
pub fn train(
    config: &TrainConfig,
    train: &[Document],
    dev: &[Document],
    provider: &EmbeddingProvider,
    out: Option<&Path>,
) -> Result<TrainRunRecord> {
    config.validate()?;
    if let EmbeddingSpec::Uniform { dim, .. } = config.embedding {
        if matches!(provider, EmbeddingProvider::Uniform(_)) && dim != provider.dim() {
            return Err(Error::Config(format!(
                "config embedding dim {dim} but provider has {}",
                provider.dim()
            )));
        }
    }
    if dev.is_empty() {
        return Err(Error::Data("the dev split is empty".into()));
    }
    let exec = config.exec;
    let vocab = label_vocab(train, dev);
    if vocab.is_empty() {
        return Err(Error::Data("no labels in the training corpus".into()));
    }
    let (data, dropped_mentions) = match config.model {
        ModelKind::Mention => (
            Prepared::Mention(prepare_mentions(train, provider, &vocab, config.window, exec)?),
            0,
        ),
        ModelKind::E2e => {
            let seqs = prepare_sequences(train, provider, &vocab, config.max_seq_len, exec)?;
            let dropped = seqs.iter().map(|s| s.dropped_mentions).sum();
            if dropped > 0 {
                log::warn!("{dropped} training mentions lie past max_seq_len and were dropped");
            }
            (Prepared::E2e(seqs), dropped)
        }
    };
    if data.len() == 0 {
        return Err(Error::Data("no training examples".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = Trained::init(config, vocab, provider.dim(), &mut rng)?;
    let adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Trained)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            let mut g = Graph::new(exec);
            let loss = match (&current.model, &data) {
                (Model::Mention(m), Prepared::Mention(d)) => {
                    let batch: Vec<&ContextTriple> = idx.iter().map(|&i| &d.triples[i]).collect();
                    let rows: Vec<f64> = idx.iter().flat_map(|&i| d.targets[i].iter().copied()).collect();
                    let targets = Tensor::new(vec![idx.len(), current.labels.len()], rows)?;
                    let s = m.forward(&mut g, &current.store, &batch, Mode::Train, config.dropout, &mut rng)?;
                    mention_loss(&mut g, s, targets)?
                }
                (Model::E2e(m), Prepared::E2e(seqs)) => {
                    let batch: Vec<SeqInput> = idx.iter().map(|&i| seqs[i].input()).collect();
                    let out = m.forward_batch(&mut g, &current.store, &batch, Mode::Train, config.dropout, &mut rng)?;
                    let targets: Vec<&Tensor> = idx.iter().map(|&i| &seqs[i].targets).collect();
                    let active: Vec<Vec<bool>> = idx.iter().map(|&i| seqs[i].active()).collect();
                    let active: Vec<&[bool]> = active.iter().map(Vec::as_slice).collect();
                    e2e_loss(&mut g, &out, &targets, &active)?
                }
                _ => unreachable!("model and data kinds are built together"),
            };
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} in epoch {epoch}")));
            }
            loss_sum += value;
            batches += 1;
            g.backward(loss, &mut current.store)?;
            adam.step(&mut current.store)?;
        }

        let mode = EvalMode::default_for(config.model);
        let report = current.evaluate(dev, provider, mode, exec)?;
        log::info!(
            "epoch {epoch}: train loss {:.5}, dev micro-F1 {:.4}",
            loss_sum / batches as f64,
            report.micro_f1
        );
        epochs.push(EpochRecord {
            epoch,
            mean_train_loss: loss_sum / batches as f64,
            steps: current.store.step_count(),
            dev: report,
        });
        let improved = best.as_ref().is_none_or(|(_, f, _)| report.micro_f1 > *f);
        if improved {
            if let Some(path) = out {
                current.to_checkpoint().save(path, DType::F64)?;
            }
            best = Some((epoch, report.micro_f1, current.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_epoch, _, best) = best.expect("max_epochs >= 1");
    Ok(TrainRunRecord {
        epochs,
        best_epoch,
        checkpoint_path: out.map(Path::to_path_buf),
        best,
        config: config.clone(),
        seed: config.seed,
        dropped_mentions,
    })
}
