//! End-to-end typing model: a single-layer Bi-GRU over the whole wordpiece
//! sequence, a sigmoid head per wordpiece, and the word-level averaging
//! ("concatenation") layer.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{self, GruCellParams, Mode};
use crate::parallel::Exec;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::wordpiece::WordpieceSeq;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct E2eModel {
    pub dim: usize,
    pub hidden: usize,
    pub labels: usize,
    pub fwd: GruCellParams,
    pub bwd: GruCellParams,
    w_out: ParamId,
    b_out: ParamId,
}

/// One sentence's frozen wordpiece embeddings (`T x d`) and pad flags.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub emb: &'a Tensor,
    pub is_pad: &'a [bool],
}

/// Scores for a padded batch, stacked time-major: row `t * B + b`.
#[derive(Debug, Clone, Copy)]
pub struct BatchScores {
    pub scores: Var,
    pub steps: usize,
    pub batch: usize,
}

impl BatchScores {
    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.batch + b
    }
}

impl E2eModel {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, hidden: usize, labels: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || hidden == 0 || labels == 0 {
            return Err(Error::Config(format!(
                "e2e model needs positive sizes (d={dim}, H={hidden}, N={labels})"
            )));
        }
        let fwd = GruCellParams::register(store, "gru_fwd", dim, hidden, rng)?;
        let bwd = GruCellParams::register(store, "gru_bwd", dim, hidden, rng)?;
        Ok(E2eModel {
            dim,
            hidden,
            labels,
            fwd,
            bwd,
            w_out: store.insert_glorot("W_out", 2 * hidden, labels, rng)?,
            b_out: store.insert_zeros("b_out", &[labels])?,
        })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let fwd = GruCellParams::lookup(store, "gru_fwd")?;
        let bwd = GruCellParams::lookup(store, "gru_bwd")?;
        let w_out = store.id("W_out")?;
        Ok(E2eModel {
            dim: fwd.input_dim,
            hidden: fwd.hidden,
            labels: store.value(w_out).shape()[1],
            fwd,
            bwd,
            w_out,
            b_out: store.id("b_out")?,
        })
    }

    /// Forward pass over a batch padded to its longest sentence. Padded
    /// steps embed as zeros and carry the GRU state through unchanged, so
    /// each sentence's scores are independent of the padding.
    pub fn forward_batch<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[SeqInput<'_>],
        mode: Mode,
        dropout: f64,
        rng: &mut R,
    ) -> Result<BatchScores> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        for s in batch {
            if s.emb.cols() != self.dim {
                return Err(Error::dim("e2e_forward", &[self.dim], s.emb.shape()));
            }
            if s.is_pad.len() != s.emb.rows() {
                return Err(Error::dim("e2e_forward pad flags", s.emb.shape(), &[s.is_pad.len()]));
            }
        }
        let steps = batch.iter().map(|s| s.emb.rows()).max().unwrap_or(0);
        let b = batch.len();
        let mut xs = Vec::with_capacity(steps);
        let mut active = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x = vec![0.0; b * self.dim];
            let mut on = vec![false; b];
            for (i, s) in batch.iter().enumerate() {
                if t < s.emb.rows() && !s.is_pad[t] {
                    x[i * self.dim..(i + 1) * self.dim].copy_from_slice(s.emb.row(t));
                    on[i] = true;
                }
            }
            xs.push(g.input(Tensor::new(vec![b, self.dim], x)?)?);
            active.push(on);
        }
        let all_active = active.iter().all(|r| r.iter().all(|&a| a));
        let mask = (!all_active).then_some(active.as_slice());
        let h = layers::bigru(g, store, &xs, &self.fwd, &self.bwd, mask)?;
        let stacked = g.stack_rows(&h)?;
        let (dropped, _) = layers::dropout(g, stacked, dropout, mode, rng)?;
        let w = g.param(store, self.w_out)?;
        let bias = g.param(store, self.b_out)?;
        let logits = layers::linear(g, dropped, w, bias)?;
        let scores = g.sigmoid(logits)?;
        Ok(BatchScores {
            scores,
            steps,
            batch: b,
        })
    }

    /// Eval-mode wordpiece scores (`T x N`) for one sentence.
    pub fn forward(&self, store: &ParamStore, emb: &Tensor, is_pad: &[bool]) -> Result<Tensor> {
        let mut g = Graph::new(Exec::Sequential);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward_batch(&mut g, store, &[SeqInput { emb, is_pad }], Mode::Eval, 0.0, &mut rng)?;
        Ok(g.value(out.scores).clone())
    }

    /// Eval-mode scores for many sentences, one graph per sentence.
    pub fn score_all(&self, store: &ParamStore, inputs: &[SeqInput<'_>], exec: Exec) -> Result<Vec<Tensor>> {
        exec.map(inputs, |s| self.forward(store, s.emb, s.is_pad))
            .into_iter()
            .collect()
    }
}

/// BCE averaged over every non-pad wordpiece x label cell of the batch.
/// `targets[b]` holds sentence `b`'s wordpiece label rows.
pub fn e2e_loss(g: &mut Graph, out: &BatchScores, targets: &[&Tensor], active: &[&[bool]]) -> Result<Var> {
    let n = g.value(out.scores).cols();
    let mut t = vec![0.0; out.steps * out.batch * n];
    let mut mask = vec![false; out.steps * out.batch];
    for (b, (tg, on)) in targets.iter().zip(active).enumerate() {
        if tg.cols() != n {
            return Err(Error::dim("e2e_loss", &[n], tg.shape()));
        }
        for step in 0..tg.rows().min(out.steps) {
            let r = out.row(step, b);
            if on[step] {
                mask[r] = true;
                t[r * n..(r + 1) * n].copy_from_slice(tg.row(step));
            }
        }
    }
    layers::bce_loss(g, out.scores, Tensor::new(vec![out.steps * out.batch, n], t)?, Some(mask))
}

/// Averages wordpiece scores into word scores (`num_words x N`). Pad
/// pieces are skipped; every word must own at least one piece.
pub fn concat_layer(piece_scores: &Tensor, seq: &WordpieceSeq, num_words: usize) -> Result<Tensor> {
    let n = piece_scores.cols();
    if piece_scores.rows() != seq.len() {
        return Err(Error::dim("concat_layer", piece_scores.shape(), &[seq.len()]));
    }
    let mut sums = vec![0.0; num_words * n];
    let mut counts = vec![0usize; num_words];
    for (i, (&w, &pad)) in seq.word_index.iter().zip(&seq.is_pad).enumerate() {
        if pad || w >= num_words {
            continue;
        }
        counts[w] += 1;
        for (s, v) in sums[w * n..(w + 1) * n].iter_mut().zip(piece_scores.row(i)) {
            *s += v;
        }
    }
    if let Some(w) = counts.iter().position(|&c| c == 0) {
        return Err(Error::State(format!("word {w} has no wordpieces")));
    }
    for (w, &c) in counts.iter().enumerate() {
        if c > 1 {
            sums[w * n..(w + 1) * n].iter_mut().for_each(|s| *s /= c as f64);
        }
    }
    Tensor::new(vec![num_words, n], sums)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenPredictions {
    pub word_scores: Tensor,
    pub word_labels: Vec<Vec<usize>>,
}

/// Per-token labels scoring strictly above 0.5; empty sets allowed.
pub fn e2e_predict(word_scores: Tensor) -> TokenPredictions {
    let word_labels = (0..word_scores.rows())
        .map(|t| {
            word_scores
                .row(t)
                .iter()
                .enumerate()
                .filter(|(_, &s)| s > 0.5)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    TokenPredictions {
        word_scores,
        word_labels,
    }
}

/// Expands word-level label rows to wordpiece rows (each piece inherits
/// its word's row; pad pieces get zeros).
pub fn piece_targets(word_targets: &Tensor, seq: &WordpieceSeq) -> Result<Tensor> {
    let n = word_targets.cols();
    let mut data = vec![0.0; seq.len() * n];
    for (i, (&w, &pad)) in seq.word_index.iter().zip(&seq.is_pad).enumerate() {
        if pad {
            continue;
        }
        if w >= word_targets.rows() {
            return Err(Error::dim("piece_targets", word_targets.shape(), &[w]));
        }
        data[i * n..(i + 1) * n].copy_from_slice(word_targets.row(w));
    }
    Tensor::new(vec![seq.len(), n], data)
}
