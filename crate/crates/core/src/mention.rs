//! Mention-level typing model: attention over the (left, right, mention)
//! context vectors, a ReLU hidden layer and a sigmoid output per label.

use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::context::ContextTriple;
use crate::error::{Error, Result};
use crate::layers::{self, Mode};
use crate::parallel::Exec;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionKind {
    #[default]
    None,
    /// Three learned logits shared by every mention.
    Scalar,
    /// Logits from an affine map of the mention context vector.
    Dynamic,
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionKind::None),
            "scalar" => Ok(AttentionKind::Scalar),
            "dynamic" => Ok(AttentionKind::Dynamic),
            other => Err(Error::Usage(format!("unknown attention {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionKind::None => "none",
            AttentionKind::Scalar => "scalar",
            AttentionKind::Dynamic => "dynamic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AttentionParams {
    None,
    Scalar(ParamId),
    Dynamic { w: ParamId, b: ParamId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionModel {
    pub dim: usize,
    pub hidden: usize,
    pub labels: usize,
    attention: AttentionParams,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl MentionModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        attention: AttentionKind,
        dim: usize,
        hidden: usize,
        labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || hidden == 0 || labels == 0 {
            return Err(Error::Config(format!(
                "mention model needs positive sizes (d={dim}, H={hidden}, N={labels})"
            )));
        }
        let attention = match attention {
            AttentionKind::None => AttentionParams::None,
            AttentionKind::Scalar => AttentionParams::Scalar(store.insert_zeros("attn.scalar", &[1, 3])?),
            AttentionKind::Dynamic => AttentionParams::Dynamic {
                w: store.insert_glorot("attn.W", dim, 3, rng)?,
                b: store.insert_zeros("attn.b", &[3])?,
            },
        };
        Ok(MentionModel {
            dim,
            hidden,
            labels,
            attention,
            w1: store.insert_glorot("W1", 3 * dim, hidden, rng)?,
            b1: store.insert_zeros("b1", &[hidden])?,
            w2: store.insert_glorot("W2", hidden, labels, rng)?,
            b2: store.insert_zeros("b2", &[labels])?,
        })
    }

    /// Rebinds a model to parameters loaded from a checkpoint.
    pub fn from_store(store: &ParamStore, attention: AttentionKind) -> Result<Self> {
        let w1 = store.id("W1")?;
        let w2 = store.id("W2")?;
        let (d3, hidden) = (store.value(w1).shape()[0], store.value(w1).shape()[1]);
        let attention = match attention {
            AttentionKind::None => AttentionParams::None,
            AttentionKind::Scalar => AttentionParams::Scalar(store.id("attn.scalar")?),
            AttentionKind::Dynamic => AttentionParams::Dynamic {
                w: store.id("attn.W")?,
                b: store.id("attn.b")?,
            },
        };
        Ok(MentionModel {
            dim: d3 / 3,
            hidden,
            labels: store.value(w2).shape()[1],
            attention,
            w1,
            b1: store.id("b1")?,
            w2,
            b2: store.id("b2")?,
        })
    }

    pub fn attention(&self) -> AttentionKind {
        match self.attention {
            AttentionParams::None => AttentionKind::None,
            AttentionParams::Scalar(_) => AttentionKind::Scalar,
            AttentionParams::Dynamic { .. } => AttentionKind::Dynamic,
        }
    }

    /// Attention weights `(a_l, a_r, a_m)`: `1 x 3` for scalar attention,
    /// `B x 3` for dynamic attention (computed from `c_m`).
    pub fn attention_node(&self, g: &mut Graph, store: &ParamStore, c_m: Var) -> Result<Var> {
        match self.attention {
            AttentionParams::None => Err(Error::State(
                "attention weights requested from a model without attention".into(),
            )),
            AttentionParams::Scalar(a) => {
                let a = g.param(store, a)?;
                g.softmax_rows(a)
            }
            AttentionParams::Dynamic { w, b } => {
                let w = g.param(store, w)?;
                let b = g.param(store, b)?;
                let logits = layers::linear(g, c_m, w, b)?;
                g.softmax_rows(logits)
            }
        }
    }

    pub fn attention_weights(&self, store: &ParamStore, triple: &ContextTriple) -> Result<[f64; 3]> {
        let mut g = Graph::new(Exec::Sequential);
        let c_m = g.input(Tensor::new(vec![1, triple.mention.len()], triple.mention.clone())?)?;
        let a = self.attention_node(&mut g, store, c_m)?;
        let r = g.value(a).row(0);
        Ok([r[0], r[1], r[2]])
    }

    /// Sigmoid scores (`B x N`) for a batch of context triples.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&ContextTriple],
        mode: Mode,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let stack = |pick: fn(&ContextTriple) -> &Vec<f64>| -> Result<Tensor> {
            let mut data = Vec::with_capacity(batch.len() * self.dim);
            for t in batch {
                let v = pick(t);
                if v.len() != self.dim {
                    return Err(Error::dim("mention_forward", &[self.dim], &[v.len()]));
                }
                data.extend_from_slice(v);
            }
            Tensor::new(vec![batch.len(), self.dim], data)
        };
        let c_l = g.input(stack(|t| &t.left)?)?;
        let c_r = g.input(stack(|t| &t.right)?)?;
        let c_m = g.input(stack(|t| &t.mention)?)?;
        let combined = if self.attention == AttentionParams::None {
            g.concat_cols(&[c_l, c_r, c_m])?
        } else {
            let a = self.attention_node(g, store, c_m)?;
            let l = g.scale_by_column(c_l, a, 0)?;
            let r = g.scale_by_column(c_r, a, 1)?;
            let m = g.scale_by_column(c_m, a, 2)?;
            g.concat_cols(&[l, r, m])?
        };
        let w1 = g.param(store, self.w1)?;
        let b1 = g.param(store, self.b1)?;
        let w2 = g.param(store, self.w2)?;
        let b2 = g.param(store, self.b2)?;
        let pre = layers::linear(g, combined, w1, b1)?;
        let hidden = g.relu(pre)?;
        let (hidden, _) = layers::dropout(g, hidden, dropout, mode, rng)?;
        let logits = layers::linear(g, hidden, w2, b2)?;
        g.sigmoid(logits)
    }

    /// Eval-mode scores for many triples. Chunks run independently (in
    /// parallel under `Exec::Parallel`); each row's result does not depend
    /// on the chunking.
    pub fn score_all(&self, store: &ParamStore, triples: &[ContextTriple], exec: Exec) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 128;
        let chunks: Vec<&[ContextTriple]> = triples.chunks(CHUNK).collect();
        let parts = exec.map(&chunks, |chunk| -> Result<Vec<Vec<f64>>> {
            let mut g = Graph::new(Exec::Sequential);
            let refs: Vec<&ContextTriple> = chunk.iter().collect();
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let s = self.forward(&mut g, store, &refs, Mode::Eval, 0.0, &mut rng)?;
            Ok(g.value(s).to_rows())
        });
        let mut out = Vec::with_capacity(triples.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Mean BCE over the batch (per-example mean over labels, then batch mean).
pub fn mention_loss(g: &mut Graph, scores: Var, targets: Tensor) -> Result<Var> {
    layers::bce_loss(g, scores, targets, None)
}

/// Labels scoring strictly above 0.5; if none do, the single highest-scoring
/// label (lowest index on ties). Never empty for non-empty input.
pub fn mention_predict(scores: &[f64]) -> Vec<usize> {
    let above: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.5).collect();
    if !above.is_empty() || scores.is_empty() {
        return above;
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    vec![best]
}

#[derive(Debug, Clone, PartialEq)]
pub struct MentionPrediction {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl MentionPrediction {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let labels = mention_predict(&scores);
        MentionPrediction { scores, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple(rng: &mut ChaCha8Rng, d: usize) -> ContextTriple {
        let mut v = || (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        ContextTriple {
            left: v(),
            right: v(),
            mention: v(),
        }
    }

    fn no_rng() -> rand::rngs::mock::StepRng {
        rand::rngs::mock::StepRng::new(0, 0)
    }

    #[test]
    fn predict_examples() {
        assert_eq!(mention_predict(&[0.7, 0.2, 0.6]), vec![0, 2]);
        assert_eq!(mention_predict(&[0.4, 0.3, 0.2]), vec![0]);
        assert_eq!(mention_predict(&[0.4, 0.4, 0.1]), vec![0]);
        assert_eq!(mention_predict(&[0.5, 0.5]), vec![0]);
    }

    proptest! {
        #[test]
        fn predict_never_empty(scores in prop::collection::vec(0.0f64..1.0, 1..12)) {
            let p = mention_predict(&scores);
            prop_assert!(!p.is_empty());
            let above = scores.iter().filter(|&&s| s > 0.5).count();
            prop_assert_eq!(p.len(), above.max(1));
        }
    }

    #[test]
    fn scalar_attention_uniform_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = MentionModel::new(&mut store, AttentionKind::Scalar, 4, 3, 2, &mut rng).unwrap();
        let a = m.attention_weights(&store, &triple(&mut rng, 4)).unwrap();
        for w in a {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dynamic_attention_softmax_of_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = MentionModel::new(&mut store, AttentionKind::Dynamic, 4, 3, 2, &mut rng).unwrap();
        store.value_mut(store.id("attn.W").unwrap()).fill(0.0);
        let b = store.id("attn.b").unwrap();
        *store.value_mut(b) = Tensor::vector(vec![2f64.ln(), 0.0, 0.0]);
        let a = m.attention_weights(&store, &triple(&mut rng, 4)).unwrap();
        for (x, y) in a.iter().zip([0.5, 0.25, 0.25]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn dynamic_attention_depends_only_on_mention_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let m = MentionModel::new(&mut store, AttentionKind::Dynamic, 3, 3, 2, &mut rng).unwrap();
        let t1 = ContextTriple {
            left: vec![1.0, 0.0, 0.0],
            right: vec![0.0, 1.0, 0.0],
            mention: vec![1.0, -1.0, 0.5],
        };
        let mut t2 = t1.clone();
        t2.left = vec![-5.0, 2.0, 1.0];
        t2.right = vec![0.3, 0.3, 0.3];
        let mut t3 = t1.clone();
        t3.mention = vec![-1.0, 1.0, 0.0];
        let a1 = m.attention_weights(&store, &t1).unwrap();
        assert_eq!(a1, m.attention_weights(&store, &t2).unwrap());
        assert_ne!(a1, m.attention_weights(&store, &t3).unwrap());
        assert!((a1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_on_model_without_attention_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = MentionModel::new(&mut store, AttentionKind::None, 2, 2, 2, &mut rng).unwrap();
        assert!(m.attention_weights(&store, &triple(&mut rng, 2)).is_err());
    }

    #[test]
    fn zero_params_score_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let m = MentionModel::new(&mut store, AttentionKind::Dynamic, 4, 5, 3, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let t = triple(&mut rng, 4);
        let scores = m.score_all(&store, &[t], Exec::Sequential).unwrap();
        assert_eq!(scores[0], vec![0.5; 3]);
    }

    #[test]
    fn no_attention_equals_equal_weights_with_tripled_w1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut plain = ParamStore::new();
        let m0 = MentionModel::new(&mut plain, AttentionKind::None, 3, 4, 2, &mut rng).unwrap();
        let mut scaled = ParamStore::new();
        let m1 = MentionModel::new(&mut scaled, AttentionKind::Scalar, 3, 4, 2, &mut rng).unwrap();
        for name in ["W1", "b1", "W2", "b2"] {
            let v = plain.value(plain.id(name).unwrap()).clone();
            *scaled.value_mut(scaled.id(name).unwrap()) = v;
        }
        let t = [triple(&mut rng, 3), triple(&mut rng, 3)];
        let s0 = m0.score_all(&plain, &t, Exec::Sequential).unwrap();
        let s1 = m1.score_all(&scaled, &t, Exec::Sequential).unwrap();
        assert_ne!(s0, s1);
        let w1 = scaled.id("W1").unwrap();
        let tripled = scaled.value(w1).map(|x| 3.0 * x);
        *scaled.value_mut(w1) = tripled;
        let s1 = m1.score_all(&scaled, &t, Exec::Sequential).unwrap();
        for (a, b) in s0.iter().flatten().zip(s1.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_triples_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let m = MentionModel::new(&mut store, AttentionKind::Scalar, 4, 6, 3, &mut rng).unwrap();
        let t = triple(&mut rng, 4);
        let s = m.score_all(&store, &[t.clone(), t], Exec::Sequential).unwrap();
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new(Exec::Sequential);
        let s = g.input(Tensor::filled(&[2, 3], 0.5)).unwrap();
        let t = Tensor::from_rows(&[vec![1., 0., 1.], vec![0., 0., 0.]]).unwrap();
        let l = mention_loss(&mut g, s, t).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);

        let rows = [vec![0.9, 0.2, 0.6], vec![0.3, 0.7, 0.1]];
        let targets = [vec![1., 0., 1.], vec![0., 1., 1.]];
        let single = |i: usize| {
            let mut g = Graph::new(Exec::Sequential);
            let s = g.input(Tensor::from_rows(&[rows[i].clone()]).unwrap()).unwrap();
            let l = mention_loss(&mut g, s, Tensor::from_rows(&[targets[i].clone()]).unwrap()).unwrap();
            g.value(l).data()[0]
        };
        let mut g = Graph::new(Exec::Sequential);
        let s = g.input(Tensor::from_rows(&rows).unwrap()).unwrap();
        let l = mention_loss(&mut g, s, Tensor::from_rows(&targets).unwrap()).unwrap();
        assert!((g.value(l).data()[0] - (single(0) + single(1)) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn label_permutation_permutes_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let m = MentionModel::new(&mut store, AttentionKind::Dynamic, 3, 4, 3, &mut rng).unwrap();
        let t = [triple(&mut rng, 3)];
        let base = m.score_all(&store, &t, Exec::Sequential).unwrap();
        let perm = [2, 0, 1];
        let (w2, b2) = (store.id("W2").unwrap(), store.id("b2").unwrap());
        let w = store.value(w2).clone();
        let b = store.value(b2).clone();
        let mut pw = w.clone();
        for i in 0..w.rows() {
            for (j, &p) in perm.iter().enumerate() {
                pw.row_mut(i)[j] = w.at(i, p);
            }
        }
        let pb = Tensor::vector(perm.iter().map(|&p| b.data()[p]).collect());
        *store.value_mut(w2) = pw;
        *store.value_mut(b2) = pb;
        let out = m.score_all(&store, &t, Exec::Sequential).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            assert_eq!(out[0][j], base[0][p]);
        }
    }

    #[test]
    fn full_model_gradients() {
        for attention in [AttentionKind::None, AttentionKind::Scalar, AttentionKind::Dynamic] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            let m = MentionModel::new(&mut store, attention, 4, 6, 5, &mut rng).unwrap();
            if attention == AttentionKind::Scalar {
                let a = store.id("attn.scalar").unwrap();
                *store.value_mut(a) = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.5]).unwrap();
            }
            let batch = [triple(&mut rng, 4), triple(&mut rng, 4)];
            let targets = Tensor::from_rows(&[vec![1., 0., 0., 1., 0.], vec![0., 1., 0., 0., 0.]]).unwrap();
            let f = |s: &ParamStore| {
                let mut g = Graph::new(Exec::Sequential);
                let refs: Vec<&ContextTriple> = batch.iter().collect();
                let scores = m.forward(&mut g, s, &refs, Mode::Eval, 0.0, &mut no_rng())?;
                let l = mention_loss(&mut g, scores, targets.clone())?;
                Ok((g, l))
            };
            let report = grad_check(f, &store, 1e-4).unwrap();
            assert!(report.passed(), "{attention}: {report}");
        }
    }
}
