//! Seeded random gradient-check instances for every layer and both models.
//! Used by the `gradcheck` command and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::context::ContextTriple;
use crate::e2e::{e2e_loss, E2eModel, SeqInput};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::layers::{self, Activation, GruCellParams, Mode};
use crate::mention::{mention_loss, AttentionKind, MentionModel};
use crate::parallel::Exec;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative-error tolerance used by the suite.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Linear,
    Activation(Activation),
    Dropout,
    Bce,
    GruCell,
    BiGru,
    Mention(AttentionKind),
    E2e,
}

impl CheckTarget {
    pub fn all() -> Vec<CheckTarget> {
        vec![
            CheckTarget::Linear,
            CheckTarget::Activation(Activation::Relu),
            CheckTarget::Activation(Activation::Sigmoid),
            CheckTarget::Activation(Activation::Tanh),
            CheckTarget::Activation(Activation::SoftmaxLastDim),
            CheckTarget::Dropout,
            CheckTarget::Bce,
            CheckTarget::GruCell,
            CheckTarget::BiGru,
            CheckTarget::Mention(AttentionKind::None),
            CheckTarget::Mention(AttentionKind::Scalar),
            CheckTarget::Mention(AttentionKind::Dynamic),
            CheckTarget::E2e,
        ]
    }

    pub fn name(&self) -> String {
        match self {
            CheckTarget::Linear => "linear".into(),
            CheckTarget::Activation(a) => format!("activation:{a:?}").to_lowercase(),
            CheckTarget::Dropout => "dropout".into(),
            CheckTarget::Bce => "bce_loss".into(),
            CheckTarget::GruCell => "gru_cell".into(),
            CheckTarget::BiGru => "bigru".into(),
            CheckTarget::Mention(a) => format!("mention:{a}"),
            CheckTarget::E2e => "e2e".into(),
        }
    }

    /// Runs one random instance drawn from `seed`.
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *self {
            CheckTarget::Linear => check_linear(&mut rng),
            CheckTarget::Activation(a) => check_activation(&mut rng, a),
            CheckTarget::Dropout => check_dropout(&mut rng, seed),
            CheckTarget::Bce => check_bce(&mut rng),
            CheckTarget::GruCell => check_gru_cell(&mut rng),
            CheckTarget::BiGru => check_bigru(&mut rng),
            CheckTarget::Mention(a) => check_mention(&mut rng, a),
            CheckTarget::E2e => check_e2e(&mut rng),
        }
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive shape")
}

fn binary(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive shape")
}

/// Replaces every parameter (biases and zero-initialised weights included)
/// with random values so no gradient is trivially zero.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = scale * rng.gen_range(-1.0..1.0);
        }
    }
}

fn small_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=4))
}

fn check_linear(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (b, d, n) = small_dims(rng);
    let mut store = ParamStore::new();
    let w = store.insert_glorot("W", d, n, rng)?;
    let bias = store.insert_zeros("b", &[n])?;
    randomize(&mut store, rng, 1.0);
    let x = random(rng, b, d);
    let c = random(rng, b, n);
    grad_check(
        |s| {
            let mut g = Graph::new(Exec::Sequential);
            let xv = g.input(x.clone())?;
            let (wv, bv) = (g.param(s, w)?, g.param(s, bias)?);
            let y = layers::linear(&mut g, xv, wv, bv)?;
            let cv = g.input(c.clone())?;
            let m = g.mul(y, cv)?;
            let l = g.sum(m)?;
            Ok((g, l))
        },
        &store,
        TOLERANCE,
    )
}

fn check_activation(rng: &mut ChaCha8Rng, kind: Activation) -> Result<GradCheckReport> {
    let (b, _, _) = small_dims(rng);
    let n = rng.gen_range(2..=5);
    let mut store = ParamStore::new();
    let w = store.insert_glorot("X", b, n, rng)?;
    randomize(&mut store, rng, 2.0);
    let c = random(rng, b, n);
    grad_check(
        |s| {
            let mut g = Graph::new(Exec::Sequential);
            let x = g.param(s, w)?;
            let y = layers::activation(&mut g, x, kind)?;
            let cv = g.input(c.clone())?;
            let m = g.mul(y, cv)?;
            let l = g.sum(m)?;
            Ok((g, l))
        },
        &store,
        TOLERANCE,
    )
}

fn check_dropout(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheckReport> {
    let (b, _, n) = small_dims(rng);
    let mut store = ParamStore::new();
    let w = store.insert_glorot("X", b, n + 1, rng)?;
    randomize(&mut store, rng, 1.0);
    let c = random(rng, b, n + 1);
    grad_check(
        |s| {
            // Re-seeded per call so every evaluation draws the same mask.
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
            let mut g = Graph::new(Exec::Sequential);
            let x = g.param(s, w)?;
            let (y, _) = layers::dropout(&mut g, x, 0.3, Mode::Train, &mut mask_rng)?;
            let cv = g.input(c.clone())?;
            let m = g.mul(y, cv)?;
            let l = g.sum(m)?;
            Ok((g, l))
        },
        &store,
        TOLERANCE,
    )
}

fn check_bce(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (b, _, n) = small_dims(rng);
    let b = b + 1;
    let mut store = ParamStore::new();
    let w = store.insert_glorot("logits", b, n, rng)?;
    randomize(&mut store, rng, 3.0);
    let targets = binary(rng, b, n);
    let mut mask: Vec<bool> = (0..b).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    grad_check(
        |s| {
            let mut g = Graph::new(Exec::Sequential);
            let x = g.param(s, w)?;
            let p = g.sigmoid(x)?;
            let l = layers::bce_loss(&mut g, p, targets.clone(), Some(mask.clone()))?;
            Ok((g, l))
        },
        &store,
        TOLERANCE,
    )
}

fn check_gru_cell(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (b, d, h) = small_dims(rng);
    let mut store = ParamStore::new();
    let p = GruCellParams::register(&mut store, "gru", d, h, rng)?;
    randomize(&mut store, rng, 0.8);
    let x = random(rng, b, d);
    let h0 = random(rng, b, h);
    let c = random(rng, b, h);
    grad_check(
        |s| {
            let mut g = Graph::new(Exec::Sequential);
            let (xv, hv) = (g.input(x.clone())?, g.input(h0.clone())?);
            let out = layers::gru_cell(&mut g, s, xv, hv, &p)?;
            let cv = g.input(c.clone())?;
            let m = g.mul(out, cv)?;
            let l = g.sum(m)?;
            Ok((g, l))
        },
        &store,
        TOLERANCE,
    )
}

fn check_bigru(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (b, d, h) = small_dims(rng);
    let t = rng.gen_range(1..=5);
    let mut store = ParamStore::new();
    let fwd = GruCellParams::register(&mut store, "fwd", d, h, rng)?;
    let bwd = GruCellParams::register(&mut store, "bwd", d, h, rng)?;
    randomize(&mut store, rng, 0.8);
    let xs: Vec<Tensor> = (0..t).map(|_| random(rng, b, d)).collect();
    // Ragged lengths: sentence i is active for its first len_i steps.
    let lens: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=t)).collect();
    let active: Vec<Vec<bool>> = (0..t).map(|s| lens.iter().map(|&l| s < l).collect()).collect();
    let c = random(rng, b * t, 2 * h);
    grad_check(
        |s| {
            let mut g = Graph::new(Exec::Sequential);
            let seq = xs.iter().map(|x| g.input(x.clone())).collect::<Result<Vec<_>>>()?;
            let out = layers::bigru(&mut g, s, &seq, &fwd, &bwd, Some(&active))?;
            let stacked = g.stack_rows(&out)?;
            let cv = g.input(c.clone())?;
            let m = g.mul(stacked, cv)?;
            let l = g.sum(m)?;
            Ok((g, l))
        },
        &store,
        TOLERANCE,
    )
}

fn check_mention(rng: &mut ChaCha8Rng, attention: AttentionKind) -> Result<GradCheckReport> {
    let (b, d, n) = small_dims(rng);
    let hidden = rng.gen_range(1..=8);
    let mut store = ParamStore::new();
    let m = MentionModel::new(&mut store, attention, d, hidden, n, rng)?;
    randomize(&mut store, rng, 0.8);
    let triples: Vec<ContextTriple> = (0..b)
        .map(|_| ContextTriple {
            left: random(rng, 1, d).into_data(),
            right: random(rng, 1, d).into_data(),
            mention: random(rng, 1, d).into_data(),
        })
        .collect();
    let targets = binary(rng, b, n);
    grad_check(
        |s| {
            let mut g = Graph::new(Exec::Sequential);
            let refs: Vec<&ContextTriple> = triples.iter().collect();
            let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
            let scores = m.forward(&mut g, s, &refs, Mode::Eval, 0.0, &mut no_rng)?;
            let l = mention_loss(&mut g, scores, targets.clone())?;
            Ok((g, l))
        },
        &store,
        TOLERANCE,
    )
}

fn check_e2e(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (b, d, n) = small_dims(rng);
    let hidden = rng.gen_range(1..=8);
    let mut store = ParamStore::new();
    let m = E2eModel::new(&mut store, d, hidden, n, rng)?;
    randomize(&mut store, rng, 0.8);
    let lens: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=6)).collect();
    let embs: Vec<Tensor> = lens.iter().map(|&t| random(rng, t, d)).collect();
    let targets: Vec<Tensor> = lens.iter().map(|&t| binary(rng, t, n)).collect();
    let pads: Vec<Vec<bool>> = lens.iter().map(|&t| vec![false; t]).collect();
    let active: Vec<Vec<bool>> = lens.iter().map(|&t| vec![true; t]).collect();
    grad_check(
        |s| {
            let mut g = Graph::new(Exec::Sequential);
            let batch: Vec<SeqInput> = embs
                .iter()
                .zip(&pads)
                .map(|(emb, is_pad)| SeqInput { emb, is_pad })
                .collect();
            let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
            let out = m.forward_batch(&mut g, s, &batch, Mode::Eval, 0.0, &mut no_rng)?;
            let t: Vec<&Tensor> = targets.iter().collect();
            let a: Vec<&[bool]> = active.iter().map(Vec::as_slice).collect();
            let l = e2e_loss(&mut g, &out, &t, &a)?;
            Ok((g, l))
        },
        &store,
        TOLERANCE,
    )
}

/// Outcome of one target over a range of seeds.
#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub target: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub failures: Vec<(u64, String)>,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs `targets` over seeds `0..seeds`, instances spread across workers
/// under `Exec::Parallel`.
pub fn run_suite(targets: &[CheckTarget], seeds: u64, exec: Exec) -> Vec<SuiteRow> {
    let jobs: Vec<(CheckTarget, u64)> = targets
        .iter()
        .flat_map(|&t| (0..seeds).map(move |s| (t, s)))
        .collect();
    let results = exec.map(&jobs, |&(t, s)| t.run(s));
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut row = SuiteRow {
                target: t.name(),
                seeds: seeds as usize,
                max_rel_error: 0.0,
                failures: Vec::new(),
            };
            for (k, r) in results[i * seeds as usize..(i + 1) * seeds as usize].iter().enumerate() {
                match r {
                    Ok(rep) => {
                        row.max_rel_error = row.max_rel_error.max(rep.max_rel_error());
                        for f in rep.failures() {
                            row.failures.push((k as u64, format!("{} rel err {:.3e}", f.name, f.max_rel_error)));
                        }
                    }
                    Err(e) => row.failures.push((k as u64, e.to_string())),
                }
            }
            row
        })
        .collect()
}
