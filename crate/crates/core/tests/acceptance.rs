//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always print; exits non-zero on any FAIL.

use std::time::{Duration, Instant};

use approx::abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use finetype_core::autograd::Graph;
use finetype_core::checks::{run_suite, CheckTarget, TOLERANCE};
use finetype_core::checkpoint::DType;
use finetype_core::config::{ModelKind, TrainConfig};
use finetype_core::dataset::{corpus_stats, make_modified_split, Document, LabelVocab, SplitKind};
use finetype_core::e2e::e2e_predict;
use finetype_core::embed::{EmbeddingProvider, UniformEmbeddings};
use finetype_core::layers::bce_loss;
use finetype_core::mention::mention_predict;
use finetype_core::metrics::{evaluate_units, EvalUnit};
use finetype_core::parallel::Exec;
use finetype_core::synthetic::{overfit_corpus, polysemy_corpus, sparse_entity_corpus, word_vectors_for};
use finetype_core::tensor::Tensor;
use finetype_core::train::{evaluate_predictions, train, EvalMode, PredictionSet};

type Check = fn() -> Result<String, String>;

fn main() {
    let criteria: &[(&str, Check)] = &[
        ("gradient suite", gradient_suite),
        ("loss oracle", loss_oracle),
        ("metric oracle", metric_oracle),
        ("split arithmetic", split_arithmetic),
        ("prediction contracts", prediction_contracts),
        ("overfit: mention model", overfit_mention),
        ("overfit: end-to-end model", overfit_e2e),
        ("embedding ablation", embedding_ablation),
        ("misleading all-token metrics", misleading_metrics),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Result<String, String> {
    const SEEDS: u64 = 20;
    let start = Instant::now();
    let rows = run_suite(&CheckTarget::all(), SEEDS, Exec::Parallel);
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &rows {
        ensure(r.passed(), || format!("{}: {:?}", r.target, r.failures))?;
    }
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} targets x {SEEDS} seeds, worst relative error {worst:.2e} < {TOLERANCE:e}",
        rows.len()
    ))
}

fn bce_of(scores: &[f64], targets: &[f64]) -> f64 {
    let n = scores.len();
    let mut g = Graph::new(Exec::Sequential);
    let s = g.input(Tensor::new(vec![1, n], scores.to_vec()).unwrap()).unwrap();
    let l = bce_loss(&mut g, s, Tensor::new(vec![1, n], targets.to_vec()).unwrap(), None).unwrap();
    g.value(l).data()[0]
}

fn loss_oracle() -> Result<String, String> {
    let half = bce_of(&[0.5], &[1.0]);
    ensure(abs_diff_eq!(half, std::f64::consts::LN_2, epsilon = 1e-12), || format!("ln 2 case gave {half}"))?;
    let three = bce_of(&[0.9, 0.1, 0.2], &[1.0, 0.0, 0.0]);
    ensure(abs_diff_eq!(three, 0.144621, epsilon = 1e-6), || format!("three-label case gave {three}"))?;
    Ok(format!("{half:.12} and {three:.7}"))
}

/// Independent oracle over 0/1 label-membership arrays.
fn oracle(units: &[([bool; 4], [bool; 4])]) -> [f64; 3] {
    let n = units.len() as f64;
    let (mut exact, mut p_sum, mut r_sum) = (0.0, 0.0, 0.0);
    let (mut hits, mut preds, mut golds) = (0usize, 0usize, 0usize);
    for (g, p) in units {
        let h = (0..4).filter(|&k| g[k] && p[k]).count();
        let pc = p.iter().filter(|&&b| b).count();
        let gc = g.iter().filter(|&&b| b).count();
        if g == p {
            exact += 1.0;
        }
        p_sum += match (pc, gc) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => h as f64 / pc as f64,
        };
        r_sum += match (gc, pc) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => h as f64 / gc as f64,
        };
        hits += h;
        preds += pc;
        golds += gc;
    }
    let f = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    [exact / n, f(p_sum / n, r_sum / n), f(div(hits, preds), div(hits, golds))]
}

fn metric_oracle() -> Result<String, String> {
    let worked = evaluate_units(&[EvalUnit::new([0, 1], [0]), EvalUnit::new([2], [2, 3])]).unwrap();
    ensure(worked.macro_f1 == 0.75 && worked.micro_f1 == 2.0 / 3.0, || format!("worked example: {worked:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let fixtures = 5000;
    for _ in 0..fixtures {
        let units: Vec<([bool; 4], [bool; 4])> = (0..rng.gen_range(1..=10))
            .map(|_| (rng.gen(), rng.gen()))
            .collect();
        let eval: Vec<EvalUnit> = units
            .iter()
            .map(|(g, p)| {
                let ids = |m: &[bool; 4]| (0..4).filter(|&k| m[k]).collect::<Vec<_>>();
                EvalUnit::new(ids(g), ids(p))
            })
            .collect();
        let r = evaluate_units(&eval).unwrap();
        let want = oracle(&units);
        ensure([r.strict_acc, r.macro_f1, r.micro_f1] == want, || {
            format!("fixture {units:?}: got {r:?}, oracle {want:?}")
        })?;
    }
    Ok(format!("worked example 0.75 / 2/3; {fixtures} random fixtures match exactly"))
}

fn numbered(n: usize) -> Vec<Document> {
    (0..n)
        .map(|i| Document {
            doc_id: format!("r{i}"),
            tokens: vec!["x".into()],
            mentions: vec![],
        })
        .collect()
}

fn split_arithmetic() -> Result<String, String> {
    let mut out = Vec::new();
    for (n, want) in [(6431, (5143, 644, 644)), (1312, (1048, 132, 132))] {
        let got = make_modified_split(&numbered(n), SplitKind::OntonotesLike, None)
            .map_err(|e| e.to_string())?
            .sizes();
        ensure(got == want, || format!("{n} records split as {got:?}, want {want:?}"))?;
        out.push(format!("{n} -> {}/{}/{}", got.0, got.1, got.2));
    }
    Ok(out.join(", "))
}

fn prediction_contracts() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..10_000 {
        let n = rng.gen_range(1..=20);
        let scores: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.1) { 0.5 } else { rng.gen() })
            .collect();
        let p = mention_predict(&scores);
        ensure(!p.is_empty() && p.iter().all(|&k| k < n), || format!("vector {i}: {scores:?} -> {p:?}"))?;
    }
    for t in 1..=10 {
        let data: Vec<f64> = (0..t * 6).map(|_| rng.gen_range(0.0..=0.5)).collect();
        let pred = e2e_predict(Tensor::new(vec![t, 6], data).unwrap());
        ensure(pred.word_labels.iter().all(Vec::is_empty), || "sub-threshold token got a label".into())?;
    }
    Ok("10000 mention score vectors never empty; sub-threshold tokens always empty".into())
}

fn overfit_config(kind: ModelKind, batch: usize, max_epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(kind);
    c.embedding = "word_vectors:synthetic".parse().unwrap();
    c.hidden = 32;
    c.lr = 1e-3;
    c.batch_size = batch;
    c.max_epochs = max_epochs;
    c.patience = max_epochs;
    c
}

fn overfit_mention() -> Result<String, String> {
    let docs = overfit_corpus(20, 7);
    ensure(LabelVocab::from_documents(&docs).len() == 5, || "fixture does not have 5 labels".into())?;
    let provider = EmbeddingProvider::WordVectors(word_vectors_for(&docs, 16, 7));
    let mentions: usize = docs.iter().map(|d| d.mentions.len()).sum();
    let per_epoch = mentions.div_ceil(8);
    let cfg = overfit_config(ModelKind::Mention, 8, 500 / per_epoch);
    let run = train(&cfg, &docs, &docs, &provider, None).map_err(|e| e.to_string())?;
    let hit = run.epochs.iter().find(|e| e.dev.strict_acc == 1.0);
    let e = hit.ok_or_else(|| {
        let best = run.epochs.iter().map(|e| e.dev.strict_acc).fold(0.0, f64::max);
        format!("best strict accuracy {best} within {} steps", run.epochs.last().unwrap().steps)
    })?;
    ensure(e.steps <= 500, || format!("needed {} steps", e.steps))?;
    Ok(format!("strict accuracy 1.0 after {} steps (H=32, dropout 0.5, lr 1e-3)", e.steps))
}

fn overfit_e2e() -> Result<String, String> {
    let docs = overfit_corpus(20, 7);
    let provider = EmbeddingProvider::WordVectors(word_vectors_for(&docs, 16, 7));
    let cfg = overfit_config(ModelKind::E2e, 10, 500);
    let run = train(&cfg, &docs, &docs, &provider, None).map_err(|e| e.to_string())?;
    let e = run.epochs.iter().find(|e| e.dev.micro_f1 >= 0.95).ok_or_else(|| {
        let best = run.epochs.iter().map(|e| e.dev.micro_f1).fold(0.0, f64::max);
        format!("best token micro-F1 {best} within 1000 steps")
    })?;
    ensure(e.steps <= 1000, || format!("needed {} steps", e.steps))?;
    Ok(format!(
        "token micro-F1 {:.3} after {} steps (H=32, dropout 0.5, lr 1e-3)",
        e.dev.micro_f1, e.steps
    ))
}

fn embedding_ablation() -> Result<String, String> {
    let mut lines = Vec::new();
    for seed in 0..3 {
        let data = polysemy_corpus(80, 20, 40, 16, seed).map_err(|e| e.to_string())?;
        let score = |provider: EmbeddingProvider| -> Result<f64, String> {
            let mut c = TrainConfig::new(ModelKind::E2e);
            c.embedding = "uniform:16".parse().unwrap();
            c.hidden = 16;
            c.lr = 0.01;
            c.dropout = 0.0;
            c.max_epochs = 80;
            c.patience = 15;
            c.seed = seed;
            let run = train(&c, &data.train, &data.dev, &provider, None).map_err(|e| e.to_string())?;
            let r = run
                .best
                .evaluate(&data.test, &provider, EvalMode::AllToken, Exec::default())
                .map_err(|e| e.to_string())?;
            Ok(r.micro_f1)
        };
        let ctx = score(EmbeddingProvider::Contextual(data.store.clone()))?;
        let uni = score(EmbeddingProvider::Uniform(UniformEmbeddings::new(16, seed, None)))?;
        ensure(ctx - uni >= 0.2, || format!("seed {seed}: contextual {ctx:.3} vs uniform {uni:.3}"))?;
        lines.push(format!("seed {seed}: {ctx:.3} vs {uni:.3}"));
    }
    Ok(format!("held-out micro-F1, contextual vs uniform: {}", lines.join("; ")))
}

fn misleading_metrics() -> Result<String, String> {
    let docs = sparse_entity_corpus(50, 20, 0);
    let stats = corpus_stats(&docs);
    let share = stats.entity_tokens as f64 / stats.tokens as f64;
    ensure(share <= 0.10, || format!("entity share {share}"))?;
    let vocab = LabelVocab::from_documents(&docs);
    let empty = PredictionSet {
        kind: ModelKind::E2e,
        labels: docs.iter().map(|d| vec![Vec::new(); d.tokens.len()]).collect(),
        scores: docs.iter().map(|d| vec![Vec::new(); d.tokens.len()]).collect(),
    };
    let r = evaluate_predictions(&empty, &docs, &vocab, EvalMode::AllToken).map_err(|e| e.to_string())?;
    ensure(r.strict_acc >= 0.9 && r.micro_f1 == 0.0, || format!("{r:?}"))?;
    Ok(format!(
        "{:.0}% entity tokens: empty predictor strict {:.3}, macro-F1 {:.3}, micro-F1 {:.3}",
        share * 100.0,
        r.strict_acc,
        r.macro_f1,
        r.micro_f1
    ))
}

fn determinism() -> Result<String, String> {
    let docs = overfit_corpus(20, 3);
    let provider = EmbeddingProvider::WordVectors(word_vectors_for(&docs, 8, 3));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut sizes = Vec::new();
    for kind in [ModelKind::Mention, ModelKind::E2e] {
        let mut c = TrainConfig::new(kind);
        c.hidden = 8;
        c.lr = 1e-2;
        c.batch_size = 4;
        c.max_epochs = 4;
        c.seed = 17;
        let paths = [dir.path().join(format!("{kind}-a.ckpt")), dir.path().join(format!("{kind}-b.ckpt"))];
        for p in &paths {
            train(&c, &docs, &docs, &provider, Some(p)).map_err(|e| e.to_string())?;
        }
        let a = std::fs::read(&paths[0]).map_err(|e| e.to_string())?;
        let b = std::fs::read(&paths[1]).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{kind} checkpoints differ"))?;
        // The kernels fix their summation order, so thread count does not
        // change any parameter bit either.
        let mut other = c.clone();
        other.exec = match c.exec {
            Exec::Parallel => Exec::Sequential,
            Exec::Sequential => Exec::Parallel,
        };
        let x = train(&c, &docs, &docs, &provider, None).map_err(|e| e.to_string())?;
        let y = train(&other, &docs, &docs, &provider, None).map_err(|e| e.to_string())?;
        let bytes = |s| finetype_core::checkpoint::Checkpoint::new(s).to_bytes(DType::F64).unwrap();
        ensure(bytes(x.best.store) == bytes(y.best.store), || format!("{kind}: exec mode changed parameters"))?;
        sizes.push(format!("{kind} {} bytes", a.len()));
    }
    Ok(format!("identical-seed checkpoints are byte-identical ({})", sizes.join(", ")))
}
