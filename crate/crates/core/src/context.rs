//! Fixed-size left / right / mention context windows over a wordpiece sequence.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wordpiece::WordpieceSeq;

/// Piece indices of the three windows, each exactly `W` long; `None` is `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindows {
    pub left: Vec<Option<usize>>,
    pub right: Vec<Option<usize>>,
    pub mention: Vec<Option<usize>>,
}

/// Averaged left, right and mention context vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTriple {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub mention: Vec<f64>,
}

/// Windows around the mention covering words `start..end`: the `W` pieces
/// before its first piece (padded on the left), the `W` pieces after its
/// last piece and its first `W` pieces (both padded on the right).
pub fn context_windows(seq: &WordpieceSeq, start: usize, end: usize, w: usize) -> Result<ContextWindows> {
    if w == 0 {
        return Err(Error::Config("context window must be at least 1".into()));
    }
    let (first, last) = seq
        .piece_span(start, end)
        .ok_or_else(|| Error::Data(format!("mention span {start}..{end} is outside the sequence")))?;
    let real = |i: usize| (!seq.is_pad[i]).then_some(i);

    let lo = first.saturating_sub(w);
    let mut left: Vec<Option<usize>> = vec![None; w - (first - lo)];
    left.extend((lo..first).map(real));

    let hi = (last + 1 + w).min(seq.len());
    let mut right: Vec<Option<usize>> = (last + 1..hi).map(real).collect();
    right.resize(w, None);

    let mend = (first + w).min(last + 1);
    let mut mention: Vec<Option<usize>> = (first..mend).map(real).collect();
    mention.resize(w, None);

    Ok(ContextWindows { left, right, mention })
}

fn average(window: &[Option<usize>], emb: &Tensor) -> Vec<f64> {
    let mut acc = vec![0.0; emb.cols()];
    let mut n = 0usize;
    for &i in window.iter().flatten() {
        for (a, v) in acc.iter_mut().zip(emb.row(i)) {
            *a += v;
        }
        n += 1;
    }
    if n > 1 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Context vectors for one mention. `[PAD]` slots are excluded from each
/// average; an all-pad window gives the zero vector.
pub fn build_context_triple(
    seq: &WordpieceSeq,
    emb: &Tensor,
    start: usize,
    end: usize,
    w: usize,
) -> Result<ContextTriple> {
    if emb.rows() != seq.len() {
        return Err(Error::dim("context", &[seq.len()], emb.shape()));
    }
    let win = context_windows(seq, start, end, w)?;
    Ok(ContextTriple {
        left: average(&win.left, emb),
        right: average(&win.right, emb),
        mention: average(&win.mention, emb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_of(words: &[&str]) -> WordpieceSeq {
        WordpieceSeq::identity(&words.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    fn names(seq: &WordpieceSeq, win: &[Option<usize>]) -> Vec<String> {
        win.iter()
            .map(|i| i.map_or("[PAD]".to_string(), |i| seq.pieces[i].clone()))
            .collect()
    }

    #[test]
    fn window_construction() {
        let seq = seq_of(&["a", "b", "c", "M1", "M2", "d", "e"]);
        let w = context_windows(&seq, 3, 5, 3).unwrap();
        assert_eq!(names(&seq, &w.left), ["a", "b", "c"]);
        assert_eq!(names(&seq, &w.right), ["d", "e", "[PAD]"]);
        assert_eq!(names(&seq, &w.mention), ["M1", "M2", "[PAD]"]);
    }

    #[test]
    fn sentence_initial_mention_has_zero_left_context() {
        let seq = seq_of(&["M", "x", "y"]);
        let emb = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.], vec![5., 6.]]).unwrap();
        let t = build_context_triple(&seq, &emb, 0, 1, 2).unwrap();
        assert_eq!(t.left, vec![0.0, 0.0]);
        assert_eq!(t.right, vec![4.0, 5.0]);
        assert_eq!(t.mention, vec![1.0, 2.0]);
    }

    #[test]
    fn long_mention_is_trimmed() {
        let seq = seq_of(&["m1", "m2", "m3", "m4", "z"]);
        let w = context_windows(&seq, 0, 4, 3).unwrap();
        assert_eq!(names(&seq, &w.mention), ["m1", "m2", "m3"]);
    }

    #[test]
    fn multi_piece_words_map_to_pieces() {
        let seq = WordpieceSeq {
            pieces: ["a", "Johan", "##son", "b"].iter().map(|s| s.to_string()).collect(),
            word_index: vec![0, 1, 1, 2],
            is_pad: vec![false; 4],
        };
        let w = context_windows(&seq, 1, 2, 2).unwrap();
        assert_eq!(names(&seq, &w.mention), ["Johan", "##son"]);
        assert_eq!(names(&seq, &w.left), ["[PAD]", "a"]);
        assert_eq!(names(&seq, &w.right), ["b", "[PAD]"]);
    }

    #[test]
    fn span_out_of_bounds() {
        let seq = seq_of(&["a", "b"]);
        assert!(matches!(context_windows(&seq, 2, 3, 2), Err(Error::Data(_))));
    }

    #[test]
    fn identical_window_vectors_average_exactly() {
        let seq = seq_of(&["a", "b", "M", "c", "d"]);
        let v = vec![0.1, 0.7, -0.3];
        let emb = Tensor::from_rows(&vec![v.clone(); 5]).unwrap();
        let t = build_context_triple(&seq, &emb, 2, 3, 2).unwrap();
        assert_eq!(t.left, v);
        assert_eq!(t.right, v);
    }

    proptest! {
        #[test]
        fn content_outside_windows_is_ignored(
            n in 8usize..20,
            w in 1usize..4,
            seed in 0u64..1000,
        ) {
            let start = (seed as usize % (n - 2 * w - 1)) + w;
            let end = start + 1;
            let seq = seq_of(&vec!["t"; n]);
            let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
            let emb = Tensor::from_rows(&rows).unwrap();
            let base = build_context_triple(&seq, &emb, start, end, w).unwrap();
            let mut changed = rows.clone();
            for (i, r) in changed.iter_mut().enumerate() {
                if i + w < start || i > end + w - 1 {
                    r[0] += 100.0 + seed as f64;
                }
            }
            let emb2 = Tensor::from_rows(&changed).unwrap();
            prop_assert_eq!(build_context_triple(&seq, &emb2, start, end, w).unwrap(), base);
        }
    }
}
