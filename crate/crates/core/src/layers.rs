//! Layers shared by both models, expressed as tape operations.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    SoftmaxLastDim,
}

/// `y = xW + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

pub fn activation(g: &mut Graph, x: Var, kind: Activation) -> Result<Var> {
    match kind {
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Tanh => g.tanh(x),
        Activation::SoftmaxLastDim => g.softmax_rows(x),
    }
}

/// Inverted dropout. Returns the output node and the multiplicative mask
/// (`0` or `1/(1-p)` per element; all ones when nothing was dropped).
pub fn dropout<R: Rng>(
    g: &mut Graph,
    x: Var,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, Vec<f64>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
    }
    let n = g.value(x).len();
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x, vec![1.0; n]));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let y = g.mul_const(x, mask.clone())?;
    Ok((y, mask))
}

/// Mean BCE over unmasked rows; see [`Graph::bce`].
pub fn bce_loss(g: &mut Graph, scores: Var, targets: Tensor, row_mask: Option<Vec<bool>>) -> Result<Var> {
    g.bce(scores, targets, row_mask)
}

/// Weights of one GRU direction. Input matrices are `d x H`, recurrent
/// matrices `H x H`, so a row-batch step is `x W + h U + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCellParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruCellParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(GruCellParams {
            w_z: store.insert_glorot(&name("W_z"), input_dim, hidden, rng)?,
            w_r: store.insert_glorot(&name("W_r"), input_dim, hidden, rng)?,
            w_h: store.insert_glorot(&name("W_h"), input_dim, hidden, rng)?,
            u_z: store.insert_glorot(&name("U_z"), hidden, hidden, rng)?,
            u_r: store.insert_glorot(&name("U_r"), hidden, hidden, rng)?,
            u_h: store.insert_glorot(&name("U_h"), hidden, hidden, rng)?,
            b_z: store.insert_zeros(&name("b_z"), &[hidden])?,
            b_r: store.insert_zeros(&name("b_r"), &[hidden])?,
            b_h: store.insert_zeros(&name("b_h"), &[hidden])?,
            input_dim,
            hidden,
        })
    }

    /// Looks up an already registered direction by prefix.
    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let id = |s: &str| store.id(&format!("{prefix}.{s}"));
        let w_z = id("W_z")?;
        let shape = store.value(w_z).shape().to_vec();
        Ok(GruCellParams {
            w_z,
            w_r: id("W_r")?,
            w_h: id("W_h")?,
            u_z: id("U_z")?,
            u_r: id("U_r")?,
            u_h: id("U_h")?,
            b_z: id("b_z")?,
            b_r: id("b_r")?,
            b_h: id("b_h")?,
            input_dim: shape[0],
            hidden: shape[1],
        })
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h,
        ]
    }
}

/// One GRU step:
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `h̃ = tanh(xW_h + (r ⊙ h)U_h + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell(g: &mut Graph, store: &ParamStore, x: Var, h: Var, p: &GruCellParams) -> Result<Var> {
    let (xv, hv) = (g.value(x), g.value(h));
    if xv.cols() != p.input_dim || hv.cols() != p.hidden || xv.rows() != hv.rows() {
        return Err(Error::dim("gru_cell", xv.shape(), hv.shape()));
    }
    let gate = |g: &mut Graph, w: ParamId, u: ParamId, b: ParamId, hin: Var| -> Result<Var> {
        let wv = g.param(store, w)?;
        let uv = g.param(store, u)?;
        let bv = g.param(store, b)?;
        let xw = g.matmul(x, wv)?;
        let hu = g.matmul(hin, uv)?;
        let s = g.add(xw, hu)?;
        g.add_bias(s, bv)
    };
    let z_pre = gate(g, p.w_z, p.u_z, p.b_z, h)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = gate(g, p.w_r, p.u_r, p.b_r, h)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h)?;
    let cand_pre = gate(g, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = g.tanh(cand_pre)?;
    let keep = g.one_minus(z)?;
    let carried = g.mul(keep, h)?;
    let fresh = g.mul(z, cand)?;
    g.add(carried, fresh)
}

/// Runs one GRU direction over `seq` (each step a `B x d` node) from a zero
/// state. When `active` is given, rows with `active[t][b] == false` carry the
/// previous state through unchanged, so padding never perturbs real positions.
fn gru_pass(
    g: &mut Graph,
    store: &ParamStore,
    seq: &[Var],
    p: &GruCellParams,
    active: Option<&[Vec<bool>]>,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Option<Var>>> {
    let batch = g.value(seq[0]).rows();
    let mut h = g.input(Tensor::zeros(&[batch, p.hidden]))?;
    let mut out = vec![None; seq.len()];
    for t in order {
        let next = gru_cell(g, store, seq[t], h, p)?;
        h = match active {
            Some(mask) if mask[t].iter().any(|a| !a) => g.row_select(next, h, mask[t].clone())?,
            _ => next,
        };
        out[t] = Some(h);
    }
    Ok(out)
}

/// Bidirectional GRU. Output at step `t` is `[forward_t, backward_t]` (`B x 2H`).
pub fn bigru(
    g: &mut Graph,
    store: &ParamStore,
    seq: &[Var],
    fwd: &GruCellParams,
    bwd: &GruCellParams,
    active: Option<&[Vec<bool>]>,
) -> Result<Vec<Var>> {
    if seq.is_empty() {
        return Err(Error::Data("bidirectional GRU over an empty sequence".into()));
    }
    if let Some(mask) = active {
        if mask.len() != seq.len() {
            return Err(Error::dim("bigru mask", &[seq.len()], &[mask.len()]));
        }
    }
    let t = seq.len();
    let f = gru_pass(g, store, seq, fwd, active, 0..t)?;
    let b = gru_pass(g, store, seq, bwd, active, (0..t).rev())?;
    f.into_iter()
        .zip(b)
        .map(|(fv, bv)| g.concat_cols(&[fv.expect("visited"), bv.expect("visited")]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::Exec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(x: Tensor, kind: Activation) -> Tensor {
        let mut g = Graph::new(Exec::Sequential);
        let v = g.input(x).unwrap();
        let y = activation(&mut g, v, kind).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new(Exec::Sequential);
        let x = g.input(Tensor::from_rows(&[vec![1., 2.]]).unwrap()).unwrap();
        let w = g.input(Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap()).unwrap();
        let b = g.input(Tensor::vector(vec![0., 0.])).unwrap();
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2.]);

        let x = g.input(Tensor::from_rows(&[vec![1., 1.]]).unwrap()).unwrap();
        let w = g.input(Tensor::from_rows(&[vec![2., 0.], vec![0., 3.]]).unwrap()).unwrap();
        let b = g.input(Tensor::vector(vec![1., 1.])).unwrap();
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3., 4.]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new(Exec::Sequential);
        let x = g.input(Tensor::zeros(&[1, 3])).unwrap();
        let w = g.input(Tensor::zeros(&[2, 2])).unwrap();
        let b = g.input(Tensor::zeros(&[2])).unwrap();
        let err = linear(&mut g, x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn activation_examples() {
        assert_eq!(run(Tensor::scalar(0.0), Activation::Sigmoid).data(), &[0.5]);
        let y = run(Tensor::vector(vec![2f64.ln(), 0., 0.]), Activation::SoftmaxLastDim);
        for (a, b) in y.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        let y = run(Tensor::vector(vec![1., 0., 0.]), Activation::SoftmaxLastDim);
        for (a, b) in y.data().iter().zip([0.57611, 0.21194, 0.21194]) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(run(Tensor::vector(vec![-1., 2.]), Activation::Relu).data(), &[0., 2.]);
        assert_eq!(run(Tensor::scalar(0.0), Activation::Tanh).data(), &[0.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(Exec::Sequential);
        let x = g.input(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let (y, _) = dropout(&mut g, x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let (y, mask) = dropout(&mut g, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(mask.iter().all(|&m| m == 1.0));
        assert!(matches!(
            dropout(&mut g, x, 1.0, Mode::Train, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new(Exec::Sequential);
        let x = g.input(Tensor::filled(&[100, 100], 1.0)).unwrap();
        let (y, mask) = dropout(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = mask.iter().filter(|&&m| m > 0.0).count() as f64 / 10_000.0;
        assert!((survivors - 0.5).abs() <= 0.02, "{survivors}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn bce_examples() {
        let eps = crate::autograd::BCE_EPS;
        let loss = |s: Vec<f64>, t: Vec<f64>| {
            let mut g = Graph::new(Exec::Sequential);
            let n = s.len();
            let sv = g.input(Tensor::new(vec![1, n], s).unwrap()).unwrap();
            let l = bce_loss(&mut g, sv, Tensor::new(vec![1, n], t).unwrap(), None).unwrap();
            g.value(l).data()[0]
        };
        assert!(loss(vec![1.0 - eps, eps], vec![1., 0.]) < 1e-11);
        assert!((loss(vec![0.5], vec![1.]) - 2f64.ln()).abs() < 1e-12);
        assert!((loss(vec![0.9, 0.1, 0.2], vec![1., 0., 0.]) - 0.144621).abs() < 1e-6);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut g = Graph::new(Exec::Sequential);
        let s = g.input(Tensor::vector(vec![0.5])).unwrap();
        let err = bce_loss(&mut g, s, Tensor::vector(vec![0.3]), None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn bce_mask_excludes_rows() {
        let mut g = Graph::new(Exec::Sequential);
        let s = g.input(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.01, 0.99]]).unwrap()).unwrap();
        let t = Tensor::from_rows(&[vec![1., 0.], vec![1., 0.]]).unwrap();
        let l = bce_loss(&mut g, s, t, Some(vec![true, false])).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    fn zero_gru(store: &mut ParamStore, prefix: &str, d: usize, h: usize) -> GruCellParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruCellParams::register(store, prefix, d, h, &mut rng).unwrap();
        for id in p.ids() {
            store.value_mut(id).fill(0.0);
        }
        p
    }

    #[test]
    fn gru_zero_params() {
        let mut store = ParamStore::new();
        let p = zero_gru(&mut store, "gru", 3, 2);
        let mut g = Graph::new(Exec::Sequential);
        let x = g.input(Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap()).unwrap();
        let h0 = g.input(Tensor::zeros(&[1, 2])).unwrap();
        let h = gru_cell(&mut g, &store, x, h0, &p).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);
        let hv = g.input(Tensor::from_rows(&[vec![0.8, -0.4]]).unwrap()).unwrap();
        let h = gru_cell(&mut g, &store, x, hv, &p).unwrap();
        assert_eq!(g.value(h).data(), &[0.4, -0.2]);
    }

    #[test]
    fn bigru_rejects_empty() {
        let mut store = ParamStore::new();
        let f = zero_gru(&mut store, "f", 2, 2);
        let b = zero_gru(&mut store, "b", 2, 2);
        let mut g = Graph::new(Exec::Sequential);
        assert!(matches!(bigru(&mut g, &store, &[], &f, &b, None), Err(Error::Data(_))));
    }
}
