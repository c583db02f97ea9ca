//! Dense row-major `f64` tensors and the matrix kernels both models run on.
//!
//! Everything above this module treats a tensor as a matrix: the last axis
//! is the column axis and all leading axes are flattened into rows. A
//! vector of shape `[n]` is a single row.

use crate::error::{Error, Result};
use crate::parallel::Exec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::Data(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v,
        }
    }

    /// Builds an `r x c` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols()).map(<[f64]>::to_vec).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("elementwise", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::dim("accumulate", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn as_matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `a (r x k) * b (k x c)`.
pub fn matmul(a: &Tensor, b: &Tensor, exec: Exec) -> Result<Tensor> {
    let (r, k) = as_matrix_dims(a);
    let (k2, c) = as_matrix_dims(b);
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; r * c];
    let (ad, bd) = (a.data(), b.data());
    exec.for_rows(&mut out, c, r * k * c, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * c..(kk + 1) * c];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
    Tensor::new(vec![r, c], out)
}

/// `a (r x c) * b^T` where `b` is `k x c`; result `r x k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor, exec: Exec) -> Result<Tensor> {
    let (r, c) = as_matrix_dims(a);
    let (k, c2) = as_matrix_dims(b);
    if c != c2 {
        return Err(Error::dim("matmul_bt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; r * k];
    let (ad, bd) = (a.data(), b.data());
    exec.for_rows(&mut out, k, r * k * c, |i, row| {
        let arow = &ad[i * c..(i + 1) * c];
        for (kk, o) in row.iter_mut().enumerate() {
            let brow = &bd[kk * c..(kk + 1) * c];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    Tensor::new(vec![r, k], out)
}

/// `a^T * b` where `a` is `r x k` and `b` is `r x c`; result `k x c`.
/// Each output element sums over `r` in increasing order.
pub fn matmul_at(a: &Tensor, b: &Tensor, exec: Exec) -> Result<Tensor> {
    let (r, k) = as_matrix_dims(a);
    let (r2, c) = as_matrix_dims(b);
    if r != r2 {
        return Err(Error::dim("matmul_at", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; k * c];
    let (ad, bd) = (a.data(), b.data());
    exec.for_rows(&mut out, c, r * k * c, |kk, row| {
        for i in 0..r {
            let aik = ad[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[i * c..(i + 1) * c];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
    Tensor::new(vec![k, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (r, k, c) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                for t in 0..k {
                    out[i * c + j] += a.at(i, t) * b.at(t, j);
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let y = matmul(&a, &b, Exec::Sequential).unwrap();
        for (x, o) in y.data().iter().zip(naive(&a, &b)) {
            assert!((x - o).abs() < 1e-14);
        }
    }

    #[test]
    fn transposed_kernels_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 5, 3);
        let b = random(&mut rng, 4, 3);
        let bt = Tensor::from_rows(
            &(0..3).map(|j| (0..4).map(|i| b.at(i, j)).collect()).collect::<Vec<_>>(),
        )
        .unwrap();
        let y = matmul_bt(&a, &b, Exec::Sequential).unwrap();
        assert!(y.max_abs_diff(&Tensor::new(vec![5, 4], naive(&a, &bt)).unwrap()) < 1e-14);

        let d = random(&mut rng, 5, 2);
        let at = Tensor::from_rows(
            &(0..3).map(|j| (0..5).map(|i| a.at(i, j)).collect()).collect::<Vec<_>>(),
        )
        .unwrap();
        let y = matmul_at(&a, &d, Exec::Sequential).unwrap();
        assert!(y.max_abs_diff(&Tensor::new(vec![3, 2], naive(&at, &d)).unwrap()) < 1e-14);
    }

    #[test]
    fn parallel_kernels_are_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 64, 96);
        let b = random(&mut rng, 96, 80);
        let s = matmul(&a, &b, Exec::Sequential).unwrap();
        let p = matmul(&a, &b, Exec::Parallel).unwrap();
        assert_eq!(s, p);
        let d = random(&mut rng, 64, 80);
        assert_eq!(
            matmul_at(&a, &d, Exec::Sequential).unwrap(),
            matmul_at(&a, &d, Exec::Parallel).unwrap()
        );
        assert_eq!(
            matmul_bt(&d, &b, Exec::Sequential).unwrap(),
            matmul_bt(&d, &b, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b, Exec::Sequential).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }
}
