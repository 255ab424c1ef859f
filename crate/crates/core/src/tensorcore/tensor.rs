use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    /// Builds an `r x c` matrix from row slices.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.as_ref().len() != c {
                return Err(Error::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(row.as_ref());
        }
        Ok(Tensor { shape: vec![r, c], data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Row count of a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        if other.rows() != k {
            return Err(Error::ShapeMismatch(format!("matmul {:?} x {:?}", self.shape, other.shape)));
        }
        let m = other.cols();
        Ok(Tensor { shape: vec![n, m], data: matmul_nn(&self.data, &other.data, n, k, m) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), c], data }
    }
}

/// `a (n x k) * b (k x m)`.
pub fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x k) * b^T` where `b` is `m x k`.
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b` where `a` is `k x n` and `b` is `k x m`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.data_mut()[i * m + j] = s;
            }
        }
        out
    }

    fn random(s: &mut Stream, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| s.normal()).collect()).unwrap()
    }

    #[test]
    fn kernels_match_triple_loop() {
        let mut s = Stream::new(3, "mm");
        let a = random(&mut s, 3, 4);
        let b = random(&mut s, 4, 2);
        let want = naive(&a, &b);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let bt = b.transpose();
        let nt = matmul_nt(a.data(), bt.data(), 3, 4, 2);
        let at = a.transpose();
        let tn = matmul_tn(at.data(), b.data(), 4, 3, 2);
        for i in 0..6 {
            assert!((nt[i] - want.data()[i]).abs() <= 1e-12);
            assert!((tn[i] - want.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let a = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&Tensor::zeros(&[2, 3])).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
