//! Dense row-major f64 tensors.
//!
//! Only the ranks the rest of the crate needs: scalars (empty shape),
//! vectors and matrices. All arithmetic kernels iterate in a fixed index
//! order so repeated evaluation is bit-identical.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Construct from external data; rejects NaN/Inf and shape/length mismatch.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {:?}",
                shape
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "tensor data must be finite, found {}",
                bad
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by our own kernels.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Single-element tensors act as scalars regardless of declared shape.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [r, _] => Ok(*r),
            _ => Err(Error::contract(format!(
                "expected matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn cols(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [_, c] => Ok(*c),
            _ => Err(Error::contract(format!(
                "expected matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(context, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a / b)
            .collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn neg(&self) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|a| -a).collect())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|a| a * c).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&a| f(a)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    /// W[r×c] · x[c] -> [r]
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = (self.rows()?, self.cols()?);
        if x.shape != [c] {
            return Err(Error::shape("matvec", &self.shape, &x.shape));
        }
        let mut out = vec![0.0; r];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * c..(i + 1) * c];
            *o = row.iter().zip(&x.data).map(|(w, xv)| w * xv).sum();
        }
        Ok(Tensor::from_raw(vec![r], out))
    }

    /// Wᵀ · g: W[r×c], g[r] -> [c]
    pub fn tmatvec(&self, g: &Tensor) -> Result<Tensor> {
        let (r, c) = (self.rows()?, self.cols()?);
        if g.shape != [r] {
            return Err(Error::shape("tmatvec", &self.shape, &g.shape));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            let gi = g.data[i];
            let row = &self.data[i * c..(i + 1) * c];
            for (o, w) in out.iter_mut().zip(row) {
                *o += gi * w;
            }
        }
        Ok(Tensor::from_raw(vec![c], out))
    }

    /// u[r] ⊗ v[c] -> [r×c]
    pub fn outer(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = match (self.shape.as_slice(), v.shape.as_slice()) {
            ([r], [c]) => (*r, *c),
            _ => return Err(Error::shape("outer", &self.shape, &v.shape)),
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let ui = self.data[i];
            let dst = &mut out[i * c..(i + 1) * c];
            for (d, vv) in dst.iter_mut().zip(&v.data) {
                *d = ui * vv;
            }
        }
        Ok(Tensor::from_raw(vec![r, c], out))
    }

    /// A[p×q] · B[q×r] -> [p×r]
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (p, q) = (self.rows()?, self.cols()?);
        let (q2, r) = (b.rows()?, b.cols()?);
        if q != q2 {
            return Err(Error::shape("matmul", &self.shape, &b.shape));
        }
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let arow = &self.data[i * q..(i + 1) * q];
            let orow = &mut out[i * r..(i + 1) * r];
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[k * r..(k + 1) * r];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor::from_raw(vec![p, r], out))
    }

    /// Aᵀ · B: A[p×q], B[p×r] -> [q×r]
    pub fn matmul_ta(&self, b: &Tensor) -> Result<Tensor> {
        let (p, q) = (self.rows()?, self.cols()?);
        let (p2, r) = (b.rows()?, b.cols()?);
        if p != p2 {
            return Err(Error::shape("matmul_ta", &self.shape, &b.shape));
        }
        let mut out = vec![0.0; q * r];
        for i in 0..p {
            let arow = &self.data[i * q..(i + 1) * q];
            let brow = &b.data[i * r..(i + 1) * r];
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[k * r..(k + 1) * r];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor::from_raw(vec![q, r], out))
    }

    /// A · Bᵀ: A[p×q], B[r×q] -> [p×r]
    pub fn matmul_tb(&self, b: &Tensor) -> Result<Tensor> {
        let (p, q) = (self.rows()?, self.cols()?);
        let (r, q2) = (b.rows()?, b.cols()?);
        if q != q2 {
            return Err(Error::shape("matmul_tb", &self.shape, &b.shape));
        }
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            let arow = &self.data[i * q..(i + 1) * q];
            let orow = &mut out[i * r..(i + 1) * r];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &b.data[j * q..(j + 1) * q];
                *o = arow.iter().zip(brow).map(|(a, bv)| a * bv).sum();
            }
        }
        Ok(Tensor::from_raw(vec![p, r], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonfinite_and_bad_shape() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.5);
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value().unwrap(), 3.5);
        assert_eq!(s.shape(), &[] as &[usize]);
    }

    #[test]
    fn matvec_identity() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(w.matvec(&x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_agrees_with_transposed_variants() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let ab = a.matmul(&b).unwrap();
        // (Aᵀ)ᵀ·B via matmul_ta on the transposed data laid out directly.
        let at = Tensor::matrix(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let ab2 = at.matmul_ta(&b).unwrap();
        assert_eq!(ab.data(), ab2.data());
        let bt = Tensor::matrix(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]).unwrap();
        let ab3 = a.matmul_tb(&bt).unwrap();
        assert_eq!(ab.data(), ab3.data());
    }

    #[test]
    fn matmul_shape_errors_name_both_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }
}
