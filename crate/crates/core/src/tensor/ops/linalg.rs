use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Row-major `a[m x k] * b[k x n]`.
pub(crate) fn matmul_values<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!("matmul inner extents {k} and {k2}")));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    Tensor::from_vec(&[m, n], out)
}

impl<T: Float> Graph<T> {
    /// Matrix product with adjoints `dA = dY Bᵀ` and `dB = Aᵀ dY`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_values(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], |args| {
            let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
            let [m, k] = a.dims2()?;
            let n = b.shape()[1];
            let mut ga = None;
            let mut gb = None;
            if args.needs[0] {
                let mut d = vec![T::zero(); m * k];
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    n as isize,
                    1,
                    b.data(),
                    1,
                    n as isize,
                    T::zero(),
                    &mut d,
                    k as isize,
                    1,
                );
                ga = Some(Tensor::from_vec(&[m, k], d)?);
            }
            if args.needs[1] {
                let mut d = vec![T::zero(); k * n];
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    a.data(),
                    1,
                    k as isize,
                    g.data(),
                    n as isize,
                    1,
                    T::zero(),
                    &mut d,
                    n as isize,
                    1,
                );
                gb = Some(Tensor::from_vec(&[k, n], d)?);
            }
            Ok(vec![ga, gb])
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        Ok(self.record(out, &[a], |args| Ok(vec![Some(args.grad.transpose2()?)])))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.record(out, &[a], |args| {
            Ok(vec![Some(args.grad.reshape(args.inputs[0].shape())?)])
        }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(out, &[a], |args| {
            let g = args.grad.data()[0];
            Ok(vec![Some(Tensor::full(args.inputs[0].shape(), g))])
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = T::from_f64(t.len() as f64);
        let out = Tensor::scalar(t.sum() / n);
        self.record(out, &[a], move |args| {
            let g = args.grad.data()[0] / n;
            Ok(vec![Some(Tensor::full(args.inputs[0].shape(), g))])
        })
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let [rows, cols] = t.dims2()?;
        if start + len > rows {
            return Err(Error::ShapeMismatch(format!(
                "rows {start}..{} of a {rows}-row table",
                start + len
            )));
        }
        let out = Tensor::from_vec(&[len, cols], t.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.record(out, &[a], move |args| {
            let mut g = Tensor::zeros(args.inputs[0].shape());
            g.data_mut()[start * cols..(start + len) * cols].copy_from_slice(args.grad.data());
            Ok(vec![Some(g)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap());
        let m = g.constant(Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn row_times_column() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[1, 2], vec![1., 2.]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2, 1], vec![3., 4.]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.]);
    }

    #[test]
    fn inner_extent_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn slice_rows_scatters_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(&[4, 2], (0..8).map(f64::from).collect()).unwrap());
        let s = g.slice_rows(a, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2., 3., 4., 5.]);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0., 0., 1., 1., 1., 1., 0., 0.]);
    }
}
