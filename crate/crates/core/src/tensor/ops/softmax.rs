use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Denominator guard of the masked softmax.
pub const MASK_EPS: f64 = 1e-12;

/// Row-wise masked softmax over the last axis of `logits`.
///
/// `mask` must have the shape of a trailing suffix of `logits` (at least the
/// last axis) and is broadcast over the leading axes. Each row computes
///
/// ```text
/// out_i = exp(a_i - max a) * m_i / (sum_j exp(a_j - max a) * m_j + eps)
/// ```
///
/// Returns the weights and, for backward, the per-row normalizers.
pub(crate) fn softmax_masked_rows<T: Float>(
    logits: &[T],
    mask: &[T],
    row_len: usize,
    eps: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let rows = logits.len() / row_len;
    let mask_rows = mask.len() / row_len;
    let mut out = vec![T::zero(); logits.len()];
    let mut norms = vec![T::zero(); rows];
    for r in 0..rows {
        let a = &logits[r * row_len..(r + 1) * row_len];
        let m = &mask[(r % mask_rows) * row_len..][..row_len];
        let amax = a.iter().copied().fold(T::neg_infinity(), T::max);
        let o = &mut out[r * row_len..(r + 1) * row_len];
        let mut z = T::zero();
        for i in 0..row_len {
            let e = (a[i] - amax).exp() * m[i];
            o[i] = e;
            z += e;
        }
        z += eps;
        if z == T::zero() {
            return Err(Error::AllMaskedWithoutEpsilon { row: r });
        }
        for v in o.iter_mut() {
            *v /= z;
        }
        norms[r] = z;
    }
    Ok((out, norms))
}

impl<T: Float> Graph<T> {
    /// Masked softmax with gradients to both `logits` and `mask`.
    pub fn softmax_masked(&mut self, logits: Var, mask: Var, eps: f64) -> Result<Var> {
        let (ls, ms) = (self.value(logits).shape(), self.value(mask).shape());
        if ms.is_empty() || ms.len() > ls.len() || ls[ls.len() - ms.len()..] != *ms {
            return Err(Error::ShapeMismatch(format!(
                "mask {ms:?} is not a suffix of logits {ls:?}"
            )));
        }
        if ms.iter().any(|&d| d == 0) || self.value(mask).data().iter().any(|&m| m < T::zero() || m > T::one()) {
            return Err(Error::ShapeMismatch("mask entries must lie in [0, 1]".into()));
        }
        let row_len = *ls.last().unwrap();
        let eps_t = T::from_f64(eps);
        let (out, norms) = softmax_masked_rows(self.value(logits).data(), self.value(mask).data(), row_len, eps_t)?;
        let out = Tensor::from_vec(ls, out)?;
        Ok(self.record(out, &[logits, mask], move |args| {
            let (a, m, y, g) = (args.inputs[0], args.inputs[1], args.output, args.grad);
            let mask_rows = m.len() / row_len;
            let mut da = args.needs[0].then(|| vec![T::zero(); a.len()]);
            let mut dm = args.needs[1].then(|| vec![T::zero(); m.len()]);
            for (r, &z) in norms.iter().enumerate() {
                let span = r * row_len..(r + 1) * row_len;
                let (ar, yr, gr) = (&a.data()[span.clone()], &y.data()[span.clone()], &g.data()[span]);
                let mo = (r % mask_rows) * row_len;
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                if let Some(da) = da.as_mut() {
                    let dar = &mut da[r * row_len..(r + 1) * row_len];
                    let mut kmax = 0;
                    for i in 0..row_len {
                        dar[i] = yr[i] * (gr[i] - dot);
                        if ar[i] > ar[kmax] {
                            kmax = i;
                        }
                    }
                    // the max shift does not cancel against eps
                    dar[kmax] -= eps_t / z * dot;
                }
                if let Some(dm) = dm.as_mut() {
                    let amax = ar.iter().copied().fold(T::neg_infinity(), T::max);
                    for i in 0..row_len {
                        let e = (ar[i] - amax).exp();
                        dm[mo + i] += e / z * (gr[i] - dot);
                    }
                }
            }
            Ok(vec![
                da.map(|d| Tensor::from_vec(a.shape(), d)).transpose()?,
                dm.map(|d| Tensor::from_vec(m.shape(), d)).transpose()?,
            ])
        }))
    }

    /// Mean cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [b, k] = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::ShapeMismatch(format!("{b} logit rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::ShapeMismatch(format!("label {bad} for {k} classes")));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &data[r * k..(r + 1) * k];
            let amax = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - amax).exp();
                z += *p;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            loss += z.ln() + amax - row[labels[r]];
        }
        let inv_b = T::one() / T::from_f64(b as f64);
        let labels = labels.to_vec();
        let out = Tensor::scalar(loss * inv_b);
        Ok(self.record(out, &[logits], move |args| {
            let g = args.grad.data()[0] * inv_b;
            let mut d = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                d[r * k + l] -= T::one();
            }
            for v in &mut d {
                *v *= g;
            }
            Ok(vec![Some(Tensor::from_vec(&[b, k], d)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(logits: &[f64], mask: &[f64], eps: f64) -> Result<Vec<f64>> {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(&[logits.len()], logits.to_vec()).unwrap());
        let m = g.leaf(Tensor::from_vec(&[mask.len()], mask.to_vec()).unwrap());
        let y = g.softmax_masked(a, m, eps)?;
        Ok(g.value(y).data().to_vec())
    }

    #[test]
    fn half_mask_two_way_uniform() {
        let y = run(&[0.0, 0.0, 0.0], &[1.0, 1.0, 0.0], MASK_EPS).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-12 && (y[1] - 0.5).abs() < 1e-12);
        assert_eq!(y[2], 0.0);
    }

    #[test]
    fn unit_mask_is_plain_softmax() {
        let a = [0.3, -1.2, 2.0, 0.0];
        let y = run(&a, &[1.0; 4], 0.0).unwrap();
        let z: f64 = a.iter().map(|v| v.exp()).sum();
        for (yi, ai) in y.iter().zip(a) {
            assert!((yi - ai.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn fractional_mask_normalizer() {
        let y = run(&[2f64.ln(), 0.0], &[1.0, 0.5], MASK_EPS).unwrap();
        assert!((y[0] - 0.8).abs() < 1e-12);
        assert!((y[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_needs_epsilon() {
        assert!(matches!(
            run(&[1.0, 2.0], &[0.0, 0.0], 0.0),
            Err(Error::AllMaskedWithoutEpsilon { row: 0 })
        ));
        let y = run(&[1.0, 2.0], &[0.0, 0.0], MASK_EPS).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn mask_broadcasts_over_rows() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[3, 2, 4]));
        let m = g.constant(Tensor::from_vec(&[2, 4], vec![1., 1., 0., 0., 1., 1., 1., 1.]).unwrap());
        let y = g.softmax_masked(a, m, MASK_EPS).unwrap();
        let v = g.value(y);
        assert!((v.at(&[2, 0, 1]) - 0.5).abs() < 1e-12);
        assert!((v.at(&[2, 1, 3]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        g.backward(l).unwrap();
        let d = g.grad(x).unwrap();
        assert!((d.at(&[0, 0]) - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((d.at(&[1, 0]) - 0.125).abs() < 1e-15);
    }
}
