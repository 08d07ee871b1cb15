use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel mean/variance pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> ChannelStats<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential moving update with the batch statistics.
    pub fn update(&mut self, batch: &ChannelStats<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// `x` is viewed as `[B, C, rest...]`; statistics run over `B` and `rest`.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm needs [B, C, ...], got {shape:?}"
        )));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

impl<T: Float> Graph<T> {
    /// Batch normalization.
    ///
    /// In training mode the batch mean and biased variance normalize the
    /// input and the returned stats (mean, unbiased variance) are meant for
    /// the running-average update. In eval mode `running` is used and no
    /// stats are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &ChannelStats<T>,
        training: bool,
    ) -> Result<(Var, Option<ChannelStats<T>>)> {
        let (b, c, inner) = layout(self.value(x).shape())?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm over {c} channels with gamma {:?}",
                self.value(gamma).shape()
            )));
        }
        let count = b * inner;
        if training && count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let eps = T::from_f64(BN_EPS);
        let xs = self.value(x).data();
        let (mean, var) = if training {
            let n = T::from_f64(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for n_ in 0..b {
                    for &v in &xs[(n_ * c + ch) * inner..][..inner] {
                        s += v;
                    }
                }
                let m = s / n;
                let mut ss = T::zero();
                for n_ in 0..b {
                    for &v in &xs[(n_ * c + ch) * inner..][..inner] {
                        ss += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = ss / n;
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for n_ in 0..b {
            for ch in 0..c {
                let base = (n_ * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gm[ch] * h + bt[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let stats = training.then(|| {
            let unbias = if count > 1 {
                T::from_f64(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            ChannelStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * unbias).collect(),
            }
        });
        let out = Tensor::from_vec(&shape, out)?;
        let y = self.record(out, &[x, gamma, beta], move |args| {
            let g = args.grad.data();
            let gm = args.inputs[1].data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for n_ in 0..b {
                for ch in 0..c {
                    let base = (n_ * c + ch) * inner;
                    for i in base..base + inner {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let dx = if args.needs[0] {
                let mut dx = vec![T::zero(); g.len()];
                let n = T::from_f64(count as f64);
                for n_ in 0..b {
                    for ch in 0..c {
                        let base = (n_ * c + ch) * inner;
                        let scale = gm[ch] * inv_std[ch];
                        for i in base..base + inner {
                            dx[i] = if training {
                                scale * (g[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                Some(Tensor::from_vec(&shape, dx)?)
            } else {
                None
            };
            Ok(vec![
                dx,
                Some(Tensor::from_vec(&[c], dgamma)?),
                Some(Tensor::from_vec(&[c], dbeta)?),
            ])
        });
        Ok((y, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(g: &mut Graph<f64>, c: usize) -> (Var, Var) {
        (g.leaf(Tensor::ones(&[c])), g.leaf(Tensor::zeros(&[c])))
    }

    #[test]
    fn normalized_channel_unchanged() {
        let mut g = Graph::<f64>::new();
        // mean 0, biased variance 1
        let x = g.leaf(Tensor::from_vec(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap());
        let (gm, bt) = affine(&mut g, 1);
        let (y, stats) = g.batch_norm(x, gm, bt, &ChannelStats::identity(1), true).unwrap();
        for (a, b) in g.value(y).data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert!((stats.var[0] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2, 1, 2, 2], 7.0));
        let (gm, bt) = affine(&mut g, 1);
        let (y, _) = g.batch_norm(x, gm, bt, &ChannelStats::identity(1), true).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_value_batch_is_degenerate() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[1, 3]));
        let (gm, bt) = affine(&mut g, 3);
        assert!(matches!(
            g.batch_norm(x, gm, bt, &ChannelStats::identity(3), true),
            Err(Error::DegenerateBatch(1))
        ));
        // eval mode is fine
        assert!(g.batch_norm(x, gm, bt, &ChannelStats::identity(3), false).is_ok());
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut r = ChannelStats::<f64>::identity(1);
        r.update(
            &ChannelStats {
                mean: vec![1.0],
                var: vec![3.0],
            },
            BN_MOMENTUM,
        );
        assert!((r.mean[0] - 0.1).abs() < 1e-15);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
    }
}
