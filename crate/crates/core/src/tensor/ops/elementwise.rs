use crate::error::{Error, Result};
use crate::tensor::{broadcast_offsets, broadcast_shape, reduce_to_shape, Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Relu,
    Neg,
    /// Gradient 1 strictly inside `(lo, hi)`, 0 at or beyond the bounds.
    Clamp {
        lo: f64,
        hi: f64,
    },
}

/// Broadcasting binary kernel. Returns the output plus the per-element
/// offsets into each operand so backward can reuse them.
fn broadcast_apply<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Tensor<T>, Option<(Vec<usize>, Vec<usize>)>)> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((Tensor::from_vec(a.shape(), data)?, None));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let oa = broadcast_offsets(a.shape(), &shape);
    let ob = broadcast_offsets(b.shape(), &shape);
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
    Ok((Tensor::from_vec(&shape, data)?, Some((oa, ob))))
}

impl<T: Float> Graph<T> {
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if op == BinaryOp::Div {
            if let Some(index) = tb.data().iter().position(|v| *v == T::zero()) {
                return Err(Error::DivisionByZero { index });
            }
        }
        let (out, _) = match op {
            BinaryOp::Add => broadcast_apply(ta, tb, |x, y| x + y)?,
            BinaryOp::Sub => broadcast_apply(ta, tb, |x, y| x - y)?,
            BinaryOp::Mul => broadcast_apply(ta, tb, |x, y| x * y)?,
            BinaryOp::Div => broadcast_apply(ta, tb, |x, y| x / y)?,
        };
        Ok(self.record(out, &[a, b], move |args| {
            let (x, y, g) = (args.inputs[0], args.inputs[1], args.grad);
            let shape = g.shape();
            let ox = broadcast_offsets(x.shape(), shape);
            let oy = broadcast_offsets(y.shape(), shape);
            let mut gx = None;
            let mut gy = None;
            if args.needs[0] {
                let full: Vec<T> = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.data().to_vec(),
                    BinaryOp::Mul => g.data().iter().zip(&oy).map(|(&gv, &j)| gv * y.data()[j]).collect(),
                    BinaryOp::Div => g.data().iter().zip(&oy).map(|(&gv, &j)| gv / y.data()[j]).collect(),
                };
                gx = Some(reduce_to_shape(&Tensor::from_vec(shape, full)?, x.shape()));
            }
            if args.needs[1] {
                let full: Vec<T> = match op {
                    BinaryOp::Add => g.data().to_vec(),
                    BinaryOp::Sub => g.data().iter().map(|&gv| -gv).collect(),
                    BinaryOp::Mul => g.data().iter().zip(&ox).map(|(&gv, &i)| gv * x.data()[i]).collect(),
                    BinaryOp::Div => g
                        .data()
                        .iter()
                        .zip(ox.iter().zip(&oy))
                        .map(|(&gv, (&i, &j))| {
                            let yv = y.data()[j];
                            -gv * x.data()[i] / (yv * yv)
                        })
                        .collect(),
                };
                gy = Some(reduce_to_shape(&Tensor::from_vec(shape, full)?, y.shape()));
            }
            Ok(vec![gx, gy])
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.record(out, &[a], |args| Ok(vec![Some(args.grad.clone())]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.record(out, &[a], move |args| Ok(vec![Some(args.grad.map(|g| g * s))]))
    }

    pub fn div_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        if s == T::zero() {
            return Err(Error::DivisionByZero { index: 0 });
        }
        let out = self.value(a).map(|v| v / s);
        Ok(self.record(out, &[a], move |args| Ok(vec![Some(args.grad.map(|g| g / s))])))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let x = self.value(a);
        let out = match op {
            UnaryOp::Exp => x.map(|v| v.exp()),
            UnaryOp::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            UnaryOp::Neg => x.map(|v| -v),
            UnaryOp::Clamp { lo, hi } => {
                let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
                x.map(|v| v.max(lo).min(hi))
            }
        };
        self.record(out, &[a], move |args| {
            let (x, y, g) = (args.inputs[0], args.output, args.grad);
            let data: Vec<T> = match op {
                UnaryOp::Exp => g.data().iter().zip(y.data()).map(|(&g, &y)| g * y).collect(),
                UnaryOp::Relu => g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
                UnaryOp::Neg => g.data().iter().map(|&g| -g).collect(),
                UnaryOp::Clamp { lo, hi } => {
                    let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &x)| if x > lo && x < hi { g } else { T::zero() })
                        .collect()
                }
            };
            Ok(vec![Some(Tensor::from_vec(g.shape(), data)?)])
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryOp::Clamp { lo, hi }, a)
    }

    /// Projection onto `[lo, hi]`: clamps the value but passes the gradient
    /// through unchanged, so a parameter sitting on a bound can still move
    /// back inside.
    pub fn project(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.value(a).map(|v| v.max(l).min(h));
        self.record(out, &[a], |args| Ok(vec![Some(args.grad.clone())]))
    }
}
