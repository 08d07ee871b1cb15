use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Geometry of a sliding square window over an `h x w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::EvenKernel(kernel));
        }
        if stride == 0 {
            return Err(Error::NonPositiveStride);
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    /// Window with `(k - 1) / 2` zero padding, preserving size at stride 1.
    pub fn same(kernel: usize) -> Result<Self> {
        Self::new(kernel, 1, kernel.saturating_sub(1) / 2)
    }

    pub fn out_extent(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "kernel {} larger than padded input {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// Zero-padded neighborhoods of one `[c, h, w]` image as columns of a
/// `[c * k * k, out_h * out_w]` matrix.
pub(crate) fn im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, win: Window, out: &mut [T]) {
    let k = win.kernel;
    let oh = (h + 2 * win.padding - k) / win.stride + 1;
    let ow = (w + 2 * win.padding - k) / win.stride + 1;
    let l = oh * ow;
    debug_assert_eq!(out.len(), c * k * k * l);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut out[((ch * k + ki) * k + kj) * l..][..l];
                for oi in 0..oh {
                    let ii = (oi * win.stride + ki) as isize - win.padding as isize;
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * win.stride + kj) as isize - win.padding as isize;
                        *d = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the image.
pub(crate) fn col2im<T: Float>(cols: &[T], c: usize, h: usize, w: usize, win: Window, out: &mut [T]) {
    let k = win.kernel;
    let oh = (h + 2 * win.padding - k) / win.stride + 1;
    let ow = (w + 2 * win.padding - k) / win.stride + 1;
    let l = oh * ow;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * l..][..l];
                for oi in 0..oh {
                    let ii = (oi * win.stride + ki) as isize - win.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * win.stride + kj) as isize - win.padding as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += row[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

fn dims3<T: Float>(t: &Tensor<T>) -> Result<[usize; 3]> {
    match t.shape()[..] {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::ShapeMismatch(format!("expected [C, H, W], got {:?}", t.shape()))),
    }
}

impl<T: Float> Graph<T> {
    /// `[C, H, W]` to `[C * k * k, L]` neighborhood columns.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let win = Window::new(kernel, stride, padding)?;
        let [c, h, w] = dims3(self.value(x))?;
        let l = win.out_extent(h)? * win.out_extent(w)?;
        let mut cols = vec![T::zero(); c * kernel * kernel * l];
        im2col(self.value(x).data(), c, h, w, win, &mut cols);
        let out = Tensor::from_vec(&[c * kernel * kernel, l], cols)?;
        Ok(self.record(out, &[x], move |args| {
            let mut dx = vec![T::zero(); c * h * w];
            col2im(args.grad.data(), c, h, w, win, &mut dx);
            Ok(vec![Some(Tensor::from_vec(&[c, h, w], dx)?)])
        }))
    }

    /// Batched cross-correlation `[B, Cin, H, W] * [Cout, Cin, k, k]`,
    /// computed as unfold followed by a matrix product per image.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, cin, h, w] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4()?;
        if wcin != cin || kh != kw {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} with weight {:?}",
                self.value(x).shape(),
                self.value(weight).shape()
            )));
        }
        let win = Window::new(kh, stride, padding)?;
        let (oh, ow) = (win.out_extent(h)?, win.out_extent(w)?);
        let geom = ConvGeom {
            b,
            cin,
            h,
            w,
            cout,
            oh,
            ow,
            win,
        };
        let out = geom.forward(self.value(x).data(), self.value(weight).data());
        let out = Tensor::from_vec(&[b, cout, oh, ow], out)?;
        Ok(self.record(out, &[x, weight], move |args| {
            let (dx, dw) = geom.backward(
                args.inputs[0].data(),
                args.inputs[1].data(),
                args.grad.data(),
                args.needs,
            );
            Ok(vec![
                dx.map(|d| Tensor::from_vec(&[b, cin, h, w], d)).transpose()?,
                dw.map(|d| Tensor::from_vec(&[cout, cin, kh, kw], d)).transpose()?,
            ])
        }))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("avg_pool2 on odd plane {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let plane = &src[p * h * w..];
            for i in 0..oh {
                for j in 0..ow {
                    let s = plane[2 * i * w + 2 * j]
                        + plane[2 * i * w + 2 * j + 1]
                        + plane[(2 * i + 1) * w + 2 * j]
                        + plane[(2 * i + 1) * w + 2 * j + 1];
                    out[p * oh * ow + i * ow + j] = s * quarter;
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, oh, ow], out)?;
        Ok(self.record(out, &[x], move |args| {
            let g = args.grad.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for i in 0..h {
                    for j in 0..w {
                        dx[p * h * w + i * w + j] = g[p * oh * ow + (i / 2) * ow + j / 2] * quarter;
                    }
                }
            }
            Ok(vec![Some(Tensor::from_vec(&[b, c, h, w], dx)?)])
        }))
    }

    /// `[B, C, H, W]` to channel-last rows `[B * H * W, C]`.
    pub fn to_pixel_rows(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let out = nchw_to_rows(self.value(x).data(), b, c, h * w);
        let out = Tensor::from_vec(&[b * h * w, c], out)?;
        Ok(self.record(out, &[x], move |args| {
            let dx = rows_to_nchw(args.grad.data(), b, c, h * w);
            Ok(vec![Some(Tensor::from_vec(&[b, c, h, w], dx)?)])
        }))
    }

    /// Inverse of [`Graph::to_pixel_rows`].
    pub fn from_pixel_rows(&mut self, y: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let [n, c] = self.value(y).dims2()?;
        if n != b * h * w {
            return Err(Error::ShapeMismatch(format!("{n} rows for a {b}x{h}x{w} grid")));
        }
        let out = rows_to_nchw(self.value(y).data(), b, c, h * w);
        let out = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.record(out, &[y], move |args| {
            let dy = nchw_to_rows(args.grad.data(), b, c, h * w);
            Ok(vec![Some(Tensor::from_vec(&[n, c], dy)?)])
        }))
    }

    /// `[B, C, H, W]` to `[B, C]` spatial means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_f64(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[b, c], out)?;
        Ok(self.record(out, &[x], move |args| {
            let dx: Vec<T> = args
                .grad
                .data()
                .iter()
                .flat_map(|&g| std::iter::repeat(g * inv).take(hw))
                .collect();
            Ok(vec![Some(Tensor::from_vec(&[b, c, h, w], dx)?)])
        }))
    }
}

fn nchw_to_rows<T: Float>(src: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for n in 0..b {
        for ch in 0..c {
            let plane = &src[(n * c + ch) * hw..][..hw];
            for (p, &v) in plane.iter().enumerate() {
                out[(n * hw + p) * c + ch] = v;
            }
        }
    }
    out
}

fn rows_to_nchw<T: Float>(src: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for n in 0..b {
        for p in 0..hw {
            let row = &src[(n * hw + p) * c..][..c];
            for (ch, &v) in row.iter().enumerate() {
                out[(n * c + ch) * hw + p] = v;
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    win: Window,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.win.kernel == 1 && self.win.stride == 1 && self.win.padding == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.win.kernel * self.win.kernel
    }

    fn forward<T: Float>(&self, x: &[T], weight: &[T]) -> Vec<T> {
        let (l, rows) = (self.oh * self.ow, self.rows());
        let mut out = vec![T::zero(); self.b * self.cout * l];
        let mut cols = if self.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * l]
        };
        for n in 0..self.b {
            let xb = &x[n * self.cin * self.h * self.w..(n + 1) * self.cin * self.h * self.w];
            let src: &[T] = if self.pointwise() {
                xb
            } else {
                im2col(xb, self.cin, self.h, self.w, self.win, &mut cols);
                &cols
            };
            let dst = &mut out[n * self.cout * l..(n + 1) * self.cout * l];
            T::gemm(
                self.cout,
                rows,
                l,
                T::one(),
                weight,
                rows as isize,
                1,
                src,
                l as isize,
                1,
                T::zero(),
                dst,
                l as isize,
                1,
            );
        }
        out
    }

    fn backward<T: Float>(
        &self,
        x: &[T],
        weight: &[T],
        grad: &[T],
        needs: &[bool],
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let (l, rows) = (self.oh * self.ow, self.rows());
        let img = self.cin * self.h * self.w;
        let mut dx = needs[0].then(|| vec![T::zero(); self.b * img]);
        let mut dw = needs[1].then(|| vec![T::zero(); self.cout * rows]);
        let mut cols = if self.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * l]
        };
        let mut dcols = if dx.is_some() && !self.pointwise() {
            vec![T::zero(); rows * l]
        } else {
            Vec::new()
        };
        for n in 0..self.b {
            let xb = &x[n * img..(n + 1) * img];
            let gb = &grad[n * self.cout * l..(n + 1) * self.cout * l];
            if let Some(dw) = dw.as_mut() {
                let src: &[T] = if self.pointwise() {
                    xb
                } else {
                    im2col(xb, self.cin, self.h, self.w, self.win, &mut cols);
                    &cols
                };
                // dW += dY * cols^T
                T::gemm(
                    self.cout,
                    l,
                    rows,
                    T::one(),
                    gb,
                    l as isize,
                    1,
                    src,
                    1,
                    l as isize,
                    T::one(),
                    dw,
                    rows as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[n * img..(n + 1) * img];
                // dcols = W^T * dY
                if self.pointwise() {
                    T::gemm(
                        rows,
                        self.cout,
                        l,
                        T::one(),
                        weight,
                        1,
                        rows as isize,
                        gb,
                        l as isize,
                        1,
                        T::zero(),
                        dxb,
                        l as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        rows,
                        self.cout,
                        l,
                        T::one(),
                        weight,
                        1,
                        rows as isize,
                        gb,
                        l as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        l as isize,
                        1,
                    );
                    col2im(&dcols, self.cin, self.h, self.w, self.win, dxb);
                }
            }
        }
        (dx, dw)
    }
}
