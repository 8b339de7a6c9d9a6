use super::{gemm, shape_err, NnError, Real, Tensor};

/// Output extent of a convolution along one axis; `None` if the kernel does
/// not fit or the stride does not tile the padded input exactly.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: (usize, usize),
    padding: (usize, usize),
}

impl Geometry {
    fn new<R: Real>(
        input: &Tensor<R>,
        weight: &Tensor<R>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self, NnError> {
        input.expect_rank(4, "conv2d input")?;
        weight.expect_rank(4, "conv2d weight")?;
        let &[n, cin, h, w] = input.shape() else { unreachable!() };
        let &[cout, wcin, kh, kw] = weight.shape() else { unreachable!() };
        if wcin != cin {
            return Err(shape_err(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        let oh = conv_output_size(h, kh, stride.0, padding.0);
        let ow = conv_output_size(w, kw, stride.1, padding.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(shape_err(format!(
                "conv2d: kernel {kh}x{kw} stride {stride:?} padding {padding:?} does not tile {h}x{w}"
            )));
        };
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one sample `[cin, h, w]` into `[cin*kh*kw, oh*ow]`.
    fn im2col<R: Real>(&self, x: &[R], cols: &mut [R]) {
        let p = self.positions();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let out = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride.0 + ki) as isize - self.padding.0 as isize;
                        let dst = &mut out[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = R::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride.1 + kj) as isize - self.padding.1 as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                R::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters `[cin*kh*kw, oh*ow]` back onto `[cin, h, w]`.
    fn col2im<R: Real>(&self, cols: &[R], dx: &mut [R]) {
        let p = self.positions();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride.0 + ki) as isize - self.padding.0 as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride.1 + kj) as isize - self.padding.1 as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation plus bias: `[N,Cin,H,W] x [Cout,Cin,kh,kw] -> [N,Cout,H',W']`.
pub fn conv2d<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    bias: &Tensor<R>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<R>, NnError> {
    let g = Geometry::new(input, weight, stride, padding)?;
    if bias.shape() != [g.cout] {
        return Err(shape_err(format!(
            "conv2d: bias shape {:?}, expected [{}]",
            bias.shape(),
            g.cout
        )));
    }
    let (k, p) = (g.k(), g.positions());
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow]);
    let mut cols = vec![R::zero(); k * p];
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    for s in 0..g.n {
        g.im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        let y = &mut out.data_mut()[s * out_stride..(s + 1) * out_stride];
        for (co, row) in y.chunks_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        gemm(g.cout, k, p, weight.data(), false, &cols, false, y, true);
    }
    Ok(out)
}

pub struct Conv2dGrads<R> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<R>>,
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

pub fn conv2d_backward<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    grad_out: &Tensor<R>,
    stride: (usize, usize),
    padding: (usize, usize),
    want_input: bool,
) -> Result<Conv2dGrads<R>, NnError> {
    let g = Geometry::new(input, weight, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(shape_err(format!(
            "conv2d backward: grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.oh, g.ow]
        )));
    }
    let (k, p) = (g.k(), g.positions());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[g.cout]);
    let mut dx = want_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![R::zero(); k * p];
    let mut dcols = vec![R::zero(); if want_input { k * p } else { 0 }];
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * p;
    for s in 0..g.n {
        let dy = &grad_out.data()[s * out_stride..(s + 1) * out_stride];
        for (co, row) in dy.chunks(p).enumerate() {
            db.data_mut()[co] += row.iter().copied().sum::<R>();
        }
        g.im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        // dW[cout, k] += dY[cout, p] * cols[k, p]^T
        gemm(g.cout, p, k, dy, false, &cols, true, dw.data_mut(), true);
        if let Some(dx) = dx.as_mut() {
            // dcols[k, p] = W[cout, k]^T * dY[cout, p]
            gemm(k, g.cout, p, weight.data(), true, dy, false, &mut dcols, false);
            g.col2im(&dcols, &mut dx.data_mut()[s * in_stride..(s + 1) * in_stride]);
        }
    }
    Ok(Conv2dGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}
