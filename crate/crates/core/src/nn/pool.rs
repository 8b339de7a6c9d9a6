use super::{shape_err, NnError, Real, Tensor};

pub fn pool_output_size(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input < kernel {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

/// Argmax positions (flat indices into the input) for each pooled output.
#[derive(Clone, Debug)]
pub struct PoolCache {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Windowed maximum over `[N,C,H,W]`. Ties resolve to the first element in
/// row-major window order.
pub fn maxpool2d<R: Real>(
    input: &Tensor<R>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<R>, PoolCache), NnError> {
    input.expect_rank(4, "maxpool2d input")?;
    let &[n, c, h, w] = input.shape() else { unreachable!() };
    let (Some(oh), Some(ow)) = (
        pool_output_size(h, kernel.0, stride.0),
        pool_output_size(w, kernel.1, stride.1),
    ) else {
        return Err(shape_err(format!(
            "maxpool2d: window {kernel:?} does not fit {h}x{w}"
        )));
    };
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    let y = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride.0 * w + ox * stride.1;
                let mut best_v = x[best];
                for ki in 0..kernel.0 {
                    let row = base + (oy * stride.0 + ki) * w + ox * stride.1;
                    for kj in 0..kernel.1 {
                        let v = x[row + kj];
                        if v > best_v {
                            best_v = v;
                            best = row + kj;
                        }
                    }
                }
                y[o] = best_v;
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok((
        out,
        PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<R: Real>(cache: &PoolCache, grad_out: &Tensor<R>) -> Result<Tensor<R>, NnError> {
    if grad_out.len() != cache.argmax.len() {
        return Err(shape_err("maxpool2d backward: gradient does not match cached output"));
    }
    let mut dx = Tensor::zeros(&cache.input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}
