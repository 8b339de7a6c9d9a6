use super::{shape_err, NnError, Real, Tensor};

/// `x - logsumexp(x)` along the last axis, with max subtraction.
/// Accumulation happens in f64 regardless of `R`.
pub fn log_softmax<R: Real>(input: &Tensor<R>) -> Tensor<R> {
    let c = *input.shape().last().expect("rank >= 1");
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v = R::of(v.f64() - lse);
        }
    }
    out
}

/// Backward of [`log_softmax`] given its output `y`: `dx = dy - softmax * sum(dy)`.
pub fn log_softmax_backward<R: Real>(output: &Tensor<R>, grad_out: &Tensor<R>) -> Result<Tensor<R>, NnError> {
    if output.shape() != grad_out.shape() {
        return Err(shape_err("log_softmax backward: gradient shape mismatch"));
    }
    let c = *output.shape().last().expect("rank >= 1");
    let mut dx = grad_out.clone();
    for (dxr, yr) in dx.data_mut().chunks_mut(c).zip(output.data().chunks(c)) {
        let s: f64 = dxr.iter().map(|v| v.f64()).sum();
        for (d, y) in dxr.iter_mut().zip(yr) {
            *d = R::of(d.f64() - y.f64().exp() * s);
        }
    }
    Ok(dx)
}

pub fn relu_inplace<R: Real>(x: &mut Tensor<R>) {
    for v in x.data_mut() {
        if *v < R::zero() {
            *v = R::zero();
        }
    }
}

/// Masks `grad` in place where the ReLU output was not positive.
pub fn relu_backward<R: Real>(output: &Tensor<R>, grad: &mut Tensor<R>) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= R::zero() {
            *g = R::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let x = Tensor::<f64>::full(&[3, 5], 2.5);
        let y = log_softmax(&x);
        assert!(y.data().iter().all(|v| (v - (0.2f64).ln()).abs() < 1e-15));
    }

    #[test]
    fn shift_invariance() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.1, -2.0, 3.0, 1.0, 1.5, -0.5]).unwrap();
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 123.0);
        assert!(log_softmax(&x).max_abs_diff(&log_softmax(&shifted)) < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let y = log_softmax(&Tensor::<f64>::from_f64(&[2], &[1000.0, 0.0]).unwrap());
        assert!(y.data()[0].abs() < 1e-12);
        assert!((y.data()[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn rows_normalize() {
        let x = Tensor::<f32>::from_f64(&[4, 250], &(0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        for row in log_softmax(&x).data().chunks(250) {
            let s: f64 = row.iter().map(|v| (*v as f64).exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
