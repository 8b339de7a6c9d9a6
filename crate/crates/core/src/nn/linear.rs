use super::{gemm, shape_err, NnError, Real, Tensor};

pub struct LinearGrads<R> {
    pub input: Tensor<R>,
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

fn dims<R: Real>(input: &Tensor<R>, weight: &Tensor<R>) -> Result<(usize, usize, usize), NnError> {
    weight.expect_rank(2, "linear weight")?;
    let (c, d) = (weight.shape()[0], weight.shape()[1]);
    let Some(&last) = input.shape().last() else {
        return Err(shape_err("linear: scalar input"));
    };
    if last != d {
        return Err(shape_err(format!(
            "linear: input width {last}, weight expects {d}"
        )));
    }
    Ok((input.len() / d, d, c))
}

/// Affine map over the last axis: `[..., D] x [C, D] -> [..., C]`.
pub fn linear<R: Real>(input: &Tensor<R>, weight: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>, NnError> {
    let (m, d, c) = dims(input, weight)?;
    if bias.shape() != [c] {
        return Err(shape_err(format!("linear: bias {:?}, expected [{c}]", bias.shape())));
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = c;
    let mut out = Tensor::zeros(&shape);
    for row in out.data_mut().chunks_mut(c) {
        row.copy_from_slice(bias.data());
    }
    gemm(m, d, c, input.data(), false, weight.data(), true, out.data_mut(), true);
    Ok(out)
}

pub fn linear_backward<R: Real>(
    input: &Tensor<R>,
    weight: &Tensor<R>,
    grad_out: &Tensor<R>,
) -> Result<LinearGrads<R>, NnError> {
    let (m, d, c) = dims(input, weight)?;
    if grad_out.len() != m * c {
        return Err(shape_err("linear backward: gradient shape mismatch"));
    }
    let mut dx = Tensor::zeros(input.shape());
    gemm(m, c, d, grad_out.data(), false, weight.data(), false, dx.data_mut(), false);
    let mut dw = Tensor::zeros(weight.shape());
    gemm(c, m, d, grad_out.data(), true, input.data(), false, dw.data_mut(), false);
    let mut db = Tensor::zeros(&[c]);
    for row in grad_out.data().chunks(c) {
        for (a, &b) in db.data_mut().iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok(LinearGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let x = Tensor::<f64>::from_f64(&[2, 1, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
    }

    #[test]
    fn zero_weight_broadcasts_bias() {
        let x = Tensor::<f64>::full(&[4, 2, 5], 3.0);
        let b = Tensor::from_f64(&[2], &[0.25, -1.0]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[2, 5]), &b).unwrap();
        assert_eq!(y.shape(), &[4, 2, 2]);
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn two_by_three_dot_products() {
        let x = [0.3, -1.2, 2.0];
        let w = [[0.5, 0.1, -0.4], [1.5, 2.0, 0.25]];
        let b = [0.05, -0.3];
        let y = linear(
            &Tensor::<f64>::from_f64(&[1, 1, 3], &x).unwrap(),
            &Tensor::from_f64(&[2, 3], &w.concat()).unwrap(),
            &Tensor::from_f64(&[2], &b).unwrap(),
        )
        .unwrap();
        for c in 0..2 {
            let want: f64 = b[c] + (0..3).map(|j| w[c][j] * x[j]).sum::<f64>();
            assert!((y.data()[c] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn width_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4]);
        assert!(linear(&x, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])).is_err());
    }
}
