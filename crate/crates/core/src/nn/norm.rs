use super::{shape_err, NnError, Real, Tensor};

/// Normalized activations and per-(sample, group) inverse std, kept for backward.
#[derive(Clone, Debug)]
pub struct GroupNormCache<R> {
    pub xhat: Tensor<R>,
    pub rstd: Vec<R>,
    pub groups: usize,
}

pub struct GroupNormGrads<R> {
    pub input: Tensor<R>,
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
}

/// GroupNorm over `[N,C,H,W]`: statistics per sample and per group of `C/G`
/// channels, never across the batch.
pub fn group_norm<R: Real>(
    input: &Tensor<R>,
    groups: usize,
    gamma: &Tensor<R>,
    beta: &Tensor<R>,
    eps: f64,
) -> Result<(Tensor<R>, GroupNormCache<R>), NnError> {
    input.expect_rank(4, "group_norm input")?;
    let &[n, c, h, w] = input.shape() else { unreachable!() };
    if groups == 0 || c % groups != 0 {
        return Err(NnError::Config(format!(
            "group_norm: {groups} groups do not divide {c} channels"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(format!(
            "group_norm: gamma/beta must be [{c}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(NnError::Config("group_norm: eps must be positive".into()));
    }
    let hw = h * w;
    let cg = c / groups;
    let m = cg * hw;
    let mut out = Tensor::zeros(input.shape());
    let mut xhat = Tensor::zeros(input.shape());
    let mut rstd = Vec::with_capacity(n * groups);
    let x = input.data();
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * cg) * hw;
            let block = &x[start..start + m];
            let mean = block.iter().map(|v| v.f64()).sum::<f64>() / m as f64;
            let var = block
                .iter()
                .map(|v| {
                    let d = v.f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(R::of(r));
            let xh = &mut xhat.data_mut()[start..start + m];
            for (dst, &v) in xh.iter_mut().zip(block) {
                *dst = R::of((v.f64() - mean) * r);
            }
            let y = &mut out.data_mut()[start..start + m];
            for ch in 0..cg {
                let gm = gamma.data()[g * cg + ch];
                let bt = beta.data()[g * cg + ch];
                let xh = &xhat.data()[start + ch * hw..start + (ch + 1) * hw];
                for (dst, &v) in y[ch * hw..(ch + 1) * hw].iter_mut().zip(xh) {
                    *dst = gm * v + bt;
                }
            }
        }
    }
    Ok((out, GroupNormCache { xhat, rstd, groups }))
}

pub fn group_norm_backward<R: Real>(
    cache: &GroupNormCache<R>,
    gamma: &Tensor<R>,
    grad_out: &Tensor<R>,
) -> Result<GroupNormGrads<R>, NnError> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(shape_err("group_norm backward: gradient shape mismatch"));
    }
    let &[n, c, h, w] = cache.xhat.shape() else { unreachable!() };
    let groups = cache.groups;
    let hw = h * w;
    let cg = c / groups;
    let m = cg * hw;
    let mut dx = Tensor::zeros(cache.xhat.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let xhat = cache.xhat.data();
    let dy = grad_out.data();
    let mut dxhat = vec![0.0f64; m];
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * cg) * hw;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ch in 0..cg {
                let cidx = g * cg + ch;
                let gm = gamma.data()[cidx].f64();
                for i in 0..hw {
                    let k = ch * hw + i;
                    let d = dy[start + k].f64();
                    let xh = xhat[start + k].f64();
                    dgamma[cidx] += d * xh;
                    dbeta[cidx] += d;
                    let v = d * gm;
                    dxhat[k] = v;
                    sum_dxhat += v;
                    sum_dxhat_xhat += v * xh;
                }
            }
            let r = cache.rstd[s * groups + g].f64();
            let mf = m as f64;
            let out = &mut dx.data_mut()[start..start + m];
            for (k, o) in out.iter_mut().enumerate() {
                let xh = xhat[start + k].f64();
                *o = R::of(r / mf * (mf * dxhat[k] - sum_dxhat - xh * sum_dxhat_xhat));
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_vec(&[c], v.into_iter().map(R::of).collect()).expect("c > 0");
    Ok(GroupNormGrads {
        input: dx,
        gamma: to_t(dgamma),
        beta: to_t(dbeta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[2, 4, 3, 3], 7.0);
        let (y, _) = group_norm(&x, 2, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[1, 4, 2, 2], 3.0, &mut rng);
        let beta = Tensor::from_f64(&[4], &[0.5, 0.5, 0.5, 0.5]).unwrap();
        let (y, _) = group_norm(&x, 2, &Tensor::zeros(&[4]), &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn matches_scalar_statistics() {
        // N=1, C=4, G=2, 2x2 maps
        let data: Vec<f64> = vec![
            1.0, 2.0, 3.0, 4.0, // c0
            -1.0, 0.5, 2.5, 6.0, // c1
            10.0, 10.0, 11.0, 9.0, // c2
            0.0, 0.0, 0.0, 4.0, // c3
        ];
        let gamma = [1.0, 2.0, 0.5, -1.0];
        let beta = [0.0, 1.0, -1.0, 0.25];
        let eps = 1e-5;
        let x = Tensor::<f64>::from_f64(&[1, 4, 2, 2], &data).unwrap();
        let (y, _) = group_norm(
            &x,
            2,
            &Tensor::from_f64(&[4], &gamma).unwrap(),
            &Tensor::from_f64(&[4], &beta).unwrap(),
            eps,
        )
        .unwrap();
        for g in 0..2 {
            let block = &data[g * 8..(g + 1) * 8];
            let mean: f64 = block.iter().sum::<f64>() / 8.0;
            let var: f64 = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (k, v) in block.iter().enumerate() {
                let ch = g * 2 + k / 4;
                let want = gamma[ch] * (v - mean) / (var + eps).sqrt() + beta[ch];
                assert!((y.data()[g * 8 + k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_must_divide_channels() {
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        let r = group_norm(&x, 4, &Tensor::zeros(&[6]), &Tensor::zeros(&[6]), 1e-5);
        assert!(matches!(r, Err(NnError::Config(_))));
    }

    #[test]
    fn unit_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..2 * 8 * 5 * 5).map(|_| rng.random_range(-4.0..4.0)).collect();
        let x = Tensor::from_f64(&[2, 8, 5, 5], &data).unwrap();
        let (y, _) = group_norm(&x, 4, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
        for block in y.data().chunks(50) {
            let mean: f64 = block.iter().sum::<f64>() / 50.0;
            let var: f64 = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
