//! Bidirectional LSTM with exact backpropagation through time.
//!
//! Gate rows are laid out `[input, forget, cell, output]` in the `4H`
//! dimension. Initial hidden and cell states are zero.

use super::{gemm, shape_err, NnError, Real, Tensor};

/// Borrowed weights of one direction: `w_ih [4H, D]`, `w_hh [4H, H]`, `bias [4H]`.
#[derive(Clone, Copy)]
pub struct LstmWeights<'a, R> {
    pub w_ih: &'a Tensor<R>,
    pub w_hh: &'a Tensor<R>,
    pub bias: &'a Tensor<R>,
}

impl<R: Real> LstmWeights<'_, R> {
    fn hidden(&self) -> Result<(usize, usize), NnError> {
        self.w_hh.expect_rank(2, "lstm w_hh")?;
        self.w_ih.expect_rank(2, "lstm w_ih")?;
        let h = self.w_hh.shape()[1];
        let d = self.w_ih.shape()[1];
        if self.w_hh.shape()[0] != 4 * h || self.w_ih.shape()[0] != 4 * h || self.bias.shape() != [4 * h] {
            return Err(shape_err(format!(
                "lstm weights inconsistent: w_ih {:?}, w_hh {:?}, bias {:?}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.bias.shape()
            )));
        }
        Ok((d, h))
    }
}

#[derive(Clone, Debug)]
pub struct LstmGrads<R> {
    pub w_ih: Tensor<R>,
    pub w_hh: Tensor<R>,
    pub bias: Tensor<R>,
}

/// Activations for one direction, each laid out `[T, N, ·]` in time order.
#[derive(Clone, Debug)]
struct DirCache<R> {
    gates: Vec<R>,
    cell: Vec<R>,
    hidden: Vec<R>,
}

#[derive(Clone, Debug)]
pub struct BiLstmCache<R> {
    input: Tensor<R>,
    fwd: DirCache<R>,
    bwd: DirCache<R>,
    hidden: usize,
}

pub struct BiLstmGrads<R> {
    pub input: Tensor<R>,
    pub fwd: LstmGrads<R>,
    pub bwd: LstmGrads<R>,
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

fn run_direction<R: Real>(
    x: &Tensor<R>,
    p: LstmWeights<'_, R>,
    reverse: bool,
) -> Result<DirCache<R>, NnError> {
    let &[t_len, n, d] = x.shape() else { unreachable!() };
    let (wd, h) = p.hidden()?;
    if wd != d {
        return Err(shape_err(format!("lstm: input width {d}, weights expect {wd}")));
    }
    let g4 = 4 * h;
    let mut gates = vec![R::zero(); t_len * n * g4];
    for row in gates.chunks_mut(g4) {
        row.copy_from_slice(p.bias.data());
    }
    // input projection for every timestep at once
    gemm(t_len * n, d, g4, x.data(), false, p.w_ih.data(), true, &mut gates, true);
    let mut cell = vec![R::zero(); t_len * n * h];
    let mut hidden = vec![R::zero(); t_len * n * h];
    let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
    let mut prev: Option<usize> = None;
    for &t in &order {
        let z = &mut gates[t * n * g4..(t + 1) * n * g4];
        if let Some(pt) = prev {
            gemm(n, h, g4, &hidden[pt * n * h..(pt + 1) * n * h], false, p.w_hh.data(), true, z, true);
        }
        for s in 0..n {
            let zr = &mut z[s * g4..(s + 1) * g4];
            for j in 0..h {
                zr[j] = sigmoid(zr[j]);
                zr[h + j] = sigmoid(zr[h + j]);
                zr[2 * h + j] = zr[2 * h + j].tanh();
                zr[3 * h + j] = sigmoid(zr[3 * h + j]);
            }
            for j in 0..h {
                let c_prev = prev.map_or(R::zero(), |pt| cell[(pt * n + s) * h + j]);
                let c = zr[h + j] * c_prev + zr[j] * zr[2 * h + j];
                cell[(t * n + s) * h + j] = c;
                hidden[(t * n + s) * h + j] = zr[3 * h + j] * c.tanh();
            }
        }
        prev = Some(t);
    }
    Ok(DirCache { gates, cell, hidden })
}

/// Runs both directions over `[T, N, D]` and concatenates to `[T, N, 2H]`
/// (forward-direction outputs first).
pub fn bilstm<R: Real>(
    input: &Tensor<R>,
    fwd: LstmWeights<'_, R>,
    bwd: LstmWeights<'_, R>,
) -> Result<(Tensor<R>, BiLstmCache<R>), NnError> {
    input.expect_rank(3, "bilstm input")?;
    let &[t_len, n, _] = input.shape() else { unreachable!() };
    let (_, h) = fwd.hidden()?;
    if bwd.hidden()?.1 != h {
        return Err(shape_err("bilstm: directions have different hidden sizes"));
    }
    let f = run_direction(input, fwd, false)?;
    let b = run_direction(input, bwd, true)?;
    let mut out = Tensor::zeros(&[t_len, n, 2 * h]);
    for (row, (hf, hb)) in out
        .data_mut()
        .chunks_mut(2 * h)
        .zip(f.hidden.chunks(h).zip(b.hidden.chunks(h)))
    {
        row[..h].copy_from_slice(hf);
        row[h..].copy_from_slice(hb);
    }
    Ok((
        out,
        BiLstmCache {
            input: input.clone(),
            fwd: f,
            bwd: b,
            hidden: h,
        },
    ))
}

fn backprop_direction<R: Real>(
    x: &Tensor<R>,
    p: LstmWeights<'_, R>,
    cache: &DirCache<R>,
    dh_out: &[R],
    reverse: bool,
    dx: &mut [R],
) -> LstmGrads<R> {
    let &[t_len, n, d] = x.shape() else { unreachable!() };
    let h = cache.cell.len() / (t_len * n);
    let g4 = 4 * h;
    let order: Vec<usize> = if reverse { (0..t_len).collect() } else { (0..t_len).rev().collect() };
    // predecessor of t in processing order
    let prev_of = |t: usize| -> Option<usize> {
        if reverse {
            (t + 1 < t_len).then_some(t + 1)
        } else {
            t.checked_sub(1)
        }
    };
    let mut dz = vec![R::zero(); t_len * n * g4];
    let mut dh_next = vec![R::zero(); n * h];
    let mut dc_next = vec![R::zero(); n * h];
    for &t in &order {
        let prev = prev_of(t);
        for s in 0..n {
            let zr = &cache.gates[(t * n + s) * g4..(t * n + s + 1) * g4];
            let dzr = &mut dz[(t * n + s) * g4..(t * n + s + 1) * g4];
            for j in 0..h {
                let idx = (t * n + s) * h + j;
                let (i, f, g, o) = (zr[j], zr[h + j], zr[2 * h + j], zr[3 * h + j]);
                let c = cache.cell[idx];
                let tc = c.tanh();
                let dh = dh_out[idx] + dh_next[s * h + j];
                let d_o = dh * tc;
                let dc = dc_next[s * h + j] + dh * o * (R::one() - tc * tc);
                let c_prev = prev.map_or(R::zero(), |pt| cache.cell[(pt * n + s) * h + j]);
                dzr[j] = dc * g * i * (R::one() - i);
                dzr[h + j] = dc * c_prev * f * (R::one() - f);
                dzr[2 * h + j] = dc * i * (R::one() - g * g);
                dzr[3 * h + j] = d_o * o * (R::one() - o);
                dc_next[s * h + j] = dc * f;
            }
        }
        // dh_{prev} = dz_t * W_hh
        let dzt = &dz[t * n * g4..(t + 1) * n * g4];
        gemm(n, g4, h, dzt, false, p.w_hh.data(), false, &mut dh_next, false);
    }
    // recurrent weight gradient: dW_hh = sum_t dz_t^T h_prev(t)
    let mut h_prev = vec![R::zero(); t_len * n * h];
    for t in 0..t_len {
        if let Some(pt) = prev_of(t) {
            h_prev[t * n * h..(t + 1) * n * h].copy_from_slice(&cache.hidden[pt * n * h..(pt + 1) * n * h]);
        }
    }
    let mut dw_hh = Tensor::zeros(p.w_hh.shape());
    gemm(g4, t_len * n, h, &dz, true, &h_prev, false, dw_hh.data_mut(), false);
    let mut dw_ih = Tensor::zeros(p.w_ih.shape());
    gemm(g4, t_len * n, d, &dz, true, x.data(), false, dw_ih.data_mut(), false);
    let mut db = Tensor::zeros(&[g4]);
    for row in dz.chunks(g4) {
        for (a, &b) in db.data_mut().iter_mut().zip(row) {
            *a += b;
        }
    }
    gemm(t_len * n, g4, d, &dz, false, p.w_ih.data(), false, dx, true);
    LstmGrads {
        w_ih: dw_ih,
        w_hh: dw_hh,
        bias: db,
    }
}

pub fn bilstm_backward<R: Real>(
    cache: &BiLstmCache<R>,
    fwd: LstmWeights<'_, R>,
    bwd: LstmWeights<'_, R>,
    grad_out: &Tensor<R>,
) -> Result<BiLstmGrads<R>, NnError> {
    let &[t_len, n, _] = cache.input.shape() else { unreachable!() };
    let h = cache.hidden;
    if grad_out.shape() != [t_len, n, 2 * h] {
        return Err(shape_err(format!(
            "bilstm backward: gradient {:?}, expected {:?}",
            grad_out.shape(),
            [t_len, n, 2 * h]
        )));
    }
    let mut dh_f = vec![R::zero(); t_len * n * h];
    let mut dh_b = vec![R::zero(); t_len * n * h];
    for (row, (df, db)) in grad_out
        .data()
        .chunks(2 * h)
        .zip(dh_f.chunks_mut(h).zip(dh_b.chunks_mut(h)))
    {
        df.copy_from_slice(&row[..h]);
        db.copy_from_slice(&row[h..]);
    }
    let mut dx = Tensor::zeros(cache.input.shape());
    let gf = backprop_direction(&cache.input, fwd, &cache.fwd, &dh_f, false, dx.data_mut());
    let gb = backprop_direction(&cache.input, bwd, &cache.bwd, &dh_b, true, dx.data_mut());
    Ok(BiLstmGrads {
        input: dx,
        fwd: gf,
        bwd: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Dir {
        w_ih: Tensor<f64>,
        w_hh: Tensor<f64>,
        bias: Tensor<f64>,
    }

    impl Dir {
        fn random(d: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
            Dir {
                w_ih: Tensor::uniform(&[4 * h, d], 0.8, rng),
                w_hh: Tensor::uniform(&[4 * h, h], 0.8, rng),
                bias: Tensor::uniform(&[4 * h], 0.8, rng),
            }
        }
        fn w(&self) -> LstmWeights<'_, f64> {
            LstmWeights {
                w_ih: &self.w_ih,
                w_hh: &self.w_hh,
                bias: &self.bias,
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let d = Dir {
            w_ih: Tensor::zeros(&[8, 3]),
            w_hh: Tensor::zeros(&[8, 2]),
            bias: Tensor::zeros(&[8]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[5, 2, 3], 2.0, &mut rng);
        let (y, _) = bilstm(&x, d.w(), d.w()).unwrap();
        assert_eq!(y.shape(), &[5, 2, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_hand_evaluation() {
        // T=1, D=1, H=1; gate pre-activations w_ih*x + b
        let x = 0.7;
        let w_ih = [0.5, -0.3, 0.8, 0.2];
        let b = [0.1, 0.2, -0.1, 0.05];
        let d = Dir {
            w_ih: Tensor::from_f64(&[4, 1], &w_ih).unwrap(),
            w_hh: Tensor::from_f64(&[4, 1], &[0.9, 0.9, 0.9, 0.9]).unwrap(),
            bias: Tensor::from_f64(&[4], &b).unwrap(),
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = sig(w_ih[0] * x + b[0]);
        let g = (w_ih[2] * x + b[2]).tanh();
        let o = sig(w_ih[3] * x + b[3]);
        let c = i * g; // forget gate multiplies a zero initial cell
        let want = o * c.tanh();
        let input = Tensor::from_f64(&[1, 1, 1], &[x]).unwrap();
        let (y, _) = bilstm(&input, d.w(), d.w()).unwrap();
        assert!((y.data()[0] - want).abs() < 1e-15);
        assert!((y.data()[1] - want).abs() < 1e-15);
    }

    #[test]
    fn reversal_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, n, dd, h) = (6, 2, 3, 4);
        let f = Dir::random(dd, h, &mut rng);
        let b = Dir::random(dd, h, &mut rng);
        let x = Tensor::uniform(&[t, n, dd], 1.0, &mut rng);
        let mut xr = Tensor::zeros(&[t, n, dd]);
        for s in 0..t {
            let src = &x.data()[s * n * dd..(s + 1) * n * dd];
            xr.data_mut()[(t - 1 - s) * n * dd..(t - s) * n * dd].copy_from_slice(src);
        }
        let (y, _) = bilstm(&x, f.w(), b.w()).unwrap();
        // swap weights as well so the reversed run's forward half equals the original backward half
        let (yr, _) = bilstm(&xr, b.w(), f.w()).unwrap();
        for s in 0..t {
            for k in 0..n {
                let a = &y.data()[(s * n + k) * 2 * h..(s * n + k + 1) * 2 * h];
                let r = &yr.data()[((t - 1 - s) * n + k) * 2 * h..((t - 1 - s) * n + k + 1) * 2 * h];
                for j in 0..h {
                    assert!((a[j] - r[h + j]).abs() < 1e-12);
                    assert!((a[h + j] - r[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Dir::random(3, 2, &mut rng);
        let x = Tensor::<f64>::zeros(&[2, 1, 4]);
        assert!(bilstm(&x, f.w(), f.w()).is_err());
    }
}
