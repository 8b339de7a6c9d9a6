//! Finite-difference verification of every layer's backward pass and of the
//! full CRNN-with-CTC chain, in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::charset::{Charset, LabelSeq};
use crate::ctc::{ctc_loss, LogitSeq};
use crate::model::{ArchConfig, ConvStage, CrnnModel, PoolSpec};
use crate::nn::gradcheck::{grad_check_guarded, GradCheckError, STEP};
use crate::nn::{
    bilstm, bilstm_backward, conv2d, conv2d_backward, group_norm, group_norm_backward, linear, linear_backward,
    log_softmax, log_softmax_backward, maxpool2d, maxpool2d_backward, relu_backward, relu_inplace, LstmWeights,
    Tensor,
};

/// Maximum accepted relative error `|analytic - numeric| / max(1, |numeric|)`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Names accepted by [`check`].
pub const CHECKS: &[&str] = &[
    "conv2d",
    "conv2d_strided",
    "maxpool2d",
    "group_norm",
    "relu",
    "bilstm",
    "linear",
    "log_softmax",
    "ctc",
    "crnn_ctc",
];

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub seed: u64,
    pub max_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

type Outcome = Result<(f64, u64), ()>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn sign_signature(t: &Tensor<f64>) -> u64 {
    t.data()
        .iter()
        .enumerate()
        .fold(0u64, |h, (i, &v)| h.wrapping_mul(31).wrapping_add((v > 0.0) as u64 * (i as u64 + 1)))
}

fn argmax_signature(idx: &[usize]) -> u64 {
    idx.iter().fold(17u64, |h, &i| h.wrapping_mul(1_000_003).wrapping_add(i as u64))
}

/// Runs one named check for one seed.
pub fn check(name: &str, seed: u64) -> Result<CheckReport, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b61_6c63);
    let (inputs, analytic, f): (Vec<Tensor<f64>>, Vec<Tensor<f64>>, Box<dyn FnMut(&[Tensor<f64>]) -> Outcome>) =
        match name {
            "conv2d" | "conv2d_strided" => {
                let (shape, stride, pad) = if name == "conv2d" {
                    ([2, 2, 5, 6], (1, 1), (1, 1))
                } else {
                    ([2, 2, 5, 7], (2, 2), (1, 1))
                };
                let x = rand_tensor(&mut rng, &shape);
                let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
                let b = rand_tensor(&mut rng, &[3]);
                let y = conv2d(&x, &w, &b, stride, pad).expect("valid geometry");
                let p = rand_tensor(&mut rng, y.shape());
                let g = conv2d_backward(&x, &w, &p, stride, pad, true).expect("valid geometry");
                let f = move |t: &[Tensor<f64>]| Ok((dot(&conv2d(&t[0], &t[1], &t[2], stride, pad).map_err(|_| ())?, &p), 0));
                (vec![x, w, b], vec![g.input.expect("requested"), g.weight, g.bias], Box::new(f))
            }
            "maxpool2d" => {
                let x = rand_tensor(&mut rng, &[2, 2, 4, 6]);
                let (y, cache) = maxpool2d(&x, (2, 2), (2, 1)).expect("valid geometry");
                let p = rand_tensor(&mut rng, y.shape());
                let g = maxpool2d_backward(&cache, &p).expect("matching shapes");
                let f = move |t: &[Tensor<f64>]| {
                    let (y, c) = maxpool2d(&t[0], (2, 2), (2, 1)).map_err(|_| ())?;
                    Ok((dot(&y, &p), argmax_signature(&c.argmax)))
                };
                (vec![x], vec![g], Box::new(f))
            }
            "group_norm" => {
                let x = rand_tensor(&mut rng, &[2, 4, 3, 3]);
                let gamma = rand_tensor(&mut rng, &[4]);
                let beta = rand_tensor(&mut rng, &[4]);
                let (y, cache) = group_norm(&x, 2, &gamma, &beta, 1e-5).expect("valid groups");
                let p = rand_tensor(&mut rng, y.shape());
                let g = group_norm_backward(&cache, &gamma, &p).expect("matching shapes");
                let f = move |t: &[Tensor<f64>]| {
                    Ok((dot(&group_norm(&t[0], 2, &t[1], &t[2], 1e-5).map_err(|_| ())?.0, &p), 0))
                };
                (vec![x, gamma, beta], vec![g.input, g.gamma, g.beta], Box::new(f))
            }
            "relu" => {
                let x = rand_tensor(&mut rng, &[3, 7]);
                let mut y = x.clone();
                relu_inplace(&mut y);
                let mut g = rand_tensor(&mut rng, &[3, 7]);
                let p = g.clone();
                relu_backward(&y, &mut g);
                let f = move |t: &[Tensor<f64>]| {
                    let mut y = t[0].clone();
                    relu_inplace(&mut y);
                    Ok((dot(&y, &p), sign_signature(&t[0])))
                };
                (vec![x], vec![g], Box::new(f))
            }
            "bilstm" => {
                let (d, h) = (3, 2);
                let x = rand_tensor(&mut rng, &[4, 2, d]);
                let mut ws = Vec::new();
                for _ in 0..2 {
                    ws.push(rand_tensor(&mut rng, &[4 * h, d]));
                    ws.push(rand_tensor(&mut rng, &[4 * h, h]));
                    ws.push(rand_tensor(&mut rng, &[4 * h]));
                }
                let w = |o: usize| LstmWeights {
                    w_ih: &ws[o],
                    w_hh: &ws[o + 1],
                    bias: &ws[o + 2],
                };
                let (fwd, bwd) = (w(0), w(3));
                let (y, cache) = bilstm(&x, fwd, bwd).expect("valid weights");
                let p = rand_tensor(&mut rng, y.shape());
                let g = bilstm_backward(&cache, fwd, bwd, &p).expect("matching shapes");
                let f = move |t: &[Tensor<f64>]| {
                    let w = |o: usize| LstmWeights {
                        w_ih: &t[o],
                        w_hh: &t[o + 1],
                        bias: &t[o + 2],
                    };
                    Ok((dot(&bilstm(&t[0], w(1), w(4)).map_err(|_| ())?.0, &p), 0))
                };
                let mut inputs = vec![x];
                inputs.extend(ws);
                let analytic = vec![g.input, g.fwd.w_ih, g.fwd.w_hh, g.fwd.bias, g.bwd.w_ih, g.bwd.w_hh, g.bwd.bias];
                (inputs, analytic, Box::new(f))
            }
            "linear" => {
                let x = rand_tensor(&mut rng, &[3, 2, 4]);
                let w = rand_tensor(&mut rng, &[5, 4]);
                let b = rand_tensor(&mut rng, &[5]);
                let y = linear(&x, &w, &b).expect("valid shapes");
                let p = rand_tensor(&mut rng, y.shape());
                let g = linear_backward(&x, &w, &p).expect("valid shapes");
                let f = move |t: &[Tensor<f64>]| Ok((dot(&linear(&t[0], &t[1], &t[2]).map_err(|_| ())?, &p), 0));
                (vec![x, w, b], vec![g.input, g.weight, g.bias], Box::new(f))
            }
            "log_softmax" => {
                let x = rand_tensor(&mut rng, &[3, 5]);
                let y = log_softmax(&x);
                let p = rand_tensor(&mut rng, y.shape());
                let g = log_softmax_backward(&y, &p).expect("matching shapes");
                let f = move |t: &[Tensor<f64>]| Ok((dot(&log_softmax(&t[0]), &p), 0));
                (vec![x], vec![g], Box::new(f))
            }
            "ctc" => {
                let (t_len, c) = (6, 4);
                let target = LabelSeq((0..rng.random_range(1..=3)).map(|_| rng.random_range(1..c)).collect());
                let mut x = rand_tensor(&mut rng, &[t_len, c]);
                x.scale(2.0);
                let loss = move |t: &Tensor<f64>| -> Result<(f64, Vec<f64>), ()> {
                    let lp = log_softmax(t);
                    let seq = LogitSeq::new(t_len, c, lp.into_data()).map_err(|_| ())?;
                    let r = ctc_loss(&seq, &target).map_err(|_| ())?;
                    Ok((r.loss, r.grad))
                };
                let (_, grad) = loss(&x).map_err(|_| GradCheckError::NonFinite { input: 0, index: 0 })?;
                let g = Tensor::from_vec(&[t_len, c], grad).expect("grad is [T, C]");
                let f = move |t: &[Tensor<f64>]| Ok((loss(&t[0])?.0, 0));
                (vec![x], vec![g], Box::new(f))
            }
            "crnn_ctc" => return crnn_chain(seed),
            other => panic!("unknown gradient check {other:?}"),
        };
    finish(name, seed, inputs, analytic, f)
}

fn finish(
    name: &str,
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    analytic: Vec<Tensor<f64>>,
    mut f: Box<dyn FnMut(&[Tensor<f64>]) -> Outcome>,
) -> Result<CheckReport, GradCheckError> {
    let g = |t: &[Tensor<f64>]| f(t).unwrap_or((f64::NAN, 0));
    let stats = grad_check_guarded(g, &inputs, &analytic, STEP, None, seed)?;
    Ok(CheckReport {
        name: name.to_string(),
        seed,
        max_error: stats.max_error,
        checked: stats.checked,
        skipped: stats.skipped,
        passed: stats.max_error <= GRAD_TOLERANCE && stats.checked > 0,
    })
}

/// A four-stage CRNN on 16x32 inputs (T = 8) with two BiLSTM layers.
pub fn tiny_chain_config(num_classes: usize) -> ArchConfig {
    ArchConfig {
        input_height: 16,
        input_width: 32,
        stages: vec![
            ConvStage::same3(3, Some(PoolSpec::square(2))),
            ConvStage::same3(4, Some(PoolSpec::square(2))),
            ConvStage::same3(4, Some(PoolSpec::tall())),
            ConvStage {
                out_channels: 4,
                kernel: (2, 1),
                stride: (1, 1),
                padding: (0, 0),
                pool: None,
                groups: 2,
            },
        ],
        hidden: 3,
        lstm_layers: 2,
        num_classes,
        norm_eps: 1e-5,
    }
}

fn crnn_chain(seed: u64) -> Result<CheckReport, GradCheckError> {
    let cs = Charset::from_chars("abc".chars()).expect("valid charset");
    let mut model = CrnnModel::<f64>::build(tiny_chain_config(cs.size()), cs, seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6372_6e6e);
    let n = 2;
    let image = Tensor::<f64>::from_vec(
        &[n, 1, 16, 32],
        (0..n * 16 * 32).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .expect("non-empty");
    let targets: Vec<LabelSeq> = (0..n)
        .map(|_| LabelSeq((0..rng.random_range(1..=3)).map(|_| rng.random_range(1..4)).collect()))
        .collect();

    let evaluate = move |m: &CrnnModel<f64>, x: &Tensor<f64>| -> Result<(f64, Tensor<f64>, u64), ()> {
        let (lp, cache) = m.forward_train(x).map_err(|_| ())?;
        let &[t, _, c] = lp.shape() else { return Err(()) };
        let mut grad = Tensor::zeros(lp.shape());
        let mut total = 0.0;
        for (s, target) in targets.iter().enumerate() {
            let seq = LogitSeq::from_batch(&lp, s).map_err(|_| ())?;
            let r = ctc_loss(&seq, target).map_err(|_| ())?;
            total += r.loss;
            for step in 0..t {
                for k in 0..c {
                    grad.data_mut()[(step * n + s) * c + k] = r.grad[step * c + k];
                }
            }
        }
        Ok((total, grad, cache.activation_signature()))
    };

    let (_, grad, _) = evaluate(&model, &image).map_err(|_| GradCheckError::NonFinite { input: 0, index: 0 })?;
    let (_, cache) = model.forward_train(&image).expect("valid input");
    model.zero_grad();
    let dx = model.backward(&cache, &grad, true).expect("matching shapes").expect("input grad requested");

    let mut inputs = vec![image];
    let mut analytic = vec![dx];
    for p in model.params() {
        inputs.push(p.value.clone());
        analytic.push(p.grad.clone());
    }
    let mut probe = model.clone();
    let f = move |t: &[Tensor<f64>]| {
        for (p, v) in probe.params_mut().iter_mut().zip(&t[1..]) {
            p.value = v.clone();
        }
        let (loss, _, sig) = evaluate(&probe, &t[0])?;
        Ok((loss, sig))
    };
    finish("crnn_ctc", seed, inputs, analytic, Box::new(f))
}

/// Every check in [`CHECKS`] for each seed.
pub fn gradient_suite(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<CheckReport>, GradCheckError> {
    let mut out = Vec::new();
    for name in CHECKS {
        for seed in seeds.clone() {
            out.push(check(name, seed)?);
        }
    }
    Ok(out)
}
