//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sessrec::dataset::MiniBatch;
use sessrec::evaluation::rank_lcm;
use sessrec::model::{Model, ModelConfig, ModelParams};
use sessrec::tensor::{finite_difference_check_with, softmax_in_place, Matrix, Parameter, Stencil};
use sessrec::training::{cross_entropy_loss, LossGrad};

pub const TOL: f64 = 1e-4;
pub const EPS: f64 = 1e-3;

pub fn toy(head_embedding: bool) -> ModelConfig {
    let mut cfg = if head_embedding {
        ModelConfig::embedding(11, 4, 8)
    } else {
        ModelConfig::softmax(11, 4, 8)
    };
    cfg.window = 5;
    cfg
}

/// Short, exact-length and truncated prefixes.
pub fn batch() -> MiniBatch {
    let prefixes: Vec<&[usize]> = vec![&[3], &[1, 2, 5], &[4, 4, 7, 9, 10], &[2, 6, 8, 1, 3, 5, 7], &[10, 9]];
    MiniBatch::from_prefixes(&prefixes, &[4, 9, 1, 6, 3], 5)
}

pub fn output(model: &Model, b: &MiniBatch, dropout_seed: Option<u64>) -> Matrix {
    let pass = match dropout_seed {
        Some(s) => model.forward_train(&b.inputs, &b.mask, b.window, &mut ChaCha8Rng::seed_from_u64(s)),
        None => model.forward(&b.inputs, &b.mask, b.window),
    };
    pass.output().clone()
}

/// Mean per-row loss, analytic gradients via backward, then the worst
/// relative error against five-point central differences over every
/// coordinate.
pub fn check<F>(model: &Model, b: &MiniBatch, dropout_seed: Option<u64>, row_loss: F) -> f64
where
    F: Fn(usize, &[f64]) -> LossGrad,
{
    check_with(model, b, dropout_seed, Stencil::FivePoint, EPS, row_loss)
}

/// Step for heads with ReLU units: small enough that the stencil rarely
/// straddles a kink.
pub const RELU_EPS: f64 = 1e-5;

pub fn check_with<F>(
    model: &Model,
    b: &MiniBatch,
    dropout_seed: Option<u64>,
    stencil: Stencil,
    eps: f64,
    row_loss: F,
) -> f64
where
    F: Fn(usize, &[f64]) -> LossGrad,
{
    let n = b.len();
    let mut analytic = model.clone();
    analytic.params.zero_grad();
    let pass = match dropout_seed {
        Some(s) => analytic.forward_train(&b.inputs, &b.mask, b.window, &mut ChaCha8Rng::seed_from_u64(s)),
        None => analytic.forward(&b.inputs, &b.mask, b.window),
    };
    let out = pass.output().clone();
    let mut d_out = Matrix::zeros(out.rows(), out.cols());
    for r in 0..n {
        let lg = row_loss(r, out.row(r));
        for (d, g) in d_out.row_mut(r).iter_mut().zip(&lg.grad) {
            *d = g / n as f64;
        }
    }
    analytic.backward(&pass, &d_out);

    let cfg = model.config.clone();
    let loss = |params: &[Parameter]| {
        let m = Model::from_params(cfg.clone(), ModelParams::from_vec(&cfg, params.to_vec()).unwrap()).unwrap();
        let out = output(&m, b, dropout_seed);
        (0..n).map(|r| row_loss(r, out.row(r)).loss).sum::<f64>() / n as f64
    };
    let mut params = analytic.params.to_vec();
    finite_difference_check_with(loss, &mut params, eps, usize::MAX, stencil)
}

pub fn ce(label: usize, logits: &[f64]) -> LossGrad {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    cross_entropy_loss(&p, label).unwrap()
}

pub fn random_scores(prefix: &[usize], n: usize, quantize: bool) -> Vec<f64> {
    let mut h = DefaultHasher::new();
    prefix.hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    (0..n)
        .map(|_| {
            let s: f64 = rng.gen();
            if quantize {
                (s * 8.0).floor()
            } else {
                s
            }
        })
        .collect()
}

pub fn random_sessions(seed: u64, n_items: usize, n_events: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut events = 0;
    while events < n_events {
        let len = rng.gen_range(2..8).min(n_events - events + 1);
        out.push((0..len).map(|_| rng.gen_range(1..n_items)).collect());
        events += len - 1;
    }
    out
}

/// Rank of `target` among real items: higher score first, ties to the
/// lower index.
pub fn brute_rank(scores: &[f64], target: usize) -> usize {
    1 + (1..scores.len())
        .filter(|&j| j != target && (scores[j] > scores[target] || (scores[j] == scores[target] && j < target)))
        .count()
}

pub fn brute_metrics(sessions: &[Vec<usize>], n: usize, quantize: bool) -> (f64, f64, usize) {
    let l = rank_lcm(20).unwrap();
    let (mut hits, mut rr, mut events) = (0u128, 0u128, 0u128);
    for s in sessions {
        for r in 1..s.len() {
            let rank = brute_rank(&random_scores(&s[..r], n, quantize), s[r]) as u128;
            events += 1;
            if rank <= 20 {
                hits += 1;
                rr += l / rank;
            }
        }
    }
    (hits as f64 / events as f64, rr as f64 / (l * events) as f64, events as usize)
}

