//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparselab::autodiff::{backward_full, forward};
use sparselab::init::{initialize, InitScheme};
use sparselab::{build_network, Mask, MaskedNetwork, NetworkSpec, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed)
}

/// Initialized network with uniform sparsity `s` and small random biases.
pub fn random_net(spec: &NetworkSpec, s: f64, seed: u64) -> MaskedNetwork {
    let mut net = build_network(spec).unwrap();
    if s > 0.0 {
        // Exact-count draw per layer; tiny layers cannot meet the global
        // allocation tolerance so the allocator is bypassed here.
        let mut r = rng(seed);
        let masks: Vec<Mask> = net
            .weighted()
            .map(|l| {
                let n = l.len();
                let k = (((1.0 - s) * n as f64).round() as usize).clamp(1, n);
                let mut bits = vec![false; n];
                for i in rand::seq::index::sample(&mut r, n, k).into_iter() {
                    bits[i] = true;
                }
                Mask::from_bits(l.weights().shape().to_vec(), bits).unwrap()
            })
            .collect();
        net.set_masks(&masks).unwrap();
    }
    initialize(&mut net, InitScheme::per_neuron(), &mut rng(seed + 1));
    let mut r = rng(seed + 2);
    let mut p = net.params();
    let mask = net.param_mask();
    let mut off = 0;
    for l in net.weighted() {
        off += l.len();
        if let Some(b) = l.bias() {
            for v in &mut p[off..off + b.len()] {
                *v = r.gen_range(-0.1..0.1);
            }
            off += b.len();
        }
    }
    assert_eq!(p.len(), mask.len());
    net.set_params(&p).unwrap();
    net
}

pub fn random_batch(n: usize, d: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let x: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.5..1.5)).collect();
    let y: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
    (Tensor::new(vec![n, d], x).unwrap(), y)
}

pub fn loss_at(net: &MaskedNetwork, params: &[f64], x: &Tensor, y: &[usize]) -> f64 {
    let mut n = net.clone();
    n.set_params(params).unwrap();
    forward(&n, x, y).unwrap().0
}

/// Central differences of the loss in every parameter coordinate.
pub fn fd_gradient(net: &MaskedNetwork, x: &Tensor, y: &[usize], h: f64) -> Vec<f64> {
    let p = net.params();
    (0..p.len())
        .map(|i| {
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += h;
            b[i] -= h;
            (loss_at(net, &a, x, y) - loss_at(net, &b, x, y)) / (2.0 * h)
        })
        .collect()
}

pub fn analytic_gradient(net: &MaskedNetwork, x: &Tensor, y: &[usize]) -> Vec<f64> {
    let (_, mut tape) = forward(net, x, y).unwrap();
    backward_full(&mut tape).unwrap().masked.into_inner()
}

/// Hessian over `active` coordinates from central differences of the
/// analytic gradient, symmetrized.
pub fn fd_hessian(net: &MaskedNetwork, x: &Tensor, y: &[usize], active: &[usize], h: f64) -> Vec<Vec<f64>> {
    let p = net.params();
    let n = active.len();
    let mut cols = Vec::with_capacity(n);
    for &j in active {
        let mut a = net.clone();
        let mut pa = p.clone();
        pa[j] += h;
        a.set_params(&pa).unwrap();
        let mut b = net.clone();
        let mut pb = p.clone();
        pb[j] -= h;
        b.set_params(&pb).unwrap();
        let ga = analytic_gradient(&a, x, y);
        let gb = analytic_gradient(&b, x, y);
        cols.push(active.iter().map(|&i| (ga[i] - gb[i]) / (2.0 * h)).collect::<Vec<f64>>());
    }
    (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (cols[j][i] + cols[i][j])).collect())
        .collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// Straight-line forward pass of a bias-carrying ReLU MLP with mean
/// softmax cross-entropy, reading weights from the flat parameter vector.
pub fn mlp_loss_oracle(widths: &[usize], params: &[f64], x: &[f64], y: &[usize]) -> f64 {
    let batch = y.len();
    let mut total = 0.0;
    for b in 0..batch {
        let mut h: Vec<f64> = x[b * widths[0]..(b + 1) * widths[0]].to_vec();
        let mut off = 0;
        for l in 1..widths.len() {
            let (n_in, n_out) = (widths[l - 1], widths[l]);
            let w = &params[off..off + n_in * n_out];
            let bias = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut z = vec![0.0; n_out];
            for i in 0..n_out {
                let mut s = bias[i];
                for j in 0..n_in {
                    s += w[i * n_in + j] * h[j];
                }
                z[i] = s;
            }
            h = if l + 1 == widths.len() {
                z
            } else {
                z.into_iter().map(|v| v.max(0.0)).collect()
            };
        }
        let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - h[y[b]];
    }
    total / batch as f64
}
