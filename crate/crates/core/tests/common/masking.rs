//! Checks on the stochastic mask: straight-through gradients, information
//! blocking and the sampling distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use iimap::autodiff::{Graph, Tensor};
use iimap::encoding::{encode_position, PIECE_PLANES};
use iimap::network::{
    apply_mask, batch_input, binarize, model_forward, support_indices, ModelConfig, ModelOutput, PolicyValueNet,
};

use super::random_positions;

/// Number of tensors whose forward values and input gradients matched the
/// straight-through contract.
pub fn ste_contract(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0;
    for _ in 0..trials {
        let n = rng.random_range(1..200);
        let x: Vec<f32> = (0..n)
            .map(|_| if rng.random_bool(0.05) { 0.0 } else { StandardNormal.sample(&mut rng) })
            .collect();
        let up: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g = Graph::new();
        let xn = g.leaf(Tensor::new(&[n], x.clone()));
        let y = g.heaviside_ste(xn);
        let w = g.constant(Tensor::new(&[n], up.clone()));
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let forward_ok = g
            .value(y)
            .data()
            .iter()
            .zip(&x)
            .all(|(&v, &xi)| v == if xi >= 0.0 { 1.0 } else { 0.0 });
        let grad_ok = g
            .grad(xn)
            .unwrap()
            .data()
            .iter()
            .zip(&up)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ok += (forward_ok && grad_ok) as usize;
    }
    ok
}

fn same_bits(a: &ModelOutput, b: &ModelOutput) -> bool {
    a.policy.iter().zip(&b.policy).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.policy.len() == b.policy.len()
        && a.value.map(f32::to_bits) == b.value.map(f32::to_bits)
}

/// Number of (position, mask, mutation) triples whose composed outputs are
/// bit-identical, through both the inference path and the training graph.
pub fn blocking(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::tiny();
    cfg.value_head = true;
    let net = PolicyValueNet::new(cfg, seed).unwrap();
    let positions = random_positions(trials, 80, seed);
    let specials = [f32::INFINITY, f32::NEG_INFINITY, f32::NAN, -0.0, 1e30, -7.5];
    let mut ok = 0;
    for pos in &positions {
        let support = support_indices(pos);
        if support.is_empty() {
            ok += 1;
            continue;
        }
        let x = encode_position(pos, &net.config.encoding).unwrap();
        let keep: f32 = rng.random_range(0.0..1.0);
        let p = Tensor::full(&[8, 8, PIECE_PLANES], keep);
        let bin = binarize(&p, &mut rng);
        let mut mutated = x.clone();
        let masked: Vec<usize> = (0..64 * PIECE_PLANES).filter(|&i| bin.data()[i] == 0.0).collect();
        for &i in &masked {
            if rng.random_bool(0.5) {
                let v = if rng.random_bool(0.2) {
                    specials[rng.random_range(0..specials.len())]
                } else {
                    rng.random_range(-3.0..3.0)
                };
                mutated.set(i / (8 * PIECE_PLANES), (i / PIECE_PLANES) % 8, i % PIECE_PLANES, v);
            }
        }
        let a = model_forward(&net, &apply_mask(&x, &bin).unwrap(), &support).unwrap();
        let b = model_forward(&net, &apply_mask(&mutated, &bin).unwrap(), &support).unwrap();

        let graph_out = |input: &iimap::encoding::PlaneStack| {
            let mut g = Graph::new();
            let xi = g.constant(batch_input(&[input]).unwrap());
            let m = g.constant(bin.clone().reshaped(&[1, 8, 8, PIECE_PLANES]));
            let gated = g.channel_gate(xi, m).unwrap();
            let nodes = net.forward(&mut g, gated, std::slice::from_ref(&support)).unwrap();
            g.value(nodes.policy).data().to_vec()
        };
        let ga = graph_out(&x);
        let gb = graph_out(&mutated);
        let graph_ok = ga.iter().zip(&gb).all(|(p, q)| p.to_bits() == q.to_bits());
        ok += (same_bits(&a, &b) && graph_ok) as usize;
    }
    ok
}

/// For a constant keep-probability, the fraction of the 768 mask entries
/// whose empirical keep rate over `samples` draws falls outside the 3-sigma
/// binomial band.
pub fn binarization_failure_rate(p: f32, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = Tensor::full(&[8, 8, PIECE_PLANES], p);
    let mut counts = vec![0u32; 64 * PIECE_PLANES];
    for _ in 0..samples {
        let bin = binarize(&probs, &mut rng);
        for (c, &v) in counts.iter_mut().zip(bin.data()) {
            *c += (v == 1.0) as u32;
        }
    }
    let p = p as f64;
    let sigma = (p * (1.0 - p) / samples as f64).sqrt();
    let bad = counts
        .iter()
        .filter(|&&c| (c as f64 / samples as f64 - p).abs() > 3.0 * sigma)
        .count();
    bad as f64 / counts.len() as f64
}
