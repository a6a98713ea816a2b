//! Central-difference gradient checks. Each case pairs a graph construction
//! with a plain f64 reimplementation of the same function; the analytic f32
//! gradients from the graph are compared with central differences of the f64
//! reference, and the two forward values are compared as well.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use iimap::autodiff::{Graph, NodeId, Tensor, GATHER_NONE};

const H: f64 = 1e-6;
/// Coordinates probed per input tensor and trial.
const COORDS: usize = 24;

pub type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;
pub type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs are drawn uniformly from this range instead of N(0, 1).
    pub range: Option<(f64, f64)>,
    pub build: Build,
    pub reference: Reference,
}

pub struct Outcome {
    pub name: &'static str,
    pub worst_rel: f64,
    pub worst_forward: f64,
}

/// `|a - n| / max(|a|, |n|)` over the probed coordinates as vectors.
fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn draw(rng: &mut ChaCha8Rng, len: usize, range: Option<(f64, f64)>) -> Vec<f32> {
    (0..len)
        .map(|_| match range {
            Some((lo, hi)) => rng.random_range(lo..hi) as f32,
            None => StandardNormal.sample(rng),
        })
        .collect()
}

pub fn run_case(case: &Case, trials: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_rel = 0.0f64;
    let mut worst_forward = 0.0f64;
    for _ in 0..trials {
        let inputs: Vec<Vec<f32>> = case
            .shapes
            .iter()
            .map(|s| draw(&mut rng, s.iter().product(), case.range))
            .collect();
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = inputs
            .iter()
            .zip(&case.shapes)
            .map(|(v, s)| g.leaf(Tensor::new(s, v.clone())))
            .collect();
        let out = (case.build)(&mut g, &leaves);
        let n_out = g.value(out).len();
        let weights: Vec<f32> = draw(&mut rng, n_out, None);
        let wn = g.constant(Tensor::new(g.shape(out).to_vec().as_slice(), weights.clone()));
        let prod = g.mul(out, wn).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();

        let x64: Vec<Vec<f64>> = inputs.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        let ref_out = (case.reference)(&x64);
        assert_eq!(ref_out.len(), n_out, "{}: reference output length", case.name);
        for (a, b) in g.value(out).data().iter().zip(&ref_out) {
            let e = (*a as f64 - b).abs() / (1.0 + b.abs());
            worst_forward = worst_forward.max(e);
        }
        let f = |x: &[Vec<f64>]| -> f64 {
            (case.reference)(x)
                .iter()
                .zip(&weights)
                .map(|(y, &w)| y * w as f64)
                .sum()
        };

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (t, leaf) in leaves.iter().enumerate() {
            let grad = g.grad(*leaf).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[t].len()]);
            let len = inputs[t].len();
            let coords: Vec<usize> = if len <= COORDS {
                (0..len).collect()
            } else {
                sample(&mut rng, len, COORDS).into_vec()
            };
            for i in coords {
                let mut plus = x64.clone();
                plus[t][i] += H;
                let mut minus = x64.clone();
                minus[t][i] -= H;
                numeric.push((f(&plus) - f(&minus)) / (2.0 * H));
                analytic.push(grad[i] as f64);
            }
        }
        worst_rel = worst_rel.max(rel_error(&analytic, &numeric));
    }
    Outcome {
        name: case.name,
        worst_rel,
        worst_forward,
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Same-padded cross-correlation, `x: [b, h, w, cin]`, `k: [s, s, cin, cout]`.
pub fn conv_ref(x: &[f64], k: &[f64], bias: &[f64], b: usize, h: usize, w: usize, cin: usize, s: usize, cout: usize) -> Vec<f64> {
    let r = (s / 2) as i64;
    let mut y = vec![0.0; b * h * w * cout];
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for di in 0..s {
                        for dj in 0..s {
                            let (ii, jj) = (i as i64 + di as i64 - r, j as i64 + dj as i64 - r);
                            if ii < 0 || jj < 0 || ii >= h as i64 || jj >= w as i64 {
                                continue;
                            }
                            for c in 0..cin {
                                acc += x[((n * h + ii as usize) * w + jj as usize) * cin + c]
                                    * k[((di * s + dj) * cin + c) * cout + o];
                            }
                        }
                    }
                    y[((n * h + i) * w + j) * cout + o] = acc;
                }
            }
        }
    }
    y
}

pub fn dense_ref(x: &[f64], w: &[f64], bias: &[f64], batch: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    for b in 0..batch {
        for o in 0..out {
            y[b * out + o] = bias[o] + (0..inp).map(|i| x[b * inp + i] * w[i * out + o]).sum::<f64>();
        }
    }
    y
}

pub fn softmax_ref(z: &[f64], n: usize, support: &[Vec<u32>]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for (row, sup) in support.iter().enumerate() {
        let zr = &z[row * n..(row + 1) * n];
        let max = sup.iter().map(|&i| zr[i as usize]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = sup.iter().map(|&i| (zr[i as usize] - max).exp()).sum();
        for &i in sup {
            out[row * n + i as usize] = (zr[i as usize] - max).exp() / total;
        }
    }
    out
}

fn elementwise(name: &'static str, shape: &[usize], f32op: fn(&mut Graph, NodeId) -> NodeId, f: fn(f64) -> f64) -> Case {
    Case {
        name,
        shapes: vec![shape.to_vec()],
        range: None,
        build: Box::new(move |g, x| f32op(g, x[0])),
        reference: Box::new(move |x| x[0].iter().map(|&v| f(v)).collect()),
    }
}

/// One case per differentiable operation.
pub fn op_cases() -> Vec<Case> {
    let s = vec![3usize, 5];
    let mut cases = vec![
        Case {
            name: "add",
            shapes: vec![s.clone(), s.clone()],
            range: None,
            build: Box::new(|g, x| g.add(x[0], x[1]).unwrap()),
            reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
        },
        Case {
            name: "add_scalar_broadcast",
            shapes: vec![s.clone(), vec![]],
            range: None,
            build: Box::new(|g, x| g.add(x[0], x[1]).unwrap()),
            reference: Box::new(|x| x[0].iter().map(|a| a + x[1][0]).collect()),
        },
        Case {
            name: "sub",
            shapes: vec![s.clone(), s.clone()],
            range: None,
            build: Box::new(|g, x| g.sub(x[0], x[1]).unwrap()),
            reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()),
        },
        Case {
            name: "mul",
            shapes: vec![s.clone(), s.clone()],
            range: None,
            build: Box::new(|g, x| g.mul(x[0], x[1]).unwrap()),
            reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
        },
        Case {
            name: "scale",
            shapes: vec![s.clone()],
            range: None,
            build: Box::new(|g, x| g.scale(x[0], -1.75)),
            reference: Box::new(|x| x[0].iter().map(|a| a * -1.75).collect()),
        },
        elementwise("relu", &s, |g, x| g.relu(x), |v| v.max(0.0)),
        elementwise("sigmoid", &s, |g, x| g.sigmoid(x), sig),
        elementwise("tanh", &s, |g, x| g.tanh(x), f64::tanh),
        Case {
            name: "l1_sum",
            shapes: vec![s.clone()],
            range: None,
            build: Box::new(|g, x| g.l1_sum(x[0])),
            reference: Box::new(|x| vec![x[0].iter().map(|v| v.abs()).sum()]),
        },
        Case {
            name: "sum",
            shapes: vec![s.clone()],
            range: None,
            build: Box::new(|g, x| g.sum(x[0])),
            reference: Box::new(|x| vec![x[0].iter().sum()]),
        },
        Case {
            name: "mean",
            shapes: vec![s.clone()],
            range: None,
            build: Box::new(|g, x| g.mean(x[0])),
            reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64]),
        },
        Case {
            name: "reshape",
            shapes: vec![s.clone()],
            range: None,
            build: Box::new(|g, x| g.reshape(x[0], &[5, 3]).unwrap()),
            reference: Box::new(|x| x[0].clone()),
        },
        Case {
            name: "dense",
            shapes: vec![vec![4, 6], vec![6, 3], vec![3]],
            range: None,
            build: Box::new(|g, x| g.dense(x[0], x[1], x[2]).unwrap()),
            reference: Box::new(|x| dense_ref(&x[0], &x[1], &x[2], 4, 6, 3)),
        },
        Case {
            name: "conv2d_3x3",
            shapes: vec![vec![2, 8, 8, 3], vec![3, 3, 3, 4], vec![4]],
            range: None,
            build: Box::new(|g, x| g.conv2d(x[0], x[1], x[2]).unwrap()),
            reference: Box::new(|x| conv_ref(&x[0], &x[1], &x[2], 2, 8, 8, 3, 3, 4)),
        },
        Case {
            name: "conv2d_1x1",
            shapes: vec![vec![2, 8, 8, 5], vec![1, 1, 5, 2], vec![2]],
            range: None,
            build: Box::new(|g, x| g.conv2d(x[0], x[1], x[2]).unwrap()),
            reference: Box::new(|x| conv_ref(&x[0], &x[1], &x[2], 2, 8, 8, 5, 1, 2)),
        },
        Case {
            name: "gather_cols",
            shapes: vec![vec![2, 6]],
            range: None,
            build: Box::new(|g, x| {
                let map: Arc<[u32]> = vec![5, 0, GATHER_NONE, 2, 2, 4].into();
                g.gather_cols(x[0], map).unwrap()
            }),
            reference: Box::new(|x| {
                let map = [Some(5), Some(0), None, Some(2), Some(2), Some(4)];
                (0..2)
                    .flat_map(|b| map.iter().map(move |m| m.map_or(0.0, |i| x[0][b * 6 + i])))
                    .collect()
            }),
        },
        Case {
            name: "channel_gate",
            shapes: vec![vec![2, 2, 2, 5], vec![2, 2, 2, 3]],
            range: None,
            build: Box::new(|g, x| g.channel_gate(x[0], x[1]).unwrap()),
            reference: Box::new(|x| {
                let mut out = x[0].clone();
                for cell in 0..8 {
                    for c in 0..3 {
                        out[cell * 5 + c] *= x[1][cell * 3 + c];
                    }
                }
                out
            }),
        },
    ];
    let support = vec![vec![0u32, 2, 3, 6], vec![1u32, 4, 5]];
    let sup = support.clone();
    cases.push(Case {
        name: "softmax_masked",
        shapes: vec![vec![2, 7]],
        range: None,
        build: Box::new(move |g, x| g.softmax_masked(x[0], &sup).unwrap()),
        reference: Box::new(move |x| softmax_ref(&x[0], 7, &support)),
    });
    let targets = vec![vec![(0u32, 0.25f32), (2, 0.75)], vec![(1u32, 0.5), (3, 0.2), (4, 0.3)]];
    let t2 = targets.clone();
    cases.push(Case {
        name: "cross_entropy",
        shapes: vec![vec![2, 5]],
        range: Some((0.1, 1.0)),
        build: Box::new(move |g, x| g.cross_entropy(x[0], &t2).unwrap()),
        reference: Box::new(move |x| {
            targets
                .iter()
                .enumerate()
                .map(|(row, t)| t.iter().map(|&(i, w)| -(w as f64) * x[0][row * 5 + i as usize].ln()).sum())
                .collect()
        }),
    });
    cases
}

mod net {
    use std::collections::HashMap;

    use super::*;
    use iimap::chess::Position;
    use iimap::encoding::encode_position;
    use iimap::network::policy_index::head_gather_map;
    use iimap::network::{batch_input, support_indices, ModelConfig, PolicyValueNet, POLICY_SIZE};

    pub type Params = HashMap<String, Vec<f64>>;

    pub struct Setup {
        pub net: PolicyValueNet,
        pub input: Vec<f64>,
        pub cin: usize,
        pub support: Vec<Vec<u32>>,
        pub teacher: Vec<Vec<(u32, f32)>>,
        pub value_w: Vec<f64>,
        pub aux_w: Vec<f64>,
    }

    pub fn setup(seed: u64) -> Setup {
        let mut cfg = ModelConfig::tiny();
        cfg.residual_blocks = 2;
        cfg.filters = 8;
        cfg.value_head = true;
        cfg.aux_in_check_layer = Some(0);
        let mut net = PolicyValueNet::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        // Zero biases put some pre-activations exactly on a ReLU kink.
        for p in net.params.iter_mut() {
            if p.name.ends_with(".b") {
                for v in p.value.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let fens = [
            "r3k2r/p1ppqpb1/bn2pnp1/3PN3/1p2P3/2N2Q1p/PPPBBPPP/R3K2R w KQkq - 0 1",
            "rnbq1k1r/pp1Pbppp/2p5/8/2B5/8/PPP1NnPP/RNBQK2R b KQ - 1 8",
        ];
        let positions: Vec<Position> = fens.iter().map(|f| Position::from_fen(f).unwrap()).collect();
        let stacks: Vec<_> = positions
            .iter()
            .map(|p| encode_position(p, &net.config.encoding).unwrap())
            .collect();
        let refs: Vec<_> = stacks.iter().collect();
        let input: Vec<f64> = batch_input(&refs).unwrap().data().iter().map(|&v| v as f64).collect();
        let support: Vec<Vec<u32>> = positions.iter().map(support_indices).collect();
        let teacher = support
            .iter()
            .map(|s| {
                let raw: Vec<f64> = s.iter().map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                s.iter().zip(&raw).map(|(&i, &r)| (i, (r / total) as f32)).collect()
            })
            .collect();
        Setup {
            cin: net.config.encoding.channels(),
            net,
            input,
            support,
            teacher,
            value_w: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            aux_w: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        }
    }

    pub fn params_of(net: &PolicyValueNet) -> Params {
        net.params
            .iter()
            .map(|p| (p.name.clone(), p.value.data().iter().map(|&v| v as f64).collect()))
            .collect()
    }

    fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    fn conv(p: &Params, name: &str, x: &[f64], cin: usize, s: usize, cout: usize) -> Vec<f64> {
        conv_ref(x, &p[&format!("{name}.k")], &p[&format!("{name}.b")], 2, 8, 8, cin, s, cout)
    }

    /// The scalar training objective, in f64.
    pub fn loss(st: &Setup, p: &Params) -> f64 {
        let f = 8;
        let mut x = relu(conv(p, "net.input", &st.input, st.cin, 3, f));
        let mut taps = Vec::new();
        for i in 0..2 {
            let t = relu(conv(p, &format!("net.block{i}.conv1"), &x, f, 3, f));
            let u = conv(p, &format!("net.block{i}.conv2"), &t, f, 3, f);
            x = relu(x.iter().zip(&u).map(|(a, b)| a + b).collect());
            taps.push(x.clone());
        }
        let h = relu(conv(p, "net.policy.conv", &x, f, 3, f));
        let h = conv(p, "net.policy.out", &h, f, 1, 73);
        let map = head_gather_map();
        let head = 64 * 73;
        let logits: Vec<f64> = (0..2)
            .flat_map(|b| {
                let h = &h;
                map.iter()
                    .map(move |&m| if m == GATHER_NONE { 0.0 } else { h[b * head + m as usize] })
            })
            .collect();
        let probs = softmax_ref(&logits, POLICY_SIZE, &st.support);
        let mut total = 0.0;
        for (b, t) in st.teacher.iter().enumerate() {
            let ce: f64 = t
                .iter()
                .map(|&(i, w)| -(w as f64) * probs[b * POLICY_SIZE + i as usize].ln())
                .sum();
            total += ce / 2.0;
        }
        let v = relu(conv(p, "net.value.conv", &x, f, 1, 8));
        let v = relu(dense_ref(&v, &p["net.value.fc1.w"], &p["net.value.fc1.b"], 2, 512, 64));
        let v = dense_ref(&v, &p["net.value.fc2.w"], &p["net.value.fc2.b"], 2, 64, 1);
        total += v.iter().zip(&st.value_w).map(|(a, w)| a.tanh() * w).sum::<f64>();
        let a = dense_ref(&taps[0], &p["net.aux.in_check.w"], &p["net.aux.in_check.b"], 2, 64 * f, 1);
        total += a.iter().zip(&st.aux_w).map(|(a, w)| a * w).sum::<f64>();
        total
    }

    /// The same objective through the library graph; returns the loss and
    /// leaves the gradients in `net.params`.
    pub fn graph_loss(st: &mut Setup) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 8, 8, st.cin], st.input.iter().map(|&v| v as f32).collect()));
        let nodes = st.net.forward(&mut g, x, &st.support).unwrap();
        let ce = g.cross_entropy(nodes.policy, &st.teacher).unwrap();
        let ce = g.mean(ce);
        let vw = g.constant(Tensor::new(&[2, 1], st.value_w.iter().map(|&v| v as f32).collect()));
        let v = g.mul(nodes.value.unwrap(), vw).unwrap();
        let v = g.sum(v);
        let aw = g.constant(Tensor::new(&[2, 1], st.aux_w.iter().map(|&v| v as f32).collect()));
        let a = g.mul(nodes.aux_in_check.unwrap(), aw).unwrap();
        let a = g.sum(a);
        let l = g.add(ce, v).unwrap();
        let l = g.add(l, a).unwrap();
        g.backward(l).unwrap();
        st.net.params.zero_grads();
        st.net.params.accumulate_grads(&g);
        g.value(l).item() as f64
    }
}

/// End-to-end check of a 2-block network with value and auxiliary heads.
pub fn end_to_end(trials: usize, seed: u64) -> Outcome {
    let mut worst_rel = 0.0f64;
    let mut worst_forward = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let mut st = net::setup(seed.wrapping_add(trial as u64));
        let graph = net::graph_loss(&mut st);
        let params = net::params_of(&st.net);
        let reference = net::loss(&st, &params);
        worst_forward = worst_forward.max((graph - reference).abs() / (1.0 + reference.abs()));
        let names: Vec<(String, Vec<f32>)> = st
            .net
            .params
            .iter()
            .map(|p| (p.name.clone(), p.grad.data().to_vec()))
            .collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..COORDS {
            let (name, grad) = &names[rng.random_range(0..names.len())];
            let i = rng.random_range(0..grad.len());
            let mut plus = params.clone();
            plus.get_mut(name).unwrap()[i] += H;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap()[i] -= H;
            numeric.push((net::loss(&st, &plus) - net::loss(&st, &minus)) / (2.0 * H));
            analytic.push(grad[i] as f64);
        }
        worst_rel = worst_rel.max(rel_error(&analytic, &numeric));
    }
    Outcome {
        name: "end_to_end_2_block",
        worst_rel,
        worst_forward,
    }
}
