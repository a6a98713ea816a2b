use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy_index::{head_gather_map, HEAD_SIZE, MOVE_TYPES, POLICY_SIZE};
use super::{batch_input, NetworkError};
use crate::autodiff::{Graph, NodeId, ParamId, ParameterSet, Tensor};
use crate::encoding::{EncodingConfig, PlaneStack};

const VALUE_PLANES: usize = 8;
const VALUE_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub residual_blocks: usize,
    pub filters: usize,
    pub policy_index_size: usize,
    pub value_head: bool,
    /// Adds a linear in-check readout on this block's output.
    #[serde(default)]
    pub aux_in_check_layer: Option<usize>,
    pub encoding: EncodingConfig,
}

impl Default for ModelConfig {
    /// Desk-scale network: 4 blocks of 64 filters.
    fn default() -> Self {
        ModelConfig {
            residual_blocks: 4,
            filters: 64,
            policy_index_size: POLICY_SIZE,
            value_head: false,
            aux_in_check_layer: None,
            encoding: EncodingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            residual_blocks: 2,
            filters: 16,
            ..Default::default()
        }
    }

    /// Full-size trunk: 20 blocks of 256 filters over an eight-position history.
    pub fn paper_parity() -> Self {
        ModelConfig {
            residual_blocks: 20,
            filters: 256,
            value_head: true,
            encoding: EncodingConfig::stacked(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        self.encoding.validate()?;
        if self.residual_blocks < 1 {
            return Err(NetworkError::Config("residual_blocks must be at least 1".into()));
        }
        if self.filters < 8 {
            return Err(NetworkError::Config("filters must be at least 8".into()));
        }
        if self.policy_index_size != POLICY_SIZE {
            return Err(NetworkError::Config(format!(
                "policy_index_size must be {POLICY_SIZE}"
            )));
        }
        if let Some(l) = self.aux_in_check_layer {
            if l >= self.residual_blocks {
                return Err(NetworkError::Config(format!(
                    "aux_in_check_layer {l} out of range for {} blocks",
                    self.residual_blocks
                )));
            }
        }
        Ok(())
    }
}

struct Conv {
    k: ParamId,
    b: ParamId,
}

struct Dense {
    w: ParamId,
    b: ParamId,
}

fn conv(
    params: &mut ParameterSet,
    name: &str,
    size: usize,
    cin: usize,
    cout: usize,
    gain: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Conv, NetworkError> {
    let k = params.insert_he(&format!("{name}.k"), &[size, size, cin, cout], size * size * cin, gain, rng)?;
    let b = params.insert(&format!("{name}.b"), Tensor::zeros(&[cout]))?;
    Ok(Conv { k, b })
}

fn dense(
    params: &mut ParameterSet,
    name: &str,
    inp: usize,
    out: usize,
    gain: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Dense, NetworkError> {
    let w = params.insert_he(&format!("{name}.w"), &[inp, out], inp, gain, rng)?;
    let b = params.insert(&format!("{name}.b"), Tensor::zeros(&[out]))?;
    Ok(Dense { w, b })
}

impl Conv {
    fn apply(&self, g: &mut Graph, params: &ParameterSet, x: NodeId) -> Result<NodeId, NetworkError> {
        let k = g.param(params, self.k);
        let b = g.param(params, self.b);
        Ok(g.conv2d(x, k, b)?)
    }
}

impl Dense {
    fn apply(&self, g: &mut Graph, params: &ParameterSet, x: NodeId) -> Result<NodeId, NetworkError> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        Ok(g.dense(x, w, b)?)
    }
}

struct Block {
    first: Conv,
    second: Conv,
}

/// Residual policy/value network.
///
/// Trunk: a 3x3 input convolution followed by `residual_blocks` blocks of
/// two 3x3 convolutions with an identity skip; every block output is a tap.
/// Policy head: 3x3 conv, ReLU, 1x1 conv to 73 move types per square,
/// gathered into the policy vector and soft-maxed over legal moves.
/// Value head: 1x1 conv to 8 planes, two dense layers, tanh.
pub struct PolicyValueNet {
    pub config: ModelConfig,
    pub params: ParameterSet,
    input: Conv,
    blocks: Vec<Block>,
    policy_conv: Conv,
    policy_out: Conv,
    value: Option<(Conv, Dense, Dense)>,
    aux: Option<Dense>,
}

/// Graph handles produced by one forward pass.
pub struct NetNodes {
    pub logits: NodeId,
    pub policy: NodeId,
    pub value: Option<NodeId>,
    pub taps: Vec<NodeId>,
    /// In-check logit, `[batch, 1]`.
    pub aux_in_check: Option<NodeId>,
}

/// Result of evaluating one position.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub policy: Vec<f32>,
    pub value: Option<f32>,
    /// One `[8, 8, filters]` tensor per residual block.
    pub taps: Vec<Tensor>,
}

impl PolicyValueNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<PolicyValueNet, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let f = config.filters;
        let cin = config.encoding.channels();
        let input = conv(&mut params, "net.input", 3, cin, f, 1.0, &mut rng)?;
        let blocks = (0..config.residual_blocks)
            .map(|i| {
                Ok(Block {
                    first: conv(&mut params, &format!("net.block{i}.conv1"), 3, f, f, 1.0, &mut rng)?,
                    second: conv(&mut params, &format!("net.block{i}.conv2"), 3, f, f, 0.25, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>, NetworkError>>()?;
        let policy_conv = conv(&mut params, "net.policy.conv", 3, f, f, 1.0, &mut rng)?;
        let policy_out = conv(&mut params, "net.policy.out", 1, f, MOVE_TYPES, 0.1, &mut rng)?;
        let value = if config.value_head {
            Some((
                conv(&mut params, "net.value.conv", 1, f, VALUE_PLANES, 1.0, &mut rng)?,
                dense(&mut params, "net.value.fc1", 64 * VALUE_PLANES, VALUE_HIDDEN, 1.0, &mut rng)?,
                dense(&mut params, "net.value.fc2", VALUE_HIDDEN, 1, 0.1, &mut rng)?,
            ))
        } else {
            None
        };
        let aux = match config.aux_in_check_layer {
            Some(_) => Some(dense(&mut params, "net.aux.in_check", 64 * f, 1, 0.1, &mut rng)?),
            None => None,
        };
        Ok(PolicyValueNet {
            config,
            params,
            input,
            blocks,
            policy_conv,
            policy_out,
            value,
            aux,
        })
    }

    /// Replaces the parameter values (and optimizer state) with `params`,
    /// which must have been produced by a network of the same config.
    pub fn load_params(&mut self, params: ParameterSet) -> Result<(), NetworkError> {
        check_same_layout(&self.params, &params)?;
        let mut params = params;
        params.adopt_identity(&self.params);
        self.params = params;
        Ok(())
    }

    /// Records the forward pass of a `[batch, 8, 8, C]` input.
    pub fn forward(
        &self,
        g: &mut Graph,
        input: NodeId,
        support: &[Vec<u32>],
    ) -> Result<NetNodes, NetworkError> {
        let shape = g.shape(input).to_vec();
        let want = self.config.encoding.channels();
        if shape.len() != 4 || shape[1..] != [8, 8, want] {
            return Err(NetworkError::InputShape {
                expected: vec![8, 8, want],
                got: shape,
            });
        }
        let batch = shape[0];
        let p = &self.params;
        let taps = self.trunk(g, input, self.blocks.len())?;
        let x = *taps.last().expect("at least one block");

        let h = self.policy_conv.apply(g, p, x)?;
        let h = g.relu(h);
        let h = self.policy_out.apply(g, p, h)?;
        let h = g.reshape(h, &[batch, HEAD_SIZE])?;
        let logits = g.gather_cols(h, head_gather_map())?;
        let policy = g.softmax_masked(logits, support)?;

        let value = match &self.value {
            Some((vc, fc1, fc2)) => {
                let v = vc.apply(g, p, x)?;
                let v = g.relu(v);
                let v = g.reshape(v, &[batch, 64 * VALUE_PLANES])?;
                let v = fc1.apply(g, p, v)?;
                let v = g.relu(v);
                let v = fc2.apply(g, p, v)?;
                Some(g.tanh(v))
            }
            None => None,
        };

        let aux_in_check = match (&self.aux, self.config.aux_in_check_layer) {
            (Some(head), Some(layer)) => {
                let t = g.reshape(taps[layer], &[batch, 64 * self.config.filters])?;
                Some(head.apply(g, p, t)?)
            }
            _ => None,
        };

        Ok(NetNodes {
            logits,
            policy,
            value,
            taps,
            aux_in_check,
        })
    }

    /// Records the input convolution and the first `depth` residual blocks,
    /// returning each block's output.
    pub fn trunk(&self, g: &mut Graph, input: NodeId, depth: usize) -> Result<Vec<NodeId>, NetworkError> {
        let p = &self.params;
        let x = self.input.apply(g, p, input)?;
        let mut x = g.relu(x);
        let mut taps = Vec::with_capacity(depth);
        for block in &self.blocks[..depth.min(self.blocks.len())] {
            let t = block.first.apply(g, p, x)?;
            let t = g.relu(t);
            let u = block.second.apply(g, p, t)?;
            let s = g.add(x, u)?;
            x = g.relu(s);
            taps.push(x);
        }
        Ok(taps)
    }

    /// Block outputs `0..depth` for a batch of inputs, one `[batch, 8, 8, filters]`
    /// tensor per block.
    pub fn taps_batch(&self, inputs: &[&PlaneStack], depth: usize) -> Result<Vec<Tensor>, NetworkError> {
        let mut g = Graph::new();
        let x = g.constant(batch_input(inputs)?);
        let want = self.config.encoding.channels();
        if inputs[0].channels() != want {
            return Err(NetworkError::InputShape {
                expected: vec![8, 8, want],
                got: vec![8, 8, inputs[0].channels()],
            });
        }
        let taps = self.trunk(&mut g, x, depth)?;
        Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
    }

    /// Evaluates a batch of positions without recording gradients for later use.
    pub fn forward_batch(
        &self,
        inputs: &[&PlaneStack],
        supports: &[Vec<u32>],
    ) -> Result<Vec<ModelOutput>, NetworkError> {
        let mut g = Graph::new();
        let x = g.constant(batch_input(inputs)?);
        let nodes = self.forward(&mut g, x, supports)?;
        Ok(unbatch(&g, &nodes, inputs.len(), self.config.filters))
    }
}

pub(crate) fn unbatch(g: &Graph, nodes: &NetNodes, batch: usize, filters: usize) -> Vec<ModelOutput> {
    let policy = g.value(nodes.policy).data();
    (0..batch)
        .map(|b| ModelOutput {
            policy: policy[b * POLICY_SIZE..(b + 1) * POLICY_SIZE].to_vec(),
            value: nodes.value.map(|v| g.value(v).data()[b]),
            taps: nodes
                .taps
                .iter()
                .map(|&t| {
                    let n = 64 * filters;
                    Tensor::new(&[8, 8, filters], g.value(t).data()[b * n..(b + 1) * n].to_vec())
                })
                .collect(),
        })
        .collect()
}

pub(crate) fn check_same_layout(a: &ParameterSet, b: &ParameterSet) -> Result<(), NetworkError> {
    if a.len() != b.len() {
        return Err(NetworkError::Config(format!(
            "parameter count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b.iter()) {
        if x.name != y.name || x.value.shape() != y.value.shape() {
            return Err(NetworkError::Config(format!(
                "parameter mismatch: {} {:?} vs {} {:?}",
                x.name,
                x.value.shape(),
                y.name,
                y.value.shape()
            )));
        }
    }
    Ok(())
}
