use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::check_same_layout;
use super::{batch_input, NetworkError};
use crate::autodiff::{Graph, NodeId, ParamId, ParameterSet, Tensor};
use crate::encoding::{EncodingConfig, PlaneStack, PIECE_PLANES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskerConfig {
    pub hidden: usize,
    /// Initial bias of the output layer; positive values start with most
    /// of the input kept.
    pub init_bias: f32,
    pub encoding: EncodingConfig,
}

impl Default for MaskerConfig {
    fn default() -> Self {
        MaskerConfig {
            hidden: 32,
            init_bias: 2.0,
            encoding: EncodingConfig::default(),
        }
    }
}

/// Three 3x3 convolutions (`C -> hidden -> hidden -> 12`) with ReLU between
/// and a sigmoid on the output: one keep-probability per piece-plane entry.
pub struct MaskerNet {
    pub config: MaskerConfig,
    pub params: ParameterSet,
    layers: [(ParamId, ParamId); 3],
}

impl MaskerNet {
    pub fn new(config: MaskerConfig, seed: u64) -> Result<MaskerNet, NetworkError> {
        config.encoding.validate()?;
        if config.hidden == 0 {
            return Err(NetworkError::Config("masker hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let cin = config.encoding.channels();
        let h = config.hidden;
        let dims = [(cin, h, 1.0), (h, h, 1.0), (h, PIECE_PLANES, 0.1)];
        let mut layers = Vec::with_capacity(3);
        for (i, &(a, b, gain)) in dims.iter().enumerate() {
            let k = params.insert_he(&format!("masker.conv{i}.k"), &[3, 3, a, b], 9 * a, gain, &mut rng)?;
            let bias = if i == 2 { config.init_bias } else { 0.0 };
            let bb = params.insert(&format!("masker.conv{i}.b"), Tensor::full(&[b], bias))?;
            layers.push((k, bb));
        }
        Ok(MaskerNet {
            config,
            params,
            layers: [layers[0], layers[1], layers[2]],
        })
    }

    pub fn load_params(&mut self, params: ParameterSet) -> Result<(), NetworkError> {
        check_same_layout(&self.params, &params)?;
        let mut params = params;
        params.adopt_identity(&self.params);
        self.params = params;
        Ok(())
    }

    /// Records `P = sigmoid(masker(input))`, shape `[batch, 8, 8, 12]`.
    pub fn forward(&self, g: &mut Graph, input: NodeId) -> Result<NodeId, NetworkError> {
        let shape = g.shape(input).to_vec();
        let want = self.config.encoding.channels();
        if shape.len() != 4 || shape[1..] != [8, 8, want] {
            return Err(NetworkError::InputShape {
                expected: vec![8, 8, want],
                got: shape,
            });
        }
        let mut x = input;
        for (i, &(k, b)) in self.layers.iter().enumerate() {
            let kk = g.param(&self.params, k);
            let bb = g.param(&self.params, b);
            x = g.conv2d(x, kk, bb)?;
            x = if i < 2 { g.relu(x) } else { g.sigmoid(x) };
        }
        Ok(x)
    }

    /// Probability map for one input, shape `[8, 8, 12]`.
    pub fn probabilities(&self, input: &PlaneStack) -> Result<Tensor, NetworkError> {
        let mut g = Graph::new();
        let x = g.constant(batch_input(&[input])?);
        let p = self.forward(&mut g, x)?;
        Ok(g.value(p).clone().reshaped(&[8, 8, PIECE_PLANES]))
    }
}
