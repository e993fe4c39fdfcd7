//! The on-device encoder: frame decimation followed by stacked
//! bidirectional recurrent layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::layers::{subsample, subsampled_len, LayerSpec, Mask, Recurrent, RecurrentNodes};
use crate::params::{Bound, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub downsample_factor: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 16,
            hidden_dim: 32,
            num_layers: 2,
            downsample_factor: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.downsample_factor == 0 {
            return Err(Error::invalid(format!("encoder config fields must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// Encoder output for one utterance: `frames` is `[T', D]` with
/// `T' = ceil(T / downsample_factor)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRepr {
    pub frames: Tensor,
    pub downsample_factor: usize,
    pub source_utterance_id: String,
}

pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<Recurrent>,
}

pub struct EncoderNodes {
    layers: Vec<RecurrentNodes>,
    factor: usize,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|i| {
                let input = if i == 0 { config.input_dim } else { config.output_dim() };
                Recurrent::new(&format!("enc.l{i}"), LayerSpec::bidirectional(input, config.hidden_dim))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn init<R: Rng + ?Sized>(&self, group: &mut ParamGroup, rng: &mut R) {
        for l in &self.layers {
            l.init(group, rng);
        }
    }

    pub fn bind(&self, p: &Bound) -> Result<EncoderNodes> {
        Ok(EncoderNodes {
            layers: self.layers.iter().map(|l| l.bind(p)).collect::<Result<_>>()?,
            factor: self.config.downsample_factor,
        })
    }

    /// Encodes a single unpadded utterance `x [T, F]`.
    pub fn encode(&self, params: &ParamGroup, x: &Tensor, utterance_id: &str) -> Result<EncodedRepr> {
        if x.rank() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "encode",
                format!("input {:?}, expected [T, {}]", x.shape(), self.config.input_dim),
            ));
        }
        if x.rows() == 0 {
            return Err(Error::invalid("encode: empty sequence"));
        }
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, params, false);
        let nodes = self.bind(&bound)?;
        let steps: Vec<NodeId> = (0..x.rows())
            .map(|t| g.constant(Tensor::matrix(1, x.cols(), x.row(t).to_vec()).expect("row shape")))
            .collect();
        let (out, _) = nodes.forward(&mut g, &steps, &Mask::all_valid(x.rows(), 1))?;
        let d = self.output_dim();
        let mut data = Vec::with_capacity(out.len() * d);
        for o in &out {
            data.extend_from_slice(g.value(*o).data());
        }
        let frames = Tensor::matrix(out.len(), d, data)?;
        debug_assert_eq!(frames.rows(), subsampled_len(x.rows(), self.config.downsample_factor));
        Ok(EncodedRepr {
            frames,
            downsample_factor: self.config.downsample_factor,
            source_utterance_id: utterance_id.to_string(),
        })
    }
}

impl EncoderNodes {
    /// Batched forward: `xs[t]` is `[B, F]`. Returns the subsampled output
    /// steps (`[B, 2H]` each) and their mask.
    pub fn forward(&self, g: &mut Graph, xs: &[NodeId], mask: &Mask) -> Result<(Vec<NodeId>, Mask)> {
        let mut h = subsample(xs, self.factor)?;
        let mask = mask.subsample(self.factor)?;
        for layer in &self.layers {
            h = layer.forward(g, &h, &mask)?;
        }
        Ok((h, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            hidden_dim: 2,
            num_layers: 2,
            downsample_factor: 4,
        }
    }

    fn random_input(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, f, (0..t * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_length_is_ceil() {
        let enc = Encoder::new(small()).unwrap();
        let mut p = ParamGroup::new();
        enc.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        for (t, expected) in [(8, 2), (9, 3), (1, 1), (4, 1)] {
            let r = enc.encode(&p, &random_input(t, 3, 1), "u").unwrap();
            assert_eq!(r.frames.shape(), &[expected, 4]);
        }
        assert!(enc.encode(&p, &Tensor::zeros(&[0, 3]), "u").is_err());
        assert!(enc.encode(&p, &random_input(4, 2, 1), "u").is_err());
    }

    #[test]
    fn zero_parameters_give_constant_output() {
        let enc = Encoder::new(small()).unwrap();
        let mut p = ParamGroup::new();
        enc.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        p.fill(0.0);
        let a = enc.encode(&p, &random_input(12, 3, 1), "a").unwrap();
        let b = enc.encode(&p, &random_input(12, 3, 2), "b").unwrap();
        assert_eq!(a.frames, b.frames);
        assert!(a.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic() {
        let enc = Encoder::new(small()).unwrap();
        let mut p = ParamGroup::new();
        enc.init(&mut p, &mut ChaCha8Rng::seed_from_u64(3));
        let mut q = ParamGroup::new();
        enc.init(&mut q, &mut ChaCha8Rng::seed_from_u64(3));
        let x = random_input(10, 3, 4);
        let a = enc.encode(&p, &x, "u").unwrap();
        let b = enc.encode(&q, &x, "u").unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.frames), bits(&b.frames));
    }

    #[test]
    fn gradient_wrt_first_layer_weights() {
        let enc = Encoder::new(small()).unwrap();
        let mut p = ParamGroup::new();
        enc.init(&mut p, &mut ChaCha8Rng::seed_from_u64(5));
        let x = random_input(8, 3, 6);
        let name = "enc.l0.fwd.w_in";
        let w0 = p.get(name).unwrap().clone();
        let err = grad_check(
            |g, w| {
                let bound = Bound::new(g, &p, false).with_node(name, w);
                let nodes = enc.bind(&bound)?;
                let steps: Vec<NodeId> = (0..8)
                    .map(|t| g.constant(Tensor::matrix(1, 3, x.row(t).to_vec()).unwrap()))
                    .collect();
                let (out, _) = nodes.forward(g, &steps, &Mask::all_valid(8, 1))?;
                let stacked = g.concat(&out, 0)?;
                let sq = g.mul(stacked, stacked)?;
                g.sum(sq)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
