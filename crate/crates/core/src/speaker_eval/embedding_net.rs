//! Toy x-vector extractor: per-frame ReLU layers, statistics pooling, a
//! linear bottleneck (the embedding) and a speaker softmax.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Embedding;
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::layers::{stats_pool, Linear, LinearNodes};
use crate::params::{Bound, ParamGroup};
use crate::seed::rng_for;
use crate::trainer::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub frame_dims: Vec<usize>,
    pub embed_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            frame_dims: vec![64, 64],
            embed_dim: 32,
            epochs: 30,
            learning_rate: 3e-3,
            batch_size: 16,
            clip_norm: 5.0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_dims.is_empty() || self.frame_dims.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config("embedding net layer sizes must be positive".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "embedding net needs batch_size > 0, learning_rate > 0 and clip_norm > 0".into(),
            ));
        }
        Ok(())
    }
}

struct Layers {
    frames: Vec<Linear>,
    embed: Linear,
    classifier: Linear,
}

struct Nodes {
    frames: Vec<LinearNodes>,
    embed: LinearNodes,
    classifier: LinearNodes,
}

impl Layers {
    fn new(cfg: &EmbeddingConfig, input_dim: usize, num_classes: usize) -> Self {
        let mut prev = input_dim;
        let frames = cfg
            .frame_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let l = Linear::new(format!("xvec.frame{i}"), prev, d);
                prev = d;
                l
            })
            .collect();
        Layers {
            frames,
            embed: Linear::new("xvec.embed", 2 * prev, cfg.embed_dim),
            classifier: Linear::new("xvec.out", cfg.embed_dim, num_classes),
        }
    }

    fn bind(&self, p: &Bound) -> Result<Nodes> {
        Ok(Nodes {
            frames: self.frames.iter().map(|l| l.bind(p)).collect::<Result<_>>()?,
            embed: self.embed.bind(p)?,
            classifier: self.classifier.bind(p)?,
        })
    }
}

impl Nodes {
    /// Returns the embedding `[1, E]` and the class log-posteriors `[1, K]`.
    fn forward(&self, g: &mut Graph, x: NodeId, valid: &[bool]) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        for l in &self.frames {
            let y = l.apply(g, h)?;
            h = g.relu(y)?;
        }
        let pooled = stats_pool(g, h, valid)?;
        let width = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[1, width])?;
        let emb = self.embed.apply(g, pooled)?;
        let act = g.relu(emb)?;
        let logits = self.classifier.apply(g, act)?;
        Ok((emb, g.log_softmax(logits)?))
    }
}

/// A trained attacker. Inputs are standardized with training statistics.
#[derive(Clone, Debug)]
pub struct EmbeddingExtractor {
    pub config: EmbeddingConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub params: ParamGroup,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
}

impl EmbeddingExtractor {
    fn layers(&self) -> Layers {
        Layers::new(&self.config, self.input_dim, self.num_classes)
    }

    pub(crate) fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != self.input_dim {
            return Err(Error::shape(
                "extract_embedding",
                format!("expected [T, {}], got {:?}", self.input_dim, x.shape()),
            ));
        }
        if x.rows() == 0 {
            return Err(Error::invalid("cannot embed an empty sequence"));
        }
        let d = self.input_dim;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.input_mean[i % d]) / self.input_std[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn run(&self, x: &Tensor, valid: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.standardize(x)?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &self.params, false);
        let nodes = self.layers().bind(&bound)?;
        let xn = g.constant(x);
        let (emb, lp) = nodes.forward(&mut g, xn, valid)?;
        Ok((g.value(emb).data().to_vec(), g.value(lp).data().to_vec()))
    }

    /// Bottleneck activation over the frames where `valid` is true.
    pub fn embed_masked(&self, x: &Tensor, valid: &[bool]) -> Result<Vec<f64>> {
        Ok(self.run(x, valid)?.0)
    }

    pub fn extract(&self, x: &Tensor, utterance_id: &str, speaker_id: Option<&str>) -> Result<Embedding> {
        let valid = vec![true; x.rows()];
        let vector = self.embed_masked(x, &valid)?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("embedding of {utterance_id} is not finite")));
        }
        Ok(Embedding {
            vector,
            utterance_id: utterance_id.to_string(),
            speaker_id: speaker_id.map(str::to_string),
        })
    }

    /// Most probable training speaker (lowest index on ties).
    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        let (_, lp) = self.run(x, &vec![true; x.rows()])?;
        let mut best = 0;
        for (k, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

/// Cross-entropy training of the attacker on `(sequence, class)` pairs.
pub fn train_embedding_net(
    inputs: &[Tensor],
    labels: &[usize],
    cfg: &EmbeddingConfig,
    seed: u64,
) -> Result<EmbeddingExtractor> {
    cfg.validate()?;
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::invalid("embedding net needs one label per input"));
    }
    let input_dim = inputs[0].cols();
    if inputs.iter().any(|x| x.rank() != 2 || x.cols() != input_dim || x.rows() == 0) {
        return Err(Error::shape("train_embedding_net", "inputs must be nonempty [T, F] with a common F"));
    }
    let mut classes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *classes.entry(l).or_default() += 1;
    }
    if classes.len() < 2 {
        return Err(Error::invalid("embedding net needs at least 2 speakers"));
    }
    let num_classes = classes.keys().last().map_or(0, |m| m + 1);

    let frames: usize = inputs.iter().map(Tensor::rows).sum();
    let mut mean = vec![0.0; input_dim];
    let mut sq = vec![0.0; input_dim];
    for x in inputs {
        for (i, v) in x.data().iter().enumerate() {
            mean[i % input_dim] += v;
            sq[i % input_dim] += v * v;
        }
    }
    let mut std = vec![0.0; input_dim];
    for c in 0..input_dim {
        mean[c] /= frames as f64;
        std[c] = (sq[c] / frames as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
    }

    let mut ext = EmbeddingExtractor {
        config: cfg.clone(),
        input_dim,
        num_classes,
        params: ParamGroup::new(),
        input_mean: mean,
        input_std: std,
    };
    let layers = ext.layers();
    let mut rng = rng_for(seed, "xvec/init");
    for l in layers.frames.iter().chain([&layers.embed, &layers.classifier]) {
        l.init(&mut ext.params, &mut rng);
    }
    let standardized = inputs.iter().map(|x| ext.standardize(x)).collect::<Result<Vec<_>>>()?;

    let mut opt: Adam<&str> = Adam::new(cfg.learning_rate, cfg.clip_norm);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng_for(seed, &format!("xvec/epoch{epoch}")));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &ext.params, true);
            let nodes = layers.bind(&bound)?;
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = g.constant(standardized[i].clone());
                let valid = vec![true; standardized[i].rows()];
                let (_, lp) = nodes.forward(&mut g, x, &valid)?;
                let picked = g.gather(lp, &[labels[i]])?;
                losses.push(picked);
            }
            let all = g.concat(&losses, 0)?;
            total -= g.value(all).sum();
            let mean_lp = g.mean(all)?;
            let loss = g.scale(mean_lp, -1.0)?;
            g.backward(loss)?;
            let grads = BTreeMap::from([("xvec", bound.grads(&g))]);
            opt.step([("xvec", &mut ext.params)], &grads)?;
        }
        let mean_loss = total / inputs.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numerical(format!("embedding net epoch {epoch}: loss is {mean_loss}")));
        }
        log::debug!("xvec epoch {epoch}: loss {mean_loss:.4}");
    }
    Ok(ext)
}
