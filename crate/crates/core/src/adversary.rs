//! Frame-level speaker classifier. Trained through gradient reversal as the
//! adversarial branch, and reused unchanged as the closed-set attacker.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::layers::{utterance_rows, LayerSpec, Linear, LinearNodes, Mask, Recurrent, RecurrentNodes};
use crate::params::{Bound, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            hidden_dim: 32,
            num_layers: 1,
        }
    }
}

/// Bijection between speaker ids and class indices (sorted id order).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerTable {
    ids: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl SpeakerTable {
    pub fn new<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        ids.sort();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::invalid("speaker table is empty"));
        }
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(SpeakerTable { ids, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn class_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::data(format!("speaker `{id}` is not in the speaker table")))
    }

    pub fn id_of(&self, class: usize) -> Option<&str> {
        self.ids.get(class).map(String::as_str)
    }
}

pub struct Adversary {
    input_dim: usize,
    num_speakers: usize,
    layers: Vec<Recurrent>,
    out: Linear,
}

pub struct AdversaryNodes {
    layers: Vec<RecurrentNodes>,
    out: LinearNodes,
}

impl Adversary {
    pub fn new(config: &AdversaryConfig, input_dim: usize, num_speakers: usize) -> Result<Self> {
        if config.hidden_dim == 0 || config.num_layers == 0 || input_dim == 0 || num_speakers < 2 {
            return Err(Error::invalid(format!(
                "adversary needs positive dims and >= 2 speakers: {config:?}, input {input_dim}, speakers {num_speakers}"
            )));
        }
        let layers = (0..config.num_layers)
            .map(|i| {
                let d = if i == 0 { input_dim } else { 2 * config.hidden_dim };
                Recurrent::new(&format!("adv.l{i}"), LayerSpec::bidirectional(d, config.hidden_dim))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Adversary {
            input_dim,
            num_speakers,
            layers,
            out: Linear::new("adv.out", 2 * config.hidden_dim, num_speakers),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    pub fn init<R: Rng + ?Sized>(&self, group: &mut ParamGroup, rng: &mut R) {
        for l in &self.layers {
            l.init(group, rng);
        }
        self.out.init(group, rng);
    }

    pub fn bind(&self, p: &Bound) -> Result<AdversaryNodes> {
        Ok(AdversaryNodes {
            layers: self.layers.iter().map(|l| l.bind(p)).collect::<Result<_>>()?,
            out: self.out.bind(p)?,
        })
    }

    /// Frame log-posteriors `[T', K]` for one unpadded sequence `phi [T', D]`.
    pub fn forward(&self, params: &ParamGroup, phi: &Tensor) -> Result<Tensor> {
        if phi.rank() != 2 || phi.rows() == 0 || phi.cols() != self.input_dim {
            return Err(Error::shape(
                "adversary",
                format!("input {:?}, expected non-empty [T', {}]", phi.shape(), self.input_dim),
            ));
        }
        let mut g = Graph::new();
        let nodes = self.bind(&Bound::new(&mut g, params, false))?;
        let steps: Vec<NodeId> = (0..phi.rows())
            .map(|t| g.constant(Tensor::matrix(1, phi.cols(), phi.row(t).to_vec()).expect("row")))
            .collect();
        let out = nodes.forward(&mut g, &steps, &Mask::all_valid(phi.rows(), 1))?;
        let mut data = Vec::with_capacity(out.len() * self.num_speakers);
        for o in out {
            data.extend_from_slice(g.value(o).data());
        }
        Tensor::matrix(phi.rows(), self.num_speakers, data)
    }
}

impl AdversaryNodes {
    /// `xs[t]: [B, D]` to per-step log-posteriors `[B, K]`.
    pub fn forward(&self, g: &mut Graph, xs: &[NodeId], mask: &Mask) -> Result<Vec<NodeId>> {
        let mut h = xs.to_vec();
        for l in &self.layers {
            h = l.forward(g, &h, mask)?;
        }
        h.into_iter()
            .map(|x| {
                let logits = self.out.apply(g, x)?;
                g.log_softmax(logits)
            })
            .collect()
    }
}

/// Sum over utterance `b`'s valid frames of `-log_posterior[t][z]`.
pub fn utterance_loss(g: &mut Graph, log_post: &[NodeId], mask: &Mask, b: usize, z: usize) -> Result<NodeId> {
    let rows = utterance_rows(g, log_post, mask, b)?;
    let shape = g.shape(rows).to_vec();
    let k = shape[1];
    if z >= k {
        return Err(Error::invalid(format!("speaker class {z} outside {k} classes")));
    }
    let idx: Vec<usize> = (0..shape[0]).map(|t| t * k + z).collect();
    let picked = g.gather(rows, &idx)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0)
}

/// Value form of the frame-summed speaker loss; masked frames are skipped.
pub fn adversary_loss(frame_log_posteriors: &Tensor, z: usize, mask: &[bool]) -> Result<f64> {
    let frames = check_frames(frame_log_posteriors, mask)?;
    if z >= frame_log_posteriors.cols() {
        return Err(Error::invalid(format!(
            "speaker class {z} outside {} classes",
            frame_log_posteriors.cols()
        )));
    }
    Ok(-frames.iter().map(|&t| frame_log_posteriors.at(t, z)).sum::<f64>())
}

/// Mean frame log-posterior over valid frames, then argmax (lowest class on
/// ties). Returns the class and the averaged log-posteriors.
pub fn utterance_speaker_decision(frame_log_posteriors: &Tensor, mask: &[bool]) -> Result<(usize, Vec<f64>)> {
    let frames = check_frames(frame_log_posteriors, mask)?;
    let k = frame_log_posteriors.cols();
    let mut avg = vec![0.0; k];
    for &t in &frames {
        for (a, &v) in avg.iter_mut().zip(frame_log_posteriors.row(t)) {
            *a += v;
        }
    }
    let n = frames.len() as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    let mut best = 0;
    for c in 1..k {
        if avg[c] > avg[best] {
            best = c;
        }
    }
    Ok((best, avg))
}

fn check_frames(lp: &Tensor, mask: &[bool]) -> Result<Vec<usize>> {
    if lp.rank() != 2 || lp.rows() != mask.len() {
        return Err(Error::shape(
            "adversary",
            format!("log-posteriors {:?} with {} mask entries", lp.shape(), mask.len()),
        ));
    }
    let frames: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
    if frames.is_empty() {
        return Err(Error::invalid("adversary: all frames masked"));
    }
    Ok(frames)
}
