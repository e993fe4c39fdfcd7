//! Location-aware attention decoder over encoder frames.
//!
//! ```text
//! f      = conv(prev_weights)                     [T', C]
//! e_t    = v^T tanh(W s + U phi_t + F f_t + b)
//! a      = softmax(e) over unmasked t
//! c      = sum_t a_t phi_t
//! s'     = GRU([embed(y_prev); c], s)
//! logp   = log_softmax(O [s'; c] + o)
//! ```

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::ctc::Vocab;
use crate::error::{Error, Result};
use crate::layers::{GruCell, GruNodes, Linear, LinearNodes};
use crate::params::{glorot, Bound, ParamGroup};

const MASKED_SCORE: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub decoder_hidden: usize,
    pub attn_dim: usize,
    pub conv_channels: usize,
    pub conv_width: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            embed_dim: 16,
            decoder_hidden: 32,
            attn_dim: 32,
            conv_channels: 4,
            conv_width: 3,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.decoder_hidden,
            self.attn_dim,
            self.conv_channels,
            self.conv_width,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("attention dims must be positive: {self:?}")));
        }
        if self.conv_width % 2 == 0 {
            return Err(Error::invalid("attention conv_width must be odd"));
        }
        Ok(())
    }
}

pub struct AttentionDecoder {
    config: AttentionConfig,
    enc_dim: usize,
    vocab_size: usize,
    gru: GruCell,
    out: Linear,
}

/// Decoder state between steps. `weights` is `[1, T']`, `hidden` is `[1, H]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub hidden: NodeId,
    pub weights: NodeId,
    pub prev_symbol: usize,
}

/// Step-invariant quantities for one utterance.
pub struct Memory {
    pub phi: NodeId,
    enc_proj: NodeId,
    bias: Option<NodeId>,
    valid: Vec<bool>,
}

impl Memory {
    pub fn frames(&self) -> usize {
        self.valid.len()
    }
}

pub struct StepOutput {
    pub hidden: NodeId,
    pub weights: NodeId,
    pub context: NodeId,
    pub log_probs: NodeId,
}

pub struct AttentionNodes {
    w_state: NodeId,
    w_enc: NodeId,
    b: NodeId,
    conv: NodeId,
    w_loc: NodeId,
    v: NodeId,
    embed: NodeId,
    gru: GruNodes,
    out: LinearNodes,
    hidden: usize,
    enc_dim: usize,
    vocab_size: usize,
    conv_width: usize,
}

impl AttentionDecoder {
    pub fn new(config: AttentionConfig, enc_dim: usize, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if enc_dim == 0 || vocab_size < 2 {
            return Err(Error::invalid("attention decoder needs enc_dim > 0 and at least 2 symbols"));
        }
        let gru = GruCell::new("dec.gru", config.embed_dim + enc_dim, config.decoder_hidden);
        let out = Linear::new("dec.out", config.decoder_hidden + enc_dim, vocab_size);
        Ok(AttentionDecoder {
            config,
            enc_dim,
            vocab_size,
            gru,
            out,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn init<R: Rng + ?Sized>(&self, group: &mut ParamGroup, rng: &mut R) {
        let c = &self.config;
        group.insert("att.w_state", glorot(c.decoder_hidden, c.attn_dim, rng));
        group.insert("att.w_enc", glorot(self.enc_dim, c.attn_dim, rng));
        group.insert("att.b", Tensor::zeros(&[c.attn_dim]));
        group.insert("att.conv", glorot(c.conv_width, c.conv_channels, rng));
        group.insert("att.w_loc", glorot(c.conv_channels, c.attn_dim, rng));
        group.insert("att.v", glorot(c.attn_dim, 1, rng));
        group.insert("dec.embed", glorot(self.vocab_size, c.embed_dim, rng));
        self.gru.init(group, rng);
        self.out.init(group, rng);
    }

    pub fn bind(&self, p: &Bound) -> Result<AttentionNodes> {
        Ok(AttentionNodes {
            w_state: p.get("att.w_state")?,
            w_enc: p.get("att.w_enc")?,
            b: p.get("att.b")?,
            conv: p.get("att.conv")?,
            w_loc: p.get("att.w_loc")?,
            v: p.get("att.v")?,
            embed: p.get("dec.embed")?,
            gru: self.gru.bind(p)?,
            out: self.out.bind(p)?,
            hidden: self.config.decoder_hidden,
            enc_dim: self.enc_dim,
            vocab_size: self.vocab_size,
            conv_width: self.config.conv_width,
        })
    }

    /// Value-only teacher-forced loss.
    pub fn loss_value(&self, params: &ParamGroup, phi: &Tensor, target: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let nodes = self.bind(&Bound::new(&mut g, params, false))?;
        let phi = g.constant(phi.clone());
        let mem = nodes.memory(&mut g, phi, None)?;
        let loss = nodes.loss(&mut g, &mem, target)?;
        Ok(g.value(loss).item())
    }

    /// Per-step argmax decoding; eos is forced once `max_len` symbols exist.
    pub fn greedy_decode(&self, params: &ParamGroup, phi: &Tensor, max_len: usize) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let nodes = self.bind(&Bound::new(&mut g, params, false))?;
        let phi = g.constant(phi.clone());
        let mem = nodes.memory(&mut g, phi, None)?;
        let mut state = nodes.initial_state(&mut g, &mem)?;
        let mut out = Vec::new();
        while out.len() < max_len {
            let step = nodes.step(&mut g, &mem, &state)?;
            let lp = g.value(step.log_probs).data();
            let best = argmax(lp);
            if best == Vocab::EOS {
                break;
            }
            out.push(best);
            state = AttentionState {
                hidden: step.hidden,
                weights: step.weights,
                prev_symbol: best,
            };
        }
        Ok(out)
    }

    /// Length-bounded beam search. Scores are summed log-posteriors
    /// (including eos); ties go to the lexicographically smallest sequence.
    pub fn beam_decode(&self, params: &ParamGroup, phi: &Tensor, beam_size: usize, max_len: usize) -> Result<Vec<usize>> {
        if beam_size == 0 {
            return Err(Error::invalid("beam_size must be at least 1"));
        }
        let mut g = Graph::new();
        let nodes = self.bind(&Bound::new(&mut g, params, false))?;
        let phi = g.constant(phi.clone());
        let mem = nodes.memory(&mut g, phi, None)?;

        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
            state: Option<AttentionState>,
        }
        let rank = |a: &Hyp, b: &Hyp| -> Ordering {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.tokens.cmp(&b.tokens))
                .then_with(|| b.state.is_none().cmp(&a.state.is_none()))
        };

        let mut live = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
            state: Some(nodes.initial_state(&mut g, &mem)?),
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        while !live.is_empty() {
            let mut cands = Vec::new();
            for h in &live {
                let state = h.state.expect("live hypothesis has state");
                let step = nodes.step(&mut g, &mem, &state)?;
                let lp = g.value(step.log_probs).data().to_vec();
                for (s, &l) in lp.iter().enumerate() {
                    if s == Vocab::EOS {
                        cands.push(Hyp {
                            tokens: h.tokens.clone(),
                            score: h.score + l,
                            state: None,
                        });
                    } else if h.tokens.len() < max_len {
                        let mut tokens = h.tokens.clone();
                        tokens.push(s);
                        cands.push(Hyp {
                            tokens,
                            score: h.score + l,
                            state: Some(AttentionState {
                                hidden: step.hidden,
                                weights: step.weights,
                                prev_symbol: s,
                            }),
                        });
                    }
                }
            }
            cands.sort_by(rank);
            cands.truncate(beam_size);
            live.clear();
            for c in cands {
                if c.state.is_some() {
                    live.push(c);
                } else {
                    finished.push(c);
                }
            }
            finished.sort_by(rank);
            // Extensions only lower scores, so a strictly better finished
            // hypothesis cannot be overtaken.
            if let (Some(best), Some(top)) = (finished.first(), live.first()) {
                if best.score > top.score {
                    break;
                }
            }
        }
        Ok(finished
            .into_iter()
            .next()
            .map(|h| h.tokens)
            .unwrap_or_default())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl AttentionNodes {
    /// Prepares `phi [T', D]` for attention; `mask` marks valid frames
    /// (all valid when `None`).
    pub fn memory(&self, g: &mut Graph, phi: NodeId, mask: Option<&[bool]>) -> Result<Memory> {
        let shape = g.shape(phi).to_vec();
        if shape.len() != 2 || shape[1] != self.enc_dim || shape[0] == 0 {
            return Err(Error::shape(
                "attention",
                format!("phi {shape:?}, expected [T', {}]", self.enc_dim),
            ));
        }
        let frames = shape[0];
        let valid = match mask {
            Some(m) if m.len() != frames => {
                return Err(Error::shape("attention", format!("mask of {} for {frames} frames", m.len())))
            }
            Some(m) => m.to_vec(),
            None => vec![true; frames],
        };
        if !valid.iter().any(|&v| v) {
            return Err(Error::invalid("attention: all frames masked"));
        }
        let bias = if valid.iter().all(|&v| v) {
            None
        } else {
            let b: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { MASKED_SCORE }).collect();
            Some(g.constant(Tensor::matrix(1, frames, b)?))
        };
        let enc_proj = g.matmul(phi, self.w_enc)?;
        Ok(Memory {
            phi,
            enc_proj,
            bias,
            valid,
        })
    }

    /// Zero hidden state, uniform weights over valid frames, previous symbol sos.
    pub fn initial_state(&self, g: &mut Graph, mem: &Memory) -> Result<AttentionState> {
        let n = mem.valid.iter().filter(|&&v| v).count() as f64;
        let w: Vec<f64> = mem.valid.iter().map(|&v| if v { 1.0 / n } else { 0.0 }).collect();
        Ok(AttentionState {
            hidden: g.constant(Tensor::zeros(&[1, self.hidden])),
            weights: g.constant(Tensor::matrix(1, mem.frames(), w)?),
            prev_symbol: Vocab::SOS,
        })
    }

    /// Returns `(context [1, D], weights [1, T'])`.
    pub fn attend(&self, g: &mut Graph, mem: &Memory, hidden: NodeId, prev_weights: NodeId) -> Result<(NodeId, NodeId)> {
        let frames = mem.frames();
        if g.shape(prev_weights) != [1, frames] {
            return Err(Error::shape(
                "attend",
                format!("weights {:?} for {frames} frames", g.shape(prev_weights)),
            ));
        }
        let pad = self.conv_width / 2;
        let flat = g.reshape(prev_weights, &[frames])?;
        let padded = if pad > 0 {
            let z = g.constant(Tensor::zeros(&[pad]));
            g.concat(&[z, flat, z], 0)?
        } else {
            flat
        };
        let idx: Vec<usize> = (0..frames)
            .flat_map(|t| (0..self.conv_width).map(move |k| t + k))
            .collect();
        let cols = g.gather(padded, &idx)?;
        let cols = g.reshape(cols, &[frames, self.conv_width])?;
        let feats = g.matmul(cols, self.conv)?;
        let loc = g.matmul(feats, self.w_loc)?;

        let sp = g.matmul(hidden, self.w_state)?;
        let a = g.shape(sp)[1];
        let sp = g.reshape(sp, &[a])?;
        let pre = g.add(mem.enc_proj, loc)?;
        let pre = g.add(pre, sp)?;
        let pre = g.add(pre, self.b)?;
        let act = g.tanh(pre)?;
        let scores = g.matmul(act, self.v)?;
        let mut scores = g.reshape(scores, &[1, frames])?;
        if let Some(bias) = mem.bias {
            scores = g.add(scores, bias)?;
        }
        let weights = g.softmax(scores)?;
        let context = g.matmul(weights, mem.phi)?;
        Ok((context, weights))
    }

    /// One decoder step consuming `state.prev_symbol`.
    pub fn step(&self, g: &mut Graph, mem: &Memory, state: &AttentionState) -> Result<StepOutput> {
        if state.prev_symbol >= self.vocab_size {
            return Err(Error::invalid(format!("symbol {} outside vocabulary", state.prev_symbol)));
        }
        let (context, weights) = self.attend(g, mem, state.hidden, state.weights)?;
        let emb = g.embedding(self.embed, &[state.prev_symbol])?;
        let input = g.concat(&[emb, context], 1)?;
        let hidden = self.gru.step(g, input, state.hidden)?;
        let feat = g.concat(&[hidden, context], 1)?;
        let logits = self.out.apply(g, feat)?;
        let log_probs = g.log_softmax(logits)?;
        Ok(StepOutput {
            hidden,
            weights,
            context,
            log_probs,
        })
    }

    /// Teacher-forced `-sum ln P(y_m | y_<m)` over `target` followed by eos.
    pub fn loss(&self, g: &mut Graph, mem: &Memory, target: &[usize]) -> Result<NodeId> {
        if let Some(&bad) = target.iter().find(|&&y| y == Vocab::EOS || y >= self.vocab_size) {
            return Err(Error::invalid(format!("target symbol {bad} is not a character index")));
        }
        let mut state = self.initial_state(g, mem)?;
        let mut picks = Vec::with_capacity(target.len() + 1);
        for &y in target.iter().chain(std::iter::once(&Vocab::EOS)) {
            let step = self.step(g, mem, &state)?;
            picks.push(g.gather(step.log_probs, &[y])?);
            state = AttentionState {
                hidden: step.hidden,
                weights: step.weights,
                prev_symbol: y,
            };
        }
        let all = g.concat(&picks, 0)?;
        let total = g.sum(all)?;
        g.scale(total, -1.0)
    }
}
