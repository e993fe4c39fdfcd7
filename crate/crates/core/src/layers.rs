//! Sequence building blocks: gated recurrent layers, linear heads,
//! frame decimation and statistics pooling.
//!
//! Batched sequences are a list of per-step nodes of shape `[B, D]` plus a
//! [`Mask`]. Masked frames produce zero output and carry the recurrent state
//! through unchanged, so appending padding never alters valid outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Recurrent,
    BidirectionalRecurrent,
    Linear,
    Subsample,
    StatsPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Subsample factor; unused by other kinds.
    pub factor: usize,
}

impl LayerSpec {
    pub fn recurrent(input_dim: usize, hidden: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Recurrent,
            input_dim,
            output_dim: hidden,
            factor: 1,
        }
    }

    pub fn bidirectional(input_dim: usize, hidden: usize) -> Self {
        LayerSpec {
            kind: LayerKind::BidirectionalRecurrent,
            input_dim,
            output_dim: 2 * hidden,
            factor: 1,
        }
    }

    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear,
            input_dim,
            output_dim,
            factor: 1,
        }
    }

    pub fn subsample(dim: usize, factor: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Subsample,
            input_dim: dim,
            output_dim: dim,
            factor,
        }
    }

    pub fn stats_pool(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::StatsPool,
            input_dim: dim,
            output_dim: 2 * dim,
            factor: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid(format!("layer dims must be positive: {self:?}")));
        }
        if self.factor == 0 {
            return Err(Error::invalid("subsample factor must be >= 1"));
        }
        if self.kind == LayerKind::BidirectionalRecurrent && self.output_dim % 2 != 0 {
            return Err(Error::invalid("bidirectional output dim must be even"));
        }
        Ok(())
    }

    /// Hidden size of one recurrent direction.
    pub fn hidden(&self) -> usize {
        match self.kind {
            LayerKind::BidirectionalRecurrent => self.output_dim / 2,
            _ => self.output_dim,
        }
    }
}

/// Frame validity, indexed `[t][b]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    valid: Vec<Vec<bool>>,
    batch: usize,
}

impl Mask {
    pub fn new(valid: Vec<Vec<bool>>, batch: usize) -> Result<Self> {
        if valid.iter().any(|row| row.len() != batch) {
            return Err(Error::shape("mask", format!("every step needs {batch} entries")));
        }
        Ok(Mask { valid, batch })
    }

    /// Prefix masks: utterance `b` is valid on `0..lengths[b]`.
    pub fn from_lengths(lengths: &[usize], steps: usize) -> Self {
        let valid = (0..steps)
            .map(|t| lengths.iter().map(|&l| t < l).collect())
            .collect();
        Mask {
            valid,
            batch: lengths.len(),
        }
    }

    pub fn all_valid(steps: usize, batch: usize) -> Self {
        Mask {
            valid: vec![vec![true; batch]; steps],
            batch,
        }
    }

    pub fn steps(&self) -> usize {
        self.valid.len()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn is_valid(&self, t: usize, b: usize) -> bool {
        self.valid[t][b]
    }

    pub fn step(&self, t: usize) -> &[bool] {
        &self.valid[t]
    }

    /// Valid step indices of utterance `b`.
    pub fn frames_of(&self, b: usize) -> Vec<usize> {
        (0..self.steps()).filter(|&t| self.valid[t][b]).collect()
    }

    pub fn count(&self, b: usize) -> usize {
        self.valid.iter().filter(|row| row[b]).count()
    }

    /// Keeps steps `0, factor, 2*factor, ...`.
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        Ok(Mask {
            valid: subsample(&self.valid, factor)?,
            batch: self.batch,
        })
    }
}

/// Keeps items at indices `0, factor, 2*factor, ...`; output length is
/// `ceil(len / factor)`.
pub fn subsample<T: Clone>(xs: &[T], factor: usize) -> Result<Vec<T>> {
    if factor == 0 {
        return Err(Error::invalid("subsample factor must be >= 1"));
    }
    if xs.is_empty() {
        return Err(Error::invalid("subsample of an empty sequence"));
    }
    Ok(xs.iter().step_by(factor).cloned().collect())
}

pub fn subsampled_len(len: usize, factor: usize) -> usize {
    len.div_ceil(factor)
}

// ------------------------------------------------------------------ linear

pub struct Linear {
    pub spec: LayerSpec,
    prefix: String,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input_dim: usize, output_dim: usize) -> Self {
        Linear {
            spec: LayerSpec::linear(input_dim, output_dim),
            prefix: prefix.into(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, group: &mut ParamGroup, rng: &mut R) {
        let (i, o) = (self.spec.input_dim, self.spec.output_dim);
        group.insert(format!("{}.w", self.prefix), glorot(i, o, rng));
        group.insert(format!("{}.b", self.prefix), Tensor::zeros(&[o]));
    }

    pub fn bind(&self, p: &Bound) -> Result<LinearNodes> {
        Ok(LinearNodes {
            w: p.get(&format!("{}.w", self.prefix))?,
            b: p.get(&format!("{}.b", self.prefix))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl LinearNodes {
    /// `x [N, in] -> [N, out]`.
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.w)?;
        g.add(y, self.b)
    }
}

// --------------------------------------------------------------- recurrent

/// Three-gate recurrent cell (reset, update, candidate):
///
/// ```text
/// r  = sigmoid(x Wr + br + h Ur + cr)
/// z  = sigmoid(x Wz + bz + h Uz + cz)
/// n  = tanh(x Wn + bn + r * (h Un + cn))
/// h' = n + z * (h - n)
/// ```
///
/// The three gate blocks are packed column-wise as `[r | z | n]`.
pub struct GruCell {
    input_dim: usize,
    hidden: usize,
    prefix: String,
}

#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    w_in: NodeId,
    w_hid: NodeId,
    b_in: NodeId,
    b_hid: NodeId,
    hidden: usize,
}

impl GruCell {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden: usize) -> Self {
        GruCell {
            input_dim,
            hidden,
            prefix: prefix.into(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, group: &mut ParamGroup, rng: &mut R) {
        let h3 = 3 * self.hidden;
        group.insert(format!("{}.w_in", self.prefix), glorot(self.input_dim, h3, rng));
        group.insert(format!("{}.w_hid", self.prefix), glorot(self.hidden, h3, rng));
        group.insert(format!("{}.b_in", self.prefix), Tensor::zeros(&[h3]));
        group.insert(format!("{}.b_hid", self.prefix), Tensor::zeros(&[h3]));
    }

    pub fn bind(&self, p: &Bound) -> Result<GruNodes> {
        Ok(GruNodes {
            w_in: p.get(&format!("{}.w_in", self.prefix))?,
            w_hid: p.get(&format!("{}.w_hid", self.prefix))?,
            b_in: p.get(&format!("{}.b_in", self.prefix))?,
            b_hid: p.get(&format!("{}.b_hid", self.prefix))?,
            hidden: self.hidden,
        })
    }
}

impl GruNodes {
    /// One update `x [B, in], h [B, H] -> h' [B, H]`.
    pub fn step(&self, g: &mut Graph, x: NodeId, h: NodeId) -> Result<NodeId> {
        let hd = self.hidden;
        let xi = g.matmul(x, self.w_in)?;
        let xi = g.add(xi, self.b_in)?;
        let hh = g.matmul(h, self.w_hid)?;
        let hh = g.add(hh, self.b_hid)?;
        let xr = g.slice(xi, 1, 0, hd)?;
        let xz = g.slice(xi, 1, hd, 2 * hd)?;
        let xn = g.slice(xi, 1, 2 * hd, 3 * hd)?;
        let hr = g.slice(hh, 1, 0, hd)?;
        let hz = g.slice(hh, 1, hd, 2 * hd)?;
        let hn = g.slice(hh, 1, 2 * hd, 3 * hd)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n)?;
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// Runs over `xs` (each `[B, in]`) in the given direction. Masked steps
    /// keep the previous state and emit zeros.
    pub fn run(&self, g: &mut Graph, xs: &[NodeId], mask: &Mask, reverse: bool) -> Result<Vec<NodeId>> {
        if xs.len() != mask.steps() {
            return Err(Error::shape(
                "recurrent",
                format!("{} steps but mask has {}", xs.len(), mask.steps()),
            ));
        }
        let batch = mask.batch();
        let hd = self.hidden;
        let mut h = g.constant(Tensor::zeros(&[batch, hd]));
        let mut out = vec![h; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            let shape = g.shape(xs[t]).to_vec();
            if shape.len() != 2 || shape[0] != batch {
                return Err(Error::shape(
                    "recurrent",
                    format!("step {t} has shape {shape:?}, batch is {batch}"),
                ));
            }
            let cand = self.step(g, xs[t], h)?;
            let (keep, carry) = mask_tensors(mask.step(t), hd);
            let keep = g.constant(keep);
            let carry = g.constant(carry);
            let a = g.mul(cand, keep)?;
            let b = g.mul(h, carry)?;
            h = g.add(a, b)?;
            out[t] = g.mul(h, keep)?;
        }
        Ok(out)
    }
}

fn mask_tensors(valid: &[bool], width: usize) -> (Tensor, Tensor) {
    let mut keep = Vec::with_capacity(valid.len() * width);
    let mut carry = Vec::with_capacity(valid.len() * width);
    for &v in valid {
        let (k, c) = if v { (1.0, 0.0) } else { (0.0, 1.0) };
        keep.extend(std::iter::repeat_n(k, width));
        carry.extend(std::iter::repeat_n(c, width));
    }
    let shape = [valid.len(), width];
    (
        Tensor::new(shape.to_vec(), keep).expect("mask shape"),
        Tensor::new(shape.to_vec(), carry).expect("mask shape"),
    )
}

/// A uni- or bidirectional recurrent layer.
pub struct Recurrent {
    pub spec: LayerSpec,
    fwd: GruCell,
    bwd: Option<GruCell>,
}

pub struct RecurrentNodes {
    fwd: GruNodes,
    bwd: Option<GruNodes>,
    input_dim: usize,
}

impl Recurrent {
    pub fn new(prefix: &str, spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let hidden = spec.hidden();
        let (fwd, bwd) = match spec.kind {
            LayerKind::Recurrent => (GruCell::new(format!("{prefix}.fwd"), spec.input_dim, hidden), None),
            LayerKind::BidirectionalRecurrent => (
                GruCell::new(format!("{prefix}.fwd"), spec.input_dim, hidden),
                Some(GruCell::new(format!("{prefix}.bwd"), spec.input_dim, hidden)),
            ),
            other => return Err(Error::invalid(format!("{other:?} is not a recurrent layer"))),
        };
        Ok(Recurrent { spec, fwd, bwd })
    }

    pub fn init<R: Rng + ?Sized>(&self, group: &mut ParamGroup, rng: &mut R) {
        self.fwd.init(group, rng);
        if let Some(b) = &self.bwd {
            b.init(group, rng);
        }
    }

    pub fn bind(&self, p: &Bound) -> Result<RecurrentNodes> {
        Ok(RecurrentNodes {
            fwd: self.fwd.bind(p)?,
            bwd: self.bwd.as_ref().map(|b| b.bind(p)).transpose()?,
            input_dim: self.spec.input_dim,
        })
    }
}

impl RecurrentNodes {
    /// `xs[t]: [B, in]` to `[B, out]` per step; bidirectional output is
    /// `concat(forward, backward)`.
    pub fn forward(&self, g: &mut Graph, xs: &[NodeId], mask: &Mask) -> Result<Vec<NodeId>> {
        if let Some(&x0) = xs.first() {
            let d = *g.shape(x0).last().unwrap_or(&0);
            if d != self.input_dim {
                return Err(Error::shape(
                    "recurrent",
                    format!("input dim {d}, layer expects {}", self.input_dim),
                ));
            }
        }
        let f = self.fwd.run(g, xs, mask, false)?;
        match &self.bwd {
            None => Ok(f),
            Some(bwd) => {
                let b = bwd.run(g, xs, mask, true)?;
                f.iter()
                    .zip(&b)
                    .map(|(&x, &y)| g.concat(&[x, y], 1))
                    .collect()
            }
        }
    }
}

/// Rows of utterance `b` at its valid steps, stacked into `[n, D]`.
pub fn utterance_rows(g: &mut Graph, steps: &[NodeId], mask: &Mask, b: usize) -> Result<NodeId> {
    let frames = mask.frames_of(b);
    if frames.is_empty() {
        return Err(Error::invalid(format!("utterance {b} has no valid frames")));
    }
    let rows = frames
        .iter()
        .map(|&t| g.slice(steps[t], 0, b, b + 1))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat(&rows, 0)
    }
}

/// Mean and population standard deviation (with `1e-8` under the root) of
/// the valid rows of `x [T, D]`, concatenated into `[2D]`.
pub fn stats_pool(g: &mut Graph, x: NodeId, valid: &[bool]) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != valid.len() {
        return Err(Error::shape(
            "stats_pool",
            format!("input {shape:?} with {} mask entries", valid.len()),
        ));
    }
    let d = shape[1];
    let rows: Vec<usize> = (0..valid.len()).filter(|&t| valid[t]).collect();
    if rows.is_empty() {
        return Err(Error::invalid("stats_pool: all frames masked"));
    }
    let x = if rows.len() == valid.len() {
        x
    } else {
        let idx: Vec<usize> = rows.iter().flat_map(|&t| (0..d).map(move |c| t * d + c)).collect();
        let flat = g.gather(x, &idx)?;
        g.reshape(flat, &[rows.len(), d])?
    };
    let mean = g.mean_axis(x, 0)?;
    let centered = g.sub(x, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_axis(sq, 0)?;
    let eps = g.constant(Tensor::full(&[d], 1e-8));
    let var = g.add(var, eps)?;
    let std = g.sqrt(var)?;
    g.concat(&[mean, std], 0)
}
