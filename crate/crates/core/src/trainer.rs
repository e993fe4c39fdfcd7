//! Loss composition, the optimizer, the four training stages and the
//! checkpoint / loss-log formats.
//!
//! The ASR player (encoder, CTC head, attention decoder) and the speaker
//! player (adversary) have separate optimizers and separate clipping, so an
//! adversary that receives no reversed gradient cannot perturb the encoder's
//! trajectory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversary::{utterance_loss, Adversary, AdversaryConfig};
use crate::attention::{AttentionConfig, AttentionDecoder};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::ctc::{ctc_loss, CtcHead};
use crate::data::{make_batches, Batch};
use crate::encoder::{EncodedRepr, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::layers::utterance_rows;
use crate::params::{Bound, GroupName, ModelParams, ParamGroup};
use crate::seed::rng_for;
use crate::storage::{put_f64s, read_file, write_atomic, Cursor};

// ------------------------------------------------------------------ config

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainAsr,
    PretrainAdv,
    Joint,
    AdvRefit,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::PretrainAsr, Stage::PretrainAdv, Stage::Joint, Stage::AdvRefit];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainAsr => "pretrain-asr",
            Stage::PretrainAdv => "pretrain-adv",
            Stage::Joint => "joint",
            Stage::AdvRefit => "adv-refit",
        }
    }

    /// Groups the stage may update.
    pub fn trainable(self) -> &'static [GroupName] {
        match self {
            Stage::PretrainAsr => &[GroupName::Encoder, GroupName::Ctc, GroupName::Attention],
            Stage::PretrainAdv | Stage::AdvRefit => &[GroupName::Adversary],
            Stage::Joint => &GroupName::ALL,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageEpochs {
    pub pretrain_asr: usize,
    pub pretrain_adv: usize,
    pub joint: usize,
    pub adv_refit: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs {
            pretrain_asr: 10,
            pretrain_adv: 15,
            joint: 15,
            adv_refit: 5,
        }
    }
}

impl StageEpochs {
    pub fn get(&self, stage: Stage) -> usize {
        match stage {
            Stage::PretrainAsr => self.pretrain_asr,
            Stage::PretrainAdv => self.pretrain_adv,
            Stage::Joint => self.joint,
            Stage::AdvRefit => self.adv_refit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub adv_learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub epochs: StageEpochs,
    /// Filled from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            alpha: 0.0,
            learning_rate: 1e-3,
            adv_learning_rate: 3e-2,
            batch_size: 8,
            clip_norm: 5.0,
            epochs: StageEpochs::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adv_learning_rate", self.adv_learning_rate),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub adversary: AdversaryConfig,
}

// ------------------------------------------------------------------- model

pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub ctc: CtcHead,
    pub attention: AttentionDecoder,
    /// Absent when built without a speaker branch.
    pub adversary: Option<Adversary>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, num_speakers: Option<usize>) -> Result<Self> {
        let encoder = Encoder::new(config.encoder.clone())?;
        let d = encoder.output_dim();
        let ctc = CtcHead::new(d, vocab_size);
        let attention = AttentionDecoder::new(config.attention.clone(), d, vocab_size)?;
        let adversary = num_speakers
            .map(|k| Adversary::new(&config.adversary, d, k))
            .transpose()?;
        Ok(Model {
            config,
            encoder,
            ctc,
            attention,
            adversary,
        })
    }

    /// Each group draws from its own sub-seed, so adding or removing the
    /// adversary leaves the other groups unchanged.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut p = ModelParams::default();
        self.encoder.init(&mut p.encoder, &mut rng_for(seed, "init/theta_e"));
        self.ctc.init(&mut p.ctc, &mut rng_for(seed, "init/theta_c"));
        self.attention.init(&mut p.attention, &mut rng_for(seed, "init/theta_a"));
        if let Some(a) = &self.adversary {
            a.init(&mut p.adversary, &mut rng_for(seed, "init/theta_s"));
        }
        p
    }

    pub fn encode(&self, params: &ModelParams, x: &Tensor, id: &str) -> Result<EncodedRepr> {
        self.encoder.encode(&params.encoder, x, id)
    }

    /// CTC log-posteriors `[T', V]` for an encoded utterance.
    pub fn ctc_log_probs(&self, params: &ModelParams, phi: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.ctc.bind(&Bound::new(&mut g, &params.ctc, false))?;
        let x = g.constant(phi.clone());
        let lp = CtcHead::log_probs(&nodes, &mut g, x)?;
        Ok(g.value(lp).clone())
    }
}

// ---------------------------------------------------------------- examples

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// `[T, F]`.
    pub features: Tensor,
    pub target: Vec<usize>,
    pub speaker: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetRole {
    /// Transcribed data for ASR pre-training.
    Asr,
    /// Closed-set speaker data with transcripts and speaker classes.
    Adversarial,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub role: SetRole,
    pub examples: Vec<Example>,
}

impl TrainingSet {
    fn check_for(&self, stage: Stage) -> Result<()> {
        let want = if stage == Stage::PretrainAsr {
            SetRole::Asr
        } else {
            SetRole::Adversarial
        };
        if self.role != want {
            return Err(Error::invalid(format!("stage {stage} needs a {want:?} dataset, got {:?}", self.role)));
        }
        if self.examples.is_empty() {
            return Err(Error::data(format!("stage {stage}: empty dataset")));
        }
        if want == SetRole::Adversarial {
            if let Some(e) = self.examples.iter().find(|e| e.speaker.is_none()) {
                return Err(Error::data(format!("stage {stage}: utterance {} has no speaker class", e.id)));
            }
        }
        Ok(())
    }
}

// -------------------------------------------------------------- objectives

/// `λ L_c + (1 - λ) L_a`.
pub fn asr_loss(l_ctc: f64, l_att: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(lambda * l_ctc + (1.0 - lambda) * l_att)
}

/// How the speaker loss is attached to the encoder output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpeakerTerm {
    Off,
    /// Ordinary gradient into the encoder.
    Plain,
    /// Through a gradient-reversal node with the given alpha.
    Reversed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub lambda: f64,
    pub asr: bool,
    pub speaker: SpeakerTerm,
}

impl ObjectiveSpec {
    /// The min-max objective realized with gradient reversal.
    pub fn joint(lambda: f64, alpha: f64) -> Self {
        ObjectiveSpec {
            lambda,
            asr: true,
            speaker: SpeakerTerm::Reversed(alpha),
        }
    }
}

/// Batch-averaged losses and the gradients of the trainable groups.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub grads: BTreeMap<GroupName, ParamGroup>,
    pub l_ctc: f64,
    pub l_att: f64,
    pub l_spk: f64,
    pub lambda: f64,
}

impl BatchOutcome {
    pub fn l_asr(&self) -> f64 {
        self.lambda * self.l_ctc + (1.0 - self.lambda) * self.l_att
    }

    /// `(L_asr - α L_spk, L_spk)`: the values minimized by the ASR player and
    /// by the speaker player.
    pub fn joint_values(&self, alpha: f64) -> (f64, f64) {
        (self.l_asr() - alpha * self.l_spk, self.l_spk)
    }
}

/// One forward/backward over a padded batch. Losses are summed per
/// utterance and averaged over the batch; the scalar differentiated is
/// `L_asr + L_spk`, with the speaker term routed per `spec.speaker`.
pub fn batch_gradients(
    model: &Model,
    params: &ModelParams,
    batch: &Batch,
    examples: &[Example],
    spec: ObjectiveSpec,
    trainable: &[GroupName],
) -> Result<BatchOutcome> {
    if !spec.asr && spec.speaker == SpeakerTerm::Off {
        return Err(Error::invalid("objective has no terms"));
    }
    let mut g = Graph::new();
    let bind = |g: &mut Graph, name: GroupName| Bound::new(g, params.group(name), trainable.contains(&name));
    let enc_bound = bind(&mut g, GroupName::Encoder);
    let enc = model.encoder.bind(&enc_bound)?;
    let steps: Vec<NodeId> = batch.steps.iter().map(|t| g.constant(t.clone())).collect();
    let (phi, mask) = enc.forward(&mut g, &steps, &batch.mask)?;
    let n = batch.members.len() as f64;
    let mut bounds = vec![(GroupName::Encoder, enc_bound)];
    let mut terms = Vec::new();
    let (mut l_ctc, mut l_att, mut l_spk) = (0.0, 0.0, 0.0);

    if spec.asr {
        let ctc_bound = bind(&mut g, GroupName::Ctc);
        let att_bound = bind(&mut g, GroupName::Attention);
        let ctc_nodes = model.ctc.bind(&ctc_bound)?;
        let att_nodes = model.attention.bind(&att_bound)?;
        let mut per_utt = Vec::with_capacity(batch.members.len());
        for (b, &i) in batch.members.iter().enumerate() {
            let ex = &examples[i];
            let rows = utterance_rows(&mut g, &phi, &mask, b)?;
            let lp = CtcHead::log_probs(&ctc_nodes, &mut g, rows)?;
            let lc = ctc_loss(&mut g, lp, &ex.target).map_err(|e| match e {
                Error::TargetTooLong { .. } => Error::data(format!("utterance {}: {e}", ex.id)),
                other => other,
            })?;
            let mem = att_nodes.memory(&mut g, rows, None)?;
            let la = att_nodes.loss(&mut g, &mem, &ex.target)?;
            l_ctc += g.value(lc).item();
            l_att += g.value(la).item();
            let lc = g.scale(lc, spec.lambda)?;
            let la = g.scale(la, 1.0 - spec.lambda)?;
            per_utt.push(g.add(lc, la)?);
        }
        let all = g.concat(&per_utt, 0)?;
        terms.push(g.mean(all)?);
        bounds.push((GroupName::Ctc, ctc_bound));
        bounds.push((GroupName::Attention, att_bound));
    }

    if spec.speaker != SpeakerTerm::Off {
        let adversary = model
            .adversary
            .as_ref()
            .ok_or_else(|| Error::invalid("objective uses the speaker branch but the model has none"))?;
        let adv_bound = bind(&mut g, GroupName::Adversary);
        let adv = adversary.bind(&adv_bound)?;
        let inputs: Vec<NodeId> = match spec.speaker {
            SpeakerTerm::Reversed(alpha) => phi
                .iter()
                .map(|&p| g.gradient_reversal(p, alpha))
                .collect::<Result<_>>()?,
            _ => phi.clone(),
        };
        let lp = adv.forward(&mut g, &inputs, &mask)?;
        let mut per_utt = Vec::with_capacity(batch.members.len());
        for (b, &i) in batch.members.iter().enumerate() {
            let z = examples[i]
                .speaker
                .ok_or_else(|| Error::data(format!("utterance {} has no speaker class", examples[i].id)))?;
            let ls = utterance_loss(&mut g, &lp, &mask, b, z)?;
            l_spk += g.value(ls).item();
            per_utt.push(ls);
        }
        let all = g.concat(&per_utt, 0)?;
        terms.push(g.mean(all)?);
        bounds.push((GroupName::Adversary, adv_bound));
    }

    let root = if terms.len() == 2 { g.add(terms[0], terms[1])? } else { terms[0] };
    g.backward(root)?;
    let grads = bounds
        .into_iter()
        .filter(|(name, _)| trainable.contains(name))
        .map(|(name, b)| (name, b.grads(&g)))
        .collect();
    Ok(BatchOutcome {
        grads,
        l_ctc: l_ctc / n,
        l_att: l_att / n,
        l_spk: l_spk / n,
        lambda: spec.lambda,
    })
}

/// Gradients of the joint objective for every group.
pub fn joint_objective(
    model: &Model,
    params: &ModelParams,
    batch: &Batch,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<BatchOutcome> {
    batch_gradients(
        model,
        params,
        batch,
        examples,
        ObjectiveSpec::joint(cfg.lambda, cfg.alpha),
        &GroupName::ALL,
    )
}

// --------------------------------------------------------------- optimizer

/// Adaptive-moment optimizer with global-norm clipping over the groups it
/// is handed.
#[derive(Clone, Debug)]
pub struct Adam<K = GroupName> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    t: u64,
    m: BTreeMap<K, ParamGroup>,
    v: BTreeMap<K, ParamGroup>,
}

impl<K: Ord + Copy + fmt::Display> Adam<K> {
    pub fn new(lr: f64, clip_norm: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, group: K) -> Option<&ParamGroup> {
        self.m.get(&group)
    }

    /// Returns the pre-clipping gradient norm.
    pub fn step<'a>(
        &mut self,
        targets: impl IntoIterator<Item = (K, &'a mut ParamGroup)>,
        grads: &BTreeMap<K, ParamGroup>,
    ) -> Result<f64> {
        let mut sq = 0.0;
        for (group, gs) in grads {
            for (name, t) in gs.iter() {
                if !t.all_finite() {
                    return Err(Error::NonFiniteGradient {
                        group: group.to_string(),
                        param: name.clone(),
                    });
                }
                sq += t.norm_sq();
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (group, params) in targets {
            let Some(gs) = grads.get(&group) else { continue };
            let m = self.m.entry(group).or_insert_with(|| params.zeros_like());
            let v = self.v.entry(group).or_insert_with(|| params.zeros_like());
            for (name, p) in params.iter_mut() {
                let gt = gs.get(name)?;
                if gt.shape() != p.shape() {
                    return Err(Error::shape("adam", format!("gradient {name} {:?} vs {:?}", gt.shape(), p.shape())));
                }
                let mt = m.get_mut(name).expect("moment exists");
                let vt = v.get_mut(name).expect("moment exists");
                for (((pv, &gv), mv), vv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(gt.data())
                    .zip(mt.data_mut().iter_mut())
                    .zip(vt.data_mut().iter_mut())
                {
                    let gv = gv * scale;
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    let mh = *mv / bc1;
                    let vh = *vv / bc2;
                    *pv -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
        Ok(norm)
    }
}

fn groups_mut<'a>(params: &'a mut ModelParams, names: &[GroupName]) -> Vec<(GroupName, &'a mut ParamGroup)> {
    let ModelParams {
        encoder,
        ctc,
        attention,
        adversary,
    } = params;
    [
        (GroupName::Encoder, encoder),
        (GroupName::Ctc, ctc),
        (GroupName::Attention, attention),
        (GroupName::Adversary, adversary),
    ]
    .into_iter()
    .filter(|(n, _)| names.contains(n))
    .collect()
}

// ------------------------------------------------------------------ stages

/// Per-epoch means over utterances. `None` marks a loss the stage does not compute.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub l_ctc: Option<f64>,
    pub l_att: Option<f64>,
    pub l_spk: Option<f64>,
    pub objective: f64,
}

/// Trains the groups of `stage` for the configured number of epochs.
pub fn run_stage(
    model: &Model,
    params: &mut ModelParams,
    cfg: &TrainConfig,
    stage: Stage,
    data: &TrainingSet,
) -> Result<Vec<LossRecord>> {
    run_stage_epochs(model, params, cfg, stage, data, cfg.epochs.get(stage))
}

pub fn run_stage_epochs(
    model: &Model,
    params: &mut ModelParams,
    cfg: &TrainConfig,
    stage: Stage,
    data: &TrainingSet,
    epochs: usize,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    data.check_for(stage)?;
    match stage {
        Stage::PretrainAsr | Stage::Joint => asr_epochs(model, params, cfg, stage, data, epochs),
        Stage::PretrainAdv | Stage::AdvRefit => {
            let adversary = model
                .adversary
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("stage {stage} needs a speaker branch")))?;
            let reps = data
                .examples
                .iter()
                .map(|e| Ok(model.encode(params, &e.features, &e.id)?.frames))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = data.examples.iter().map(|e| e.speaker.expect("checked")).collect();
            let fit = ClassifierFit {
                epochs,
                learning_rate: cfg.adv_learning_rate,
                batch_size: cfg.batch_size,
                clip_norm: cfg.clip_norm,
                seed: cfg.seed,
                tag: stage.as_str().to_string(),
            };
            let losses = fit_speaker_classifier(adversary, &mut params.adversary, &reps, &labels, &fit)?;
            Ok(losses
                .into_iter()
                .enumerate()
                .map(|(epoch, l)| LossRecord {
                    epoch: epoch + 1,
                    stage,
                    l_ctc: None,
                    l_att: None,
                    l_spk: Some(l),
                    objective: l,
                })
                .collect())
        }
    }
}

fn asr_epochs(
    model: &Model,
    params: &mut ModelParams,
    cfg: &TrainConfig,
    stage: Stage,
    data: &TrainingSet,
    epochs: usize,
) -> Result<Vec<LossRecord>> {
    let with_speaker = stage == Stage::Joint && model.adversary.is_some();
    let spec = ObjectiveSpec {
        lambda: cfg.lambda,
        asr: true,
        speaker: if with_speaker {
            SpeakerTerm::Reversed(cfg.alpha)
        } else {
            SpeakerTerm::Off
        },
    };
    let asr_groups = [GroupName::Encoder, GroupName::Ctc, GroupName::Attention];
    let trainable: Vec<GroupName> = if with_speaker {
        GroupName::ALL.to_vec()
    } else {
        asr_groups.to_vec()
    };
    let feats: Vec<&Tensor> = data.examples.iter().map(|e| &e.features).collect();
    let batches = make_batches(&feats, cfg.batch_size)?;
    let mut asr_opt = Adam::new(cfg.learning_rate, cfg.clip_norm);
    let mut spk_opt = Adam::new(cfg.adv_learning_rate, cfg.clip_norm);
    let n = data.examples.len() as f64;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("{stage}/epoch{epoch}")));
        let (mut sc, mut sa, mut ss) = (0.0, 0.0, 0.0);
        for &bi in &order {
            let batch = &batches[bi];
            let mut out = batch_gradients(model, params, batch, &data.examples, spec, &trainable)?;
            let size = batch.members.len() as f64;
            sc += out.l_ctc * size;
            sa += out.l_att * size;
            ss += out.l_spk * size;
            let spk_grads: BTreeMap<_, _> = out.grads.remove(&GroupName::Adversary).map(|g| (GroupName::Adversary, g)).into_iter().collect();
            asr_opt.step(groups_mut(params, &asr_groups), &out.grads)?;
            if !spk_grads.is_empty() {
                spk_opt.step(groups_mut(params, &[GroupName::Adversary]), &spk_grads)?;
            }
        }
        let (l_ctc, l_att) = (sc / n, sa / n);
        let l_asr = asr_loss(l_ctc, l_att, cfg.lambda)?;
        let (l_spk, objective) = if with_speaker {
            (Some(ss / n), l_asr - cfg.alpha * ss / n)
        } else {
            (None, l_asr)
        };
        if !objective.is_finite() {
            return Err(Error::Numerical(format!("stage {stage} epoch {epoch}: objective is {objective}")));
        }
        log::info!("{stage} epoch {epoch}: ctc {l_ctc:.4} att {l_att:.4} objective {objective:.4}");
        log.push(LossRecord {
            epoch,
            stage,
            l_ctc: Some(l_ctc),
            l_att: Some(l_att),
            l_spk,
            objective,
        });
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct ClassifierFit {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Distinguishes the shuffling streams of different fits.
    pub tag: String,
}

/// Trains a speaker classifier on fixed input sequences (encoder outputs or
/// raw features). Returns the per-epoch mean utterance loss.
pub fn fit_speaker_classifier(
    adversary: &Adversary,
    params: &mut ParamGroup,
    inputs: &[Tensor],
    labels: &[usize],
    fit: &ClassifierFit,
) -> Result<Vec<f64>> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::invalid("classifier fit needs one label per input and at least one input"));
    }
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let batches = make_batches(&refs, fit.batch_size)?;
    let mut opt = Adam::new(fit.learning_rate, fit.clip_norm);
    let mut out = Vec::with_capacity(fit.epochs);
    for epoch in 1..=fit.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng_for(fit.seed, &format!("{}/epoch{epoch}", fit.tag)));
        let mut total = 0.0;
        for &bi in &order {
            let batch = &batches[bi];
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, params, true);
            let nodes = adversary.bind(&bound)?;
            let steps: Vec<NodeId> = batch.steps.iter().map(|t| g.constant(t.clone())).collect();
            let lp = nodes.forward(&mut g, &steps, &batch.mask)?;
            let per_utt = batch
                .members
                .iter()
                .enumerate()
                .map(|(b, &i)| utterance_loss(&mut g, &lp, &batch.mask, b, labels[i]))
                .collect::<Result<Vec<_>>>()?;
            let all = g.concat(&per_utt, 0)?;
            total += g.value(all).sum();
            let loss = g.mean(all)?;
            g.backward(loss)?;
            let grads = BTreeMap::from([(GroupName::Adversary, bound.grads(&g))]);
            opt.step([(GroupName::Adversary, &mut *params)], &grads)?;
        }
        let mean = total / inputs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("{} epoch {epoch}: loss is {mean}", fit.tag)));
        }
        out.push(mean);
    }
    Ok(out)
}

// --------------------------------------------------------------- artifacts

pub fn loss_csv(records: &[LossRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,stage,l_ctc,l_att,l_spk,objective\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.stage,
            cell(r.l_ctc),
            cell(r.l_att),
            cell(r.l_spk),
            r.objective
        ));
    }
    s
}

const CKPT_MAGIC: &[u8; 8] = b"SPKCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: String,
    pub speakers: Vec<String>,
    pub seed: u64,
    pub alpha: f64,
    /// Last completed stage.
    pub stage: Stage,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    model: ModelConfig,
    vocab: String,
    speakers: Vec<String>,
    seed: u64,
    alpha: f64,
    stage: Stage,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: GroupName,
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for g in GroupName::ALL {
            for (name, t) in self.params.group(g).iter() {
                tensors.push(TensorEntry {
                    group: g,
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                });
                put_f64s(&mut data, t.data());
            }
        }
        let meta = CkptMeta {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            speakers: self.speakers.clone(),
            seed: self.seed,
            alpha: self.alpha,
            stage: self.stage,
            tensors,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::data(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + json.len() + data.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut c = Cursor::new(bytes, what);
        c.expect_magic(CKPT_MAGIC)?;
        let version = c.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::data(format!("{what}: checkpoint version {version} unsupported")));
        }
        let len = c.u64()? as usize;
        let meta: CkptMeta = serde_json::from_slice(c.take(len)?).map_err(|e| Error::data(format!("{what}: {e}")))?;
        let mut params = ModelParams::default();
        for t in &meta.tensors {
            let n = t.shape.iter().product();
            let data = c.f64s(n)?;
            params.group_mut(t.group).insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
        }
        if !c.is_at_end() {
            return Err(Error::data(format!("{what}: trailing bytes")));
        }
        Ok(Checkpoint {
            model: meta.model,
            vocab: meta.vocab,
            speakers: meta.speakers,
            seed: meta.seed,
            alpha: meta.alpha,
            stage: meta.stage,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }
}
