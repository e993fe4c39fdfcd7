//! End-to-end pipeline shared by the command-line tool and the acceptance
//! suite: run configuration, the four-stage training schedule and the
//! per-representation evaluation report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversary::{utterance_speaker_decision, Adversary, SpeakerTable};
use crate::asr_eval::{cer, wer, ScoringReport};
use crate::autodiff::Tensor;
use crate::ctc::{ctc_greedy_decode, Vocab};
use crate::data::{build_trials, Dataset, Split, SplitScheme, SynthConfig, Utterance};
use crate::error::{Error, Result};
use crate::seed::{rng_for, sub_seed};
use crate::speaker_eval::{
    closed_set_accuracy, eer_of, length_normalize, plda_train, score_trials, silhouette, train_embedding_net,
    EerResult, Embedding, EmbeddingConfig, ScoredTrial, ScoringBackend,
};
use crate::trainer::{
    fit_speaker_classifier, run_stage, Checkpoint, ClassifierFit, Example, LossRecord, Model, ModelConfig, SetRole,
    Stage, TrainConfig, TrainingSet,
};

// ------------------------------------------------------------------ config

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decoder {
    CtcGreedy,
    AttentionBeam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub embedding: EmbeddingConfig,
    pub enroll_budget_frames: usize,
    pub plda_iters: usize,
    pub decoder: Decoder,
    pub beam: usize,
    pub max_decode_len: usize,
    /// Epochs of the raw-feature closed-set attacker.
    pub attacker_epochs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            embedding: EmbeddingConfig::default(),
            enroll_budget_frames: 200,
            plda_iters: 10,
            decoder: Decoder::CtcGreedy,
            beam: 4,
            max_decode_len: 16,
            attacker_epochs: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: SynthConfig,
    pub splits: SplitScheme,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.corpus.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.model.encoder.validate().map_err(wrap)?;
        self.model.attention.validate().map_err(wrap)?;
        self.eval.embedding.validate()?;
        if self.eval.beam == 0 || self.eval.max_decode_len == 0 {
            return Err(Error::Config("eval.beam and eval.max_decode_len must be positive".into()));
        }
        Ok(())
    }

    /// Sets the run seed everywhere it is consumed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }
}

// ---------------------------------------------------------------- training

/// Speaker classes of the closed-set (train-adv) speakers.
pub fn closed_set_speakers(dataset: &Dataset) -> Result<SpeakerTable> {
    SpeakerTable::new(dataset.split(Split::TrainAdv).iter().map(|u| u.speaker_id.clone()))
}

fn example(u: &Utterance, vocab: &Vocab, speakers: Option<&SpeakerTable>) -> Result<Example> {
    Ok(Example {
        id: u.id.clone(),
        features: u.features.clone(),
        target: vocab.encode(&u.transcript)?,
        speaker: speakers.map(|t| t.class_of(&u.speaker_id)).transpose()?,
    })
}

/// ASR pre-training data (train-full and train-adv) and the closed-set
/// adversarial data (train-adv).
pub fn training_sets(dataset: &Dataset, speakers: &SpeakerTable) -> Result<(TrainingSet, TrainingSet)> {
    let vocab = &dataset.corpus.vocab;
    let asr = dataset
        .splits_union(&[Split::TrainFull, Split::TrainAdv])
        .into_iter()
        .map(|u| example(u, vocab, None))
        .collect::<Result<Vec<_>>>()?;
    let adv = dataset
        .split(Split::TrainAdv)
        .into_iter()
        .map(|u| example(u, vocab, Some(speakers)))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        TrainingSet {
            role: SetRole::Asr,
            examples: asr,
        },
        TrainingSet {
            role: SetRole::Adversarial,
            examples: adv,
        },
    ))
}

/// Runs `stages` in order, starting from `resume` or a fresh initialization.
pub fn train_run(
    cfg: &RunConfig,
    dataset: &Dataset,
    stages: &[Stage],
    resume: Option<Checkpoint>,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    cfg.validate()?;
    dataset.check_ctc_feasible(cfg.model.encoder.downsample_factor)?;
    let speakers = closed_set_speakers(dataset)?;
    let vocab = &dataset.corpus.vocab;
    let model = Model::new(cfg.model.clone(), vocab.size(), Some(speakers.len()))?;
    let mut train = cfg.train.clone();
    train.seed = cfg.seed;
    let mut params = match &resume {
        Some(ck) => {
            if ck.model != cfg.model {
                return Err(Error::Config("checkpoint model configuration differs from the run config".into()));
            }
            if ck.vocab != vocab.as_string() || ck.speakers != speakers.ids() {
                return Err(Error::data("checkpoint vocabulary or speaker table does not match the dataset"));
            }
            ck.params.clone()
        }
        None => model.init_params(cfg.seed),
    };
    let (asr, adv) = training_sets(dataset, &speakers)?;
    let mut log = Vec::new();
    let mut last = resume.as_ref().map(|c| c.stage);
    for &stage in stages {
        let data = if stage == Stage::PretrainAsr { &asr } else { &adv };
        log::info!("stage {stage}: {} utterances", data.examples.len());
        log.extend(run_stage(&model, &mut params, &train, stage, data)?);
        last = Some(stage);
    }
    let stage = last.ok_or_else(|| Error::invalid("no stage to run"))?;
    Ok((
        Checkpoint {
            model: cfg.model.clone(),
            vocab: vocab.as_string(),
            speakers: speakers.ids().to_vec(),
            seed: cfg.seed,
            alpha: cfg.train.alpha,
            stage,
            params,
        },
        log,
    ))
}

pub fn model_for(ck: &Checkpoint) -> Result<Model> {
    let vocab = Vocab::new(&ck.vocab)?;
    let k = (ck.speakers.len() >= 2).then_some(ck.speakers.len());
    Model::new(ck.model.clone(), vocab.size(), k)
}

/// Decodes every utterance with the configured decoder.
pub fn decode_all(
    ck: &Checkpoint,
    utts: &[&Utterance],
    eval: &EvalConfig,
) -> Result<Vec<(String, String, String)>> {
    let model = model_for(ck)?;
    let vocab = Vocab::new(&ck.vocab)?;
    utts.iter()
        .map(|u| {
            let phi = model.encode(&ck.params, &u.features, &u.id)?.frames;
            let ids = match eval.decoder {
                Decoder::CtcGreedy => ctc_greedy_decode(&model.ctc_log_probs(&ck.params, &phi)?),
                Decoder::AttentionBeam => {
                    model
                        .attention
                        .beam_decode(&ck.params.attention, &phi, eval.beam, eval.max_decode_len)?
                }
            };
            Ok((u.id.clone(), u.transcript.clone(), vocab.decode(&ids)))
        })
        .collect()
}

// -------------------------------------------------------------- evaluation

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Wer,
    Cer,
    Acc,
    Eer,
    EerPlda,
    EerGroups,
    Silhouette,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Wer,
        Metric::Cer,
        Metric::Acc,
        Metric::Eer,
        Metric::EerPlda,
        Metric::EerGroups,
        Metric::Silhouette,
    ];
    pub const DEFAULT: [Metric; 6] = [
        Metric::Wer,
        Metric::Cer,
        Metric::Acc,
        Metric::Eer,
        Metric::EerPlda,
        Metric::Silhouette,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Wer => "wer",
            Metric::Cer => "cer",
            Metric::Acc => "acc",
            Metric::Eer => "eer",
            Metric::EerPlda => "eer-plda",
            Metric::EerGroups => "eer-groups",
            Metric::Silhouette => "silhouette",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out: Vec<Metric> = s
            .split(',')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.dedup();
        if out.is_empty() {
            return Err(Error::invalid("no metrics requested"));
        }
        Ok(out)
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    Features,
    Phi,
}

impl FromStr for Representation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(Representation::Features),
            "phi" => Ok(Representation::Phi),
            _ => Err(Error::invalid(format!("unknown representation `{s}` (features or phi)"))),
        }
    }
}

/// One column of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub representation: String,
    /// `None` for raw features.
    pub alpha: Option<f64>,
    /// `(row label, value)`; `None` where the metric does not apply.
    pub rows: Vec<(String, Option<f64>)>,
}

impl EvalReport {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|(l, _)| l == label).and_then(|(_, v)| *v)
    }
}

pub fn representation_label(alpha: Option<f64>) -> String {
    match alpha {
        None => "features".to_string(),
        Some(a) => format!("phi_{a}"),
    }
}

pub struct EvalOutput {
    pub report: EvalReport,
    pub asr_scoring: Option<ScoringReport>,
    pub cosine_trials: Vec<ScoredTrial>,
    pub cosine_eer: Option<EerResult>,
    pub plda_trials: Vec<ScoredTrial>,
    /// Open-set embeddings in utterance-id order.
    pub embeddings: Vec<Embedding>,
}

struct Represent<'a> {
    ck: Option<(&'a Checkpoint, Model)>,
}

impl Represent<'_> {
    fn of(&self, u: &Utterance) -> Result<Tensor> {
        match &self.ck {
            None => Ok(u.features.clone()),
            Some((ck, model)) => Ok(model.encode(&ck.params, &u.features, &u.id)?.frames),
        }
    }
}

/// Closed-set decisions on test-adv: the refit adversary for `phi`, a fresh
/// attacker of the same architecture trained on train-adv for raw features.
fn closed_set_acc(cfg: &RunConfig, dataset: &Dataset, rep: &Represent) -> Result<f64> {
    let speakers = closed_set_speakers(dataset)?;
    let test = dataset.split(Split::TestAdv);
    let labels = test
        .iter()
        .map(|u| speakers.class_of(&u.speaker_id))
        .collect::<Result<Vec<_>>>()?;
    let (adversary, params) = match &rep.ck {
        Some((ck, model)) => {
            if ck.speakers != speakers.ids() {
                return Err(Error::data("checkpoint speaker table does not match the dataset"));
            }
            if ck.stage != Stage::AdvRefit {
                log::warn!("closed-set accuracy from a checkpoint at stage {}, not adv-refit", ck.stage);
            }
            if model.adversary.is_none() {
                return Err(Error::data("checkpoint has no speaker branch"));
            }
            let adv = Adversary::new(&ck.model.adversary, model.encoder.output_dim(), speakers.len())?;
            (adv, ck.params.adversary.clone())
        }
        None => {
            let adv = Adversary::new(&cfg.model.adversary, dataset.corpus.feature_dim, speakers.len())?;
            let mut params = Default::default();
            adv.init(&mut params, &mut rng_for(cfg.seed, "attacker/init"));
            let train = dataset.split(Split::TrainAdv);
            let inputs: Vec<Tensor> = train.iter().map(|u| u.features.clone()).collect();
            let train_labels = train
                .iter()
                .map(|u| speakers.class_of(&u.speaker_id))
                .collect::<Result<Vec<_>>>()?;
            let fit = ClassifierFit {
                epochs: cfg.eval.attacker_epochs,
                learning_rate: cfg.train.adv_learning_rate,
                batch_size: cfg.train.batch_size,
                clip_norm: cfg.train.clip_norm,
                seed: cfg.seed,
                tag: "attacker".into(),
            };
            fit_speaker_classifier(&adv, &mut params, &inputs, &train_labels, &fit)?;
            (adv, params)
        }
    };
    let decisions = test
        .iter()
        .map(|u| {
            let x = rep.of(u)?;
            let lp = adversary.forward(&params, &x)?;
            Ok(utterance_speaker_decision(&lp, &vec![true; lp.rows()])?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    closed_set_accuracy(&decisions, &labels)
}

/// Evaluates one representation. `checkpoint` is required for `phi`.
pub fn evaluate(
    cfg: &RunConfig,
    dataset: &Dataset,
    checkpoint: Option<&Checkpoint>,
    representation: Representation,
    metrics: &[Metric],
) -> Result<EvalOutput> {
    cfg.validate()?;
    let rep = match representation {
        Representation::Features => Represent { ck: None },
        Representation::Phi => {
            let ck = checkpoint.ok_or_else(|| Error::invalid("representation phi needs a checkpoint"))?;
            Represent {
                ck: Some((ck, model_for(ck)?)),
            }
        }
    };
    let alpha = rep.ck.as_ref().map(|(ck, _)| ck.alpha);
    let open = dataset.split(Split::OpenSet);
    let mut out = EvalOutput {
        report: EvalReport {
            representation: representation_label(alpha),
            alpha,
            rows: Vec::new(),
        },
        asr_scoring: None,
        cosine_trials: Vec::new(),
        cosine_eer: None,
        plda_trials: Vec::new(),
        embeddings: Vec::new(),
    };

    let wants = |m: Metric| metrics.contains(&m);
    if wants(Metric::Wer) || wants(Metric::Cer) {
        if let Some((ck, _)) = &rep.ck {
            let decoded = decode_all(ck, &open, &cfg.eval)?;
            let refs: Vec<&str> = decoded.iter().map(|d| d.1.as_str()).collect();
            let hyps: Vec<&str> = decoded.iter().map(|d| d.2.as_str()).collect();
            let (w, c) = (wer(&refs, &hyps)?, cer(&refs, &hyps)?);
            out.asr_scoring = Some(ScoringReport::new(&decoded));
            for (m, v) in [(Metric::Wer, w), (Metric::Cer, c)] {
                if wants(m) {
                    out.report.rows.push((m.as_str().to_string(), Some(v)));
                }
            }
        } else {
            for m in [Metric::Wer, Metric::Cer] {
                if wants(m) {
                    out.report.rows.push((m.as_str().to_string(), None));
                }
            }
        }
    }
    if wants(Metric::Acc) {
        let acc = closed_set_acc(cfg, dataset, &rep)?;
        out.report.rows.push(("acc".into(), Some(acc)));
    }

    let needs_embeddings = [Metric::Eer, Metric::EerPlda, Metric::EerGroups, Metric::Silhouette]
        .iter()
        .any(|&m| wants(m));
    if needs_embeddings {
        let train = dataset.splits_union(&[Split::TrainFull, Split::TrainAdv]);
        let table = SpeakerTable::new(train.iter().map(|u| u.speaker_id.clone()))?;
        let inputs = train.iter().map(|u| rep.of(u)).collect::<Result<Vec<_>>>()?;
        let labels = train
            .iter()
            .map(|u| table.class_of(&u.speaker_id))
            .collect::<Result<Vec<_>>>()?;
        let extractor = train_embedding_net(&inputs, &labels, &cfg.eval.embedding, sub_seed(cfg.seed, "xvec"))?;

        let mut open_embs = BTreeMap::new();
        for u in &open {
            let e = extractor.extract(&rep.of(u)?, &u.id, Some(&u.speaker_id))?;
            open_embs.insert(u.id.clone(), e);
        }
        out.embeddings = open_embs.values().cloned().collect();

        if wants(Metric::Silhouette) {
            let speakers = SpeakerTable::new(open.iter().map(|u| u.speaker_id.clone()))?;
            let labels = out
                .embeddings
                .iter()
                .map(|e| speakers.class_of(e.speaker_id.as_deref().unwrap_or_default()))
                .collect::<Result<Vec<_>>>()?;
            let vectors: Vec<Vec<f64>> = out.embeddings.iter().map(|e| e.vector.clone()).collect();
            out.report
                .rows
                .push(("silhouette".into(), Some(silhouette(&vectors, &labels)?)));
        }

        if wants(Metric::Eer) || wants(Metric::EerPlda) || wants(Metric::EerGroups) {
            let trials = build_trials(&open, cfg.eval.enroll_budget_frames, sub_seed(cfg.seed, "trials"))?;
            let (g, i) = trials.counts();
            log::info!("open-set trials: {g} genuine, {i} impostor");
            out.cosine_trials = score_trials(&trials, &open_embs, &ScoringBackend::Cosine)?;
            let pooled = eer_of(&out.cosine_trials)?;
            if wants(Metric::Eer) {
                out.report.rows.push(("eer".into(), Some(100.0 * pooled.eer)));
            }
            if wants(Metric::EerGroups) {
                let group_of_speaker: BTreeMap<&str, &str> =
                    open.iter().map(|u| (u.speaker_id.as_str(), u.group.as_str())).collect();
                let group_of_utt: BTreeMap<&str, &str> =
                    open.iter().map(|u| (u.id.as_str(), u.group.as_str())).collect();
                let mut groups: Vec<&str> = group_of_speaker.values().copied().collect();
                groups.sort_unstable();
                groups.dedup();
                for grp in groups {
                    let subset = out.cosine_trials.iter().filter(|t| {
                        group_of_speaker.get(t.enroll_id.as_str()) == Some(&grp)
                            && group_of_utt.get(t.test_utt_id.as_str()) == Some(&grp)
                    });
                    let v = eer_of(subset).ok().map(|r| 100.0 * r.eer);
                    out.report.rows.push((format!("eer-group-{grp}"), v));
                }
            }
            out.cosine_eer = Some(pooled);
            if wants(Metric::EerPlda) {
                let train_embs = train
                    .iter()
                    .zip(&inputs)
                    .map(|(u, x)| length_normalize(&extractor.extract(x, &u.id, None)?.vector))
                    .collect::<Result<Vec<_>>>()?;
                let fit = plda_train(&train_embs, &labels, cfg.eval.plda_iters)?;
                out.plda_trials = score_trials(&trials, &open_embs, &ScoringBackend::Plda(fit.model))?;
                out.report
                    .rows
                    .push(("eer-plda".into(), Some(100.0 * eer_of(&out.plda_trials)?.eer)));
            }
        }
    }
    // Keep rows in the requested metric order.
    let rank = |label: &str| {
        metrics
            .iter()
            .position(|m| label == m.as_str() || (label.starts_with("eer-group-") && *m == Metric::EerGroups))
            .unwrap_or(usize::MAX)
    };
    out.report.rows.sort_by_key(|(l, _)| rank(l));
    Ok(out)
}

// ------------------------------------------------------------------ report

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "\u{2014}".to_string(), |x| format!("{x:.2}"))
}

/// Merges eval reports into one table: rows are metrics, columns are
/// representations (raw features first, then ascending alpha).
pub struct MergedReport {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl MergedReport {
    pub fn new(reports: &[EvalReport]) -> Self {
        let mut cols: Vec<&EvalReport> = reports.iter().collect();
        cols.sort_by(|a, b| match (a.alpha, b.alpha) {
            (None, None) => std::cmp::Ordering::Equal,
            (None, Some(_)) => std::cmp::Ordering::Less,
            (Some(_), None) => std::cmp::Ordering::Greater,
            (Some(x), Some(y)) => x.total_cmp(&y),
        });
        let mut labels: Vec<String> = Vec::new();
        for r in &cols {
            for (l, _) in &r.rows {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
        }
        let rank = |l: &str| {
            Metric::ALL
                .iter()
                .position(|m| l == m.as_str() || (l.starts_with("eer-group-") && *m == Metric::EerGroups))
                .unwrap_or(usize::MAX)
        };
        labels.sort_by_key(|l| rank(l));
        let rows = labels
            .into_iter()
            .map(|l| {
                let vals = cols.iter().map(|r| r.get(&l)).collect();
                (l, vals)
            })
            .collect();
        MergedReport {
            columns: cols.iter().map(|r| r.representation.clone()).collect(),
            rows,
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::data(e.to_string());
        let header: Vec<&str> = std::iter::once("metric").chain(self.columns.iter().map(String::as_str)).collect();
        w.write_record(&header).map_err(err)?;
        for (label, vals) in &self.rows {
            let rec: Vec<String> = std::iter::once(label.clone()).chain(vals.iter().map(|v| cell(*v))).collect();
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| metric | {} |\n", self.columns.join(" | "));
        s.push_str(&format!("|---|{}\n", "---:|".repeat(self.columns.len())));
        for (label, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| cell(*v)).collect();
            s.push_str(&format!("| {label} | {} |\n", cells.join(" | ")));
        }
        s
    }
}

impl fmt::Display for MergedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_markdown())
    }
}
