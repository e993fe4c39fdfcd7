//! Corpus model, synthetic generation, splits, trial lists, batching and the
//! manifest + feature-blob file layout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::ctc::{min_frames, Vocab};
use crate::error::{Error, Result};
use crate::layers::{subsampled_len, Mask};
use crate::seed::rng_for;
use crate::storage::{put_f64s, read_file, write_atomic, Cursor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURES_FILE: &str = "features.bin";
const MANIFEST_MAGIC: &str = "spkadv-manifest";
const BLOB_MAGIC: &[u8; 8] = b"SPKFEAT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, F]`.
    pub features: Tensor,
    pub transcript: String,
    pub speaker_id: String,
    pub group: String,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainFull,
    TrainAdv,
    DevAdv,
    TestAdv,
    OpenSet,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::TrainFull, Split::TrainAdv, Split::DevAdv, Split::TestAdv, Split::OpenSet];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainFull => "train-full",
            Split::TrainAdv => "train-adv",
            Split::DevAdv => "dev-adv",
            Split::TestAdv => "test-adv",
            Split::OpenSet => "open-set",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub vocab: String,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    /// Silence frames before the first symbol and after every symbol.
    pub gap: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub speaker_strength: f64,
    pub num_groups: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_speakers: 24,
            utts_per_speaker: 16,
            vocab: "abcde".into(),
            min_symbols: 2,
            max_symbols: 5,
            min_segment: 6,
            max_segment: 10,
            gap: 4,
            feature_dim: 16,
            noise: 0.3,
            speaker_strength: 0.5,
            num_groups: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 4 {
            return Err(Error::invalid("synthetic corpus needs at least 4 speakers"));
        }
        if !(self.speaker_strength >= 0.0) || !self.speaker_strength.is_finite() {
            return Err(Error::invalid("speaker_strength must be a finite value >= 0"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::invalid("noise must be a finite value >= 0"));
        }
        if self.utts_per_speaker == 0 || self.feature_dim == 0 || self.num_groups == 0 || self.num_groups > 26 {
            return Err(Error::invalid("utts_per_speaker and feature_dim must be positive, num_groups in 1..=26"));
        }
        if self.min_symbols > self.max_symbols || self.min_segment == 0 || self.min_segment > self.max_segment {
            return Err(Error::invalid("symbol and segment ranges must be non-empty"));
        }
        if self.gap == 0 {
            return Err(Error::invalid("gap must be at least one frame"));
        }
        let chars: Vec<char> = self.vocab.chars().collect();
        // Distinct consecutive symbols need at least two of them.
        if chars.is_empty() || (self.max_symbols > 1 && chars.len() < 2) {
            return Err(Error::invalid(format!(
                "vocabulary {:?} too small for transcripts of up to {} symbols",
                self.vocab, self.max_symbols
            )));
        }
        Vocab::new(&self.vocab)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

fn speaker_name(i: usize) -> String {
    format!("spk{i:03}")
}

fn group_name(i: usize, groups: usize) -> String {
    char::from(b'A' + (i % groups) as u8).to_string()
}

/// Renders random transcripts as per-symbol feature templates separated by
/// silence, then applies a per-speaker channel: diagonal gain, offset and
/// spectral tilt (plus a per-group tilt), all scaled by `speaker_strength`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocab::new(&cfg.vocab)?;
    let f = cfg.feature_dim;
    let s = cfg.speaker_strength;
    let ramp: Vec<f64> = (0..f)
        .map(|d| if f == 1 { 0.0 } else { 2.0 * d as f64 / (f - 1) as f64 - 1.0 })
        .collect();

    let mut trng = rng_for(seed, "corpus/templates");
    let templates: Vec<Vec<f64>> = (0..vocab.size())
        .map(|k| {
            if k == 0 {
                vec![0.0; f]
            } else {
                (0..f).map(|_| trng.sample::<f64, _>(StandardNormal)).collect()
            }
        })
        .collect();

    let mut grng = rng_for(seed, "corpus/groups");
    let group_tilt: Vec<f64> = (0..cfg.num_groups).map(|_| 0.5 * grng.sample::<f64, _>(StandardNormal)).collect();

    let mut utterances = Vec::with_capacity(cfg.num_speakers * cfg.utts_per_speaker);
    for spk in 0..cfg.num_speakers {
        let speaker_id = speaker_name(spk);
        let g = spk % cfg.num_groups;
        let mut srng = rng_for(seed, &format!("corpus/speaker/{speaker_id}"));
        let gain: Vec<f64> = (0..f).map(|_| (0.3 * s * srng.sample::<f64, _>(StandardNormal)).exp()).collect();
        let offset: Vec<f64> = (0..f).map(|_| 0.6 * s * srng.sample::<f64, _>(StandardNormal)).collect();
        let tilt = s * (0.5 * srng.sample::<f64, _>(StandardNormal) + group_tilt[g]);

        for u in 0..cfg.utts_per_speaker {
            let id = format!("{speaker_id}-u{u:03}");
            let mut urng = rng_for(seed, &format!("corpus/utt/{id}"));
            let m = urng.random_range(cfg.min_symbols..=cfg.max_symbols);
            let mut symbols: Vec<usize> = Vec::with_capacity(m);
            for _ in 0..m {
                symbols.push(urng.random_range(1..vocab.size()));
            }
            let mut frame_syms = vec![0usize; cfg.gap];
            for &y in &symbols {
                let len = urng.random_range(cfg.min_segment..=cfg.max_segment);
                frame_syms.extend(std::iter::repeat_n(y, len));
                frame_syms.extend(std::iter::repeat_n(0, cfg.gap));
            }
            let mut data = Vec::with_capacity(frame_syms.len() * f);
            for &k in &frame_syms {
                for d in 0..f {
                    let clean = templates[k][d];
                    let n: f64 = urng.sample(StandardNormal);
                    data.push(gain[d] * clean + offset[d] + tilt * ramp[d] + cfg.noise * n);
                }
            }
            utterances.push(Utterance {
                id,
                features: Tensor::matrix(frame_syms.len(), f, data)?,
                transcript: vocab.decode(&symbols),
                speaker_id: speaker_id.clone(),
                group: group_name(g, cfg.num_groups),
            });
        }
    }
    Ok(Corpus {
        vocab,
        feature_dim: f,
        utterances,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitScheme {
    /// Closed-set speakers shared by train-adv, dev-adv and test-adv.
    pub adv_speakers: usize,
    /// Disjoint speakers reserved for open-set verification.
    pub open_speakers: usize,
    pub test_per_speaker: usize,
    pub dev_per_speaker: usize,
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme {
            adv_speakers: 8,
            open_speakers: 8,
            test_per_speaker: 4,
            dev_per_speaker: 2,
        }
    }
}

/// Assigns every utterance to exactly one split. Remaining speakers go to
/// train-full.
pub fn make_splits(corpus: &Corpus, scheme: &SplitScheme, seed: u64) -> Result<BTreeMap<String, Split>> {
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut group_of: BTreeMap<&str, &str> = BTreeMap::new();
    for u in &corpus.utterances {
        by_speaker.entry(&u.speaker_id).or_default().push(&u.id);
        group_of.insert(&u.speaker_id, &u.group);
    }
    if scheme.adv_speakers < 2 || scheme.open_speakers < 2 {
        return Err(Error::invalid("need at least 2 closed-set and 2 open-set speakers"));
    }
    if scheme.adv_speakers + scheme.open_speakers > by_speaker.len() {
        return Err(Error::data(format!(
            "{} closed-set + {} open-set speakers requested, corpus has {}",
            scheme.adv_speakers,
            scheme.open_speakers,
            by_speaker.len()
        )));
    }
    let mut shuffled: Vec<&str> = by_speaker.keys().copied().collect();
    shuffled.shuffle(&mut rng_for(seed, "splits/speakers"));
    // Round-robin over groups so every split sees a balanced group mix.
    let mut queues: BTreeMap<&str, std::collections::VecDeque<&str>> = BTreeMap::new();
    for spk in shuffled {
        queues.entry(group_of[spk]).or_default().push_back(spk);
    }
    let mut speakers = Vec::with_capacity(by_speaker.len());
    while speakers.len() < by_speaker.len() {
        for q in queues.values_mut() {
            speakers.extend(q.pop_front());
        }
    }

    let held = scheme.test_per_speaker + scheme.dev_per_speaker;
    let mut out = BTreeMap::new();
    for (i, spk) in speakers.iter().enumerate() {
        let mut utts = by_speaker[spk].clone();
        if i < scheme.adv_speakers {
            if utts.len() < held + 1 {
                return Err(Error::data(format!(
                    "speaker {spk} has {} utterances, closed-set split needs at least {}",
                    utts.len(),
                    held + 1
                )));
            }
            utts.sort_unstable();
            utts.shuffle(&mut rng_for(seed, &format!("splits/utts/{spk}")));
            for (j, u) in utts.iter().enumerate() {
                let split = if j < scheme.test_per_speaker {
                    Split::TestAdv
                } else if j < held {
                    Split::DevAdv
                } else {
                    Split::TrainAdv
                };
                out.insert(u.to_string(), split);
            }
        } else {
            let split = if i < scheme.adv_speakers + scheme.open_speakers {
                Split::OpenSet
            } else {
                Split::TrainFull
            };
            for u in utts {
                out.insert(u.to_string(), split);
            }
        }
    }
    Ok(out)
}

/// A corpus with its split assignment, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    pub splits: BTreeMap<String, Split>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    magic: String,
    version: u32,
    feature_dim: usize,
    vocab: String,
    features: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    offset: u64,
    frames: usize,
    transcript: String,
    speaker_id: String,
    group: String,
    split: Split,
}

impl Dataset {
    pub fn new(corpus: Corpus, splits: BTreeMap<String, Split>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for u in &corpus.utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::data(format!("duplicate utterance id {}", u.id)));
            }
            if !splits.contains_key(&u.id) {
                return Err(Error::data(format!("utterance {} has no split", u.id)));
            }
            if u.frames() == 0 || u.features.cols() != corpus.feature_dim {
                return Err(Error::data(format!("utterance {} has features {:?}", u.id, u.features.shape())));
            }
            corpus.vocab.encode(&u.transcript).map_err(|e| Error::data(format!("utterance {}: {e}", u.id)))?;
        }
        if splits.len() != corpus.utterances.len() {
            return Err(Error::data("split assignment names utterances missing from the corpus"));
        }
        Ok(Dataset { corpus, splits })
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.corpus
            .utterances
            .iter()
            .filter(|u| self.splits.get(&u.id) == Some(&split))
            .collect()
    }

    pub fn splits_union(&self, splits: &[Split]) -> Vec<&Utterance> {
        self.corpus
            .utterances
            .iter()
            .filter(|u| self.splits.get(&u.id).is_some_and(|s| splits.contains(s)))
            .collect()
    }

    /// Every transcript must fit in the subsampled length of its features.
    pub fn check_ctc_feasible(&self, factor: usize) -> Result<()> {
        for u in &self.corpus.utterances {
            let ids = self.corpus.vocab.encode(&u.transcript)?;
            let have = subsampled_len(u.frames(), factor);
            let need = min_frames(&ids);
            if need > have {
                return Err(Error::data(format!(
                    "utterance {}: {} frames subsample to {have}, transcript needs {need}",
                    u.id,
                    u.frames()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let f = self.corpus.feature_dim;
        let mut blob = Vec::new();
        blob.extend_from_slice(BLOB_MAGIC);
        blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        blob.extend_from_slice(&(f as u32).to_le_bytes());
        let header = ManifestHeader {
            magic: MANIFEST_MAGIC.into(),
            version: FORMAT_VERSION,
            feature_dim: f,
            vocab: self.corpus.vocab.as_string(),
            features: FEATURES_FILE.into(),
        };
        let mut manifest = serde_json::to_string(&header).map_err(|e| Error::data(e.to_string()))?;
        manifest.push('\n');
        for u in &self.corpus.utterances {
            let rec = ManifestRecord {
                id: u.id.clone(),
                offset: blob.len() as u64,
                frames: u.frames(),
                transcript: u.transcript.clone(),
                speaker_id: u.speaker_id.clone(),
                group: u.group.clone(),
                split: self.splits[&u.id],
            };
            put_f64s(&mut blob, u.features.data());
            manifest.push_str(&serde_json::to_string(&rec).map_err(|e| Error::data(e.to_string()))?);
            manifest.push('\n');
        }
        write_atomic(&dir.join(FEATURES_FILE), &blob)?;
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = String::from_utf8(read_file(&mpath)?)
            .map_err(|_| Error::data(format!("{}: not UTF-8", mpath.display())))?;
        let mut lines = text.lines();
        let header: ManifestHeader = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| Error::data(format!("{}: bad header: {e}", mpath.display())))?;
        if header.magic != MANIFEST_MAGIC || header.version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "{}: unsupported manifest {} v{}",
                mpath.display(),
                header.magic,
                header.version
            )));
        }
        let bpath = dir.join(&header.features);
        let blob = read_file(&bpath)?;
        let what = bpath.display().to_string();
        let mut cur = Cursor::new(&blob, &what);
        cur.expect_magic(BLOB_MAGIC)?;
        if cur.u32()? != FORMAT_VERSION || cur.u32()? as usize != header.feature_dim {
            return Err(Error::data(format!("{what}: version or feature dim mismatch")));
        }
        let f = header.feature_dim;
        let vocab = Vocab::new(&header.vocab).map_err(|e| Error::data(e.to_string()))?;
        let mut utterances = Vec::new();
        let mut splits = BTreeMap::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::data(format!("{} line {}: {e}", mpath.display(), n + 2)))?;
            cur.seek(rec.offset as usize)?;
            let data = cur.f64s(rec.frames * f)?;
            splits.insert(rec.id.clone(), rec.split);
            utterances.push(Utterance {
                id: rec.id,
                features: Tensor::matrix(rec.frames, f, data)?,
                transcript: rec.transcript,
                speaker_id: rec.speaker_id,
                group: rec.group,
            });
        }
        Dataset::new(
            Corpus {
                vocab,
                feature_dim: f,
                utterances,
            },
            splits,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub speaker_id: String,
    pub utterance_id: String,
    pub genuine: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSet {
    pub enrollment: BTreeMap<String, Vec<String>>,
    pub test_utterances: Vec<String>,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn counts(&self) -> (usize, usize) {
        let g = self.trials.iter().filter(|t| t.genuine).count();
        (g, self.trials.len() - g)
    }
}

/// Per speaker, utterances (in a seeded order) are enrolled until their
/// frames reach `enroll_budget_frames`; the rest are test utterances. Every
/// enrolled speaker is tried against every test utterance.
pub fn build_trials(pool: &[&Utterance], enroll_budget_frames: usize, seed: u64) -> Result<TrialSet> {
    let mut by_speaker: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in pool {
        by_speaker.entry(&u.speaker_id).or_default().push(u);
    }
    if by_speaker.len() < 2 {
        return Err(Error::data("open-set pool needs at least 2 speakers"));
    }
    let mut enrollment = BTreeMap::new();
    let mut tests: Vec<(&str, &str)> = Vec::new();
    for (spk, mut utts) in by_speaker {
        utts.sort_by(|a, b| a.id.cmp(&b.id));
        utts.shuffle(&mut rng_for(seed, &format!("trials/{spk}")));
        let mut frames = 0;
        let mut enrolled = Vec::new();
        let mut rest = utts.into_iter();
        for u in rest.by_ref() {
            enrolled.push(u.id.clone());
            frames += u.frames();
            if frames >= enroll_budget_frames {
                break;
            }
        }
        if frames < enroll_budget_frames {
            log::warn!("speaker {spk}: {frames} frames cannot meet the enrollment budget of {enroll_budget_frames}; excluded");
            continue;
        }
        enrollment.insert(spk.to_string(), enrolled);
        tests.extend(rest.map(|u| (spk, u.id.as_str())));
    }
    if enrollment.len() < 2 {
        return Err(Error::data("fewer than 2 speakers could be enrolled"));
    }
    tests.sort_by(|a, b| a.1.cmp(b.1));
    let mut trials = Vec::with_capacity(enrollment.len() * tests.len());
    for spk in enrollment.keys() {
        for &(owner, utt) in &tests {
            trials.push(Trial {
                speaker_id: spk.clone(),
                utterance_id: utt.to_string(),
                genuine: owner == spk,
            });
        }
    }
    Ok(TrialSet {
        enrollment,
        test_utterances: tests.iter().map(|t| t.1.to_string()).collect(),
        trials,
    })
}

/// A padded batch. `steps[t]` is `[B, F]`; `members[b]` indexes the input list.
#[derive(Clone, Debug)]
pub struct Batch {
    pub members: Vec<usize>,
    pub steps: Vec<Tensor>,
    pub mask: Mask,
}

/// Sorts sequences by length (stable), groups consecutive runs of at most
/// `max_batch` and zero-pads each group to its longest member.
pub fn make_batches(seqs: &[&Tensor], max_batch: usize) -> Result<Vec<Batch>> {
    if max_batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let dim = seqs.first().map(|s| s.cols()).unwrap_or(0);
    if let Some(bad) = seqs.iter().position(|s| s.rank() != 2 || s.rows() == 0 || s.cols() != dim) {
        return Err(Error::shape("batch", format!("sequence {bad} has shape {:?}", seqs[bad].shape())));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| seqs[i].rows());
    Ok(order
        .chunks(max_batch)
        .map(|members| {
            let lengths: Vec<usize> = members.iter().map(|&i| seqs[i].rows()).collect();
            let steps_n = *lengths.iter().max().expect("non-empty chunk");
            let steps = (0..steps_n)
                .map(|t| {
                    let mut data = Vec::with_capacity(members.len() * dim);
                    for &i in members {
                        if t < seqs[i].rows() {
                            data.extend_from_slice(seqs[i].row(t));
                        } else {
                            data.extend(std::iter::repeat_n(0.0, dim));
                        }
                    }
                    Tensor::matrix(members.len(), dim, data).expect("batch row shape")
                })
                .collect();
            Batch {
                members: members.to_vec(),
                steps,
                mask: Mask::from_lengths(&lengths, steps_n),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_speakers: 6,
            utts_per_speaker: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_feasible() {
        let a = generate_synthetic_corpus(&small_cfg(), 3).unwrap();
        let b = generate_synthetic_corpus(&small_cfg(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&small_cfg(), 4).unwrap();
        assert_ne!(a, c);
        let splits = a.utterances.iter().map(|u| (u.id.clone(), Split::TrainFull)).collect();
        let ds = Dataset::new(a, splits).unwrap();
        ds.check_ctc_feasible(4).unwrap();
        for u in &ds.corpus.utterances {
            let m = u.transcript.chars().count();
            assert!((2..=5).contains(&m));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.num_speakers = 3;
        assert!(generate_synthetic_corpus(&c, 0).is_err());
        let mut c = small_cfg();
        c.speaker_strength = -1.0;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.vocab = "a".into();
        assert!(c.validate().is_err());
    }

    fn welch_p(a: &[f64], b: &[f64]) -> f64 {
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        let (ma, mb) = (mean(a), mean(b));
        let (va, vb) = (var(a, ma) / a.len() as f64, var(b, mb) / b.len() as f64);
        let t = (ma - mb) / (va + vb).sqrt();
        let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
        2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()))
    }

    fn speaker_means(c: &Corpus, spk: &str, dim: usize) -> Vec<f64> {
        c.utterances
            .iter()
            .filter(|u| u.speaker_id == spk)
            .map(|u| (0..u.frames()).map(|t| u.features.at(t, dim)).sum::<f64>() / u.frames() as f64)
            .collect()
    }

    #[test]
    fn zero_strength_speakers_are_indistinguishable() {
        let cfg = SynthConfig {
            num_speakers: 4,
            utts_per_speaker: 20,
            speaker_strength: 0.0,
            ..SynthConfig::default()
        };
        let mut failures = 0;
        for seed in 0..20 {
            let c = generate_synthetic_corpus(&cfg, seed).unwrap();
            let p = welch_p(&speaker_means(&c, "spk000", 0), &speaker_means(&c, "spk001", 0));
            if p <= 0.01 {
                failures += 1;
            }
        }
        assert!(failures <= 2, "{failures} significant differences");
    }

    #[test]
    fn nonzero_strength_speakers_differ() {
        let cfg = SynthConfig {
            num_speakers: 4,
            utts_per_speaker: 20,
            speaker_strength: 3.0,
            ..SynthConfig::default()
        };
        let c = generate_synthetic_corpus(&cfg, 1).unwrap();
        let p = (0..16)
            .map(|d| welch_p(&speaker_means(&c, "spk000", d), &speaker_means(&c, "spk001", d)))
            .fold(1.0, f64::min);
        assert!(p < 1e-6);
    }

    #[test]
    fn splits_partition_and_structure() {
        let cfg = SynthConfig {
            num_speakers: 10,
            utts_per_speaker: 6,
            ..SynthConfig::default()
        };
        let c = generate_synthetic_corpus(&cfg, 0).unwrap();
        let scheme = SplitScheme {
            adv_speakers: 4,
            open_speakers: 3,
            test_per_speaker: 2,
            dev_per_speaker: 2,
        };
        let splits = make_splits(&c, &scheme, 9).unwrap();
        assert_eq!(splits.len(), c.utterances.len());
        let ds = Dataset::new(c, splits).unwrap();
        assert_eq!(ds.split(Split::TestAdv).len(), 8);
        assert_eq!(ds.split(Split::DevAdv).len(), 8);
        assert_eq!(ds.split(Split::TrainAdv).len(), 8);
        let spk = |s: Split| {
            ds.split(s)
                .iter()
                .map(|u| u.speaker_id.clone())
                .collect::<std::collections::BTreeSet<_>>()
        };
        assert_eq!(spk(Split::TestAdv), spk(Split::TrainAdv));
        assert_eq!(spk(Split::DevAdv), spk(Split::TrainAdv));
        assert_eq!(spk(Split::OpenSet).len(), 3);
        assert!(spk(Split::OpenSet).is_disjoint(&spk(Split::TrainAdv)));
        assert!(spk(Split::OpenSet).is_disjoint(&spk(Split::TrainFull)));
        assert_eq!(spk(Split::TrainFull).len(), 3);
    }

    #[test]
    fn splits_balance_groups() {
        let c = generate_synthetic_corpus(&SynthConfig::default(), 1).unwrap();
        let ds = Dataset::new(c.clone(), make_splits(&c, &SplitScheme::default(), 1).unwrap()).unwrap();
        for split in [Split::TrainAdv, Split::OpenSet, Split::TrainFull] {
            let mut per_group: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
            for u in ds.split(split) {
                per_group.entry(&u.group).or_default().insert(&u.speaker_id);
            }
            let sizes: Vec<usize> = per_group.values().map(|s| s.len()).collect();
            assert_eq!(sizes.len(), 2, "{split}");
            assert_eq!(sizes[0], sizes[1], "{split}");
        }
    }

    #[test]
    fn splits_need_enough_utterances() {
        let cfg = SynthConfig {
            num_speakers: 6,
            utts_per_speaker: 4,
            ..SynthConfig::default()
        };
        let c = generate_synthetic_corpus(&cfg, 0).unwrap();
        let scheme = SplitScheme {
            adv_speakers: 2,
            open_speakers: 2,
            ..SplitScheme::default()
        };
        assert!(matches!(make_splits(&c, &scheme, 0), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_roundtrip() {
        let c = generate_synthetic_corpus(&small_cfg(), 5).unwrap();
        let scheme = SplitScheme {
            adv_speakers: 2,
            open_speakers: 2,
            test_per_speaker: 2,
            dev_per_speaker: 2,
        };
        let ds = Dataset::new(c.clone(), make_splits(&c, &scheme, 5).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, ds);
        let bytes = std::fs::read(dir.path().join(FEATURES_FILE)).unwrap();
        std::fs::write(dir.path().join(FEATURES_FILE), &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Dataset::read(dir.path()), Err(Error::Data(_))));
    }

    fn toy(id: &str, spk: &str, frames: usize) -> Utterance {
        Utterance {
            id: id.into(),
            features: Tensor::zeros(&[frames, 2]),
            transcript: "a".into(),
            speaker_id: spk.into(),
            group: "A".into(),
        }
    }

    #[test]
    fn trials_cross_product() {
        let utts = [
            toy("a1", "a", 10),
            toy("a2", "a", 10),
            toy("a3", "a", 10),
            toy("a4", "a", 10),
            toy("b1", "b", 10),
            toy("b2", "b", 10),
            toy("b3", "b", 10),
        ];
        let pool: Vec<&Utterance> = utts.iter().collect();
        let ts = build_trials(&pool, 10, 1).unwrap();
        // One enrollment utterance each: 3 + 2 test utterances.
        assert_eq!(ts.test_utterances.len(), 5);
        assert_eq!(ts.trials.len(), 10);
        assert_eq!(ts.counts(), (5, 5));
        for (spk, enrolled) in &ts.enrollment {
            assert_eq!(enrolled.len(), 1);
            assert!(!ts.test_utterances.contains(&enrolled[0]));
            assert!(enrolled[0].starts_with(spk.as_str()));
        }
        assert_eq!(build_trials(&pool, 10, 1).unwrap(), ts);

        let pool2: Vec<&Utterance> = utts[..2].iter().chain(&utts[4..6]).collect();
        let ts2 = build_trials(&pool2, 10, 3).unwrap();
        assert_eq!(ts2.trials.len(), 4);
        assert_eq!(ts2.counts(), (2, 2));
    }

    #[test]
    fn trials_exclude_thin_speakers() {
        let utts = [toy("a1", "a", 30), toy("a2", "a", 10), toy("b1", "b", 30), toy("b2", "b", 5), toy("c1", "c", 5)];
        let pool: Vec<&Utterance> = utts.iter().collect();
        let ts = build_trials(&pool, 20, 0).unwrap();
        assert!(!ts.enrollment.contains_key("c"));
        assert_eq!(ts.enrollment.len(), 2);
        assert!(build_trials(&pool[..2], 20, 0).is_err());
    }

    #[test]
    fn batching_pads_and_masks() {
        let a = Tensor::full(&[3, 2], 1.0);
        let b = Tensor::full(&[5, 2], 2.0);
        let c = Tensor::full(&[1, 2], 3.0);
        let batches = make_batches(&[&a, &b, &c], 2).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].members, vec![2, 0]);
        assert_eq!(batches[0].steps.len(), 3);
        assert_eq!(batches[0].mask.count(0), 1);
        assert_eq!(batches[0].mask.count(1), 3);
        assert_eq!(batches[0].steps[2].data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(batches[1].members, vec![1]);
        assert_eq!(batches[1].mask.count(0), 5);
        assert!((0..5).all(|t| batches[1].mask.is_valid(t, 0)));
        assert!(make_batches(&[&a], 0).is_err());
    }
}
