//! Speaker-leakage metrics: the embedding attacker, enrollment and trial
//! scoring (cosine or PLDA), EER, closed-set accuracy and silhouette.

mod eer;
mod embedding_net;
mod plda;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::storage::{put_f64s, read_file, write_atomic, Cursor};

pub use eer::{eer, EerResult, RocPoint};
pub use embedding_net::{train_embedding_net, EmbeddingConfig, EmbeddingExtractor};
pub use plda::{plda_train, PldaFit, PldaModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub utterance_id: String,
    pub speaker_id: Option<String>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `v / |v|`, or an error for a (near) zero vector.
pub fn length_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::Numerical(format!("cannot length-normalize a vector of norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn normalized(&self) -> Result<Embedding> {
        Ok(Embedding {
            vector: length_normalize(&self.vector)?,
            ..self.clone()
        })
    }
}

/// Speaker model: mean of the length-normalized embeddings, re-normalized.
pub fn enroll(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::invalid("enrollment needs at least one embedding"))?;
    let d = first.dim();
    let mut sum = vec![0.0; d];
    for e in embeddings {
        if e.dim() != d {
            return Err(Error::shape("enroll", format!("dims {d} and {}", e.dim())));
        }
        for (s, x) in sum.iter_mut().zip(length_normalize(&e.vector)?) {
            *s += x;
        }
    }
    let vector = length_normalize(&sum)
        .map_err(|_| Error::Numerical("enrollment embeddings cancel out (zero mean norm)".into()))?;
    Ok(Embedding {
        vector,
        utterance_id: format!("enroll:{}", first.speaker_id.clone().unwrap_or_default()),
        speaker_id: first.speaker_id.clone(),
    })
}

pub fn cosine_score(enrollment: &Embedding, test: &Embedding) -> Result<f64> {
    if enrollment.dim() != test.dim() {
        return Err(Error::shape("cosine_score", format!("dims {} and {}", enrollment.dim(), test.dim())));
    }
    let (na, nb) = (norm(&enrollment.vector), norm(&test.vector));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Numerical("cosine score of a zero vector".into()));
    }
    Ok((dot(&enrollment.vector, &test.vector) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug)]
pub enum ScoringBackend {
    Cosine,
    /// Scores length-normalized vectors with a model trained on length-normalized vectors.
    Plda(PldaModel),
}

impl ScoringBackend {
    pub fn name(&self) -> &'static str {
        match self {
            ScoringBackend::Cosine => "cosine",
            ScoringBackend::Plda(_) => "plda",
        }
    }

    pub fn score(&self, enrollment: &Embedding, test: &Embedding) -> Result<f64> {
        match self {
            ScoringBackend::Cosine => cosine_score(enrollment, test),
            ScoringBackend::Plda(m) => m.score(
                &length_normalize(&enrollment.vector)?,
                &length_normalize(&test.vector)?,
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub enroll_id: String,
    pub test_utt_id: String,
    pub score: f64,
    pub genuine: bool,
}

/// Enrolls every speaker of `trials` and scores all trials (in parallel).
pub fn score_trials(
    trials: &TrialSet,
    embeddings: &BTreeMap<String, Embedding>,
    backend: &ScoringBackend,
) -> Result<Vec<ScoredTrial>> {
    let lookup = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::data(format!("no embedding for utterance {id}")))
    };
    let mut models = BTreeMap::new();
    for (spk, utts) in &trials.enrollment {
        let es = utts.iter().map(|u| lookup(u).cloned()).collect::<Result<Vec<_>>>()?;
        models.insert(spk.as_str(), enroll(&es)?);
    }
    trials
        .trials
        .par_iter()
        .map(|t| {
            let model = models
                .get(t.speaker_id.as_str())
                .ok_or_else(|| Error::data(format!("speaker {} not enrolled", t.speaker_id)))?;
            Ok(ScoredTrial {
                enroll_id: t.speaker_id.clone(),
                test_utt_id: t.utterance_id.clone(),
                score: backend.score(model, lookup(&t.utterance_id)?)?,
                genuine: t.genuine,
            })
        })
        .collect()
}

/// EER over a subset of scored trials.
pub fn eer_of<'a>(scored: impl IntoIterator<Item = &'a ScoredTrial>) -> Result<EerResult> {
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for t in scored {
        if t.genuine {
            gen.push(t.score);
        } else {
            imp.push(t.score);
        }
    }
    eer(&gen, &imp)
}

pub fn score_csv(scored: &[ScoredTrial]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::data(e.to_string());
    w.write_record(["enroll_id", "test_utt_id", "score", "is_genuine"]).map_err(err)?;
    for t in scored {
        w.write_record([
            t.enroll_id.clone(),
            t.test_utt_id.clone(),
            t.score.to_string(),
            u8::from(t.genuine).to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}

/// Percentage of `decisions` equal to `labels`.
pub fn closed_set_accuracy(decisions: &[usize], labels: &[usize]) -> Result<f64> {
    if decisions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} decisions for {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let correct = decisions.iter().zip(labels).filter(|(d, l)| d == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Mean silhouette under cosine distance; singleton clusters score 0.
pub fn silhouette(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("silhouette needs one label per embedding"));
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *sizes.entry(l).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::invalid("silhouette needs at least 2 clusters"));
    }
    if sizes.values().all(|&n| n < 2) {
        return Err(Error::invalid("silhouette needs a cluster with at least 2 points"));
    }
    let unit = embeddings
        .iter()
        .map(|e| length_normalize(e))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = (0..unit.len())
        .into_par_iter()
        .map(|i| {
            let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
            for (j, u) in unit.iter().enumerate() {
                if j != i {
                    *sums.entry(labels[j]).or_default() += 1.0 - dot(&unit[i], u);
                }
            }
            let own = labels[i];
            if sizes[&own] == 1 {
                return 0.0;
            }
            let a = sums.get(&own).copied().unwrap_or(0.0) / (sizes[&own] - 1) as f64;
            let b = sums
                .iter()
                .filter(|(l, _)| **l != own)
                .map(|(l, s)| s / sizes[l] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

const EMB_MAGIC: &[u8; 8] = b"SPKEMBD\0";
const EMB_VERSION: u32 = 1;

/// Header (magic, version, count, dim) followed by row-major f64 rows.
pub fn write_embedding_file(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("embedding rows differ in dimension"));
    }
    let mut out = Vec::with_capacity(32 + rows.len() * dim * 8);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for r in rows {
        put_f64s(&mut out, r);
    }
    write_atomic(path, &out)
}

pub fn read_embedding_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let buf = read_file(path)?;
    let mut c = Cursor::new(&buf, "embedding file");
    c.expect_magic(EMB_MAGIC)?;
    let version = c.u32()?;
    if version != EMB_VERSION {
        return Err(Error::data(format!("embedding file version {version} unsupported")));
    }
    let count = c.u64()? as usize;
    let dim = c.u64()? as usize;
    let rows = (0..count).map(|_| c.f64s(dim)).collect::<Result<Vec<_>>>()?;
    if !c.is_at_end() {
        return Err(Error::data("embedding file has trailing bytes"));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
