//! Two-covariance PLDA: `x = mu + b + w`, `b ~ N(0, Sb)` per speaker,
//! `w ~ N(0, Sw)` per utterance. `mu` is the training mean and stays fixed;
//! EM updates `Sb` and `Sw`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PldaModel {
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct PldaFit {
    pub model: PldaModel,
    /// Training log-likelihood before the first and after every iteration.
    pub log_likelihoods: Vec<f64>,
}

/// Centered per-speaker statistics.
pub struct SpeakerStats {
    n: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

const SINGULAR_HINT: &str = "reduce the embedding dimension or provide more utterances per speaker";

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn log_gauss(x: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov.clone().cholesky().ok_or_else(|| {
        Error::Numerical(format!("PLDA covariance is not positive definite; {SINGULAR_HINT}"))
    })?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let maha = x.dot(&chol.solve(x));
    Ok(-0.5 * (x.len() as f64 * (2.0 * PI).ln() + logdet + maha))
}

/// Groups vectors by label after subtracting `mean`.
pub fn speaker_stats(x: &[Vec<f64>], labels: &[usize], mean: &DVector<f64>) -> Vec<SpeakerStats> {
    let d = mean.len();
    let mut groups: BTreeMap<usize, Vec<DVector<f64>>> = BTreeMap::new();
    for (v, &l) in x.iter().zip(labels) {
        groups.entry(l).or_default().push(DVector::from_column_slice(v) - mean);
    }
    groups
        .into_values()
        .map(|vs| {
            let n = vs.len();
            let m = vs.iter().fold(DVector::zeros(d), |a, v| a + v) / n as f64;
            let scatter = vs.iter().fold(DMatrix::zeros(d, d), |a, v| {
                let c = v - &m;
                a + &c * c.transpose()
            });
            SpeakerStats { n, mean: m, scatter }
        })
        .collect()
}

impl PldaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Exact marginal log-likelihood of the grouped training data.
    pub fn log_likelihood(&self, stats: &[SpeakerStats]) -> Result<f64> {
        let d = self.dim() as f64;
        let chol = self.within.clone().cholesky().ok_or_else(|| {
            Error::Numerical(format!("within-speaker covariance is singular; {SINGULAR_HINT}"))
        })?;
        let logdet_w = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let w_inv = chol.inverse();
        let mut total = 0.0;
        for s in stats {
            let n = s.n as f64;
            let within_part = -0.5 * (n - 1.0) * (d * (2.0 * PI).ln() + logdet_w)
                - 0.5 * (&w_inv * &s.scatter).trace()
                - 0.5 * d * n.ln();
            let cov = &self.between + &self.within / n;
            total += within_part + log_gauss(&s.mean, &cov)?;
        }
        Ok(total)
    }

    /// One EM update of both covariances.
    pub fn em_step(&self, stats: &[SpeakerStats]) -> Result<PldaModel> {
        let d = self.dim();
        let mut sb = DMatrix::zeros(d, d);
        let mut sw = DMatrix::zeros(d, d);
        let mut total = 0usize;
        for s in stats {
            let n = s.n as f64;
            let a = &self.between + &self.within / n;
            let a_inv = a.cholesky().ok_or_else(|| {
                Error::Numerical(format!("PLDA posterior covariance is singular; {SINGULAR_HINT}"))
            })?;
            // Posterior of the speaker variable: mean k ybar, covariance Sb - k Sb.
            let k = a_inv.solve(&self.between).transpose();
            let m = &k * &s.mean;
            let c = &self.between - &k * &self.between;
            sb += &m * m.transpose() + &c;
            let r = &s.mean - &m;
            sw += &s.scatter + (&r * r.transpose()) * n + &c * n;
            total += s.n;
        }
        Ok(PldaModel {
            mean: self.mean.clone(),
            between: symmetrize(sb / stats.len() as f64),
            within: symmetrize(sw / total as f64),
        })
    }

    /// Same-speaker versus different-speaker log-likelihood ratio.
    pub fn score(&self, enrollment: &[f64], test: &[f64]) -> Result<f64> {
        let d = self.dim();
        if enrollment.len() != d || test.len() != d {
            return Err(Error::shape(
                "plda_score",
                format!("model dim {d}, inputs {} and {}", enrollment.len(), test.len()),
            ));
        }
        let a = DVector::from_column_slice(enrollment) - &self.mean;
        let b = DVector::from_column_slice(test) - &self.mean;
        let total = &self.between + &self.within;
        let mut joint = DMatrix::zeros(2 * d, 2 * d);
        joint.view_mut((0, 0), (d, d)).copy_from(&total);
        joint.view_mut((d, d), (d, d)).copy_from(&total);
        joint.view_mut((0, d), (d, d)).copy_from(&self.between);
        joint.view_mut((d, 0), (d, d)).copy_from(&self.between);
        let mut ab = DVector::zeros(2 * d);
        ab.rows_mut(0, d).copy_from(&a);
        ab.rows_mut(d, d).copy_from(&b);
        Ok(log_gauss(&ab, &joint)? - log_gauss(&a, &total)? - log_gauss(&b, &total)?)
    }

    /// Moment initialization: covariance of speaker means and pooled within scatter.
    pub fn initial(x: &[Vec<f64>], labels: &[usize]) -> Result<(PldaModel, Vec<SpeakerStats>)> {
        let d = x[0].len();
        let mean = x
            .iter()
            .fold(DVector::zeros(d), |a, v| a + DVector::from_column_slice(v))
            / x.len() as f64;
        let stats = speaker_stats(x, labels, &mean);
        let mut sb = DMatrix::zeros(d, d);
        let mut sw = DMatrix::zeros(d, d);
        for s in &stats {
            sb += &s.mean * s.mean.transpose();
            sw += &s.scatter;
        }
        let model = PldaModel {
            mean,
            between: symmetrize(sb / stats.len() as f64),
            within: symmetrize(sw / x.len() as f64),
        };
        Ok((model, stats))
    }
}

pub fn plda_train(x: &[Vec<f64>], labels: &[usize], iters: usize) -> Result<PldaFit> {
    if x.len() != labels.len() || x.is_empty() {
        return Err(Error::invalid("PLDA needs one label per embedding and at least one embedding"));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(Error::shape("plda_train", "embeddings differ in dimension"));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid("PLDA needs at least 2 speakers"));
    }
    if counts.values().all(|&n| n < 2) {
        return Err(Error::invalid("PLDA needs a speaker with at least 2 utterances"));
    }
    let (mut model, stats) = PldaModel::initial(x, labels)?;
    let mut lls = vec![model.log_likelihood(&stats)?];
    for _ in 0..iters {
        model = model.em_step(&stats)?;
        lls.push(model.log_likelihood(&stats)?);
    }
    Ok(PldaFit {
        model,
        log_likelihoods: lls,
    })
}
