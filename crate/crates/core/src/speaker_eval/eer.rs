use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub threshold: f64,
    /// One point per distinct score (ascending), then `+inf`.
    pub roc: Vec<RocPoint>,
}

impl EerResult {
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("threshold,far,frr\n");
        for p in &self.roc {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
        }
        s
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Accept when `score >= threshold`. The ROC points are joined by their
/// lower convex hull, which is then intersected with `FAR = FRR`; ties
/// between genuine and impostor scores therefore interpolate linearly.
pub fn eer(genuine: &[f64], impostor: &[f64]) -> Result<EerResult> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::invalid("EER needs at least one genuine and one impostor score"));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::Numerical("EER over non-finite scores".into()));
    }
    let mut gen = genuine.to_vec();
    let mut imp = impostor.to_vec();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    let roc: Vec<RocPoint> = thresholds
        .iter()
        .map(|&th| RocPoint {
            threshold: th,
            far: (imp.len() - imp.partition_point(|&s| s < th)) as f64 / ni,
            frr: gen.partition_point(|&s| s < th) as f64 / ng,
        })
        .collect();

    // Lower hull, traversed from (0, 1) to (1, 0).
    let mut hull: Vec<&RocPoint> = Vec::new();
    for p in roc.iter().rev() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            if cross((a.far, a.frr), (b.far, b.frr), (p.far, p.frr)) <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    for w in hull.windows(2) {
        let (p, q) = (w[0], w[1]);
        let (dp, dq) = (p.far - p.frr, q.far - q.frr);
        if dp <= 0.0 && dq >= 0.0 {
            let (eer, threshold) = if dp == dq {
                (p.far, p.threshold)
            } else {
                let t = dp / (dp - dq);
                let th = if t <= 0.5 { p.threshold } else { q.threshold };
                (p.far + t * (q.far - p.far), th)
            };
            return Ok(EerResult { eer, threshold, roc });
        }
    }
    unreachable!("the hull runs from (0, 1) to (1, 0) and must cross FAR = FRR")
}
