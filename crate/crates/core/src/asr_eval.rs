//! Levenshtein alignment and pooled error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn add(&mut self, o: EditOps) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

/// Minimal alignment. On backtracking, ties prefer the diagonal
/// (match/substitution), then insertion, then deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut ops = EditOps::default();
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[(i - 1) * w + j - 1] + mismatch == here {
                ops.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.insertions += 1;
            j -= 1;
        } else {
            ops.deletions += 1;
            i -= 1;
        }
    }
    ops
}

fn pooled<F>(refs: &[&str], hyps: &[&str], tokens: F) -> Result<f64>
where
    F: Fn(&str) -> Vec<String>,
{
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let mut errors = 0;
    let mut total = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (tokens(r), tokens(h));
        errors += edit_distance(&r, &h).total();
        total += r.len();
    }
    if total == 0 {
        return Err(Error::invalid("reference corpus has no tokens"));
    }
    Ok(100.0 * errors as f64 / total as f64)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn chars(s: &str) -> Vec<String> {
    s.chars().map(String::from).collect()
}

/// Corpus-level word error rate in percent.
pub fn wer(refs: &[&str], hyps: &[&str]) -> Result<f64> {
    pooled(refs, hyps, words)
}

/// Corpus-level character error rate in percent (every character, spaces included).
pub fn cer(refs: &[&str], hyps: &[&str]) -> Result<f64> {
    pooled(refs, hyps, chars)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttScore {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub ops: EditOps,
}

/// Per-utterance character alignment counts plus a summary row.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringReport {
    pub rows: Vec<UttScore>,
    pub total: EditOps,
    pub ref_tokens: usize,
}

impl ScoringReport {
    /// Character-level scoring of `(id, reference, hypothesis)` triples.
    pub fn new(items: &[(String, String, String)]) -> Self {
        let mut total = EditOps::default();
        let mut ref_tokens = 0;
        let rows = items
            .iter()
            .map(|(id, r, h)| {
                let ops = edit_distance(&chars(r), &chars(h));
                total.add(ops);
                ref_tokens += r.chars().count();
                UttScore {
                    id: id.clone(),
                    reference: r.clone(),
                    hypothesis: h.clone(),
                    ops,
                }
            })
            .collect();
        ScoringReport {
            rows,
            total,
            ref_tokens,
        }
    }

    pub fn error_rate(&self) -> Result<f64> {
        if self.ref_tokens == 0 {
            return Err(Error::invalid("reference corpus has no tokens"));
        }
        Ok(100.0 * self.total.total() as f64 / self.ref_tokens as f64)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::data(e.to_string());
        w.write_record(["id", "ref", "hyp", "S", "D", "I"]).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.reference.clone(),
                r.hypothesis.clone(),
                r.ops.substitutions.to_string(),
                r.ops.deletions.to_string(),
                r.ops.insertions.to_string(),
            ])
            .map_err(err)?;
        }
        w.write_record([
            "TOTAL".to_string(),
            format!("{} tokens", self.ref_tokens),
            self.error_rate().map(|e| format!("{e:.4}%")).unwrap_or_default(),
            self.total.substitutions.to_string(),
            self.total.deletions.to_string(),
            self.total.insertions.to_string(),
        ])
        .map_err(err)?;
        let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = rec(ra, rb) + usize::from(x != y);
                sub.min(rec(ra, b) + 1).min(rec(a, rb) + 1)
            }
        }
    }

    #[test]
    fn hand_cases() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), EditOps::default());
        let ops = edit_distance(&["a", "b", "c"], &["a", "c"]);
        assert_eq!(ops, EditOps { substitutions: 0, deletions: 1, insertions: 0 });
        let ops = edit_distance(&["a"], &["b"]);
        assert_eq!(ops.substitutions, 1);
        // Substitution preferred over an insertion/deletion pair.
        let ops = edit_distance(&[1, 2], &[1, 3]);
        assert_eq!(ops, EditOps { substitutions: 1, deletions: 0, insertions: 0 });
        let ops = edit_distance::<u8>(&[], &[1, 2]);
        assert_eq!(ops.insertions, 2);
    }

    #[test]
    fn pooled_rates() {
        assert_eq!(wer(&["a b c"], &["a b c"]).unwrap(), 0.0);
        assert!((wer(&["a b c"], &["a b x"]).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        // Pooled, not averaged: 1 error over 4 reference words.
        assert!((wer(&["a", "b c d"], &["x", "b c d"]).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(cer(&["ab"], &["ab"]).unwrap(), 0.0);
        assert_eq!(cer(&["ab"], &["ac"]).unwrap(), 50.0);
        assert_eq!(wer(&["a"], &["b c d"]).unwrap(), 300.0);
        assert!(wer(&[""], &["a"]).is_err());
        assert!(wer(&["a"], &[]).is_err());
    }

    #[test]
    fn report_csv() {
        let r = ScoringReport::new(&[
            ("u1".into(), "ab".into(), "ac".into()),
            ("u2".into(), "a,b".into(), "a,b".into()),
        ]);
        assert!((r.error_rate().unwrap() - 20.0).abs() < 1e-12);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("id,ref,hyp,S,D,I\nu1,ab,ac,1,0,0\nu2,\"a,b\",\"a,b\",0,0,0\nTOTAL"));
    }

    proptest! {
        #[test]
        fn matches_recursive_oracle(a in proptest::collection::vec(0u8..3, 0..=6), b in proptest::collection::vec(0u8..3, 0..=6)) {
            let ops = edit_distance(&a, &b);
            prop_assert_eq!(ops.total(), rec(&a, &b));
            prop_assert_eq!(ops.total(), edit_distance(&b, &a).total());
            // Counts are consistent with the lengths.
            prop_assert_eq!(a.len() + ops.insertions, b.len() + ops.deletions);
        }

        #[test]
        fn triangle_inequality(a in proptest::collection::vec(0u8..3, 0..=5), b in proptest::collection::vec(0u8..3, 0..=5), c in proptest::collection::vec(0u8..3, 0..=5)) {
            let d = |x: &[u8], y: &[u8]| edit_distance(x, y).total();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }

        #[test]
        fn cer_equals_distance_over_length(r in "[abc]{1,6}", h in "[abc]{0,6}") {
            let rc: Vec<char> = r.chars().collect();
            let hc: Vec<char> = h.chars().collect();
            let expect = 100.0 * edit_distance(&rc, &hc).total() as f64 / rc.len() as f64;
            prop_assert!((cer(&[&r], &[&h]).unwrap() - expect).abs() < 1e-12);
        }
    }
}
