//! CTC branch: vocabulary, blank-augmented targets, the log-space forward
//! recursion, a path-enumeration oracle and greedy decoding.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::layers::{Linear, LinearNodes};
use crate::params::{Bound, ParamGroup};

pub const BLANK: usize = 0;

/// Large negative stand-in for `ln 0` that keeps the lattice finite.
const LOG_ZERO: f64 = -1e30;

/// Output symbols. Character `chars[i]` has index `i + 1`; index 0 is the
/// CTC blank and, in the attention head, the sentence boundary (sos/eos).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub const BLANK: usize = BLANK;
    pub const SOS: usize = 0;
    pub const EOS: usize = 0;

    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.is_empty() {
            return Err(Error::invalid("vocabulary is empty"));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::invalid(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Vocab { chars })
    }

    /// Number of output classes including the blank/boundary symbol.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&v| v == c)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::invalid(format!("symbol {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Maps indices back to text, skipping the blank/boundary index.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != BLANK && i <= self.chars.len())
            .map(|&i| self.chars[i - 1])
            .collect()
    }
}

/// `(blank, y1, blank, ..., yM, blank)`, length `2M + 1`.
pub fn augmented_targets(target: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * target.len() + 1);
    out.push(BLANK);
    for &y in target {
        out.push(y);
        out.push(BLANK);
    }
    out
}

/// Fewest frames that can emit `target`: one per label plus a separating
/// blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

fn check_target(target: &[usize], classes: usize, frames: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= classes) {
        return Err(Error::invalid(format!(
            "target label {bad} is the blank or outside {classes} classes"
        )));
    }
    let needed = min_frames(target);
    if needed > frames {
        return Err(Error::TargetTooLong {
            labels: target.len(),
            needed,
            frames,
        });
    }
    Ok(())
}

/// `-ln P(target | log_probs)` by the forward recursion over the augmented
/// lattice, differentiable through `log_probs [T, V]`.
pub fn ctc_loss(g: &mut Graph, log_probs: NodeId, target: &[usize]) -> Result<NodeId> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("ctc_loss", format!("log_probs {shape:?}, expected [T, V]")));
    }
    let (frames, classes) = (shape[0], shape[1]);
    check_target(target, classes, frames)?;

    let labels = augmented_targets(target);
    let s = labels.len();
    // Skip transition s-2 -> s is allowed into a non-blank that differs from
    // the label two positions back.
    let skip_bias: Vec<f64> = (0..s)
        .map(|i| {
            if i >= 2 && labels[i] != BLANK && labels[i] != labels[i - 2] {
                0.0
            } else {
                LOG_ZERO
            }
        })
        .collect();
    let init_bias: Vec<f64> = (0..s).map(|i| if i < 2 { 0.0 } else { LOG_ZERO }).collect();

    let emissions = |g: &mut Graph, t: usize| -> Result<NodeId> {
        let idx: Vec<usize> = labels.iter().map(|&l| t * classes + l).collect();
        g.gather(log_probs, &idx)
    };

    let e0 = emissions(g, 0)?;
    let init = g.constant(Tensor::vector(init_bias));
    let mut alpha = g.add(e0, init)?;
    let skip = (s > 2).then(|| g.constant(Tensor::vector(skip_bias)));
    let pad1 = g.constant(Tensor::vector(vec![LOG_ZERO]));
    let pad2 = g.constant(Tensor::vector(vec![LOG_ZERO; 2]));

    for t in 1..frames {
        let mut rows = vec![alpha];
        if s > 1 {
            let head = g.slice(alpha, 0, 0, s - 1)?;
            rows.push(g.concat(&[pad1, head], 0)?);
        }
        if let Some(skip) = skip {
            let head = g.slice(alpha, 0, 0, s - 2)?;
            let shifted = g.concat(&[pad2, head], 0)?;
            rows.push(g.add(shifted, skip)?);
        }
        let stacked = g.concat(&rows, 0)?;
        let stacked = g.reshape(stacked, &[rows.len(), s])?;
        let merged = g.logsumexp(stacked, 0)?;
        let e = emissions(g, t)?;
        alpha = g.add(merged, e)?;
    }

    let finals: Vec<usize> = if s > 1 { vec![s - 2, s - 1] } else { vec![s - 1] };
    let ends = g.gather(alpha, &finals)?;
    let total = g.logsumexp(ends, 0)?;
    g.scale(total, -1.0)
}

/// Value-only convenience wrapper around [`ctc_loss`].
pub fn ctc_loss_value(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let lp = g.constant(log_probs.clone());
    let loss = ctc_loss(&mut g, lp, target)?;
    Ok(g.value(loss).item())
}

pub const BRUTE_FORCE_MAX_FRAMES: usize = 6;

/// Test oracle: enumerates all `V^T` frame labelings of `probs [T, V]`,
/// sums the probability of those collapsing to `target`, returns `-ln`.
pub fn ctc_brute_force(probs: &Tensor, target: &[usize]) -> Result<f64> {
    let (frames, classes) = (probs.rows(), probs.cols());
    if probs.rank() != 2 || frames == 0 {
        return Err(Error::shape("ctc_brute_force", format!("probs {:?}", probs.shape())));
    }
    if frames > BRUTE_FORCE_MAX_FRAMES {
        return Err(Error::invalid(format!(
            "brute force limited to {BRUTE_FORCE_MAX_FRAMES} frames, got {frames}"
        )));
    }
    let mut total = 0.0;
    let mut matched = false;
    for_each_path(frames, classes, |path| {
        if collapse(path) == target {
            matched = true;
            total += path.iter().enumerate().map(|(t, &k)| probs.at(t, k)).product::<f64>();
        }
    });
    if !matched {
        return Err(Error::TargetTooLong {
            labels: target.len(),
            needed: min_frames(target),
            frames,
        });
    }
    Ok(-total.ln())
}

/// Probability of every distinct collapsed output (oracle helper).
pub fn ctc_output_distribution(probs: &Tensor) -> HashMap<Vec<usize>, f64> {
    let mut out = HashMap::new();
    for_each_path(probs.rows(), probs.cols(), |path| {
        let p: f64 = path.iter().enumerate().map(|(t, &k)| probs.at(t, k)).product();
        *out.entry(collapse(path)).or_insert(0.0) += p;
    });
    out
}

fn for_each_path(frames: usize, classes: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; frames];
    loop {
        f(&path);
        let mut i = frames;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Per-frame argmax (lowest index on ties), merge repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Linear + log-softmax head over encoder frames.
pub struct CtcHead {
    out: Linear,
}

impl CtcHead {
    pub fn new(input_dim: usize, vocab_size: usize) -> Self {
        CtcHead {
            out: Linear::new("ctc.out", input_dim, vocab_size),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, group: &mut ParamGroup, rng: &mut R) {
        self.out.init(group, rng);
    }

    pub fn bind(&self, p: &Bound) -> Result<LinearNodes> {
        self.out.bind(p)
    }

    /// `phi [T', D] -> [T', V]` log-posteriors.
    pub fn log_probs(nodes: &LinearNodes, g: &mut Graph, phi: NodeId) -> Result<NodeId> {
        let logits = nodes.apply(g, phi)?;
        g.log_softmax(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_tensor(p: &Tensor) -> Tensor {
        p.map(f64::ln)
    }

    fn random_probs(frames: usize, classes: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..frames {
            let row: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        Tensor::matrix(frames, classes, data).unwrap()
    }

    #[test]
    fn vocab_roundtrip_and_errors() {
        let v = Vocab::new("ab c").unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.encode("a c").unwrap(), vec![1, 3, 4]);
        assert_eq!(v.decode(&[1, 0, 3, 4]), "a c");
        assert!(v.encode("z").is_err());
        assert!(Vocab::new("aa").is_err());
    }

    #[test]
    fn augmented_layout() {
        assert_eq!(augmented_targets(&[3, 1]), vec![0, 3, 0, 1, 0]);
        assert_eq!(augmented_targets(&[]), vec![0]);
    }

    #[test]
    fn single_frame_single_path() {
        let lp = log_tensor(&Tensor::from_rows(&[[0.4, 0.6]]).unwrap());
        let loss = ctc_loss_value(&lp, &[1]).unwrap();
        assert!((loss + 0.6f64.ln()).abs() < 1e-12);
        assert!((loss - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn two_frames_three_paths() {
        let p = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        // Paths (a,a), (blank,a), (a,blank): 3 * 0.25.
        let oracle = ctc_brute_force(&p, &[1]).unwrap();
        assert!((oracle + 0.75f64.ln()).abs() < 1e-15);
        let loss = ctc_loss_value(&log_tensor(&p), &[1]).unwrap();
        assert!((loss - oracle).abs() < 1e-12);
        assert!((loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn infeasible_targets_error_in_both_routes() {
        let p = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        // "aa" needs a separating blank: 3 frames.
        assert!(matches!(ctc_loss_value(&log_tensor(&p), &[1, 1]), Err(Error::TargetTooLong { needed: 3, .. })));
        assert!(matches!(ctc_brute_force(&p, &[1, 1]), Err(Error::TargetTooLong { .. })));
        let p3 = Tensor::from_rows(&[[0.3, 0.3, 0.4]]).unwrap();
        assert!(matches!(ctc_loss_value(&log_tensor(&p3), &[1, 2]), Err(Error::TargetTooLong { .. })));
        assert!(matches!(ctc_brute_force(&p3, &[1, 2]), Err(Error::TargetTooLong { .. })));
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let p = Tensor::full(&[7, 2], 0.5);
        assert!(ctc_brute_force(&p, &[1]).is_err());
    }

    #[test]
    fn blank_target_rejected() {
        let lp = log_tensor(&Tensor::full(&[3, 2], 0.5));
        assert!(ctc_loss_value(&lp, &[0]).is_err());
        assert!(ctc_loss_value(&lp, &[2]).is_err());
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let p = Tensor::from_rows(&[[0.7, 0.3], [0.2, 0.8]]).unwrap();
        let loss = ctc_loss_value(&log_tensor(&p), &[]).unwrap();
        assert!((loss + (0.7f64 * 0.2).ln()).abs() < 1e-12);
    }

    #[test]
    fn output_distribution_partitions_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = random_probs(4, 3, &mut rng);
            let dist = ctc_output_distribution(&p);
            let total: f64 = dist.values().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (y, prob) in dist {
                let loss = ctc_loss_value(&log_tensor(&p), &y).unwrap();
                assert!((loss + prob.ln()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn oracle_equivalence_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 200 {
            let frames = rng.random_range(1..=4);
            let classes = rng.random_range(2..=3);
            let m = rng.random_range(0..=2);
            let target: Vec<usize> = (0..m).map(|_| rng.random_range(1..classes)).collect();
            if min_frames(&target) > frames {
                continue;
            }
            let p = random_probs(frames, classes, &mut rng);
            let dp = ctc_loss_value(&log_tensor(&p), &target).unwrap();
            let bf = ctc_brute_force(&p, &target).unwrap();
            assert!((dp - bf).abs() < 1e-10, "{target:?}: {dp} vs {bf}");
            checked += 1;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for target in [vec![1, 2], vec![2, 2], vec![1], vec![]] {
            let lp = log_tensor(&random_probs(5, 3, &mut rng));
            let err = grad_check(|g, x| ctc_loss(g, x, &target), &lp, 1e-5).unwrap();
            assert!(err < 1e-4, "{target:?}: {err}");
        }
    }

    #[test]
    fn raising_a_path_symbol_cannot_raise_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_probs(4, 3, &mut rng);
        let base = ctc_loss_value(&log_tensor(&p), &[1]).unwrap();
        // Label 1 appears on every valid path for target [1].
        let mut boosted = log_tensor(&p);
        for t in 0..4 {
            boosted.data_mut()[t * 3 + 1] += 0.3;
        }
        let after = ctc_loss_value(&boosted, &[1]).unwrap();
        assert!(after <= base);
    }

    #[test]
    fn greedy_collapse_rule() {
        let lp = |path: &[usize]| {
            let mut data = vec![-5.0; path.len() * 3];
            for (t, &k) in path.iter().enumerate() {
                data[t * 3 + k] = -0.1;
            }
            Tensor::matrix(path.len(), 3, data).unwrap()
        };
        assert_eq!(ctc_greedy_decode(&lp(&[1, 1, 0, 2])), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&lp(&[0, 0, 0])), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&lp(&[1, 0, 1])), vec![1, 1]);
        // Ties resolve to the lowest index.
        let tie = Tensor::from_rows(&[[0.0, 0.0, -1.0]]).unwrap();
        assert_eq!(ctc_greedy_decode(&tie), Vec::<usize>::new());
    }

    /// Independent statement of the collapse rule: drop blanks from the
    /// run-length encoding.
    fn reference_collapse(path: &[usize]) -> Vec<usize> {
        let mut runs: Vec<usize> = Vec::new();
        for &s in path {
            if runs.last() != Some(&s) {
                runs.push(s);
            }
        }
        runs.into_iter().filter(|&s| s != 0).collect()
    }

    proptest! {
        #[test]
        fn greedy_matches_reference(rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..0.0, 4), 1..12)) {
            let t = Tensor::from_rows(&rows).unwrap();
            let path: Vec<usize> = rows.iter().map(|r| {
                let mut best = 0;
                for k in 1..r.len() { if r[k] > r[best] { best = k; } }
                best
            }).collect();
            prop_assert_eq!(ctc_greedy_decode(&t), reference_collapse(&path));
        }

        #[test]
        fn likelihood_in_unit_interval(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_probs(6, 4, &mut rng);
            let target: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(1..4)).collect();
            let loss = ctc_loss_value(&log_tensor(&p), &target).unwrap();
            let lik = (-loss).exp();
            prop_assert!(lik > 0.0 && lik <= 1.0);
        }
    }
}
