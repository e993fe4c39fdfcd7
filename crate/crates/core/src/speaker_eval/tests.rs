use super::*;
use crate::autodiff::Tensor;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn emb(v: &[f64]) -> Embedding {
    Embedding {
        vector: v.to_vec(),
        utterance_id: "u".into(),
        speaker_id: Some("s".into()),
    }
}

// ------------------------------------------------------------------ EER

/// Minimum over all segments between two ROC points of max(FAR, FRR).
fn eer_oracle(gen: &[f64], imp: &[f64]) -> f64 {
    let mut th: Vec<f64> = gen.iter().chain(imp).copied().collect();
    th.sort_by(f64::total_cmp);
    th.dedup();
    th.push(f64::INFINITY);
    let pts: Vec<(f64, f64)> = th
        .iter()
        .map(|&t| {
            (
                imp.iter().filter(|&&s| s >= t).count() as f64 / imp.len() as f64,
                gen.iter().filter(|&&s| s < t).count() as f64 / gen.len() as f64,
            )
        })
        .collect();
    let mut best = f64::INFINITY;
    for p in &pts {
        for q in &pts {
            let (dp, dq) = (p.0 - p.1, q.0 - q.1);
            let v = if dp <= 0.0 && dq >= 0.0 && dp != dq {
                let t = dp / (dp - dq);
                p.0 + t * (q.0 - p.0)
            } else {
                p.0.max(p.1).min(q.0.max(q.1))
            };
            best = best.min(v);
        }
    }
    best
}

#[test]
fn eer_closed_cases() {
    let r = eer(&[0.9, 0.8, 0.2], &[0.7, 0.1, 0.05]).unwrap();
    assert!((r.eer - 1.0 / 6.0).abs() < 1e-12, "{}", r.eer);
    assert_eq!(eer(&[3.0, 4.0], &[1.0, 2.0]).unwrap().eer, 0.0);
    let same = [1.0, 2.0, 3.0, 3.0];
    assert!((eer(&same, &same).unwrap().eer - 0.5).abs() < 1e-12);
    assert!((eer(&[1.0], &[1.0]).unwrap().eer - 0.5).abs() < 1e-12);
    // Inverted scores: the hull bypasses the (1, 1) point.
    assert_eq!(eer(&[0.0], &[1.0]).unwrap().eer, 0.5);
    assert!(eer(&[], &[1.0]).is_err());
    assert!(eer(&[f64::NAN], &[1.0]).is_err());
}

#[test]
fn roc_is_monotone() {
    let r = eer(&[0.3, 0.9, 0.5, 0.5], &[0.1, 0.5, 0.6]).unwrap();
    for w in r.roc.windows(2) {
        assert!(w[0].threshold < w[1].threshold);
        assert!(w[1].far <= w[0].far);
        assert!(w[1].frr >= w[0].frr);
    }
    let last = r.roc.last().unwrap();
    assert_eq!((last.far, last.frr), (0.0, 1.0));
    assert!(r.roc_csv().starts_with("threshold,far,frr\n"));
}

#[test]
fn eer_matches_oracle_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let ng = rng.random_range(1..12);
        let ni = rng.random_range(1..12);
        // Coarse grid on half the cases to exercise ties.
        let coarse = case % 2 == 0;
        let mut draw = |shift: f64| {
            let v: f64 = rng.random_range(-1.0..1.0) + shift;
            if coarse {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        };
        let gen: Vec<f64> = (0..ng).map(|_| draw(0.4)).collect();
        let imp: Vec<f64> = (0..ni).map(|_| draw(0.0)).collect();
        let got = eer(&gen, &imp).unwrap().eer;
        let want = eer_oracle(&gen, &imp);
        assert!((got - want).abs() < 1e-12, "case {case}: {got} vs {want}");
    }
}

proptest! {
    #[test]
    fn eer_invariances(gen in proptest::collection::vec(-3i32..3, 1..10), imp in proptest::collection::vec(-3i32..3, 1..10)) {
        let g: Vec<f64> = gen.iter().map(|&v| v as f64).collect();
        let i: Vec<f64> = imp.iter().map(|&v| v as f64).collect();
        let base = eer(&g, &i).unwrap().eer;
        prop_assert!((0.0..=1.0).contains(&base));
        let f = |v: &f64| (v * 0.7).exp() + 2.0 * v;
        let tg: Vec<f64> = g.iter().map(f).collect();
        let ti: Vec<f64> = i.iter().map(f).collect();
        prop_assert!((eer(&tg, &ti).unwrap().eer - base).abs() < 1e-12);
        let ng: Vec<f64> = i.iter().map(|v| -v).collect();
        let ni: Vec<f64> = g.iter().map(|v| -v).collect();
        prop_assert!((eer(&ng, &ni).unwrap().eer - base).abs() < 1e-12);
    }
}

// ------------------------------------------------------- enroll / cosine

#[test]
fn enrollment_rules() {
    let one = enroll(&[emb(&[3.0, 4.0])]).unwrap();
    assert!((one.vector[0] - 0.6).abs() < 1e-15 && (one.vector[1] - 0.8).abs() < 1e-15);
    assert!(enroll(&[emb(&[1.0, 0.0]), emb(&[-2.0, 0.0])]).is_err());
    assert!(enroll(&[]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set: Vec<Embedding> = (0..5)
        .map(|_| emb(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect();
    let got = enroll(&set).unwrap();
    let mut sum = [0.0; 4];
    for e in &set {
        let n = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (s, x) in sum.iter_mut().zip(&e.vector) {
            *s += x / n;
        }
    }
    let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (a, b) in got.vector.iter().zip(sum) {
        assert!((a - b / n).abs() < 1e-12);
    }
    let unit = got.normalized().unwrap();
    assert!((unit.vector.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
}

#[test]
fn cosine_cases() {
    assert!((cosine_score(&emb(&[1.0, 2.0]), &emb(&[1.0, 2.0])).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_score(&emb(&[1.0, 0.0]), &emb(&[0.0, 5.0])).unwrap(), 0.0);
    assert!(cosine_score(&emb(&[1.0]), &emb(&[1.0, 0.0])).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = dot(&a, &b) / (norm(&a) * norm(&b));
        assert!((cosine_score(&emb(&a), &emb(&b)).unwrap() - want).abs() < 1e-12);
    }
}

// ------------------------------------------------------------------ PLDA

fn sample_two_cov(
    sb: &DMatrix<f64>,
    sw: &DMatrix<f64>,
    mu: &DVector<f64>,
    speakers: usize,
    per: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = mu.len();
    let lb = sb.clone().cholesky().unwrap().l();
    let lw = sw.clone().cholesky().unwrap().l();
    let normal = |rng: &mut ChaCha8Rng| DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let (mut xs, mut ls) = (Vec::new(), Vec::new());
    for s in 0..speakers {
        let b = &lb * normal(rng);
        for _ in 0..per {
            let x = mu + &b + &lw * normal(rng);
            xs.push(x.as_slice().to_vec());
            ls.push(s);
        }
    }
    (xs, ls)
}

fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn plda_recovers_generating_covariances() {
    let sb = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
    let sw = DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.3]);
    let mu = DVector::from_vec(vec![1.0, -2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (x, l) = sample_two_cov(&sb, &sw, &mu, 1000, 2, &mut rng);
    let fit = plda_train(&x, &l, 20).unwrap();
    assert!(rel_frob(&fit.model.between, &sb) < 0.15, "Sb {}", fit.model.between);
    assert!(rel_frob(&fit.model.within, &sw) < 0.15, "Sw {}", fit.model.within);
    for m in [&fit.model.between, &fit.model.within] {
        assert!((m - m.transpose()).norm() < 1e-10);
        assert!(m.symmetric_eigenvalues().iter().all(|&e| e >= -1e-10));
    }
}

#[test]
fn plda_likelihood_is_monotone() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = 3;
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.5..0.5));
        let sb = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        let sw = &c * c.transpose() + DMatrix::identity(d, d) * 0.05;
        let mu = DVector::zeros(d);
        let per = rng.random_range(2..6);
        let (x, l) = sample_two_cov(&sb, &sw, &mu, 30, per, &mut rng);
        let fit = plda_train(&x, &l, 20).unwrap();
        assert_eq!(fit.log_likelihoods.len(), 21);
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn em_from_truth_moves_less_than_from_random_init() {
    let sb = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
    let sw = DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, 0.2]);
    let mu = DVector::from_vec(vec![0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, l) = sample_two_cov(&sb, &sw, &mu, 300, 4, &mut rng);
    let (init, stats) = PldaModel::initial(&x, &l).unwrap();
    let truth = PldaModel {
        mean: init.mean.clone(),
        between: sb,
        within: sw,
    };
    let random = PldaModel {
        mean: init.mean.clone(),
        between: DMatrix::identity(2, 2) * 5.0,
        within: DMatrix::identity(2, 2) * 3.0,
    };
    let moved = |m: &PldaModel| {
        let n = m.em_step(&stats).unwrap();
        (&n.between - &m.between).norm() + (&n.within - &m.within).norm()
    };
    assert!(moved(&truth) < moved(&random));
}

#[test]
fn plda_errors() {
    assert!(plda_train(&[vec![1.0], vec![2.0]], &[0, 0], 3).is_err());
    assert!(plda_train(&[vec![1.0], vec![2.0]], &[0, 1], 3).is_err());
    // Within-speaker variation confined to one axis: rank collapse.
    let x = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 5.0], vec![1.0, 5.0]];
    let err = plda_train(&x, &[0, 0, 1, 1], 3).unwrap_err();
    assert!(err.to_string().contains("reduce the embedding dimension"), "{err}");
}

fn gauss1(x: f64, var: f64) -> f64 {
    (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

#[test]
fn plda_score_matches_quadrature_in_one_dimension() {
    let (vb, vw, mu) = (1.3, 0.4, 0.2);
    let m = PldaModel {
        mean: DVector::from_vec(vec![mu]),
        between: DMatrix::from_element(1, 1, vb),
        within: DMatrix::from_element(1, 1, vw),
    };
    for &(a, b) in &[(0.5, 0.7), (-1.0, 2.0), (0.2, 0.2), (3.0, -2.5)] {
        let (ca, cb) = (a - mu, b - mu);
        let (lo, hi, n) = (-20.0, 20.0, 400_000);
        let h = (hi - lo) / n as f64;
        let mut num = 0.0;
        for k in 0..=n {
            let y = lo + k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            num += w * gauss1(y, vb) * gauss1(ca - y, vw) * gauss1(cb - y, vw);
        }
        num *= h;
        let want = num.ln() - gauss1(ca, vb + vw).ln() - gauss1(cb, vb + vw).ln();
        let got = m.score(&[a], &[b]).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn plda_score_symmetry_and_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let m = PldaModel {
        mean: DVector::from_vec(vec![0.1, 0.2, 0.3]),
        between: &a * a.transpose() + DMatrix::identity(3, 3),
        within: DMatrix::identity(3, 3) * 0.01,
    };
    for _ in 0..10 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        assert!((m.score(&x, &y).unwrap() - m.score(&y, &x).unwrap()).abs() < 1e-9);
        assert!(m.score(&x, &x).unwrap() > 0.0);
    }
    assert!(m.score(&[1.0], &[1.0, 2.0, 3.0]).is_err());
}

// ----------------------------------------------------- accuracy / silhouette

#[test]
fn accuracy_cases() {
    assert_eq!(closed_set_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
    assert_eq!(closed_set_accuracy(&[0, 2], &[1, 2]).unwrap(), 50.0);
    assert!(closed_set_accuracy(&[1], &[]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = 8;
    let n = 20_000;
    let d: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let acc = closed_set_accuracy(&d, &l).unwrap();
    assert!((acc - 100.0 / k as f64).abs() < 1.0, "{acc}");
}

fn silhouette_oracle(x: &[Vec<f64>], l: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| 1.0 - dot(a, b) / (norm(a) * norm(b));
    let mut total = 0.0;
    for i in 0..x.len() {
        let own: Vec<usize> = (0..x.len()).filter(|&j| j != i && l[j] == l[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(&x[i], &x[j])).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        let mut others: Vec<usize> = l.iter().copied().filter(|&c| c != l[i]).collect();
        others.sort();
        others.dedup();
        for c in others {
            let m: Vec<usize> = (0..x.len()).filter(|&j| l[j] == c).collect();
            b = b.min(m.iter().map(|&j| dist(&x[i], &x[j])).sum::<f64>() / m.len() as f64);
        }
        total += (b - a) / a.max(b);
    }
    total / x.len() as f64
}

#[test]
fn silhouette_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x: Vec<Vec<f64>> = (0..9).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let l = [0, 0, 1, 1, 1, 2, 0, 1, 3];
    assert!((silhouette(&x, &l).unwrap() - silhouette_oracle(&x, &l)).abs() < 1e-12);

    let tight: Vec<Vec<f64>> = (0..20)
        .map(|i| {
            let e = rng.random_range(-1e-3..1e-3);
            if i < 10 {
                vec![1.0, e]
            } else {
                vec![e, 1.0]
            }
        })
        .collect();
    let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
    assert!(silhouette(&tight, &labels).unwrap() > 0.99);

    let cloud: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let c = if i % 2 == 0 { 1.0 } else { -1.0 };
            vec![c + rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0]
        })
        .collect();
    let random_labels: Vec<usize> = (0..400).map(|_| rng.random_range(0..2)).collect();
    let s = silhouette(&cloud, &random_labels).unwrap();
    assert!(s.abs() < 0.05, "{s}");
    assert!(silhouette(&x, &[0; 9]).is_err());
    assert!(silhouette(&x[..2], &[0, 1]).is_err());
}

// ---------------------------------------------------------- attacker net

fn separable_speakers(k: usize, per: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let (mut xs, mut ls) = (Vec::new(), Vec::new());
    for (s, c) in centers.iter().enumerate() {
        for _ in 0..per {
            let t = rng.random_range(5..12);
            let data = (0..t * 4).map(|i| c[i % 4] + 0.3 * rng.random_range(-1.0..1.0)).collect();
            xs.push(Tensor::new(vec![t, 4], data).unwrap());
            ls.push(s);
        }
    }
    (xs, ls)
}

fn small_cfg() -> EmbeddingConfig {
    EmbeddingConfig {
        frame_dims: vec![16],
        embed_dim: 6,
        epochs: 25,
        ..EmbeddingConfig::default()
    }
}

#[test]
fn attacker_learns_separable_speakers() {
    let (xs, ls) = separable_speakers(4, 10, 1);
    let ext = train_embedding_net(&xs, &ls, &small_cfg(), 2).unwrap();
    let decisions: Vec<usize> = xs.iter().map(|x| ext.classify(x).unwrap()).collect();
    assert!(closed_set_accuracy(&decisions, &ls).unwrap() > 95.0);
    let e = ext.extract(&xs[0], "u0", Some("s0")).unwrap();
    assert_eq!(e.dim(), 6);

    let again = train_embedding_net(&xs, &ls, &small_cfg(), 2).unwrap();
    assert_eq!(again.extract(&xs[3], "u", None).unwrap(), ext.extract(&xs[3], "u", None).unwrap());
}

#[test]
fn attacker_rejects_bad_inputs() {
    let (xs, _) = separable_speakers(2, 2, 1);
    assert!(train_embedding_net(&xs, &[0, 0, 0, 0], &small_cfg(), 0).is_err());
    let (xs, ls) = separable_speakers(2, 3, 1);
    let cfg = EmbeddingConfig { epochs: 1, ..small_cfg() };
    let ext = train_embedding_net(&xs, &ls, &cfg, 0).unwrap();
    assert!(ext.extract(&Tensor::zeros(&[0, 4]), "e", None).is_err());
    assert!(ext.extract(&Tensor::zeros(&[3, 5]), "e", None).is_err());
}

#[test]
fn embedding_of_constant_input_and_padding() {
    let (xs, ls) = separable_speakers(3, 3, 4);
    let cfg = EmbeddingConfig { epochs: 2, ..small_cfg() };
    let ext = train_embedding_net(&xs, &ls, &cfg, 0).unwrap();

    // Constant input: pooled mean is the per-frame output, std is sqrt(1e-8).
    let row = [0.5, -1.0, 2.0, 0.0];
    let x = Tensor::new(vec![5, 4], row.iter().cycle().take(20).copied().collect()).unwrap();
    let got = ext.extract(&x, "c", None).unwrap().vector;
    let one = Tensor::new(vec![1, 4], row.to_vec()).unwrap();
    let z = ext.standardize(&one).unwrap();
    let w = ext.params.get("xvec.frame0.w").unwrap();
    let b = ext.params.get("xvec.frame0.b").unwrap();
    let h: Vec<f64> = (0..16)
        .map(|j| (b.data()[j] + (0..4).map(|i| z.data()[i] * w.at(i, j)).sum::<f64>()).max(0.0))
        .collect();
    let pooled: Vec<f64> = h.iter().copied().chain(std::iter::repeat_n(1e-4, 16)).collect();
    let we = ext.params.get("xvec.embed.w").unwrap();
    let be = ext.params.get("xvec.embed.b").unwrap();
    for k in 0..6 {
        let want = be.data()[k] + (0..32).map(|i| pooled[i] * we.at(i, k)).sum::<f64>();
        assert!((got[k] - want).abs() < 1e-9);
    }

    // Padding frames that are masked out leave the embedding unchanged.
    let base = ext.embed_masked(&xs[0], &vec![true; xs[0].rows()]).unwrap();
    let t = xs[0].rows();
    let mut padded = xs[0].data().to_vec();
    padded.extend(std::iter::repeat_n(7.0, 3 * 4));
    let padded = Tensor::new(vec![t + 3, 4], padded).unwrap();
    let mut valid = vec![true; t];
    valid.extend([false; 3]);
    let p = ext.embed_masked(&padded, &valid).unwrap();
    for (a, b) in base.iter().zip(&p) {
        assert!((a - b).abs() <= 1e-9);
    }
}

// ----------------------------------------------------------------- files

#[test]
fn embedding_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.bin");
    let rows = vec![vec![1.0, 2.0], vec![-0.5, 3.25]];
    write_embedding_file(&p, &rows).unwrap();
    assert_eq!(read_embedding_file(&p).unwrap(), rows);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&p, &bytes).unwrap();
    assert!(read_embedding_file(&p).is_err());
}

#[test]
fn trial_scoring_and_csv() {
    use crate::data::{Trial, TrialSet};
    let mut embs = BTreeMap::new();
    for (id, v) in [("a1", [1.0, 0.0]), ("a2", [0.9, 0.1]), ("b1", [0.0, 1.0]), ("b2", [0.1, 0.9])] {
        embs.insert(id.to_string(), emb(&v));
    }
    let trials = TrialSet {
        enrollment: BTreeMap::from([("A".to_string(), vec!["a1".to_string()]), ("B".to_string(), vec!["b1".to_string()])]),
        test_utterances: vec!["a2".into(), "b2".into()],
        trials: vec![
            Trial { speaker_id: "A".into(), utterance_id: "a2".into(), genuine: true },
            Trial { speaker_id: "A".into(), utterance_id: "b2".into(), genuine: false },
            Trial { speaker_id: "B".into(), utterance_id: "a2".into(), genuine: false },
            Trial { speaker_id: "B".into(), utterance_id: "b2".into(), genuine: true },
        ],
    };
    let scored = score_trials(&trials, &embs, &ScoringBackend::Cosine).unwrap();
    assert_eq!(eer_of(&scored).unwrap().eer, 0.0);
    let csv = score_csv(&scored).unwrap();
    assert!(csv.starts_with("enroll_id,test_utt_id,score,is_genuine\nA,a2,"));
    assert_eq!(csv.lines().count(), 5);
}
