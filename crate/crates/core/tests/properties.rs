use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use wildattr::feature_store::{self, read_feature_file, split_labeled, write_feature_file, HEADER_LEN};
use wildattr::linear_probe::{self, sigmoid, Batch, PROB_EPS};
use wildattr::metrics::{auroc, average_precision};
use wildattr::{FeatureRecord, Label, ProbeModel, Role, ScoredSample, SplitSpec};

fn label(b: bool) -> Label {
    if b {
        Label::NonTarget
    } else {
        Label::Target
    }
}

fn records(d: usize, n: usize, salt: u32) -> Vec<FeatureRecord> {
    (0..n)
        .map(|i| {
            let features = (0..d).map(|j| ((i * 31 + j * 7) as f32 + salt as f32 * 0.25).sin() * 3.0).collect();
            let role = [Role::Labeled, Role::Wild, Role::Test][i % 3];
            let lbl = if role == Role::Wild { None } else { Some(label(i % 2 == 0)) };
            FeatureRecord::new(features, format!("src{}", i % 4), role, lbl)
        })
        .collect()
}

#[test]
fn afv_round_trip_dimensions_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    for d in [1, 16, 768] {
        for n in [0, 1, 1000] {
            let recs = records(d, n, (d + n) as u32);
            let path = dir.path().join(format!("r{d}_{n}.afv"));
            let manifest = write_feature_file(&recs, d, &path).unwrap();
            let back = read_feature_file(&manifest).unwrap();
            assert_eq!(back.len(), n);
            for (i, (a, b)) in recs.iter().zip(&back).enumerate() {
                assert_eq!(b.row_index, i);
                assert_eq!((&a.source, a.role, a.label), (&b.source, b.role, b.label));
                assert!(a.features.iter().zip(&b.features).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            let bytes = std::fs::read(&path).unwrap();
            assert_eq!(bytes.len(), HEADER_LEN + 4 * d * n);
        }
    }
}

#[test]
fn checksum_stable_across_writes() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records(16, 50, 1);
    let a = write_feature_file(&recs, 16, &dir.path().join("a.afv")).unwrap();
    let b = write_feature_file(&recs, 16, &dir.path().join("b.afv")).unwrap();
    assert_eq!(a.checksum, b.checksum);
    assert_eq!(std::fs::read(dir.path().join("a.afv")).unwrap(), std::fs::read(dir.path().join("b.afv")).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_random_values(
        d in 1usize..24,
        rows in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 24), 0..40),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<FeatureRecord> = rows
            .iter()
            .map(|r| FeatureRecord::new(r[..d].to_vec(), "s", Role::Test, Some(Label::Target)))
            .collect();
        let m = write_feature_file(&recs, d, &dir.path().join("x.afv")).unwrap();
        let back = read_feature_file(&m).unwrap();
        prop_assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            prop_assert_eq!(&a.features, &b.features);
        }
    }

    /// Any single-byte change anywhere in the file is rejected.
    #[test]
    fn single_byte_corruption_detected(pos in 0usize..(HEADER_LEN + 4 * 8 * 5), flip in 1u8..=255) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.afv");
        let m = write_feature_file(&records(8, 5, 2), 8, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[pos] ^= flip;
        std::fs::write(&path, &bytes).unwrap();
        prop_assert!(read_feature_file(&m).is_err());
    }

    #[test]
    fn truncation_detected(cut in 1usize..(HEADER_LEN + 4 * 4 * 3)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.afv");
        let m = write_feature_file(&records(4, 3, 3), 4, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - cut]).unwrap();
        let err = read_feature_file(&m).unwrap_err();
        prop_assert_eq!(err.code(), "truncated");
    }

    /// The split only sees labels: it is a partition, respects per-class
    /// quotas, and is the same for any feature values attached to the rows.
    #[test]
    fn split_partition_depends_only_on_labels(
        flags in prop::collection::vec(any::<bool>(), 4..120),
        fraction in 0.05f64..0.6,
        seed in any::<u64>(),
    ) {
        let labels: Vec<Label> = flags.iter().map(|&b| label(b)).collect();
        let spec = SplitSpec { validation_fraction: fraction, seed };
        let split = match split_labeled(&labels, &spec) {
            Ok(split) => split,
            Err(e) => {
                // Small classes may be impossible to stratify; nothing else fails.
                prop_assert_eq!(e.code(), "cannot-stratify");
                return Ok(());
            }
        };
        let mut all: Vec<usize> = split.train.iter().chain(&split.validation).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..flags.len()).collect::<Vec<_>>());
        for class in [Label::Target, Label::NonTarget] {
            let v = split.validation.iter().filter(|&&i| labels[i] == class).count();
            let t = split.train.iter().filter(|&&i| labels[i] == class).count();
            prop_assert!(v >= 1 && t >= 1);
        }
        prop_assert_eq!(split.validation.len(), (fraction * flags.len() as f64).round() as usize);
        let again = split_labeled(&labels, &spec).unwrap();
        prop_assert_eq!(&again, &split);
        // Datasets with the same labels but different features split the same way.
        let build = |scale: f32| -> wildattr::Dataset {
            let recs = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| FeatureRecord::new(vec![i as f32 * scale], "s", Role::Labeled, Some(l)))
                .collect();
            wildattr::Dataset::new(1, recs).unwrap()
        };
        let a = split_labeled(&build(1.0).labels().unwrap(), &spec).unwrap();
        let b = split_labeled(&build(-7.5).labels().unwrap(), &spec).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn predict_monotone_in_logit(a in -40.0f64..40.0, b in -40.0f64..40.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(sigmoid(lo) <= sigmoid(hi));
        prop_assert!(sigmoid(a) > 0.0 && sigmoid(a) < 1.0);
    }

    #[test]
    fn scaling_moves_away_from_half(
        w in prop::collection::vec(-3.0f64..3.0, 4),
        bias in -3.0f64..3.0,
        x in prop::collection::vec(-3.0f32..3.0, 4),
        c in 1.0001f64..20.0,
    ) {
        let mut m = ProbeModel::zeros(4, 0);
        m.weights = w;
        m.bias = bias;
        let p = m.predict(&x).unwrap();
        m.weights.iter_mut().for_each(|v| *v *= c);
        m.bias *= c;
        let q = m.predict(&x).unwrap();
        prop_assert!((q - 0.5).abs() >= (p - 0.5).abs());
        prop_assert!((p - 0.5) * (q - 0.5) >= 0.0);
    }

    #[test]
    fn bce_bounded(p in -1.0f64..2.0, y in any::<bool>()) {
        let l = linear_probe::bce_loss(p, label(y));
        // 1 - (1 - eps) rounds to slightly under eps.
        prop_assert!(l <= -PROB_EPS.ln() + 1e-9);
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn loss_permutation_invariant(
        rows in prop::collection::vec((prop::collection::vec(-2.0f32..2.0, 5), any::<bool>()), 1..30),
        w in prop::collection::vec(-2.0f64..2.0, 5),
        rot in 0usize..30,
    ) {
        let mut m = ProbeModel::zeros(5, 0);
        m.weights = w;
        let mut batch = Batch::new(5);
        for (x, y) in &rows {
            batch.push(x, label(*y)).unwrap();
        }
        let mut permuted = Batch::new(5);
        let k = rot % rows.len();
        for (x, y) in rows[k..].iter().chain(&rows[..k]).rev() {
            permuted.push(x, label(*y)).unwrap();
        }
        let a = linear_probe::mean_loss_and_gradient(&m, &batch).unwrap();
        let b = linear_probe::mean_loss_and_gradient(&m, &permuted).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss.max(1.0));
        for (g, h) in a.grad_w.iter().zip(&b.grad_w) {
            prop_assert!((g - h).abs() <= 1e-12);
        }
    }
}

/// Brute-force pairwise AUROC with half credit for ties.
fn auroc_oracle(pos: &[f64], neg: &[f64]) -> f64 {
    let mut credit = 0.0;
    for &p in pos {
        for &n in neg {
            credit += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

/// Step-sum over every distinct threshold: sum of (recall gain) x precision.
fn ap_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = scores.iter().zip(positive).filter(|(&s, &p)| p && s >= t).count() as f64;
        let all = scores.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / all);
        prev_recall = recall;
    }
    ap
}

fn scored(scores: &[f64], positive: &[bool]) -> Vec<ScoredSample> {
    scores
        .iter()
        .zip(positive)
        .map(|(&s, &p)| ScoredSample {
            score: s,
            truth: if p { Label::Target } else { Label::NonTarget },
            source: String::new(),
        })
        .collect()
}

fn split_scores(scores: &[f64], positive: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    (pos, neg)
}

/// Scores drawn from a small grid so ties are common.
fn metric_input() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..200)
        .prop_flat_map(|n| {
            (prop::collection::vec((0u8..12).prop_map(|k| k as f64 / 11.0), n), prop::collection::vec(any::<bool>(), n))
        })
        .prop_filter("both classes present", |(_, p)| p.iter().any(|&x| x) && p.iter().any(|&x| !x))
}

fn close(a: f64, b: f64) -> Result<(), TestCaseError> {
    prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_oracles((scores, positive) in metric_input()) {
        let (pos, neg) = split_scores(&scores, &positive);
        close(auroc(&pos, &neg).unwrap(), auroc_oracle(&pos, &neg))?;
        close(average_precision(&scored(&scores, &positive), Label::Target).unwrap(), ap_oracle(&scores, &positive))?;
    }

    #[test]
    fn auroc_monotone_transform_and_symmetry((scores, positive) in metric_input(), k in 0.1f64..5.0) {
        let (pos, neg) = split_scores(&scores, &positive);
        let t = |v: &Vec<f64>| v.iter().map(|s| (k * s).exp() - 3.0).collect::<Vec<_>>();
        let a = auroc(&pos, &neg).unwrap();
        close(a, auroc(&t(&pos), &t(&neg)).unwrap())?;
        close(a + auroc(&neg, &pos).unwrap(), 1.0)?;
    }

    /// AP lies between the worst possible ranking's value and 1; it is 1
    /// exactly when every positive outranks every negative.
    #[test]
    fn ap_bounds((scores, positive) in metric_input()) {
        let ap = average_precision(&scored(&scores, &positive), Label::Target).unwrap();
        let p = positive.iter().filter(|&&x| x).count();
        let n = positive.len() - p;
        let worst = (1..=p).map(|k| k as f64 / (n + k) as f64).sum::<f64>() / p as f64;
        prop_assert!(ap >= worst - 1e-12 && ap <= 1.0 + 1e-12);
        let (pos, neg) = split_scores(&scores, &positive);
        let perfect = pos.iter().fold(f64::INFINITY, |m, &v| m.min(v)) > neg.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        prop_assert_eq!(perfect, (ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_order_free((scores, positive) in metric_input(), rot in 0usize..200) {
        let k = rot % scores.len();
        let rs: Vec<f64> = scores[k..].iter().chain(&scores[..k]).copied().collect();
        let rp: Vec<bool> = positive[k..].iter().chain(&positive[..k]).copied().collect();
        let a = average_precision(&scored(&scores, &positive), Label::Target).unwrap();
        let b = average_precision(&scored(&rs, &rp), Label::Target).unwrap();
        close(a, b)?;
    }
}

#[test]
fn ap_can_fall_below_prevalence() {
    // Positives ranked last: AP = (1/3 + 2/4) / 2 = 5/12, prevalence 1/2.
    let ap = average_precision(&scored(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Label::Target).unwrap();
    assert!((ap - 5.0 / 12.0).abs() < 1e-15);
}

#[test]
fn oracles_agree_with_hand_values() {
    assert_eq!(auroc_oracle(&[0.8, 0.3], &[0.6, 0.1]), 0.75);
    assert!((ap_oracle(&[0.9, 0.8, 0.7, 0.6], &[true, true, false, true]) - 11.0 / 12.0).abs() < 1e-15);
    assert_eq!(ap_oracle(&[0.5; 5], &[true, false, false, true, false]), 0.4);
}

/// Relative gradient error with a floor on the denominator, so components
/// whose true value is near zero are judged on absolute error instead.
pub const GRAD_FLOOR: f64 = 1e-3;

fn gradient_error(m: &ProbeModel, batch: &Batch) -> f64 {
    let h = 1e-4;
    let g = linear_probe::mean_loss_and_gradient(m, batch).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..=m.dimension() {
        let eval = |delta: f64| {
            let mut p = m.clone();
            if j < m.dimension() {
                p.weights[j] += delta;
            } else {
                p.bias += delta;
            }
            linear_probe::mean_loss(&p, batch).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = if j < m.dimension() { g.grad_w[j] } else { g.grad_b };
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR));
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_finite_differences(
        w in prop::collection::vec(-1.0f64..1.0, 16),
        bias in -1.0f64..1.0,
        rows in prop::collection::vec((prop::collection::vec(-2.0f32..2.0, 16), any::<bool>()), 1..64),
    ) {
        let mut m = ProbeModel::zeros(16, 0);
        m.weights = w;
        m.bias = bias;
        let mut batch = Batch::new(16);
        for (x, y) in &rows {
            batch.push(x, label(*y)).unwrap();
        }
        let err = gradient_error(&m, &batch);
        prop_assert!(err < 1e-4, "relative error {}", err);
    }
}

#[test]
fn store_dataset_helpers_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = wildattr::Dataset::new(16, records(16, 30, 9)).unwrap();
    let (_, path) = feature_store::write_dataset(&ds, dir.path(), "d").unwrap();
    assert_eq!(feature_store::load_dataset(&path).unwrap(), ds);
}
