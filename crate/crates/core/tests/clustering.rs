mod common;

use common::{permutations, reference_ahc, rng, symmetric as sym};
use diarkit::clustering::{ahc, calibrate_threshold, default_grid, ScoredConversation, StopRule};
use diarkit::der::{DerOptions, Timeline};
use diarkit::features::Segment;
use diarkit::Error;
use nalgebra::DMatrix;
use rand::Rng;

#[test]
fn oracle_counts_at_the_extremes() {
    let s = sym(5, |i, j| (i * 7 + j * 3) as f64 % 5.0 - 2.0);
    assert_eq!(
        ahc(&s, StopRule::OracleK(5)).unwrap().labels,
        [0, 1, 2, 3, 4]
    );
    assert_eq!(ahc(&s, StopRule::OracleK(1)).unwrap().labels, [0; 5]);
    assert!(matches!(
        ahc(&s, StopRule::OracleK(6)),
        Err(Error::InvalidInput(_))
    ));
    assert!(ahc(&s, StopRule::OracleK(0)).is_err());
    assert_eq!(
        ahc(&DMatrix::zeros(1, 1), StopRule::Threshold(5.0))
            .unwrap()
            .labels,
        [0]
    );
}

#[test]
fn hand_traced_threshold_run() {
    let mut s = DMatrix::zeros(3, 3);
    for &(i, j, v) in &[(0, 1, 5.0), (0, 2, -4.0), (1, 2, -6.0)] {
        s[(i, j)] = v;
        s[(j, i)] = v;
    }
    let p = ahc(&s, StopRule::Threshold(0.0)).unwrap();
    assert_eq!(p.labels, [0, 0, 1]);
    assert_eq!(p.merges, [5.0]);
    let all = ahc(&s, StopRule::OracleK(1)).unwrap();
    assert_eq!(all.merges, [5.0, -5.0]);
}

#[test]
fn matches_exhaustive_greedy_reference() {
    let mut r = rng(1);
    for case in 0..200 {
        let n = r.random_range(1..=6);
        // half the cases use small integers so that exact ties occur
        let s = if case % 2 == 0 {
            let v: Vec<f64> = (0..n * n).map(|_| r.random_range(-3..=3) as f64).collect();
            sym(n, |i, j| v[i * n + j])
        } else {
            let v: Vec<f64> = (0..n * n).map(|_| r.random_range(-5.0..5.0)).collect();
            sym(n, |i, j| v[i * n + j])
        };
        let t = r.random_range(-3.0..3.0);
        assert_eq!(
            ahc(&s, StopRule::Threshold(t)).unwrap().labels,
            reference_ahc(&s, StopRule::Threshold(t)),
            "{s}"
        );
        let k = r.random_range(1..=n);
        assert_eq!(
            ahc(&s, StopRule::OracleK(k)).unwrap().labels,
            reference_ahc(&s, StopRule::OracleK(k)),
            "{s}"
        );
    }
}

#[test]
fn shifting_scores_and_threshold_together() {
    let mut r = rng(2);
    for _ in 0..50 {
        let n = r.random_range(2..=8);
        let v: Vec<f64> = (0..n * n).map(|_| r.random_range(-4..=4) as f64).collect();
        let s = sym(n, |i, j| v[i * n + j]);
        let t = r.random_range(-2..=2) as f64 + 0.5;
        let shifted = s.map(|x| x + 16.0);
        assert_eq!(
            ahc(&s, StopRule::Threshold(t)).unwrap().labels,
            ahc(&shifted, StopRule::Threshold(t + 16.0)).unwrap().labels
        );
    }
}

#[test]
fn segment_order_does_not_matter() {
    let mut r = rng(3);
    for _ in 0..40 {
        let n = r.random_range(2..=6);
        let v: Vec<f64> = (0..n * n).map(|_| r.random_range(-5.0..5.0)).collect();
        let s = sym(n, |i, j| v[i * n + j]);
        let base = ahc(&s, StopRule::Threshold(0.0)).unwrap().labels;
        let perms = permutations(n);
        let p = &perms[r.random_range(0..perms.len())];
        let permuted = DMatrix::from_fn(n, n, |i, j| s[(p[i], p[j])]);
        let got = ahc(&permuted, StopRule::Threshold(0.0)).unwrap().labels;
        // same grouping of original indices
        for a in 0..n {
            for b in 0..n {
                let same_perm = got[a] == got[b];
                assert_eq!(same_perm, base[p[a]] == base[p[b]]);
            }
        }
    }
}

#[test]
fn recorded_merges_clear_the_threshold() {
    let mut r = rng(4);
    for _ in 0..50 {
        let n = r.random_range(2..=12);
        let v: Vec<f64> = (0..n * n).map(|_| r.random_range(-5.0..5.0)).collect();
        let s = sym(n, |i, j| v[i * n + j]);
        let t = r.random_range(-2.0..2.0);
        let p = ahc(&s, StopRule::Threshold(t)).unwrap();
        assert!(p.merges.iter().all(|&m| m >= t));
        assert_eq!(p.num_clusters() + p.merges.len(), n);
    }
}

#[test]
fn non_finite_scores_are_rejected() {
    let mut s = DMatrix::zeros(3, 3);
    s[(0, 2)] = f64::NAN;
    assert!(ahc(&s, StopRule::OracleK(1)).is_err());
    assert!(ahc(&DMatrix::zeros(2, 3), StopRule::OracleK(1)).is_err());
}

/// Back-to-back 1.5 s segments; speakers alternate every two segments.
fn separable(id: &str, segments: usize) -> (ScoredConversation, Timeline) {
    let segs: Vec<Segment> = (0..segments)
        .map(|i| Segment {
            conversation_id: id.into(),
            start_s: 1.5 * i as f64,
            end_s: 1.5 * (i + 1) as f64,
            frame_range: 0..0,
        })
        .collect();
    let who = |i: usize| (i / 2) % 2;
    let scores = sym(segments, |i, j| if who(i) == who(j) { 10.0 } else { -10.0 });
    let mut reference = Timeline::new();
    for (i, s) in segs.iter().enumerate() {
        reference
            .push(id, s.start_s, s.end_s, &format!("S{}", who(i)))
            .unwrap();
    }
    (
        ScoredConversation::new(id, segs, scores).unwrap(),
        reference,
    )
}

#[test]
fn separable_scores_calibrate_to_zero_error() {
    let mut convs = Vec::new();
    let mut reference = Timeline::new();
    for k in 0..4 {
        let (c, r) = separable(&format!("conv{k}"), 8 + k);
        convs.push(c);
        reference.turns.extend(r.turns);
    }
    let grid: Vec<f64> = (-12..=12).map(|v| v as f64).collect();
    let rep =
        calibrate_threshold(&convs, &reference, &[], 2, &grid, DerOptions::default()).unwrap();
    assert_eq!(rep.cv_der, 0.0);
    for f in &rep.folds {
        assert!(f.threshold > -10.0 && f.threshold < 10.0);
        assert_eq!((f.dev_der, f.eval_der), (0.0, 0.0));
    }
    // ties go to the lowest threshold that reaches the minimum
    assert_eq!(rep.folds[0].threshold, -9.0);
    assert_eq!(rep.folds[0].eval_ids, ["conv0", "conv2"]);
    assert_eq!(rep.folds[1].eval_ids, ["conv1", "conv3"]);
    let text = rep.to_string();
    assert!(text.starts_with("fold threshold dev_der eval_der\n0 "));
}

#[test]
fn calibration_edge_cases() {
    let (a, ra) = separable("a", 8);
    let (b, rb) = separable("b", 8);
    let mut reference = ra.clone();
    reference.turns.extend(rb.turns);
    let convs = [a.clone(), b.clone()];
    let one =
        calibrate_threshold(&convs, &reference, &[], 2, &[3.5], DerOptions::default()).unwrap();
    assert!(one.folds.iter().all(|f| f.threshold == 3.5));
    let grid = default_grid(&convs, 41).unwrap();
    assert_eq!(grid.len(), 41);
    let both =
        calibrate_threshold(&convs, &reference, &[], 2, &grid, DerOptions::default()).unwrap();
    assert_eq!(both.folds[0].threshold, both.folds[1].threshold);
    assert!(calibrate_threshold(&convs, &reference, &[], 2, &[], DerOptions::default()).is_err());
    assert!(calibrate_threshold(&convs[..1], &ra, &[], 2, &grid, DerOptions::default()).is_err());
    assert!(calibrate_threshold(&convs, &ra, &[], 2, &grid, DerOptions::default()).is_err());
}

#[test]
fn default_grid_spans_two_deviations() {
    let (c, _) = separable("x", 4);
    // off-diagonal scores: +10 twice, -10 four times
    let g = default_grid(&[c], 5).unwrap();
    let mean = (20.0 - 40.0) / 6.0;
    let sd = ((2.0 * (10.0f64 - mean).powi(2) + 4.0 * (-10.0f64 - mean).powi(2)) / 6.0).sqrt();
    let want = [mean - 2.0 * sd, mean - sd, mean, mean + sd, mean + 2.0 * sd];
    for (g, w) in g.iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
}
