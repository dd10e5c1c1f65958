mod common;

use common::{brute_metrics, random_pair, rng};
use psg_core::metrics::{
    evaluate_dataset, f_beta, metrics_csv, pr_curve_csv, Aggregation, BETA_SQ,
};
use psg_core::morphology::{BinaryMask, SaliencyMap};

#[test]
fn matches_brute_force_per_image_and_pooled() {
    let mut r = rng(99);
    let pairs: Vec<_> = (0..1000).map(|_| random_pair(&mut r, 8)).collect();
    for (p, g) in &pairs {
        let rep = evaluate_dataset(
            std::slice::from_ref(p),
            std::slice::from_ref(g),
            Aggregation::MeanThenF,
        )
        .unwrap();
        let b = brute_metrics(std::slice::from_ref(p), std::slice::from_ref(g));
        assert_eq!(rep.max_f, b.max_f);
        assert!((rep.mae - b.mae).abs() <= 1e-12);
    }
    let (preds, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let rep = evaluate_dataset(&preds, &gts, Aggregation::MeanThenF).unwrap();
    let b = brute_metrics(&preds, &gts);
    assert_eq!(rep.max_f, b.max_f);
    assert!((rep.mae - b.mae).abs() <= 1e-12);
    assert_eq!(
        rep.empty_gt_images,
        gts.iter().filter(|g| g.count() == 0).count()
    );
}

#[test]
fn f_then_mean_averages_per_image_scores() {
    let mut r = rng(5);
    let pairs: Vec<_> = (0..20).map(|_| random_pair(&mut r, 8)).collect();
    let pairs: Vec<_> = pairs.into_iter().filter(|(_, g)| g.count() > 0).collect();
    let (preds, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let rep = evaluate_dataset(&preds, &gts, Aggregation::FThenMean).unwrap();
    let mut best = f64::NEG_INFINITY;
    for t in 0..256 {
        let mut sum = 0.0;
        for (p, g) in preds.iter().zip(&gts) {
            let pt = psg_core::metrics::pr_at(p, g, t).unwrap();
            sum += f_beta(pt.precision, pt.recall);
        }
        best = best.max(sum / preds.len() as f64);
    }
    assert_eq!(rep.max_f, best);
}

#[test]
fn f_beta_spot_values() {
    assert_eq!(BETA_SQ, 0.3);
    for x in [0.0, 0.25, 0.5, 1.0] {
        assert!((f_beta(x, x) - x).abs() < 1e-15, "F({x}, {x})");
    }
    // (1.3 · 1 · 0.5) / (0.3 + 0.5)
    assert!((f_beta(1.0, 0.5) - 0.8125).abs() < 1e-15);
}

#[test]
fn perfect_prediction() {
    let gt = BinaryMask::from_fn(8, 8, |x, y| x > 2 && y < 5);
    let pred = gt.to_saliency();
    let rep = evaluate_dataset(&[pred], &[gt], Aggregation::default()).unwrap();
    assert_eq!(rep.max_f, 1.0);
    assert_eq!(rep.mae, 0.0);
    assert_eq!(metrics_csv("toy", &rep), "dataset,maxF,MAE\ntoy,1.000000,0.000000\n");
}

#[test]
fn curve_csv_shape() {
    let pred = SaliencyMap::filled(4, 4, 0.5);
    let gt = BinaryMask::from_fn(4, 4, |x, _| x < 2);
    let rep = evaluate_dataset(&[pred], &[gt], Aggregation::default()).unwrap();
    let csv = pr_curve_csv(&rep);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 257);
    assert_eq!(lines[0], "threshold,precision,recall");
    assert_eq!(lines[1], "0,0.500000,1.000000");
    assert_eq!(lines[256], "255,0.000000,0.000000");
}

#[test]
fn size_mismatch_rejected() {
    let pred = SaliencyMap::filled(4, 4, 0.5);
    let gt = BinaryMask::zeros(4, 5);
    assert!(evaluate_dataset(&[pred], &[gt], Aggregation::default()).is_err());
}
