mod common;

use common::randn;
use eegx::probe::*;
use eegx::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn separable_classes_score_perfectly() {
    let x: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 } + 0.01 * i as f64, 0.3]).collect();
    let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let r = probe(&x, &y, &x, &y, &ProbeConfig::default()).unwrap();
    assert_eq!(r.balanced_accuracy, 1.0);
    assert_eq!(r.auroc, Some(1.0));
    assert_eq!(r.weighted_f1, 1.0);
}

#[test]
fn balanced_accuracy_is_mean_recall() {
    let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
    let preds = [0, 0, 0, 0, 1, 1, 1, 1, 0, 0];
    let r = metrics(&labels, &preds, None, 2);
    assert_eq!(r.recalls, vec![0.8, 0.6]);
    assert!((r.balanced_accuracy - 0.7).abs() < 1e-15);
    assert_eq!(r.confusion, vec![vec![4, 1], vec![2, 3]]);
}

#[test]
fn weighted_f1_is_support_weighted() {
    let labels = [0, 0, 0, 1, 1, 2, 2, 2, 2, 2];
    let preds = [0, 1, 0, 1, 2, 2, 2, 0, 2, 1];
    let r = metrics(&labels, &preds, None, 3);
    let mut want = 0.0;
    let mut recall_sum = 0.0;
    for c in 0..3 {
        let tp = labels.iter().zip(&preds).filter(|(l, p)| **l == c && **p == c).count() as f64;
        let pred_c = preds.iter().filter(|&&p| p == c).count() as f64;
        let sup = labels.iter().filter(|&&l| l == c).count() as f64;
        let (prec, rec) = (tp / pred_c, tp / sup);
        want += sup * 2.0 * prec * rec / (prec + rec);
        recall_sum += rec;
    }
    assert!((r.weighted_f1 - want / 10.0).abs() < 1e-15);
    assert!((r.balanced_accuracy - recall_sum / 3.0).abs() < 1e-15);
}

#[test]
fn auroc_counts_ties_as_half() {
    assert_eq!(auroc(&[0, 1], &[0.5, 0.5]), Some(0.5));
    assert_eq!(auroc(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]), Some(0.75));
    assert_eq!(auroc(&[1, 1], &[0.1, 0.2]), None);
}

#[test]
fn random_labels_give_chance() {
    let mut total = 0.0;
    for trial in 0..20u64 {
        let x = randn(&[400, 6], trial);
        let rows: Vec<Vec<f64>> = (0..400).map(|i| x.row(i).to_vec()).collect();
        let mut y: Vec<usize> = (0..400).map(|i| i % 2).collect();
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(trial + 50));
        let r = probe(&rows[..200], &y[..200], &rows[200..], &y[200..], &ProbeConfig::default()).unwrap();
        assert!((0.0..=1.0).contains(&r.balanced_accuracy));
        total += r.balanced_accuracy;
    }
    let mean = total / 20.0;
    assert!((mean - 0.5).abs() <= 0.05, "{}", mean);
}

#[test]
fn single_class_training_set_fails() {
    let x = vec![vec![1.0], vec![2.0]];
    assert!(matches!(probe(&x, &[1, 1], &x, &[0, 1], &ProbeConfig::default()), Err(Error::Validation(_))));
    assert!(probe(&x, &[0, 1], &[vec![1.0, 2.0]], &[0], &ProbeConfig::default()).is_err());
}

#[test]
fn multiclass_probe() {
    let centers = [[0.0, 3.0], [3.0, 0.0], [-3.0, -3.0]];
    let noise = randn(&[150, 2], 9);
    let x: Vec<Vec<f64>> = (0..150).map(|i| vec![centers[i % 3][0] + noise.row(i)[0], centers[i % 3][1] + noise.row(i)[1]]).collect();
    let y: Vec<usize> = (0..150).map(|i| i % 3).collect();
    let r = probe(&x[..100], &y[..100], &x[100..], &y[100..], &ProbeConfig::default()).unwrap();
    assert!(r.auroc.is_none());
    assert!(r.balanced_accuracy > 0.9);
    assert_eq!(r.recalls.len(), 3);
}
