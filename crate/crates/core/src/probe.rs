//! Linear probe on frozen representations and classification metrics.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub balanced_accuracy: f64,
    /// Binary tasks only.
    pub auroc: Option<f64>,
    pub weighted_f1: f64,
    pub recalls: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once every gradient entry is below this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            l2: 1e-3,
            max_iters: 3000,
            tol: 1e-6,
        }
    }
}

/// Multinomial logistic regression on z-scored features.
#[derive(Clone, Debug)]
pub struct LogisticModel {
    classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes, dim + 1]`, bias last.
    weights: Vec<f64>,
}

fn softmax_row(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], config: &ProbeConfig) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Validation(format!("{} samples with {} labels", x.len(), y.len())));
        }
        let dim = x[0].len();
        if x.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation("representations have mixed dimensions".into()));
        }
        let classes = y.iter().copied().max().unwrap_or(0) + 1;
        let distinct = {
            let mut seen = vec![false; classes];
            y.iter().for_each(|&c| seen[c] = true);
            seen.iter().filter(|&&s| s).count()
        };
        if distinct < 2 {
            return Err(Error::Validation("training labels contain a single class".into()));
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for r in x {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 0.0 });
        let mut model = Self {
            classes,
            mean,
            scale,
            weights: vec![0.0; classes * (dim + 1)],
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
        let cols = dim + 1;
        let mut grad = vec![0.0; model.weights.len()];
        let mut probs = vec![0.0; classes];
        for _ in 0..config.max_iters {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (zr, &label) in z.iter().zip(y) {
                model.logits_into(zr, &mut probs);
                softmax_row(&mut probs);
                for c in 0..classes {
                    let err = (probs[c] - if c == label { 1.0 } else { 0.0 }) / n;
                    let g = &mut grad[c * cols..(c + 1) * cols];
                    for (gj, zj) in g.iter_mut().zip(zr) {
                        *gj += err * zj;
                    }
                    g[dim] += err;
                }
            }
            for c in 0..classes {
                for j in 0..dim {
                    grad[c * cols + j] += config.l2 * model.weights[c * cols + j];
                }
            }
            let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= config.lr * g;
            }
            if gmax < config.tol {
                break;
            }
        }
        Ok(model)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn logits_into(&self, z: &[f64], out: &mut [f64]) {
        let cols = z.len() + 1;
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weights[c * cols..(c + 1) * cols];
            *o = w[z.len()] + w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn predict_proba(&self, r: &[f64]) -> Vec<f64> {
        let z = self.standardize(r);
        let mut p = vec![0.0; self.classes];
        self.logits_into(&z, &mut p);
        softmax_row(&mut p);
        p
    }

    pub fn predict(&self, r: &[f64]) -> usize {
        argmax(&self.predict_proba(r))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fits on the training split and scores the test split.
pub fn probe(
    train_reps: &[Vec<f64>],
    train_labels: &[usize],
    test_reps: &[Vec<f64>],
    test_labels: &[usize],
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if let (Some(a), Some(b)) = (train_reps.first(), test_reps.first()) {
        if a.len() != b.len() {
            return Err(Error::Validation(format!(
                "train representations have {} dims, test {}",
                a.len(),
                b.len()
            )));
        }
    }
    if test_reps.len() != test_labels.len() || test_reps.is_empty() {
        return Err(Error::Validation("test split is empty or mislabeled".into()));
    }
    let model = LogisticModel::fit(train_reps, train_labels, config)?;
    let classes = model.classes().max(test_labels.iter().copied().max().unwrap_or(0) + 1);
    let probs: Vec<Vec<f64>> = test_reps.iter().map(|r| model.predict_proba(r)).collect();
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let scores: Option<Vec<f64>> = (classes == 2).then(|| probs.iter().map(|p| p[1]).collect());
    Ok(metrics(test_labels, &preds, scores.as_deref(), classes))
}

/// Per-class recalls, balanced accuracy, weighted F1, confusion matrix and,
/// when `scores` (positive-class scores) are given, AUROC.
pub fn metrics(labels: &[usize], preds: &[usize], scores: Option<&[f64]>, classes: usize) -> ProbeReport {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in labels.iter().zip(preds) {
        confusion[t][p] += 1;
    }
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<usize> = (0..classes).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
    let recalls: Vec<f64> = (0..classes)
        .map(|c| if support[c] > 0 { confusion[c][c] as f64 / support[c] as f64 } else { 0.0 })
        .collect();
    let present: Vec<usize> = (0..classes).filter(|&c| support[c] > 0).collect();
    let balanced_accuracy = present.iter().map(|&c| recalls[c]).sum::<f64>() / present.len().max(1) as f64;
    let total: usize = support.iter().sum();
    let weighted_f1 = (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let precision = if predicted[c] > 0 { tp / predicted[c] as f64 } else { 0.0 };
            let f1 = if precision + recalls[c] > 0.0 {
                2.0 * precision * recalls[c] / (precision + recalls[c])
            } else {
                0.0
            };
            f1 * support[c] as f64
        })
        .sum::<f64>()
        / total.max(1) as f64;
    let auroc = scores.and_then(|s| auroc(labels, s));
    ProbeReport {
        balanced_accuracy,
        auroc,
        weighted_f1,
        recalls,
        confusion,
    }
}

/// Mann-Whitney estimate of the area under the ROC curve for class 1 vs the
/// rest; ties count one half. `None` when a side is empty.
pub fn auroc(labels: &[usize], scores: &[f64]) -> Option<f64> {
    let pos: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| **l == 1).map(|(_, s)| *s).collect();
    let neg: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| **l != 1).map(|(_, s)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}
