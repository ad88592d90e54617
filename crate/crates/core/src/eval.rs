//! Classification metrics and the per-run evaluation report.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureWindow, Normalizer, SplitMode};
use crate::model::{predict, EncodedSet, ModelParams, Predictions};
use crate::taxonomy::{Level1, Taxonomy};
use crate::{Error, Result};

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances of the class.
    pub support: usize,
    pub predicted: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 for classes `0..n_classes`. 0/0 is taken as 0.
pub fn per_class(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<ClassMetrics>> {
    check_lengths(preds, labels)?;
    let mut tp = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        for c in [p, l] {
            if c >= n_classes {
                return Err(Error::ClassOutOfRange {
                    class: c,
                    classes: n_classes,
                });
            }
        }
        predicted[p] += 1;
        support[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    Ok((0..n_classes)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = ratio(2 * tp[c], predicted[c] + support[c]);
            ClassMetrics {
                label: c.to_string(),
                precision,
                recall,
                f1,
                support: support[c],
                predicted: predicted[c],
            }
        })
        .collect())
}

/// Unweighted mean F1 over classes that occur in the labels or predictions.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let stats = per_class(preds, labels, n_classes)?;
    let seen: Vec<&ClassMetrics> = stats.iter().filter(|m| m.support + m.predicted > 0).collect();
    Ok(seen.iter().map(|m| m.f1).sum::<f64>() / seen.len() as f64)
}

/// Pooled-count F1; equals accuracy for single-label problems.
pub fn micro_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    accuracy(preds, labels)
}

/// Mann-Whitney AUC of `scores` for the positive set, ties counted half.
/// `None` when either class is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// One-vs-rest AUC macro-averaged over the classes present in `labels`.
pub fn roc_auc_ovr(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let classes = probs.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::ClassOutOfRange { class: bad, classes });
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::UndefinedAuc(format!(
            "{} class(es) present in the labels",
            present.len()
        )));
    }
    let mut total = 0.0;
    for &c in &present {
        let scores: Vec<f64> = probs.column(c).to_vec();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += binary_auc(&scores, &positive).expect("both classes present");
    }
    Ok(total / present.len() as f64)
}

/// `m[true][pred]` counts, optionally with every non-empty row scaled to sum 1.
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
    row_normalize: bool,
) -> Result<Vec<Vec<f64>>> {
    check_lengths(preds, labels)?;
    let mut m = vec![vec![0.0; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::ClassOutOfRange {
                class: p.max(l),
                classes: n_classes,
            });
        }
        m[l][p] += 1.0;
    }
    if row_normalize {
        for row in &mut m {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
    }
    Ok(m)
}

/// Fraction of windows whose fine prediction's parent equals the coarse
/// prediction. Vacuously 1 for no windows.
pub fn hierarchy_consistency(preds_l1: &[usize], preds_l2: &[usize], taxonomy: &Taxonomy) -> f64 {
    if preds_l1.is_empty() {
        return 1.0;
    }
    let agree = preds_l1
        .iter()
        .zip(preds_l2)
        .filter(|(&p1, &p2)| p2 < taxonomy.len() && taxonomy.parent_of_index(p2).index() == p1)
        .count();
    agree as f64 / preds_l1.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_mode: SplitMode,
    pub width: usize,
    pub windows: usize,
    pub accuracy_l1: f64,
    pub f1_l1: f64,
    pub micro_f1_l1: f64,
    pub auc_l1: f64,
    pub accuracy_l2: f64,
    pub f1_l2: f64,
    pub micro_f1_l2: f64,
    pub auc_l2: f64,
    pub hierarchy_consistency: f64,
    pub per_class_l1: Vec<ClassMetrics>,
    pub per_class_l2: Vec<ClassMetrics>,
    pub labels_l1: Vec<String>,
    pub labels_l2: Vec<String>,
    pub confusion_l1: Vec<Vec<f64>>,
    pub confusion_l2: Vec<Vec<f64>>,
    pub checkpoint_hash: Option<String>,
}

fn named(mut stats: Vec<ClassMetrics>, names: &[String]) -> Vec<ClassMetrics> {
    for (m, n) in stats.iter_mut().zip(names) {
        m.label = n.clone();
    }
    stats
}

/// Report from ready-made predictions against true class indices.
pub fn evaluate_predictions(
    predictions: &Predictions,
    labels_l1: &[usize],
    labels_l2: &[usize],
    taxonomy: &Taxonomy,
    split_mode: SplitMode,
    width: usize,
) -> Result<EvalReport> {
    let n1 = Level1::ALL.len();
    let n2 = taxonomy.len();
    let names_l1: Vec<String> = Level1::ALL.iter().map(|l| l.as_str().to_string()).collect();
    let names_l2: Vec<String> = taxonomy.labels().iter().map(|l| l.to_string()).collect();
    let (p1, p2) = (&predictions.pred_l1, &predictions.pred_l2);
    Ok(EvalReport {
        split_mode,
        width,
        windows: labels_l1.len(),
        accuracy_l1: accuracy(p1, labels_l1)?,
        f1_l1: macro_f1(p1, labels_l1, n1)?,
        micro_f1_l1: micro_f1(p1, labels_l1)?,
        auc_l1: roc_auc_ovr(&predictions.probs_l1, labels_l1)?,
        accuracy_l2: accuracy(p2, labels_l2)?,
        f1_l2: macro_f1(p2, labels_l2, n2)?,
        micro_f1_l2: micro_f1(p2, labels_l2)?,
        auc_l2: roc_auc_ovr(&predictions.probs_l2, labels_l2)?,
        hierarchy_consistency: hierarchy_consistency(p1, p2, taxonomy),
        per_class_l1: named(per_class(p1, labels_l1, n1)?, &names_l1),
        per_class_l2: named(per_class(p2, labels_l2, n2)?, &names_l2),
        confusion_l1: confusion_matrix(p1, labels_l1, n1, true)?,
        confusion_l2: confusion_matrix(p2, labels_l2, n2, true)?,
        labels_l1: names_l1,
        labels_l2: names_l2,
        checkpoint_hash: None,
    })
}

/// Scores a model on one split. Synthetic (oversampled) windows are skipped;
/// features are normalised first when a normaliser is given.
pub fn evaluate_run(
    params: &ModelParams,
    windows: &[FeatureWindow],
    normalizer: Option<&Normalizer>,
    taxonomy: &Taxonomy,
    split_mode: SplitMode,
    width: usize,
) -> Result<EvalReport> {
    let mut real: Vec<FeatureWindow> = windows.iter().filter(|w| !w.synthetic).cloned().collect();
    if real.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if let Some(n) = normalizer {
        n.apply(&mut real);
    }
    let set = EncodedSet::from_windows(&real, taxonomy)?;
    let predictions = predict(params, &set)?;
    evaluate_predictions(&predictions, &set.l1, &set.l2, taxonomy, split_mode, width)
}

pub fn write_confusion_csv<W: Write>(out: W, matrix: &[Vec<f64>], labels: &[String]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    let mut header = vec!["true\\pred".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in labels.iter().zip(matrix) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub const TREND_HEADER: &str = "width,split,metric,value";

/// Long-format rows of the headline metrics, one per report and metric.
pub fn write_trend_csv<W: Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TREND_HEADER.split(','))?;
    for r in reports {
        let metrics = [
            ("accuracy_l1", r.accuracy_l1),
            ("f1_l1", r.f1_l1),
            ("auc_l1", r.auc_l1),
            ("accuracy_l2", r.accuracy_l2),
            ("f1_l2", r.f1_l2),
            ("auc_l2", r.auc_l2),
        ];
        for (name, value) in metrics {
            w.write_record([
                r.width.to_string(),
                r.split_mode.to_string(),
                name.to_string(),
                value.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 0], &[1, 2, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 1, 0, 1], 2).unwrap(), 1.0);
        let f = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[2, 2, 2], &[2, 2, 2], 5).unwrap(), 1.0);
    }

    #[test]
    fn auc_examples() {
        let probs = Array2::from_shape_vec((4, 2), vec![0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.1, 0.9]).unwrap();
        assert_eq!(roc_auc_ovr(&probs, &[0, 0, 1, 1]).unwrap(), 1.0);
        let flat = Array2::from_elem((4, 2), 0.5);
        assert_eq!(roc_auc_ovr(&flat, &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc_ovr(&flat, &[1, 1, 1, 1]), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let fast = binary_auc(&scores, &positive).unwrap();
        assert!((fast - pairwise_auc(&scores, &positive)).abs() < 1e-12);
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3, true).unwrap();
        assert_eq!(m, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let m = confusion_matrix(&[0, 1, 1, 1], &[0, 0, 1, 1], 3, true).unwrap();
        assert_eq!(m[0], vec![0.5, 0.5, 0.0]);
        assert_eq!(m[2], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn consistency_examples() {
        let t = Taxonomy::default();
        let l2: Vec<usize> = (0..t.len()).collect();
        let l1: Vec<usize> = l2.iter().map(|&i| t.parent_of_index(i).index()).collect();
        assert_eq!(hierarchy_consistency(&l1, &l2, &t), 1.0);
        let wrong: Vec<usize> = l1.iter().map(|&p| (p + 1) % 3).collect();
        assert_eq!(hierarchy_consistency(&wrong, &l2, &t), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p1: Vec<usize> = (0..300).map(|_| rng.random_range(0..3)).collect();
        let p2: Vec<usize> = (0..300).map(|_| rng.random_range(0..t.len())).collect();
        let mut agree = 0;
        for i in 0..300 {
            let parent = match t.labels()[p2[i]].as_ref() {
                "Sleep" => 0,
                "Awake" => 1,
                _ => 2,
            };
            if parent == p1[i] {
                agree += 1;
            }
        }
        assert_eq!(hierarchy_consistency(&p1, &p2, &t), agree as f64 / 300.0);
    }

    #[test]
    fn trend_csv_shape() {
        let t = Taxonomy::default();
        let preds = Predictions {
            probs_l1: Array2::from_shape_vec((2, 3), vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1]).unwrap(),
            probs_l2: {
                let mut m = Array2::from_elem((2, t.len()), 0.0);
                m[[0, 0]] = 1.0;
                m[[1, 1]] = 1.0;
                m
            },
            pred_l1: vec![0, 1],
            pred_l2: vec![0, 1],
        };
        let r = evaluate_predictions(&preds, &[0, 1], &[0, 1], &t, SplitMode::Temporal, 30).unwrap();
        assert_eq!((r.accuracy_l1, r.f1_l1, r.auc_l1), (1.0, 1.0, 1.0));
        let mut buf = Vec::new();
        write_trend_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), TREND_HEADER);
        assert_eq!(text.lines().count(), 7);
        assert!(text.contains("30,temporal,accuracy_l1,1\n"));
    }

    proptest! {
        #[test]
        fn auc_invariant_under_cubing(
            seed in any::<u64>(),
            n in 4usize..80,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.random_range(0..3) }).collect();
            let probs = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0f64));
            let cubed = probs.mapv(|v| v * v * v);
            let a = roc_auc_ovr(&probs, &labels).unwrap();
            let b = roc_auc_ovr(&cubed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn accuracy_is_confusion_trace(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..100),
        ) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = confusion_matrix(&p, &l, 4, false).unwrap();
            let trace: f64 = (0..4).map(|i| m[i][i]).sum();
            prop_assert_eq!(accuracy(&p, &l).unwrap(), trace / p.len() as f64);
        }

        #[test]
        fn macro_f1_ignores_class_order(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..100),
            shift in 1usize..5,
        ) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let perm = |v: &[usize]| v.iter().map(|c| (c + shift) % 5).collect::<Vec<_>>();
            let a = macro_f1(&p, &l, 5).unwrap();
            let b = macro_f1(&perm(&p), &perm(&l), 5).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn normalisation_keeps_row_argmax(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..100),
        ) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let raw = confusion_matrix(&p, &l, 4, false).unwrap();
            let norm = confusion_matrix(&p, &l, 4, true).unwrap();
            for (r, n) in raw.iter().zip(&norm) {
                let am = |v: &Vec<f64>| (0..4).fold(0, |b, i| if v[i] > v[b] { i } else { b });
                prop_assert_eq!(am(r), am(n));
                let s: f64 = n.iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
            }
        }
    }
}
