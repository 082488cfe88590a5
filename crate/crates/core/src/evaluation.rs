//! Confusion matrices, accuracy and F-scores, and their reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene_io::UNLABELED;

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, pred)).sum()
    }

    /// Adds the counts of another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::DimensionMismatch {
                expected: self.n_classes,
                got: other.n_classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Accumulates `(truth, pred)` pairs. Entries whose truth is
/// [`UNLABELED`] are skipped.
pub fn confusion(truth: &[u32], pred: &[u32], n_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&t, &p) in truth.iter().zip(pred) {
        if t == UNLABELED {
            continue;
        }
        for l in [t, p] {
            if l as usize >= n_classes {
                return Err(Error::LabelOutOfDomain {
                    label: l,
                    domain: n_classes,
                });
            }
        }
        cm.counts[t as usize * n_classes + p as usize] += 1;
    }
    Ok(cm)
}

/// Scores of one class. `None` when the class occurs in neither truth nor
/// prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Ground-truth count.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub per_class: Vec<Option<ClassScores>>,
    /// Mean F-score over classes present in the ground truth.
    pub average_f: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let mut per_class = Vec::with_capacity(cm.n_classes());
    let mut f_sum = 0.0;
    let mut present = 0usize;
    for c in 0..cm.n_classes() {
        let tp = cm.get(c, c);
        let support = cm.row_sum(c);
        let predicted = cm.col_sum(c);
        if support == 0 && predicted == 0 {
            per_class.push(None);
            continue;
        }
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f_score = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 {
            f_sum += f_score;
            present += 1;
        }
        per_class.push(Some(ClassScores {
            precision,
            recall,
            f_score,
            support,
        }));
    }
    Ok(Metrics {
        overall_accuracy: ratio(cm.trace(), total),
        per_class,
        average_f: if present > 0 { f_sum / present as f64 } else { 0.0 },
        total,
    })
}

fn class_name(names: &[String], c: usize) -> String {
    names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"))
}

pub const METRICS_CSV_HEADER: &str = "# snapseg metrics v1";

/// CSV with one row per class followed by `overall` and `average_f` rows.
/// Absent classes have empty score fields.
pub fn metrics_csv(m: &Metrics, names: &[String]) -> String {
    let mut out = String::new();
    writeln!(out, "{METRICS_CSV_HEADER}").unwrap();
    writeln!(out, "class,precision,recall,f_score,support").unwrap();
    for (c, s) in m.per_class.iter().enumerate() {
        let name = class_name(names, c);
        match s {
            Some(s) => writeln!(out, "{name},{:.6},{:.6},{:.6},{}", s.precision, s.recall, s.f_score, s.support).unwrap(),
            None => writeln!(out, "{name},,,,0").unwrap(),
        }
    }
    writeln!(out, "overall_accuracy,,,{:.6},{}", m.overall_accuracy, m.total).unwrap();
    writeln!(out, "average_f,,,{:.6},", m.average_f).unwrap();
    out
}

/// Aligned plain-text version of [`metrics_csv`].
pub fn metrics_table(m: &Metrics, names: &[String]) -> String {
    let width = (0..m.per_class.len())
        .map(|c| class_name(names, c).len())
        .max()
        .unwrap_or(0)
        .max("class".len());
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}", "class", "precision", "recall", "F", "support").unwrap();
    let pct = |v: f64| format!("{:.1}", 100.0 * v);
    for (c, s) in m.per_class.iter().enumerate() {
        let name = class_name(names, c);
        match s {
            Some(s) => writeln!(
                out,
                "{name:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
                pct(s.precision),
                pct(s.recall),
                pct(s.f_score),
                s.support
            )
            .unwrap(),
            None => writeln!(out, "{name:<width$}  {:>9}  {:>9}  {:>9}  {:>9}", "-", "-", "-", 0).unwrap(),
        }
    }
    writeln!(out, "overall accuracy {}%, average F {}%", pct(m.overall_accuracy), pct(m.average_f)).unwrap();
    writeln!(out, "(average F over classes present in the ground truth; `-` marks absent classes)").unwrap();
    out
}

/// Writes `<stem>.csv` and `<stem>.txt` next to each other.
pub fn write_metrics_report(m: &Metrics, names: &[String], dir: &Path, stem: &str) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, metrics_csv(m, names)).map_err(|e| Error::io(&csv, e))?;
    let txt = dir.join(format!("{stem}.txt"));
    fs::write(&txt, metrics_table(m, names)).map_err(|e| Error::io(&txt, e))
}

/// Anything that can train the weak classifier on a label budget and report
/// the resulting confusion matrix.
pub trait SweepPipeline {
    fn n_classes(&self) -> usize;
    fn evaluate(&mut self, fraction: f64, seed: u64) -> Result<ConfusionMatrix>;
}

/// One fraction of a label-fraction sweep, aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub n_seeds: usize,
    pub oa_mean: f64,
    pub oa_std: f64,
    pub average_f_mean: f64,
    /// Mean F-score over the seeds in which the class was present.
    pub f_mean: Vec<Option<f64>>,
}

pub fn label_fraction_sweep(pipeline: &mut dyn SweepPipeline, fractions: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::InvalidArgument(format!("label fraction {bad} outside (0, 1]")));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one seed".into()));
    }
    let n_classes = pipeline.n_classes();
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut oas = Vec::with_capacity(seeds.len());
        let mut avg_f = 0.0;
        let mut f_sum = vec![0.0; n_classes];
        let mut f_n = vec![0usize; n_classes];
        for &seed in seeds {
            let m = metrics(&pipeline.evaluate(fraction, seed)?)?;
            oas.push(m.overall_accuracy);
            avg_f += m.average_f;
            for (c, s) in m.per_class.iter().enumerate() {
                if let Some(s) = s {
                    f_sum[c] += s.f_score;
                    f_n[c] += 1;
                }
            }
        }
        let n = seeds.len() as f64;
        let oa_mean = oas.iter().sum::<f64>() / n;
        let oa_std = (oas.iter().map(|o| (o - oa_mean).powi(2)).sum::<f64>() / n).sqrt();
        rows.push(SweepRow {
            fraction,
            n_seeds: seeds.len(),
            oa_mean,
            oa_std,
            average_f_mean: avg_f / n,
            f_mean: (0..n_classes)
                .map(|c| (f_n[c] > 0).then(|| f_sum[c] / f_n[c] as f64))
                .collect(),
        });
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "# snapseg label-fraction sweep v1";

pub fn sweep_csv(rows: &[SweepRow], names: &[String]) -> String {
    let n_classes = rows.first().map_or(0, |r| r.f_mean.len());
    let mut out = String::new();
    writeln!(out, "{SWEEP_CSV_HEADER}").unwrap();
    let mut header = vec!["fraction".to_string(), "n_seeds".into(), "oa_mean".into(), "oa_std".into(), "average_f_mean".into()];
    header.extend((0..n_classes).map(|c| format!("f_{}", class_name(names, c))));
    writeln!(out, "{}", header.join(",")).unwrap();
    for r in rows {
        let mut line = vec![
            format!("{}", r.fraction),
            r.n_seeds.to_string(),
            format!("{:.6}", r.oa_mean),
            format!("{:.6}", r.oa_std),
            format!("{:.6}", r.average_f_mean),
        ];
        line.extend(r.f_mean.iter().map(|f| f.map_or(String::new(), |v| format!("{v:.6}"))));
        writeln!(out, "{}", line.join(",")).unwrap();
    }
    out
}

pub fn sweep_table(rows: &[SweepRow], names: &[String]) -> String {
    let n_classes = rows.first().map_or(0, |r| r.f_mean.len());
    let mut cols: Vec<String> = vec!["labels".into(), "OA".into(), "+-".into(), "avg F".into()];
    cols.extend((0..n_classes).map(|c| class_name(names, c)));
    let mut table: Vec<Vec<String>> = vec![cols];
    for r in rows {
        let mut line = vec![
            format!("{}%", 100.0 * r.fraction),
            format!("{:.1}", 100.0 * r.oa_mean),
            format!("{:.1}", 100.0 * r.oa_std),
            format!("{:.1}", 100.0 * r.average_f_mean),
        ];
        line.extend(r.f_mean.iter().map(|f| f.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v))));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|j| table.iter().map(|row| row[j].len()).max().unwrap())
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
        writeln!(out, "{}", cells.join("  ")).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_confusions() {
        let cm = confusion(&[0, 1], &[0, 1], 2).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(0, 1), cm.get(1, 0)), (1, 1, 0, 0));
        let cm = confusion(&[0], &[1], 2).unwrap();
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.total(), 1);
        assert_eq!(confusion(&[], &[], 3).unwrap().total(), 0);
        assert!(confusion(&[0, 1], &[0], 2).is_err());
        assert_eq!(confusion(&[UNLABELED, 1], &[0, 1], 2).unwrap().total(), 1);
    }

    #[test]
    fn metric_hand_computations() {
        let m = metrics(&confusion(&[0, 1], &[0, 1], 2).unwrap()).unwrap();
        assert_eq!(m.overall_accuracy, 1.0);
        assert!(m.per_class.iter().all(|s| s.unwrap().f_score == 1.0));

        let m = metrics(&confusion(&[0, 0, 1, 1], &[0, 1, 0, 1], 2).unwrap()).unwrap();
        assert_eq!(m.overall_accuracy, 0.5);
        assert!(m.per_class.iter().all(|s| s.unwrap().f_score == 0.5));

        let m = metrics(&confusion(&[0, 2], &[0, 2], 3).unwrap()).unwrap();
        assert_eq!(m.per_class[1], None);
        assert_eq!(m.average_f, 1.0);
        assert!(metrics(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn predicted_only_class_scores_zero_but_is_not_averaged() {
        let m = metrics(&confusion(&[0, 0], &[0, 1], 2).unwrap()).unwrap();
        let s1 = m.per_class[1].unwrap();
        assert_eq!((s1.precision, s1.recall, s1.f_score), (0.0, 0.0, 0.0));
        let f0 = m.per_class[0].unwrap().f_score;
        assert_eq!(m.average_f, f0);
    }

    #[test]
    fn reports_have_versioned_headers() {
        let m = metrics(&confusion(&[0, 1, 1], &[0, 1, 0], 3).unwrap()).unwrap();
        let names = vec!["a".to_string(), "bb".into(), "c".into()];
        let csv = metrics_csv(&m, &names);
        assert!(csv.starts_with("# snapseg metrics v1\nclass,precision,recall,f_score,support\n"));
        assert!(csv.contains("\nc,,,,0\n"));
        let table = metrics_table(&m, &names);
        assert!(table.contains("overall accuracy 66.7%"));
    }

    struct Fixed;

    impl SweepPipeline for Fixed {
        fn n_classes(&self) -> usize {
            2
        }

        fn evaluate(&mut self, fraction: f64, _seed: u64) -> Result<ConfusionMatrix> {
            let pred = if fraction >= 0.5 { [0, 1] } else { [0, 0] };
            confusion(&[0, 1], &pred, 2)
        }
    }

    #[test]
    fn sweep_shape() {
        let rows = label_fraction_sweep(&mut Fixed, &[1.0], &[0]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].oa_mean, 1.0);
        let rows = label_fraction_sweep(&mut Fixed, &[1.0, 0.2, 0.05], &[0, 1, 2]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].oa_mean, 0.5);
        assert_eq!(rows[2].n_seeds, 3);
        assert!(label_fraction_sweep(&mut Fixed, &[0.0], &[0]).is_err());
        let csv = sweep_csv(&rows, &[]);
        assert_eq!(csv.lines().count(), 5);
        assert!(sweep_table(&rows, &[]).lines().count() == 4);
    }

    proptest! {
        #[test]
        fn self_confusion_is_perfect(labels in proptest::collection::vec(0u32..5, 1..200)) {
            let cm = confusion(&labels, &labels, 5).unwrap();
            prop_assert_eq!(cm.total(), labels.len() as u64);
            let m = metrics(&cm).unwrap();
            prop_assert_eq!(m.overall_accuracy, 1.0);
        }

        #[test]
        fn scores_are_bounded(
            pairs in proptest::collection::vec((0u32..4, 0u32..4), 1..200)
        ) {
            let (t, p): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
            let m = metrics(&confusion(&t, &p, 4).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.overall_accuracy));
            for s in m.per_class.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&s.f_score));
            }
        }
    }
}
