//! One-vs-rest linear SVM over snapshot features, and assembly of the weakly
//! labelled training set it is fitted on.
//!
//! Each class is trained as a binary problem minimising
//! `0.5 * |w|^2 + C * sum(hinge)` with Pegasos-style subgradient steps
//! (step size `1 / (lambda * t)`, `lambda = 1 / (C * n)`). Features are
//! standardised internally; the standardisation is folded back into the
//! stored weights, so the saved model is a plain affine map of raw features.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::PseudoLabelSet;
use crate::error::{Error, Result};
use crate::scene_io::UNLABELED;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    /// `n_classes x F`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    /// Classes that had training samples. Untrained rows are zero and are
    /// skipped by [`LinearSvm::predict`].
    pub trained: Vec<bool>,
    pub c: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epochs: 200,
            seed: 0,
        }
    }
}

/// Fits a one-vs-rest linear SVM. `n_classes` fixes the number of rows;
/// classes without samples keep an all-zero row.
pub fn fit_svm(features: ArrayView2<f64>, labels: &[u32], n_classes: usize, cfg: &SvmConfig) -> Result<LinearSvm> {
    let n = features.nrows();
    let dim = features.ncols();
    if n == 0 {
        return Err(Error::InvalidArgument("SVM training set is empty".into()));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if !(cfg.c >= 0.0 && cfg.c.is_finite()) {
        return Err(Error::InvalidArgument(format!("C must be finite and >= 0, got {}", cfg.c)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(Error::LabelOutOfDomain {
            label: bad,
            domain: n_classes,
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SVM input feature".into()));
    }
    let mut trained = vec![false; n_classes];
    for &l in labels {
        trained[l as usize] = true;
    }
    if trained.iter().filter(|&&t| t).count() < 2 {
        let missing: Vec<String> = (0..n_classes).filter(|&c| !trained[c]).map(|c| c.to_string()).collect();
        return Err(Error::InvalidArgument(format!(
            "SVM needs at least two classes; training set lacks classes {}",
            missing.join(", ")
        )));
    }

    let mean = features.mean_axis(Axis(0)).unwrap();
    let std = features.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    // Standardised features with a trailing constant column for the bias.
    let mut x = Array2::from_elem((n, dim + 1), 1.0);
    for (i, row) in features.rows().into_iter().enumerate() {
        for j in 0..dim {
            x[[i, j]] = (row[j] - mean[j]) / std[j];
        }
    }

    let lambda = 1.0 / (cfg.c * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let mut w = Array2::<f64>::zeros((n_classes, dim + 1));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let decay = 1.0 - 1.0 / t as f64;
            let xi = x.row(i);
            for c in (0..n_classes).filter(|&c| trained[c]) {
                let y = if labels[i] as usize == c { 1.0 } else { -1.0 };
                let mut wc = w.row_mut(c);
                let margin = y * wc.dot(&xi);
                wc *= decay;
                if margin < 1.0 && eta.is_finite() {
                    wc.scaled_add(eta * y, &xi);
                }
                let norm = wc.dot(&wc).sqrt();
                if norm > radius {
                    wc *= radius / norm;
                }
            }
        }
    }

    let mut weights = Array2::zeros((n_classes, dim));
    let mut biases = Array1::zeros(n_classes);
    for c in 0..n_classes {
        let mut b = w[[c, dim]];
        for j in 0..dim {
            weights[[c, j]] = w[[c, j]] / std[j];
            b -= w[[c, j]] * mean[j] / std[j];
        }
        biases[c] = b;
    }
    Ok(LinearSvm {
        weights,
        biases,
        trained,
        c: cfg.c,
        seed: cfg.seed,
    })
}

impl LinearSvm {
    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Class scores of one feature vector.
    pub fn scores(&self, feature: ArrayView1<f64>) -> Result<Array1<f64>> {
        if feature.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: feature.len(),
            });
        }
        Ok(self.weights.dot(&feature) + &self.biases)
    }

    fn argmax(&self, scores: ArrayView1<f64>) -> u32 {
        let mut best: Option<usize> = None;
        for c in 0..scores.len() {
            if !self.trained[c] {
                continue;
            }
            if best.is_none_or(|b| scores[c] > scores[b]) {
                best = Some(c);
            }
        }
        best.unwrap_or(0) as u32
    }

    pub fn predict_one(&self, feature: ArrayView1<f64>) -> Result<u32> {
        Ok(self.argmax(self.scores(feature)?.view()))
    }

    /// Highest-scoring trained class per row; ties go to the smaller id.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<u32>> {
        if features.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: features.ncols(),
            });
        }
        let scores = features.dot(&self.weights.t()) + &self.biases;
        Ok(scores.rows().into_iter().map(|r| self.argmax(r)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "n_classes {}", self.n_classes()).map_err(io)?;
        writeln!(w, "dim {}", self.dim()).map_err(io)?;
        writeln!(w, "c {:?}", self.c).map_err(io)?;
        writeln!(w, "seed {}", self.seed).map_err(io)?;
        let trained: Vec<&str> = self.trained.iter().map(|&t| if t { "1" } else { "0" }).collect();
        writeln!(w, "trained {}", trained.join(" ")).map_err(io)?;
        for c in 0..self.n_classes() {
            let mut line: Vec<String> = vec![format!("{:?}", self.biases[c])];
            line.extend(self.weights.row(c).iter().map(|v| format!("{v:?}")));
            writeln!(w, "{}", line.join(" ")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a model written by [`LinearSvm::save`]: one row per class, bias
    /// first.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        let field = |no: usize, key: &str| -> Result<&str> {
            lines
                .get(no)
                .and_then(|l| l.strip_prefix(key))
                .map(str::trim)
                .ok_or_else(|| Error::parse(path, no + 1, format!("expected `{key} ...`")))
        };
        let num = |no: usize, key: &str| -> Result<f64> {
            field(no, key)?
                .parse::<f64>()
                .map_err(|_| Error::parse(path, no + 1, format!("bad {key}")))
        };
        let n_classes = num(0, "n_classes")? as usize;
        let dim = num(1, "dim")? as usize;
        let c = num(2, "c")?;
        let seed: u64 = field(3, "seed")?
            .parse()
            .map_err(|_| Error::parse(path, 4, "bad seed"))?;
        let trained: Vec<bool> = field(4, "trained")?.split_whitespace().map(|t| t == "1").collect();
        if trained.len() != n_classes || lines.len() != 5 + n_classes {
            return Err(Error::Structural(format!("{}: inconsistent class count", path.display())));
        }
        let mut weights = Array2::zeros((n_classes, dim));
        let mut biases = Array1::zeros(n_classes);
        for cl in 0..n_classes {
            let no = 5 + cl;
            let values = lines[no]
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, no + 1, format!("bad value `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim + 1 {
                return Err(Error::parse(path, no + 1, format!("expected {} values", dim + 1)));
            }
            biases[cl] = values[0];
            weights.row_mut(cl).assign(&ArrayView1::from(&values[1..]));
        }
        Ok(Self {
            weights,
            biases,
            trained,
            c,
            seed,
        })
    }
}

/// How many true labels the weak classifier may see.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelBudget {
    /// Uniform sample of this fraction of the labelled snapshots.
    Fraction(f64),
    /// Up to this many snapshots of every class.
    PerClass(usize),
}

impl LabelBudget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LabelBudget::Fraction(f) if f > 0.0 && f <= 1.0 => Ok(()),
            LabelBudget::PerClass(n) if n >= 1 => Ok(()),
            other => Err(Error::InvalidArgument(format!("invalid label budget {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakTrainingSet {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    /// Row of `all_features` behind every training row.
    pub sample_ids: Vec<usize>,
    /// The first `n_true` rows carry true labels, the rest pseudo-labels.
    pub n_true: usize,
}

impl WeakTrainingSet {
    pub fn n_pseudo(&self) -> usize {
        self.labels.len() - self.n_true
    }

    /// One line per training row: `sample_id,label,source`.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "sample_id,label,source").map_err(io)?;
        for (r, (&s, &l)) in self.sample_ids.iter().zip(&self.labels).enumerate() {
            let source = if r < self.n_true { "true" } else { "pseudo" };
            writeln!(w, "{s},{l},{source}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Selects the true-labelled rows allowed by `budget`, then appends
/// pseudo-labelled rows for samples that did not get a true label.
///
/// Samples whose true label is [`UNLABELED`] are never selected.
pub fn build_weak_training_set(
    all_features: ArrayView2<f64>,
    true_labels: &[u32],
    budget: LabelBudget,
    pseudo: Option<&PseudoLabelSet>,
    seed: u64,
) -> Result<WeakTrainingSet> {
    budget.validate()?;
    if true_labels.len() != all_features.nrows() {
        return Err(Error::DimensionMismatch {
            expected: all_features.nrows(),
            got: true_labels.len(),
        });
    }
    let labelled: Vec<usize> = (0..true_labels.len()).filter(|&i| true_labels[i] != UNLABELED).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = match budget {
        LabelBudget::Fraction(f) => {
            let m = ((f * labelled.len() as f64).round() as usize).clamp(1.min(labelled.len()), labelled.len());
            index::sample(&mut rng, labelled.len(), m)
                .into_iter()
                .map(|i| labelled[i])
                .collect()
        }
        LabelBudget::PerClass(n) => {
            let classes: BTreeSet<u32> = labelled.iter().map(|&i| true_labels[i]).collect();
            let mut out = Vec::new();
            for c in classes {
                let members: Vec<usize> = labelled.iter().copied().filter(|&i| true_labels[i] == c).collect();
                if members.len() < n {
                    log::warn!(
                        "class {c} has {} labelled snapshots, fewer than the {n} requested; taking all",
                        members.len()
                    );
                }
                let m = n.min(members.len());
                out.extend(index::sample(&mut rng, members.len(), m).into_iter().map(|i| members[i]));
            }
            out
        }
    };
    chosen.sort_unstable();
    let n_true = chosen.len();
    let mut labels: Vec<u32> = chosen.iter().map(|&i| true_labels[i]).collect();
    let mut sample_ids = chosen.clone();
    if let Some(pseudo) = pseudo {
        let mut taken: BTreeSet<usize> = chosen.iter().copied().collect();
        for p in &pseudo.entries {
            if p.sample >= all_features.nrows() {
                return Err(Error::InvalidArgument(format!(
                    "pseudo-label refers to sample {} of {}",
                    p.sample,
                    all_features.nrows()
                )));
            }
            if taken.insert(p.sample) {
                sample_ids.push(p.sample);
                labels.push(p.class);
            }
        }
    }
    let features = all_features.select(Axis(0), &sample_ids);
    Ok(WeakTrainingSet {
        features,
        labels,
        sample_ids,
        n_true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::PseudoLabel;
    use ndarray::array;

    fn accuracy(svm: &LinearSvm, x: ArrayView2<f64>, y: &[u32]) -> f64 {
        let p = svm.predict(x).unwrap();
        p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
    }

    #[test]
    fn separable_toy_set_is_fit_exactly() {
        let x = array![[0.0, 0.0], [0.5, 0.2], [0.1, 0.6], [3.0, 3.0], [3.5, 2.8], [2.9, 3.4]];
        let y = [0, 0, 0, 1, 1, 1];
        let svm = fit_svm(x.view(), &y, 2, &SvmConfig::default()).unwrap();
        assert_eq!(accuracy(&svm, x.view(), &y), 1.0);
        assert_eq!(svm.predict_one(x.row(4)).unwrap(), 1);
    }

    #[test]
    fn vanishing_c_gives_zero_weights() {
        let x = array![[0.0, 0.0], [3.0, 3.0], [0.2, 0.1], [2.8, 3.1]];
        let y = [0, 1, 0, 1];
        let cfg = SvmConfig {
            c: 0.0,
            ..SvmConfig::default()
        };
        let svm = fit_svm(x.view(), &y, 2, &cfg).unwrap();
        assert!(svm.weights.iter().all(|&w| w == 0.0));
        assert_eq!(svm.predict(x.view()).unwrap(), vec![0, 0, 0, 0]);
        let tiny = fit_svm(x.view(), &y, 2, &SvmConfig { c: 1e-9, ..cfg }).unwrap();
        assert!(tiny.weights.iter().all(|w| w.abs() < 1e-6));
    }

    #[test]
    fn xor_is_not_linearly_separable() {
        // Any line misclassifies at least one of the four XOR corners, so
        // the best linear accuracy is 3/4.
        let x = array![[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let y = [0, 0, 1, 1];
        for seed in 0..5 {
            let svm = fit_svm(x.view(), &y, 2, &SvmConfig { seed, ..SvmConfig::default() }).unwrap();
            assert!(accuracy(&svm, x.view(), &y) <= 0.75);
        }
    }

    #[test]
    fn single_class_rejected_and_absent_class_zero() {
        let x = array![[0.0], [1.0]];
        let err = fit_svm(x.view(), &[1, 1], 3, &SvmConfig::default()).unwrap_err();
        assert!(err.to_string().contains("0, 2"), "{err}");
        let svm = fit_svm(x.view(), &[0, 2], 3, &SvmConfig::default()).unwrap();
        assert_eq!(svm.weights.row(1).to_vec(), vec![0.0]);
        assert_eq!(svm.biases[1], 0.0);
        let probe = Array2::from_shape_fn((50, 1), |(i, _)| i as f64 / 10.0 - 2.0);
        assert!(svm.predict(probe.view()).unwrap().iter().all(|&c| c != 1));
    }

    #[test]
    fn zero_feature_zero_bias_predicts_class_zero() {
        let svm = LinearSvm {
            weights: array![[1.0, -1.0], [2.0, 0.5]],
            biases: Array1::zeros(2),
            trained: vec![true, true],
            c: 1.0,
            seed: 0,
        };
        assert_eq!(svm.predict_one(Array1::zeros(2).view()).unwrap(), 0);
        assert!(svm.predict(Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn batch_matches_rows_and_refit_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((40, 3), |_| rand::Rng::random::<f64>(&mut rng));
        let y: Vec<u32> = (0..40).map(|i| (i % 3) as u32).collect();
        let cfg = SvmConfig {
            seed: 5,
            epochs: 20,
            ..SvmConfig::default()
        };
        let a = fit_svm(x.view(), &y, 3, &cfg).unwrap();
        let b = fit_svm(x.view(), &y, 3, &cfg).unwrap();
        assert_eq!(a, b);
        let batch = a.predict(x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            assert_eq!(a.predict_one(row).unwrap(), batch[i]);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svm.txt");
        a.save(&path).unwrap();
        assert_eq!(LinearSvm::load(&path).unwrap(), a);
    }

    #[test]
    fn weak_set_budgets() {
        let x = Array2::from_shape_fn((60, 2), |(i, j)| (i * 2 + j) as f64);
        let y: Vec<u32> = (0..60).map(|i| (i % 6) as u32).collect();
        let full = build_weak_training_set(x.view(), &y, LabelBudget::Fraction(1.0), None, 0).unwrap();
        assert_eq!(full.sample_ids, (0..60).collect::<Vec<_>>());
        assert_eq!(full.labels, y);
        assert_eq!(full.features, x);

        let big_y: Vec<u32> = (0..600).map(|i| (i % 6) as u32).collect();
        let big_x = Array2::zeros((600, 2));
        let per = build_weak_training_set(big_x.view(), &big_y, LabelBudget::PerClass(30), None, 1).unwrap();
        assert_eq!(per.n_true, 180);
        for c in 0..6 {
            assert_eq!(per.labels.iter().filter(|&&l| l == c).count(), 30);
        }
        let short = build_weak_training_set(x.view(), &y, LabelBudget::PerClass(30), None, 1).unwrap();
        assert_eq!(short.n_true, 60);
        assert!(build_weak_training_set(x.view(), &y, LabelBudget::Fraction(0.0), None, 1).is_err());
    }

    #[test]
    fn true_labels_win_collisions() {
        let x = Array2::from_shape_fn((4, 1), |(i, _)| i as f64);
        let y = vec![0, 1, UNLABELED, UNLABELED];
        let pseudo = PseudoLabelSet {
            entries: vec![
                PseudoLabel {
                    sample: 1,
                    cluster: 0,
                    class: 0,
                    normalized_distance: 0.0,
                },
                PseudoLabel {
                    sample: 3,
                    cluster: 0,
                    class: 0,
                    normalized_distance: 0.1,
                },
            ],
        };
        let set = build_weak_training_set(x.view(), &y, LabelBudget::Fraction(1.0), Some(&pseudo), 0).unwrap();
        assert_eq!(set.sample_ids, vec![0, 1, 3]);
        assert_eq!(set.labels, vec![0, 1, 0]);
        assert_eq!(set.n_true, 2);
        assert_eq!(set.n_pseudo(), 1);
    }
}
