//! Point-wise segmentation by voting.
//!
//! Snapshots are captured around random anchors until nearly every point has
//! been seen. Each snapshot is classified once and its class is added as a
//! vote to every point of its pre-sample (not just the down-sampled network
//! input). Votes are then resolved per point, with ties settled by the
//! point's nearest neighbours.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{assign, KMeansModel};
use crate::encoder::{extract_features_parallel, train, EncoderModel, EpochStats, Example, HeadMode, TrainConfig};
use crate::error::{Error, Result};
use crate::pretext::snapshot_input;
use crate::scene_io::{default_palette, export_colored_ply, PointCloud, UNLABELED};
use crate::snapshot::{anchored_neighbourhood, downsample, label_snapshot, presample_variance, AdaptiveFovSelector, Snapshot};
use crate::spatial_index::{random_anchor, KdTree};
use crate::weak_classifier::LinearSvm;

/// Per-point class vote counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTable {
    n_classes: usize,
    counts: Vec<u32>,
    totals: Vec<u32>,
    covered: usize,
}

impl VoteTable {
    pub fn new(n_points: usize, n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_points * n_classes],
            totals: vec![0; n_points],
            covered: 0,
        }
    }

    pub fn n_points(&self) -> usize {
        self.totals.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// One vote for `class` on each of `points`.
    pub fn add(&mut self, points: &[usize], class: u32) -> Result<()> {
        let c = class as usize;
        if c >= self.n_classes {
            return Err(Error::LabelOutOfDomain {
                label: class,
                domain: self.n_classes,
            });
        }
        for &p in points {
            if self.totals[p] == 0 {
                self.covered += 1;
            }
            self.totals[p] += 1;
            self.counts[p * self.n_classes + c] += 1;
        }
        Ok(())
    }

    pub fn votes(&self, point: usize) -> &[u32] {
        &self.counts[point * self.n_classes..(point + 1) * self.n_classes]
    }

    pub fn total(&self, point: usize) -> u32 {
        self.totals[point]
    }

    pub fn is_covered(&self, point: usize) -> bool {
        self.totals[point] > 0
    }

    pub fn covered_count(&self) -> usize {
        self.covered
    }

    pub fn coverage(&self) -> f64 {
        if self.totals.is_empty() {
            return 0.0;
        }
        self.covered as f64 / self.totals.len() as f64
    }

    pub fn total_votes(&self) -> u64 {
        self.totals.iter().map(|&t| t as u64).sum()
    }

    /// Class with the most votes (smallest id on ties); `UNLABELED` for
    /// uncovered points.
    pub fn argmax(&self, point: usize) -> u32 {
        if !self.is_covered(point) {
            return UNLABELED;
        }
        argmax_counts(self.votes(point))
    }

    /// Current argmax of every point.
    pub fn argmax_all(&self) -> Vec<u32> {
        (0..self.n_points()).map(|p| self.argmax(p)).collect()
    }

    /// Header `n_points n_classes`, then one line of counts per point.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{} {}", self.n_points(), self.n_classes).map_err(io)?;
        for p in 0..self.n_points() {
            let line: Vec<String> = self.votes(p).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" ")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty vote table"))?
            .map_err(|e| Error::io(path, e))?;
        let dims: Vec<usize> = header.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        let [n, c] = dims[..] else {
            return Err(Error::parse(path, 1, "expected `n_points n_classes`"));
        };
        let mut table = VoteTable::new(n, c);
        let mut p = 0;
        for (no, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if p >= n {
                return Err(Error::parse(path, no + 2, "more rows than points"));
            }
            let row: Vec<u32> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::parse(path, no + 2, format!("bad count `{t}`"))))
                .collect::<Result<_>>()?;
            if row.len() != c {
                return Err(Error::parse(path, no + 2, format!("expected {c} counts")));
            }
            let total: u32 = row.iter().sum();
            table.counts[p * c..(p + 1) * c].copy_from_slice(&row);
            table.totals[p] = total;
            if total > 0 {
                table.covered += 1;
            }
            p += 1;
        }
        if p != n {
            return Err(Error::Structural(format!("{}: {p} rows for {n} points", path.display())));
        }
        Ok(table)
    }
}

fn argmax_counts(votes: &[u32]) -> u32 {
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    best as u32
}

/// Assigns one class to each snapshot of a batch.
pub trait SnapshotClassifier {
    fn n_classes(&self) -> usize;
    fn classify(&self, cloud: &PointCloud, snapshots: &[Snapshot]) -> Result<Vec<u32>>;
}

/// Encoder features followed by the weak linear classifier.
pub struct EncoderSvmClassifier<'a> {
    pub model: &'a EncoderModel,
    pub svm: &'a LinearSvm,
    pub side_channel: bool,
    pub workers: usize,
}

impl SnapshotClassifier for EncoderSvmClassifier<'_> {
    fn n_classes(&self) -> usize {
        self.svm.n_classes()
    }

    fn classify(&self, cloud: &PointCloud, snapshots: &[Snapshot]) -> Result<Vec<u32>> {
        let inputs: Vec<Array2<f64>> = snapshots
            .iter()
            .map(|s| snapshot_input(cloud, s, self.side_channel))
            .collect();
        let features = extract_features_parallel(self.model, &inputs, self.workers)?;
        self.svm.predict(features.view())
    }
}

/// Labels each snapshot with the majority ground-truth class of its network
/// input. Useful as an upper-bound reference for the voting stage.
pub struct TruthClassifier {
    pub n_classes: usize,
}

impl SnapshotClassifier for TruthClassifier {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn classify(&self, cloud: &PointCloud, snapshots: &[Snapshot]) -> Result<Vec<u32>> {
        snapshots
            .iter()
            .map(|s| {
                let l = label_snapshot(cloud, s)?.class_id;
                Ok(if l == UNLABELED { 0 } else { l })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentConfig {
    pub k: usize,
    pub fov_scales: Vec<usize>,
    pub coverage_stop: f64,
    /// Defaults to `200 * N / K` when `None`.
    pub max_iters: Option<usize>,
    pub seed: u64,
    pub knn_k: usize,
    /// Snapshots classified together. Votes are still applied one snapshot
    /// at a time, so the result does not depend on this.
    pub batch: usize,
    /// Directory for coloured PLY files at 25/50/75/100% coverage.
    pub progress_dir: Option<PathBuf>,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            k: 512,
            fov_scales: vec![1, 2, 10],
            coverage_stop: 0.9995,
            max_iters: None,
            seed: 0,
            knn_k: 5,
            batch: 1,
            progress_dir: None,
        }
    }
}

/// One captured snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureRecord {
    pub iter: usize,
    pub anchor: usize,
    pub fov_scale: usize,
    pub predicted_class: u32,
    /// Size of the pre-sample that received the vote.
    pub presampled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: Vec<u32>,
    pub iterations: usize,
    /// Coverage when capturing stopped.
    pub coverage: f64,
    /// Points whose top vote was shared and went to the neighbour tie-break.
    pub ties_resolved: usize,
    /// False when `max_iters` ran out before `coverage_stop`.
    pub complete: bool,
    pub capture: Vec<CaptureRecord>,
}

impl SegmentationResult {
    /// CSV `iter,anchor,fov_scale,predicted_class`.
    pub fn write_capture_log(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "iter,anchor,fov_scale,predicted_class").map_err(io)?;
        for r in &self.capture {
            writeln!(w, "{},{},{},{}", r.iter, r.anchor, r.fov_scale, r.predicted_class).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Runs the capture-classify-vote loop and resolves the votes.
pub fn segment(
    cloud: &PointCloud,
    tree: &KdTree,
    classifier: &dyn SnapshotClassifier,
    selector: &mut AdaptiveFovSelector,
    cfg: &SegmentConfig,
) -> Result<(SegmentationResult, VoteTable)> {
    let n = cloud.len();
    if !(cfg.coverage_stop > 0.0 && cfg.coverage_stop <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "coverage_stop {} outside (0, 1]",
            cfg.coverage_stop
        )));
    }
    if cfg.k == 0 || cfg.batch == 0 || cfg.knn_k == 0 {
        return Err(Error::InvalidArgument("K, batch and knn_k must be positive".into()));
    }
    if selector.fov_scales() != cfg.fov_scales.as_slice() {
        return Err(Error::InvalidArgument("selector FOV scales differ from the configuration".into()));
    }
    let largest = selector.largest_scale();
    if cfg.k * largest > n {
        return Err(Error::InvalidArgument(format!(
            "largest pre-sample of {} points exceeds the scene size {n}",
            cfg.k * largest
        )));
    }
    let max_iters = cfg.max_iters.unwrap_or_else(|| (200 * n / cfg.k).max(1));
    let mut votes = VoteTable::new(n, classifier.n_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut capture = Vec::new();
    let mut progress_marks = [0.25, 0.5, 0.75].into_iter().peekable();
    let mut iter = 0;
    let mut done = false;

    while !done && iter < max_iters {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch.min(max_iters - iter) {
            let anchor = random_anchor(&mut rng, n);
            let neighbourhood = anchored_neighbourhood(tree, cloud, anchor, cfg.k * largest)?;
            let variance = presample_variance(cloud, &neighbourhood);
            let fov_scale = selector.select_fov(variance)?;
            let presampled = neighbourhood[..cfg.k * fov_scale].to_vec();
            let downsampled = downsample(&presampled, cfg.k, &mut rng);
            batch.push(Snapshot {
                anchor,
                fov_scale,
                presampled,
                downsampled,
            });
        }
        let predicted = classifier.classify(cloud, &batch)?;
        for (snap, class) in batch.iter().zip(predicted) {
            votes.add(&snap.presampled, class)?;
            capture.push(CaptureRecord {
                iter,
                anchor: snap.anchor,
                fov_scale: snap.fov_scale,
                predicted_class: class,
                presampled: snap.presampled.len(),
            });
            iter += 1;
            while let Some(&mark) = progress_marks.peek() {
                if votes.coverage() < mark {
                    break;
                }
                progress_marks.next();
                if let Some(dir) = &cfg.progress_dir {
                    let path = dir.join(format!("progress_{:03}.ply", (mark * 100.0) as u32));
                    export_colored_ply(cloud, &votes.argmax_all(), &default_palette(), &path)?;
                }
            }
            if votes.coverage() >= cfg.coverage_stop {
                done = true;
                break;
            }
        }
    }

    let coverage = votes.coverage();
    if !done {
        log::warn!("segmentation stopped after {iter} iterations at coverage {coverage:.5}");
    }
    let (labels, ties_resolved) = resolve_votes(&votes, tree, cloud, cfg.knn_k)?;
    if let Some(dir) = &cfg.progress_dir {
        export_colored_ply(cloud, &labels, &default_palette(), &dir.join("progress_100.ply"))?;
    }
    Ok((
        SegmentationResult {
            labels,
            iterations: iter,
            coverage,
            ties_resolved,
            complete: done,
            capture,
        },
        votes,
    ))
}

/// Final label of every point and the number of ties that went to the
/// neighbour vote.
///
/// A covered point takes its most-voted class. When several classes share
/// the top count, the current argmax labels of its `knn_k` nearest covered
/// neighbours cast one extra vote for their majority; any tie left after
/// that goes to the smallest class id. Uncovered points copy the final label
/// of their nearest covered point.
pub fn resolve_votes(votes: &VoteTable, tree: &KdTree, cloud: &PointCloud, knn_k: usize) -> Result<(Vec<u32>, usize)> {
    let n = votes.n_points();
    if n != cloud.len() {
        return Err(Error::DimensionMismatch {
            expected: cloud.len(),
            got: n,
        });
    }
    if votes.covered_count() == 0 {
        return Err(Error::InvalidArgument("no point received a vote".into()));
    }
    let current = votes.argmax_all();
    let mut labels = current.clone();
    let mut ties = 0;
    let query_k = (knn_k + 1).min(n);
    for p in 0..n {
        if !votes.is_covered(p) {
            continue;
        }
        let v = votes.votes(p);
        let top = v[current[p] as usize];
        if v.iter().filter(|&&c| c == top).count() < 2 {
            continue;
        }
        ties += 1;
        let mut hist = vec![0u32; votes.n_classes()];
        let neighbours = tree.knn_indices(&cloud.position(p), query_k)?;
        for q in neighbours.into_iter().filter(|&q| q != p).take(knn_k) {
            if current[q] != UNLABELED {
                hist[current[q] as usize] += 1;
            }
        }
        let mut v = v.to_vec();
        if hist.iter().any(|&h| h > 0) {
            v[argmax_counts(&hist) as usize] += 1;
        }
        labels[p] = argmax_counts(&v);
    }

    if votes.covered_count() < n {
        let covered: Vec<usize> = (0..n).filter(|&p| votes.is_covered(p)).collect();
        let positions: Vec<_> = covered.iter().map(|&p| cloud.position(p)).collect();
        let covered_tree = KdTree::from_points(&positions, 16)?;
        for p in 0..n {
            if !votes.is_covered(p) {
                let nearest = covered_tree.knn_indices(&cloud.position(p), 1)?[0];
                labels[p] = labels[covered[nearest]];
            }
        }
    }
    Ok((labels, ties))
}

/// Adapts a cluster-classification model to a new scene: its own features of
/// `n_finetune` randomly chosen new-scene snapshots are assigned to the
/// frozen KMeans centres, and training continues on those cluster ids.
///
/// With `n_finetune == 0` the model is returned unchanged.
pub fn fine_tune_for_scene(
    model: &EncoderModel,
    kmeans: &KMeansModel,
    inputs: &[Array2<f64>],
    n_finetune: usize,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, Vec<EpochStats>)> {
    if n_finetune == 0 {
        return Ok((model.clone(), Vec::new()));
    }
    if n_finetune > inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "asked to fine-tune on {n_finetune} of {} snapshots",
            inputs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen = index::sample(&mut rng, inputs.len(), n_finetune).into_vec();
    chosen.sort_unstable();
    let subset: Vec<Array2<f64>> = chosen.iter().map(|&i| inputs[i].clone()).collect();
    let features = extract_features_parallel(model, &subset, cfg.workers)?;
    let clusters = assign(kmeans, features.view())?;
    let mut tuned = if model.head_mode() == HeadMode::Single && model.n_outputs() == kmeans.n_clusters() {
        model.clone()
    } else {
        model.with_fresh_head(HeadMode::Single, kmeans.n_clusters())?
    };
    let data: Vec<Example> = subset
        .into_iter()
        .zip(clusters)
        .map(|(x, c)| Example::Single { x, label: c })
        .collect();
    let trace = train(&mut tuned, &data, cfg)?;
    Ok((tuned, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_cloud(labels: Vec<u32>) -> PointCloud {
        let n = labels.len();
        let positions = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
        let n_classes = labels.iter().copied().max().unwrap() as usize + 1;
        PointCloud::new(positions, Some(labels), n_classes.max(2), Vec::new()).unwrap()
    }

    #[test]
    fn strict_majority_wins() {
        let cloud = line_cloud(vec![0; 3]);
        let tree = KdTree::build(&cloud, 4).unwrap();
        let mut votes = VoteTable::new(3, 2);
        votes.add(&[0, 1, 2], 0).unwrap();
        votes.add(&[0, 1, 2], 0).unwrap();
        votes.add(&[0, 1, 2], 0).unwrap();
        votes.add(&[0], 1).unwrap();
        let (labels, ties) = resolve_votes(&votes, &tree, &cloud, 5).unwrap();
        assert_eq!(labels, vec![0, 0, 0]);
        assert_eq!(ties, 0);
    }

    /// Point 0 has a 2-2 tie between classes 0 and 1; its five neighbours
    /// (points 1..=5) have clear argmax `neighbour_class`.
    fn tie_case(neighbour_class: u32) -> u32 {
        let cloud = line_cloud(vec![0; 8]);
        let tree = KdTree::build(&cloud, 2).unwrap();
        let mut votes = VoteTable::new(8, 2);
        votes.add(&[0], 0).unwrap();
        votes.add(&[0], 0).unwrap();
        votes.add(&[0], 1).unwrap();
        votes.add(&[0], 1).unwrap();
        votes.add(&[1, 2, 3, 4, 5], neighbour_class).unwrap();
        votes.add(&[6, 7], 1 - neighbour_class).unwrap();
        let (labels, ties) = resolve_votes(&votes, &tree, &cloud, 5).unwrap();
        assert_eq!(ties, 1);
        labels[0]
    }

    #[test]
    fn tie_goes_to_neighbour_majority() {
        assert_eq!(tie_case(0), 0);
        assert_eq!(tie_case(1), 1);
    }

    #[test]
    fn uncovered_points_copy_nearest_covered() {
        let cloud = line_cloud(vec![0; 6]);
        let tree = KdTree::build(&cloud, 2).unwrap();
        let mut votes = VoteTable::new(6, 3);
        votes.add(&[0, 1], 2).unwrap();
        votes.add(&[5], 1).unwrap();
        let (labels, _) = resolve_votes(&votes, &tree, &cloud, 5).unwrap();
        assert_eq!(labels, vec![2, 2, 2, 2, 1, 1]);
        assert!(resolve_votes(&VoteTable::new(6, 3), &tree, &cloud, 5).is_err());
    }

    #[test]
    fn vote_table_round_trip() {
        let mut votes = VoteTable::new(4, 3);
        votes.add(&[0, 2], 1).unwrap();
        votes.add(&[2], 2).unwrap();
        assert!(votes.add(&[0], 3).is_err());
        assert_eq!(votes.covered_count(), 2);
        assert_eq!(votes.total_votes(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("votes.txt");
        votes.save(&path).unwrap();
        assert_eq!(VoteTable::load(&path).unwrap(), votes);
    }
}
