//! Snapshot capture: kNN neighbourhoods around random anchors, at one or
//! several fields of view, plus snapshot labels, purity statistics and the
//! adaptive FOV selector used during segmentation.
//!
//! A field of view is an integer multiple `s` of the network input size `K`:
//! the `K * s` nearest neighbours of the anchor are pre-sampled and then
//! randomly thinned back to `K` points. The anchor always survives thinning.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{assign, fit_kmeans, KMeansModel};
use crate::error::{Error, Result};
use crate::scene_io::{PointCloud, UNLABELED};
use crate::spatial_index::{random_anchor, KdTree};

/// One field of view around an anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub anchor: usize,
    pub fov_scale: usize,
    /// The `K * fov_scale` nearest neighbours, anchor first, then by distance.
    pub presampled: Vec<usize>,
    /// The `K` network input points, a subset of `presampled` in the same
    /// order.
    pub downsampled: Vec<usize>,
}

impl Snapshot {
    pub fn k(&self) -> usize {
        self.downsampled.len()
    }
}

/// Views of one anchor at every configured FOV, smallest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiFovSnapshot {
    pub anchor: usize,
    pub views: Vec<Snapshot>,
}

/// Majority class of a snapshot and the fraction of points that carry it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotLabel {
    pub class_id: u32,
    pub purity: f64,
}

/// The `n` nearest neighbours of `anchor`, with the anchor moved to the front.
///
/// Exact duplicates of the anchor position with smaller indices would
/// otherwise be allowed to push it out of a small neighbourhood.
pub(crate) fn anchored_neighbourhood(tree: &KdTree, cloud: &PointCloud, anchor: usize, n: usize) -> Result<Vec<usize>> {
    if anchor >= cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor} outside a cloud of {} points",
            cloud.len()
        )));
    }
    if n > cloud.len() || n > tree.len() {
        return Err(Error::InvalidArgument(format!(
            "neighbourhood of {n} points exceeds the scene size {}",
            cloud.len()
        )));
    }
    let mut nn = tree.knn_indices(&cloud.position(anchor), n)?;
    match nn.iter().position(|&i| i == anchor) {
        Some(0) => {}
        Some(pos) => {
            nn.remove(pos);
            nn.insert(0, anchor);
        }
        None => {
            nn.pop();
            nn.insert(0, anchor);
        }
    }
    Ok(nn)
}

/// Keeps the anchor (position 0) and `k - 1` uniformly drawn other points,
/// preserving neighbourhood order.
pub(crate) fn downsample<R: Rng + ?Sized>(presampled: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if presampled.len() == k {
        return presampled.to_vec();
    }
    let mut picks = index::sample(rng, presampled.len() - 1, k - 1).into_vec();
    picks.sort_unstable();
    std::iter::once(presampled[0])
        .chain(picks.into_iter().map(|p| presampled[p + 1]))
        .collect()
}

/// Single-FOV snapshot with `K * presample_factor` pre-sampled points.
pub fn sample_single_fov<R: Rng + ?Sized>(
    tree: &KdTree,
    cloud: &PointCloud,
    anchor: usize,
    k: usize,
    presample_factor: usize,
    rng: &mut R,
) -> Result<Snapshot> {
    if k == 0 || presample_factor == 0 {
        return Err(Error::InvalidArgument("K and presample_factor must be positive".into()));
    }
    let presampled = anchored_neighbourhood(tree, cloud, anchor, k * presample_factor)?;
    let downsampled = downsample(&presampled, k, rng);
    Ok(Snapshot {
        anchor,
        fov_scale: presample_factor,
        presampled,
        downsampled,
    })
}

pub fn validate_fov_scales(fov_scales: &[usize]) -> Result<()> {
    if fov_scales.first() != Some(&1) {
        return Err(Error::InvalidArgument(
            "fov_scales must start with 1 (the base sampling rate)".into(),
        ));
    }
    if fov_scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("fov_scales must be strictly increasing".into()));
    }
    Ok(())
}

/// Multi-FOV snapshot from a single kNN query at the largest scale. Each
/// view's pre-sample is a prefix of that query, so views nest.
pub fn sample_multi_fov<R: Rng + ?Sized>(
    tree: &KdTree,
    cloud: &PointCloud,
    anchor: usize,
    k: usize,
    fov_scales: &[usize],
    rng: &mut R,
) -> Result<MultiFovSnapshot> {
    validate_fov_scales(fov_scales)?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let largest = *fov_scales.last().unwrap();
    let neighbourhood = anchored_neighbourhood(tree, cloud, anchor, k * largest)?;
    Ok(views_from_neighbourhood(&neighbourhood, anchor, k, fov_scales, rng))
}

fn views_from_neighbourhood<R: Rng + ?Sized>(
    neighbourhood: &[usize],
    anchor: usize,
    k: usize,
    fov_scales: &[usize],
    rng: &mut R,
) -> MultiFovSnapshot {
    let views = fov_scales
        .iter()
        .map(|&s| {
            let presampled = neighbourhood[..k * s].to_vec();
            let downsampled = downsample(&presampled, k, rng);
            Snapshot {
                anchor,
                fov_scale: s,
                presampled,
                downsampled,
            }
        })
        .collect();
    MultiFovSnapshot { anchor, views }
}

/// Majority vote over member labels; ties go to the smallest class id.
///
/// Purity is the voted class count over the number of members. Unlabeled
/// members count towards the denominator but never win the vote.
pub fn vote_label(member_labels: &[u32]) -> SnapshotLabel {
    let mut counts: Vec<usize> = Vec::new();
    for &l in member_labels {
        if l == UNLABELED {
            continue;
        }
        let l = l as usize;
        if l >= counts.len() {
            counts.resize(l + 1, 0);
        }
        counts[l] += 1;
    }
    let mut best = (UNLABELED, 0usize);
    for (c, &n) in counts.iter().enumerate() {
        if n > best.1 {
            best = (c as u32, n);
        }
    }
    let purity = if member_labels.is_empty() {
        0.0
    } else {
        best.1 as f64 / member_labels.len() as f64
    };
    SnapshotLabel {
        class_id: best.0,
        purity,
    }
}

/// Label of a snapshot from the ground truth of its network input points.
pub fn label_snapshot(cloud: &PointCloud, snapshot: &Snapshot) -> Result<SnapshotLabel> {
    Ok(vote_label(&cloud.labels_of(&snapshot.downsampled)?))
}

/// Mean and population standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean ± standard deviation across sampling runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PurityStats {
    pub purity_mean: f64,
    pub purity_std: f64,
    pub count_mean: f64,
    pub count_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurityReport {
    /// `None` for classes that never won a snapshot vote in any run.
    pub per_class: Vec<Option<PurityStats>>,
    pub overall: PurityStats,
    pub runs: usize,
}

/// Aggregates snapshot labels from repeated sampling runs.
///
/// Within a run, a class's purity is the mean purity of the snapshots voted
/// to that class; the report gives the mean and spread of that figure across
/// runs, alongside the per-run snapshot counts. A run in which a class got no
/// snapshots contributes a zero count but no purity value.
pub fn purity_report(runs: &[Vec<SnapshotLabel>], n_classes: usize) -> Result<PurityReport> {
    if runs.is_empty() || runs.iter().all(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("purity report needs at least one snapshot".into()));
    }
    let mut class_purity: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    let mut class_counts: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    let mut overall_purity = Vec::new();
    let mut overall_counts = Vec::new();
    for run in runs {
        let mut sums = vec![0.0; n_classes];
        let mut counts = vec![0usize; n_classes];
        for s in run {
            if (s.class_id as usize) < n_classes {
                sums[s.class_id as usize] += s.purity;
                counts[s.class_id as usize] += 1;
            }
        }
        for c in 0..n_classes {
            class_counts[c].push(counts[c] as f64);
            if counts[c] > 0 {
                class_purity[c].push(sums[c] / counts[c] as f64);
            }
        }
        if !run.is_empty() {
            overall_purity.push(run.iter().map(|s| s.purity).sum::<f64>() / run.len() as f64);
        }
        overall_counts.push(run.len() as f64);
    }
    let per_class = (0..n_classes)
        .map(|c| {
            if class_purity[c].is_empty() {
                return None;
            }
            let (pm, ps) = mean_std(&class_purity[c]);
            let (cm, cs) = mean_std(&class_counts[c]);
            Some(PurityStats {
                purity_mean: pm,
                purity_std: ps,
                count_mean: cm,
                count_std: cs,
            })
        })
        .collect();
    let (pm, ps) = mean_std(&overall_purity);
    let (cm, cs) = mean_std(&overall_counts);
    Ok(PurityReport {
        per_class,
        overall: PurityStats {
            purity_mean: pm,
            purity_std: ps,
            count_mean: cm,
            count_std: cs,
        },
        runs: runs.len(),
    })
}

/// Spatial spread of a pre-sample: mean squared distance to its centroid.
pub fn presample_variance(cloud: &PointCloud, presampled: &[usize]) -> f64 {
    assert!(!presampled.is_empty(), "variance of an empty pre-sample");
    let n = presampled.len() as f64;
    let mut c = [0.0; 3];
    for &i in presampled {
        let p = cloud.position(i);
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    presampled
        .iter()
        .map(|&i| {
            let p = cloud.position(i);
            (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)
        })
        .sum::<f64>()
        / n
}

/// Chooses a field of view from the spread of the largest pre-sample.
///
/// Until `warmup_min` variances have been seen the smallest FOV is used.
/// After that a 1-D KMeans with one cluster per FOV is fitted to the variance
/// history (and refitted every `refit_interval` new variances); cluster
/// centres in ascending order map onto FOVs in ascending order.
#[derive(Debug, Clone)]
pub struct AdaptiveFovSelector {
    fov_scales: Vec<usize>,
    variance_history: Vec<f64>,
    kmeans: Option<KMeansModel>,
    /// `rank[c]` is the ascending position of centre `c`.
    rank: Vec<usize>,
    fitted_at: usize,
    pub warmup_min: usize,
    pub refit_interval: usize,
    seed: u64,
}

impl AdaptiveFovSelector {
    pub const DEFAULT_WARMUP_MIN: usize = 256;
    pub const DEFAULT_REFIT_INTERVAL: usize = 512;

    pub fn new(fov_scales: &[usize], warmup_min: usize, refit_interval: usize, seed: u64) -> Result<Self> {
        validate_fov_scales(fov_scales)?;
        if refit_interval == 0 {
            return Err(Error::InvalidArgument("refit_interval must be positive".into()));
        }
        Ok(Self {
            fov_scales: fov_scales.to_vec(),
            variance_history: Vec::new(),
            kmeans: None,
            rank: Vec::new(),
            fitted_at: 0,
            warmup_min: warmup_min.max(fov_scales.len()),
            refit_interval,
            seed,
        })
    }

    pub fn with_defaults(fov_scales: &[usize], seed: u64) -> Result<Self> {
        Self::new(
            fov_scales,
            Self::DEFAULT_WARMUP_MIN,
            Self::DEFAULT_REFIT_INTERVAL,
            seed,
        )
    }

    pub fn fov_scales(&self) -> &[usize] {
        &self.fov_scales
    }

    pub fn largest_scale(&self) -> usize {
        *self.fov_scales.last().unwrap()
    }

    pub fn history_len(&self) -> usize {
        self.variance_history.len()
    }

    /// Sorted cluster centres of the current model, if fitted.
    pub fn centers(&self) -> Option<Vec<f64>> {
        self.kmeans.as_ref().map(|m| {
            let mut c: Vec<f64> = m.centers.iter().copied().collect();
            c.sort_by(f64::total_cmp);
            c
        })
    }

    fn refit(&mut self) -> Result<()> {
        let n = self.variance_history.len();
        let x = Array2::from_shape_vec((n, 1), self.variance_history.clone())
            .expect("history is a column");
        let model = fit_kmeans(x.view(), self.fov_scales.len(), self.seed, 100, 1e-9)?;
        let mut order: Vec<usize> = (0..model.n_clusters()).collect();
        order.sort_by(|&a, &b| {
            model.centers[[a, 0]]
                .total_cmp(&model.centers[[b, 0]])
                .then(a.cmp(&b))
        });
        let mut rank = vec![0; order.len()];
        for (r, &c) in order.iter().enumerate() {
            rank[c] = r;
        }
        self.rank = rank;
        self.kmeans = Some(model);
        self.fitted_at = n;
        Ok(())
    }

    /// Records `variance` and returns the FOV scale to sample with.
    pub fn select_fov(&mut self, variance: f64) -> Result<usize> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::InvalidArgument(format!("variance {variance} must be finite and >= 0")));
        }
        self.variance_history.push(variance);
        let n = self.variance_history.len();
        if n < self.warmup_min {
            return Ok(self.fov_scales[0]);
        }
        if self.kmeans.is_none() || n - self.fitted_at >= self.refit_interval {
            self.refit()?;
        }
        let model = self.kmeans.as_ref().unwrap();
        let id = assign(model, Array2::from_elem((1, 1), variance).view())?[0];
        Ok(self.fov_scales[self.rank[id]])
    }
}

/// A persisted set of multi-FOV snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub k: usize,
    pub fov_scales: Vec<usize>,
    pub seed: u64,
    pub snapshots: Vec<MultiFovSnapshot>,
}

impl SnapshotSet {
    /// `n` multi-FOV snapshots around uniformly drawn anchors.
    pub fn sample(
        tree: &KdTree,
        cloud: &PointCloud,
        k: usize,
        fov_scales: &[usize],
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snapshots = (0..n)
            .map(|_| {
                let anchor = random_anchor(&mut rng, cloud.len());
                sample_multi_fov(tree, cloud, anchor, k, fov_scales, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            k,
            fov_scales: fov_scales.to_vec(),
            seed,
            snapshots,
        })
    }

    /// Every view of every snapshot, anchor by anchor, smallest FOV first.
    pub fn views(&self) -> impl Iterator<Item = &Snapshot> {
        self.snapshots.iter().flat_map(|m| m.views.iter())
    }

    /// Writes a three-line header (`K`, `fov_scales`, `seed`) and one line per
    /// view: `anchor fov_scale idx_1 ... idx_K`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "K {}", self.k).map_err(io)?;
        let scales: Vec<String> = self.fov_scales.iter().map(|s| s.to_string()).collect();
        writeln!(w, "fov_scales {}", scales.join(" ")).map_err(io)?;
        writeln!(w, "seed {}", self.seed).map_err(io)?;
        for snap in &self.snapshots {
            for v in &snap.views {
                write!(w, "{} {}", v.anchor, v.fov_scale).map_err(io)?;
                for i in &v.downsampled {
                    write!(w, " {i}").map_err(io)?;
                }
                writeln!(w).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads a snapshot file. Pre-samples are not stored; they are rebuilt
    /// from the (deterministic) kNN query on `tree`.
    pub fn load(path: &Path, tree: &KdTree, cloud: &PointCloud) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let mut header = |key: &str| -> Result<(usize, Vec<u64>)> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, "truncated header"))?;
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut tokens = line.split_whitespace();
            if tokens.next() != Some(key) {
                return Err(Error::parse(path, no + 1, format!("expected `{key}`")));
            }
            let values = tokens
                .map(|t| t.parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(path, no + 1, "bad header value"))?;
            Ok((no + 1, values))
        };
        let (k_line, k) = header("K")?;
        let k = *k.first().ok_or_else(|| Error::parse(path, k_line, "missing K"))? as usize;
        let (_, scales) = header("fov_scales")?;
        let fov_scales: Vec<usize> = scales.into_iter().map(|s| s as usize).collect();
        validate_fov_scales(&fov_scales)?;
        let (seed_line, seed) = header("seed")?;
        let seed = *seed.first().ok_or_else(|| Error::parse(path, seed_line, "missing seed"))?;

        let largest = *fov_scales.last().unwrap();
        let mut snapshots: Vec<MultiFovSnapshot> = Vec::new();
        let mut current: Option<(MultiFovSnapshot, Vec<usize>)> = None;
        for (no, line) in lines {
            let line_no = no + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let values = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(path, line_no, "expected integers"))?;
            if values.len() != k + 2 {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected anchor, fov_scale and {k} indices"),
                ));
            }
            let (anchor, scale) = (values[0], values[1]);
            let view_pos = current.as_ref().map_or(0, |(m, _)| m.views.len());
            if scale != fov_scales[view_pos] {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("expected a view at scale {}", fov_scales[view_pos]),
                ));
            }
            if view_pos == 0 {
                let nb = anchored_neighbourhood(tree, cloud, anchor, k * largest)?;
                current = Some((
                    MultiFovSnapshot {
                        anchor,
                        views: Vec::new(),
                    },
                    nb,
                ));
            }
            let (multi, nb) = current.as_mut().unwrap();
            if multi.anchor != anchor {
                return Err(Error::parse(path, line_no, "view anchor differs from its group"));
            }
            let presampled = nb[..k * scale].to_vec();
            let downsampled = values[2..].to_vec();
            if downsampled.first() != Some(&anchor) {
                return Err(Error::parse(path, line_no, "first index must be the anchor"));
            }
            multi.views.push(Snapshot {
                anchor,
                fov_scale: scale,
                presampled,
                downsampled,
            });
            if multi.views.len() == fov_scales.len() {
                snapshots.push(current.take().unwrap().0);
            }
        }
        if current.is_some() {
            return Err(Error::Structural(format!(
                "{}: last snapshot is missing views",
                path.display()
            )));
        }
        Ok(Self {
            k,
            fov_scales,
            seed,
            snapshots,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_cloud(nx: usize, ny: usize) -> PointCloud {
        let mut pos = Vec::new();
        let mut labels = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                pos.push([x as f64 * 0.1, y as f64 * 0.1, 0.0]);
                labels.push(if x < nx / 2 { 0 } else { 1 });
            }
        }
        PointCloud::new(pos, Some(labels), 2, Vec::new()).unwrap()
    }

    fn is_subset(a: &[usize], b: &[usize]) -> bool {
        let set: std::collections::HashSet<_> = b.iter().collect();
        a.iter().all(|x| set.contains(x))
    }

    #[test]
    fn single_fov_sizes() {
        let cloud = grid_cloud(120, 100);
        let tree = KdTree::build(&cloud, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_single_fov(&tree, &cloud, 5000, 1024, 10, &mut rng).unwrap();
        assert_eq!(s.presampled.len(), 10240);
        assert_eq!(s.downsampled.len(), 1024);
        assert_eq!(s.downsampled[0], 5000);
        assert!(is_subset(&s.downsampled, &s.presampled));

        let s1 = sample_single_fov(&tree, &cloud, 77, 64, 1, &mut rng).unwrap();
        assert_eq!(s1.presampled, s1.downsampled);
        assert_eq!(s1.presampled, tree.knn_indices(&cloud.position(77), 64).unwrap());
    }

    #[test]
    fn whole_scene_snapshot() {
        let cloud = grid_cloud(10, 10);
        let tree = KdTree::build(&cloud, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_single_fov(&tree, &cloud, 3, 100, 1, &mut rng).unwrap();
        let mut all = s.downsampled.clone();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(sample_single_fov(&tree, &cloud, 3, 101, 1, &mut rng).is_err());
    }

    #[test]
    fn multi_fov_sizes_and_nesting() {
        let cloud = grid_cloud(100, 60);
        let tree = KdTree::build(&cloud, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_multi_fov(&tree, &cloud, 3030, 512, &[1, 2, 10], &mut rng).unwrap();
        let sizes: Vec<(usize, usize)> = m
            .views
            .iter()
            .map(|v| (v.presampled.len(), v.downsampled.len()))
            .collect();
        assert_eq!(sizes, vec![(512, 512), (1024, 512), (5120, 512)]);
        for w in m.views.windows(2) {
            assert!(is_subset(&w[0].presampled, &w[1].presampled));
        }
        assert!(m.views.iter().all(|v| v.downsampled[0] == 3030));
        assert!(sample_multi_fov(&tree, &cloud, 0, 512, &[2, 4], &mut rng).is_err());
        assert!(sample_multi_fov(&tree, &cloud, 0, 512, &[1, 1], &mut rng).is_err());
    }

    #[test]
    fn single_scale_multi_equals_single() {
        let cloud = grid_cloud(30, 30);
        let tree = KdTree::build(&cloud, 8).unwrap();
        let a = sample_multi_fov(&tree, &cloud, 100, 50, &[1], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_single_fov(&tree, &cloud, 100, 50, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.views, vec![b]);
    }

    #[test]
    fn isolated_blob_spills_but_nests() {
        // A 600-point blob near the origin and a large plane far away.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pos = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..600 {
            pos.push([rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]);
            labels.push(0);
        }
        for i in 0..6000 {
            pos.push([20.0 + (i % 100) as f64 * 0.2, (i / 100) as f64 * 0.2, 0.0]);
            labels.push(1);
        }
        let cloud = PointCloud::new(pos, Some(labels), 2, Vec::new()).unwrap();
        let tree = KdTree::build(&cloud, 16).unwrap();
        let m = sample_multi_fov(&tree, &cloud, 10, 512, &[1, 2, 10], &mut rng).unwrap();
        let labels = cloud.labels().unwrap();
        let foreign = |v: &Snapshot| v.presampled.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(foreign(&m.views[0]), 0);
        assert_eq!(foreign(&m.views[2]), 5120 - 600);
        for w in m.views.windows(2) {
            assert!(is_subset(&w[0].presampled, &w[1].presampled));
        }
    }

    #[test]
    fn duplicate_points_keep_the_anchor() {
        let cloud = PointCloud::from_positions(vec![[0.0; 3]; 10]).unwrap();
        let tree = KdTree::build(&cloud, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_single_fov(&tree, &cloud, 9, 3, 1, &mut rng).unwrap();
        assert_eq!(s.presampled[0], 9);
        assert_eq!(s.presampled.len(), 3);
    }

    #[test]
    fn vote_examples() {
        assert_eq!(vote_label(&[1, 1, 1, 2]), SnapshotLabel { class_id: 1, purity: 0.75 });
        assert_eq!(vote_label(&[0, 0, 0, 0]), SnapshotLabel { class_id: 0, purity: 1.0 });
        assert_eq!(vote_label(&[2, 2, 1, 1]), SnapshotLabel { class_id: 1, purity: 0.5 });
    }

    #[test]
    fn purity_report_examples() {
        let run = vec![
            SnapshotLabel { class_id: 0, purity: 0.9 },
            SnapshotLabel { class_id: 0, purity: 1.0 },
        ];
        let r = purity_report(&[run], 3).unwrap();
        let c0 = r.per_class[0].unwrap();
        assert!((c0.purity_mean - 0.95).abs() < 1e-12);
        assert_eq!(c0.count_mean, 2.0);
        assert!(r.per_class[1].is_none());
        assert!(r.per_class[2].is_none());
        assert!(purity_report(&[], 3).is_err());
    }

    #[test]
    fn variance_examples() {
        let same = PointCloud::from_positions(vec![[3.0, 3.0, 3.0]; 4]).unwrap();
        assert_eq!(presample_variance(&same, &[0, 1, 2, 3]), 0.0);
        let two = PointCloud::from_positions(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(presample_variance(&two, &[0, 1]), 1.0);
    }

    #[test]
    fn variance_of_unit_sphere_shell() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[f64; 3]> = (0..20_000)
            .map(|_| {
                let v: [f64; 3] = [
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [v[0] / n, v[1] / n, v[2] / n]
            })
            .collect();
        let cloud = PointCloud::from_positions(pts).unwrap();
        let idx: Vec<usize> = (0..cloud.len()).collect();
        // Centroid -> 0 so the mean squared radius is 1 minus |centroid|^2.
        assert!((presample_variance(&cloud, &idx) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn selector_warms_up_on_smallest() {
        let mut sel = AdaptiveFovSelector::with_defaults(&[1, 2, 10], 0).unwrap();
        assert_eq!(sel.select_fov(1e6).unwrap(), 1);
        assert!(sel.select_fov(-1.0).is_err());
    }

    #[test]
    fn selector_bimodal_mapping() {
        let mut sel = AdaptiveFovSelector::new(&[1, 10], 64, 128, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut picks = Vec::new();
        for i in 0..400 {
            let v = if i % 2 == 0 { 0.1 } else { 100.0 } * (0.9 + 0.2 * rng.random::<f64>());
            picks.push((v, sel.select_fov(v).unwrap()));
        }
        assert!(picks[..63].iter().all(|p| p.1 == 1));
        for (v, s) in &picks[64..] {
            assert_eq!(*s, if *v < 1.0 { 1 } else { 10 }, "variance {v}");
        }
        assert_eq!(sel.select_fov(0.1).unwrap(), 1);
        assert_eq!(sel.select_fov(100.0).unwrap(), 10);
    }

    #[test]
    fn selector_three_modes_monotone() {
        let mut sel = AdaptiveFovSelector::new(&[1, 2, 10], 90, 512, 1).unwrap();
        let modes = [0.5, 5.0, 50.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..300 {
            sel.select_fov(modes[i % 3] * (0.95 + 0.1 * rng.random::<f64>())).unwrap();
        }
        let got: Vec<usize> = modes.iter().map(|&m| sel.select_fov(m).unwrap()).collect();
        assert_eq!(got, vec![1, 2, 10]);
    }

    #[test]
    fn snapshot_set_round_trip() {
        let cloud = grid_cloud(40, 40);
        let tree = KdTree::build(&cloud, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let snaps = (0..5)
            .map(|i| sample_multi_fov(&tree, &cloud, i * 300, 16, &[1, 2, 4], &mut rng).unwrap())
            .collect();
        let set = SnapshotSet { k: 16, fov_scales: vec![1, 2, 4], seed: 4, snapshots: snaps };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("snaps.txt");
        set.save(&p).unwrap();
        assert_eq!(SnapshotSet::load(&p, &tree, &cloud).unwrap(), set);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn vote_matches_histogram(labels in prop::collection::vec(0u32..6, 1..200)) {
            let mut hist = [0usize; 6];
            for &l in &labels { hist[l as usize] += 1; }
            let max = *hist.iter().max().unwrap();
            let class = hist.iter().position(|&h| h == max).unwrap() as u32;
            let got = vote_label(&labels);
            prop_assert_eq!(got.class_id, class);
            prop_assert_eq!(got.purity, max as f64 / labels.len() as f64);
        }

        #[test]
        fn views_nest_and_keep_anchor(seed in 0u64..200, anchor in 0usize..1600) {
            let cloud = grid_cloud(40, 40);
            let tree = KdTree::build(&cloud, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_multi_fov(&tree, &cloud, anchor, 20, &[1, 3, 7], &mut rng).unwrap();
            let bbox_volume = |idx: &[usize]| {
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for &i in idx {
                    let p = cloud.position(i);
                    for a in 0..3 { lo[a] = lo[a].min(p[a]); hi[a] = hi[a].max(p[a]); }
                }
                (hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]).max(1.0)
            };
            for v in &m.views {
                prop_assert_eq!(v.downsampled.len(), 20);
                prop_assert!(v.downsampled.contains(&anchor));
                prop_assert!(is_subset(&v.downsampled, &v.presampled));
            }
            for w in m.views.windows(2) {
                prop_assert!(is_subset(&w[0].presampled, &w[1].presampled));
                prop_assert!(bbox_volume(&w[1].presampled) >= bbox_volume(&w[0].presampled));
            }
        }

        #[test]
        fn single_class_scene_is_pure(seed in 0u64..100) {
            let cloud = PointCloud::new(
                (0..400).map(|i| [(i % 20) as f64, (i / 20) as f64, 0.0]).collect(),
                Some(vec![3; 400]), 4, Vec::new()).unwrap();
            let tree = KdTree::build(&cloud, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anchor = crate::spatial_index::random_anchor(&mut rng, 400);
            let s = sample_single_fov(&tree, &cloud, anchor, 32, 4, &mut rng).unwrap();
            prop_assert_eq!(label_snapshot(&cloud, &s).unwrap().purity, 1.0);
        }

        #[test]
        fn selector_is_deterministic(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stream: Vec<f64> = (0..300).map(|_| rng.random::<f64>() * 10.0).collect();
            let run = || {
                let mut s = AdaptiveFovSelector::new(&[1, 2, 10], 50, 60, seed).unwrap();
                stream.iter().map(|&v| s.select_fov(v).unwrap()).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
