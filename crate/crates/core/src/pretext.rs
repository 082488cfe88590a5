//! Training pairs for the contrastive pretext tasks.
//!
//! Three ways of forming pairs are supported:
//!
//! * part contrasting: the two halves of one snapshot are a positive pair,
//!   halves of different snapshots a negative one;
//! * scale contrasting: two views of one anchor at different FOVs are
//!   positive, views of different anchors negative;
//! * multi-FOV contrasting: every view is cut in half; two halves from the
//!   same anchor (same or different FOV) are positive.
//!
//! Every point set handed to the encoder is normalised on its own: centred on
//! its centroid and scaled so the farthest point sits at distance one.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scene_io::{Point3, PointCloud};
use crate::snapshot::{MultiFovSnapshot, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PretextMode {
    Part,
    Scale,
    MultiFov,
}

impl PretextMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PretextMode::Part => "part",
            PretextMode::Scale => "scale",
            PretextMode::MultiFov => "multi_fov",
        }
    }
}

impl fmt::Display for PretextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "part" => Ok(PretextMode::Part),
            "scale" => Ok(PretextMode::Scale),
            "multi_fov" => Ok(PretextMode::MultiFov),
            other => Err(Error::InvalidArgument(format!(
                "unknown pretext mode `{other}` (expected part, scale or multi_fov)"
            ))),
        }
    }
}

/// A normalised point set together with the radius it was scaled by.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    /// `n x 3`, centred, farthest point at distance 1 (or all zero).
    pub points: Array2<f64>,
    /// Distance of the farthest point from the centroid before scaling.
    pub radius: f64,
}

impl PointSet {
    pub fn normalized(raw: &[Point3]) -> Self {
        let n = raw.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in raw {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.iter_mut().for_each(|v| *v /= n);
        let mut points = Array2::zeros((raw.len(), 3));
        let mut radius: f64 = 0.0;
        for (i, p) in raw.iter().enumerate() {
            let mut r2 = 0.0;
            for d in 0..3 {
                let v = p[d] - c[d];
                points[[i, d]] = v;
                r2 += v * v;
            }
            radius = radius.max(r2.sqrt());
        }
        if radius > 0.0 {
            points.mapv_inplace(|v| v / radius);
        }
        Self { points, radius }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// Encoder input. With `side_channel` a fourth column carries
    /// `ln(1 + radius)` on every point so absolute scale stays visible.
    pub fn encoder_input(&self, side_channel: bool) -> Array2<f64> {
        if !side_channel {
            return self.points.clone();
        }
        let s = self.radius.ln_1p();
        let mut out = Array2::from_elem((self.len(), 4), s);
        out.slice_mut(ndarray::s![.., ..3]).assign(&self.points);
        out
    }
}

/// Input width of the encoder for a given side-channel setting.
pub fn input_dim(side_channel: bool) -> usize {
    if side_channel {
        4
    } else {
        3
    }
}

pub fn gather_points(cloud: &PointCloud, indices: &[usize]) -> Vec<Point3> {
    indices.iter().map(|&i| cloud.position(i)).collect()
}

/// Normalised network input of a snapshot (its down-sampled points).
pub fn snapshot_input(cloud: &PointCloud, snapshot: &Snapshot, side_channel: bool) -> Array2<f64> {
    PointSet::normalized(&gather_points(cloud, &snapshot.downsampled)).encoder_input(side_channel)
}

/// Raw coordinates of every view of a multi-FOV snapshot, smallest FOV first.
pub fn multi_fov_points(cloud: &PointCloud, snapshot: &MultiFovSnapshot) -> Vec<Vec<Point3>> {
    snapshot
        .views
        .iter()
        .map(|v| gather_points(cloud, &v.downsampled))
        .collect()
}

/// Two halves of a point set, each re-sampled to `K / 2` points.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfCut {
    pub left: Vec<Point3>,
    pub right: Vec<Point3>,
    /// Source indices on each side of the cut, before re-sampling. Together
    /// they partition `0..K`.
    pub left_members: Vec<usize>,
    pub right_members: Vec<usize>,
}

const CUT_ATTEMPTS: usize = 10;

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-12 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn resample<R: Rng + ?Sized>(points: &[Point3], members: &[usize], target: usize, rng: &mut R) -> Vec<Point3> {
    let mut picked: Vec<usize> = if members.len() >= target {
        let mut keep = index::sample(rng, members.len(), target).into_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| members[i]).collect()
    } else {
        members.to_vec()
    };
    while picked.len() < target {
        picked.push(members[rng.random_range(0..members.len())]);
    }
    picked.into_iter().map(|i| points[i]).collect()
}

/// Splits `points` by a random plane through their centroid.
///
/// The normal is re-drawn up to ten times when one side comes out empty;
/// after that the set is split at the median of its projection onto the
/// last normal.
pub fn random_half_cut<R: Rng + ?Sized>(points: &[Point3], rng: &mut R) -> Result<HalfCut> {
    let k = points.len();
    if k < 4 {
        return Err(Error::InvalidArgument(format!(
            "half cut needs at least 4 points, got {k}"
        )));
    }
    let mut c = [0.0; 3];
    for p in points {
        for d in 0..3 {
            c[d] += p[d] / k as f64;
        }
    }
    let project = |p: &Point3, n: &[f64; 3]| -> f64 {
        (p[0] - c[0]) * n[0] + (p[1] - c[1]) * n[1] + (p[2] - c[2]) * n[2]
    };

    let mut normal = [1.0, 0.0, 0.0];
    let mut split = None;
    for _ in 0..CUT_ATTEMPTS {
        normal = random_unit(rng);
        let (left, right): (Vec<usize>, Vec<usize>) = (0..k).partition(|&i| project(&points[i], &normal) < 0.0);
        if !left.is_empty() && !right.is_empty() {
            split = Some((left, right));
            break;
        }
    }
    let (left_members, right_members) = split.unwrap_or_else(|| {
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            project(&points[a], &normal)
                .total_cmp(&project(&points[b], &normal))
                .then(a.cmp(&b))
        });
        let right = order.split_off(k / 2);
        let mut left = order;
        left.sort_unstable();
        let mut right = right;
        right.sort_unstable();
        (left, right)
    });

    let half = k / 2;
    let left = resample(points, &left_members, half, rng);
    let right = resample(points, &right_members, half, rng);
    Ok(HalfCut {
        left,
        right,
        left_members,
        right_members,
    })
}

/// Where the two sides of a pair came from: source (snapshot or anchor)
/// index and view index within that source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairOrigin {
    pub source_a: usize,
    pub view_a: usize,
    pub source_b: usize,
    pub view_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastPair {
    pub a: PointSet,
    pub b: PointSet,
    /// 1 when both sides come from the same source, 0 otherwise.
    pub label: u8,
    pub mode: PretextMode,
    pub origin: PairOrigin,
}

fn other_source<R: Rng + ?Sized>(n: usize, own: usize, rng: &mut R) -> usize {
    let j = rng.random_range(0..n - 1);
    if j >= own {
        j + 1
    } else {
        j
    }
}

fn pick_half<'a, R: Rng + ?Sized>(cut: &'a HalfCut, rng: &mut R) -> &'a [Point3] {
    if rng.random_bool(0.5) {
        &cut.left
    } else {
        &cut.right
    }
}

fn check_sources(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pair generation needs at least 2 sources, got {n}"
        )));
    }
    Ok(())
}

fn check_views(sources: &[Vec<Vec<Point3>>]) -> Result<()> {
    check_sources(sources.len())?;
    if let Some(bad) = sources.iter().position(|v| v.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "source {bad} has {} views; multi-FOV pairs need at least 2",
            sources[bad].len()
        )));
    }
    Ok(())
}

/// Part-contrasting pairs: per snapshot and repetition, its two halves
/// (positive) and one of its halves against a half of another snapshot
/// (negative). The result is shuffled.
pub fn make_part_pairs<R: Rng + ?Sized>(
    snapshots: &[Vec<Point3>],
    pairs_per_snapshot: usize,
    rng: &mut R,
) -> Result<Vec<ContrastPair>> {
    check_sources(snapshots.len())?;
    let mut pairs = Vec::with_capacity(2 * pairs_per_snapshot * snapshots.len());
    for _ in 0..pairs_per_snapshot {
        for (s, points) in snapshots.iter().enumerate() {
            let cut = random_half_cut(points, rng)?;
            pairs.push(ContrastPair {
                a: PointSet::normalized(&cut.left),
                b: PointSet::normalized(&cut.right),
                label: 1,
                mode: PretextMode::Part,
                origin: PairOrigin {
                    source_a: s,
                    view_a: 0,
                    source_b: s,
                    view_b: 0,
                },
            });
            let o = other_source(snapshots.len(), s, rng);
            let other = random_half_cut(&snapshots[o], rng)?;
            pairs.push(ContrastPair {
                a: PointSet::normalized(pick_half(&cut, rng)),
                b: PointSet::normalized(pick_half(&other, rng)),
                label: 0,
                mode: PretextMode::Part,
                origin: PairOrigin {
                    source_a: s,
                    view_a: 0,
                    source_b: o,
                    view_b: 0,
                },
            });
        }
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Two distinct indices below `n`, ascending.
fn distinct_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let j = other_source(n, i, rng);
    (i.min(j), i.max(j))
}

/// Scale-contrasting pairs over whole views. `sources[a][v]` holds the points
/// of view `v` of anchor `a`.
pub fn make_scale_pairs<R: Rng + ?Sized>(
    sources: &[Vec<Vec<Point3>>],
    pairs_per_source: usize,
    rng: &mut R,
) -> Result<Vec<ContrastPair>> {
    check_views(sources)?;
    let mut pairs = Vec::with_capacity(2 * pairs_per_source * sources.len());
    for _ in 0..pairs_per_source {
        for (s, views) in sources.iter().enumerate() {
            let (va, vb) = distinct_pair(views.len(), rng);
            pairs.push(ContrastPair {
                a: PointSet::normalized(&views[va]),
                b: PointSet::normalized(&views[vb]),
                label: 1,
                mode: PretextMode::Scale,
                origin: PairOrigin {
                    source_a: s,
                    view_a: va,
                    source_b: s,
                    view_b: vb,
                },
            });
            let o = other_source(sources.len(), s, rng);
            let va = rng.random_range(0..views.len());
            let vb = rng.random_range(0..sources[o].len());
            pairs.push(ContrastPair {
                a: PointSet::normalized(&views[va]),
                b: PointSet::normalized(&sources[o][vb]),
                label: 0,
                mode: PretextMode::Scale,
                origin: PairOrigin {
                    source_a: s,
                    view_a: va,
                    source_b: o,
                    view_b: vb,
                },
            });
        }
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Multi-FOV contrasting pairs over halves of every view.
///
/// A positive pair is, with equal probability, the two halves of one view or
/// one half from each of two different views of the same anchor.
pub fn make_multifov_pairs<R: Rng + ?Sized>(
    sources: &[Vec<Vec<Point3>>],
    pairs_per_source: usize,
    rng: &mut R,
) -> Result<Vec<ContrastPair>> {
    check_views(sources)?;
    let mut pairs = Vec::with_capacity(2 * pairs_per_source * sources.len());
    for _ in 0..pairs_per_source {
        for (s, views) in sources.iter().enumerate() {
            let cuts = views
                .iter()
                .map(|v| random_half_cut(v, rng))
                .collect::<Result<Vec<_>>>()?;
            let (va, vb, a, b) = if rng.random_bool(0.5) {
                let v = rng.random_range(0..cuts.len());
                (v, v, cuts[v].left.as_slice(), cuts[v].right.as_slice())
            } else {
                let (va, vb) = distinct_pair(cuts.len(), rng);
                (va, vb, pick_half(&cuts[va], rng), pick_half(&cuts[vb], rng))
            };
            pairs.push(ContrastPair {
                a: PointSet::normalized(a),
                b: PointSet::normalized(b),
                label: 1,
                mode: PretextMode::MultiFov,
                origin: PairOrigin {
                    source_a: s,
                    view_a: va,
                    source_b: s,
                    view_b: vb,
                },
            });
            let o = other_source(sources.len(), s, rng);
            let va = rng.random_range(0..cuts.len());
            let vb = rng.random_range(0..sources[o].len());
            let other = random_half_cut(&sources[o][vb], rng)?;
            pairs.push(ContrastPair {
                a: PointSet::normalized(pick_half(&cuts[va], rng)),
                b: PointSet::normalized(pick_half(&other, rng)),
                label: 0,
                mode: PretextMode::MultiFov,
                origin: PairOrigin {
                    source_a: s,
                    view_a: va,
                    source_b: o,
                    view_b: vb,
                },
            });
        }
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Pairs for `mode`. Part contrasting uses the first (smallest-FOV) view of
/// every source.
pub fn make_pairs<R: Rng + ?Sized>(
    mode: PretextMode,
    sources: &[Vec<Vec<Point3>>],
    pairs_per_source: usize,
    rng: &mut R,
) -> Result<Vec<ContrastPair>> {
    match mode {
        PretextMode::Part => {
            let first: Vec<Vec<Point3>> = sources
                .iter()
                .map(|views| views.first().cloned().unwrap_or_default())
                .collect();
            make_part_pairs(&first, pairs_per_source, rng)
        }
        PretextMode::Scale => make_scale_pairs(sources, pairs_per_source, rng),
        PretextMode::MultiFov => make_multifov_pairs(sources, pairs_per_source, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn blob(rng: &mut ChaCha8Rng, n: usize, center: Point3, spread: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                [
                    center[0] + spread * rng.random::<f64>(),
                    center[1] + spread * rng.random::<f64>(),
                    center[2] + spread * rng.random::<f64>(),
                ]
            })
            .collect()
    }

    fn sources(rng: &mut ChaCha8Rng, n: usize, views: usize, k: usize) -> Vec<Vec<Vec<Point3>>> {
        (0..n)
            .map(|a| {
                (0..views)
                    .map(|v| blob(rng, k, [10.0 * a as f64, 0.0, 0.0], (v + 1) as f64))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn normalization_centres_and_scales() {
        let set = PointSet::normalized(&[[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]);
        assert_eq!(set.radius, 1.0);
        assert_eq!(set.points.row(0).to_vec(), vec![-1.0, 0.0, 0.0]);
        assert_eq!(set.points.row(1).to_vec(), vec![1.0, 0.0, 0.0]);
        let input = set.encoder_input(true);
        assert_eq!(input.ncols(), 4);
        assert_eq!(input[[1, 3]], 2f64.ln());
    }

    #[test]
    fn dumbbell_cut_along_axis_separates_lobes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut points = blob(&mut rng, 32, [-10.0, 0.0, 0.0], 1.0);
        points.extend(blob(&mut rng, 32, [10.0, 0.0, 0.0], 1.0));
        // Any plane through the centroid whose normal is mostly along x
        // keeps the lobes apart; check the cut separates whenever it does.
        let mut separated = 0;
        for _ in 0..200 {
            let cut = random_half_cut(&points, &mut rng).unwrap();
            let lobe = |m: &[usize]| m.iter().all(|&i| i < 32) || m.iter().all(|&i| i >= 32);
            if cut.left_members.len() == 32 && lobe(&cut.left_members) {
                assert!(lobe(&cut.right_members));
                separated += 1;
            }
        }
        // Normals within ~84 degrees of x separate this dumbbell; that is most
        // of the sphere.
        assert!(separated > 120, "separated {separated} of 200");
    }

    #[test]
    fn identical_points_fall_back_to_median_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let points = vec![[2.0, 2.0, 2.0]; 4];
        let cut = random_half_cut(&points, &mut rng).unwrap();
        assert_eq!(cut.left, vec![[2.0, 2.0, 2.0]; 2]);
        assert_eq!(cut.right, vec![[2.0, 2.0, 2.0]; 2]);
        assert_eq!(cut.left_members, vec![0, 1]);
        assert_eq!(cut.right_members, vec![2, 3]);
    }

    #[test]
    fn half_sizes_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points = blob(&mut rng, 1024, [0.0; 3], 5.0);
        let cut = random_half_cut(&points, &mut rng).unwrap();
        assert_eq!(cut.left.len(), 512);
        assert_eq!(cut.right.len(), 512);
        let mut all: Vec<usize> = cut.left_members.iter().chain(&cut.right_members).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1024).collect::<Vec<_>>());
        assert!(random_half_cut(&points[..3], &mut rng).is_err());
    }

    #[test]
    fn part_pairs_balance_and_partners() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let snaps: Vec<Vec<Point3>> = (0..2).map(|i| blob(&mut rng, 16, [i as f64 * 5.0, 0.0, 0.0], 1.0)).collect();
        let pairs = make_part_pairs(&snaps, 1, &mut rng).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 2);
        for p in &pairs {
            assert_eq!(p.mode, PretextMode::Part);
            assert_eq!(p.a.len(), 8);
            assert_eq!(p.b.len(), 8);
            assert_eq!(p.label == 1, p.origin.source_a == p.origin.source_b);
        }
        let many = make_part_pairs(&snaps, 5, &mut rng).unwrap();
        let mean = many.iter().map(|p| p.label as f64).sum::<f64>() / many.len() as f64;
        assert_eq!(mean, 0.5);
        assert!(make_part_pairs(&snaps[..1], 1, &mut rng).is_err());
    }

    #[test]
    fn scale_pairs_use_distinct_fovs_and_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = sources(&mut rng, 5, 3, 12);
        let pairs = make_scale_pairs(&src, 20, &mut rng).unwrap();
        let mut fov_pairs = BTreeSet::new();
        for p in &pairs {
            assert_eq!(p.a.len(), 12);
            assert_eq!(p.b.len(), 12);
            if p.label == 1 {
                assert_eq!(p.origin.source_a, p.origin.source_b);
                assert!(p.origin.view_a < p.origin.view_b);
                fov_pairs.insert((p.origin.view_a, p.origin.view_b));
            } else {
                assert_ne!(p.origin.source_a, p.origin.source_b);
            }
        }
        assert_eq!(fov_pairs, BTreeSet::from([(0, 1), (0, 2), (1, 2)]));
    }

    #[test]
    fn multifov_positive_universe() {
        // Enumerate the unordered positive combinations for 3 views with two
        // halves each: 3 same-view pairs plus C(3,2) * 2 * 2 = 12 cross-view.
        let mut universe = BTreeSet::new();
        let halves: Vec<(usize, usize)> = (0..3).flat_map(|v| [(v, 0), (v, 1)]).collect();
        for (i, &x) in halves.iter().enumerate() {
            for &y in &halves[i + 1..] {
                universe.insert((x, y));
            }
        }
        let same = universe.iter().filter(|(x, y)| x.0 == y.0).count();
        assert_eq!(same, 3);
        assert_eq!(universe.len() - same, 12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = sources(&mut rng, 4, 3, 16);
        let pairs = make_multifov_pairs(&src, 50, &mut rng).unwrap();
        let mut seen_views = BTreeSet::new();
        let mut same_view = 0usize;
        let mut positives = 0usize;
        for p in &pairs {
            assert_eq!(p.a.len(), 8);
            assert_eq!(p.b.len(), 8);
            assert_eq!(p.mode, PretextMode::MultiFov);
            if p.label == 1 {
                positives += 1;
                assert_eq!(p.origin.source_a, p.origin.source_b);
                assert!(p.origin.view_a <= p.origin.view_b);
                if p.origin.view_a == p.origin.view_b {
                    same_view += 1;
                }
                seen_views.insert((p.origin.view_a, p.origin.view_b));
            } else {
                assert_ne!(p.origin.source_a, p.origin.source_b);
            }
        }
        assert_eq!(positives * 2, pairs.len());
        assert_eq!(seen_views.len(), 6);
        let frac = same_view as f64 / positives as f64;
        assert!((frac - 0.5).abs() < 0.1, "same-view fraction {frac}");
    }

    #[test]
    fn generation_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = sources(&mut rng, 4, 3, 16);
        for mode in [PretextMode::Part, PretextMode::Scale, PretextMode::MultiFov] {
            let a = make_pairs(mode, &src, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = make_pairs(mode, &src, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|p| p.mode == mode));
        }
        assert_eq!("multi_fov".parse::<PretextMode>().unwrap(), PretextMode::MultiFov);
        assert!("edge".parse::<PretextMode>().is_err());
    }
}
