//! Static kd-tree over scene positions with exact k-nearest-neighbour search.
//!
//! Results are ordered by `(distance, point index)`, so equidistant points are
//! always reported in ascending index order and every query is reproducible.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scene_io::{Point3, PointCloud};

#[derive(Debug, Clone)]
struct Node {
    lo: Point3,
    hi: Point3,
    start: u32,
    end: u32,
    /// Child node ids; `u32::MAX` for leaves.
    left: u32,
    right: u32,
    axis: u8,
    split: f64,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.left == u32::MAX
    }

    fn min_dist2(&self, q: &Point3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let d = if q[a] < self.lo[a] {
                self.lo[a] - q[a]
            } else if q[a] > self.hi[a] {
                q[a] - self.hi[a]
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }
}

#[inline]
pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// A neighbour returned by [`KdTree::knn`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Immutable kd-tree. Points are stored in leaf order alongside their
/// original indices.
#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    points: Vec<Point3>,
    indices: Vec<u32>,
}

impl KdTree {
    pub fn build(cloud: &PointCloud, leaf_size: usize) -> Result<Self> {
        Self::from_points(cloud.positions(), leaf_size)
    }

    /// Median split on the axis of widest extent, recursing until a node holds
    /// at most `leaf_size` points.
    pub fn from_points(positions: &[Point3], leaf_size: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty cloud".into()));
        }
        if leaf_size == 0 {
            return Err(Error::InvalidArgument("leaf_size must be at least 1".into()));
        }
        if positions.len() >= u32::MAX as usize {
            return Err(Error::InvalidArgument("too many points for a u32 index".into()));
        }
        let mut indices: Vec<u32> = (0..positions.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * positions.len() / leaf_size + 1);
        build_node(positions, &mut indices, 0, leaf_size, &mut nodes);
        let points = indices.iter().map(|&i| positions[i as usize]).collect();
        Ok(Self {
            nodes,
            points,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of node levels; a single leaf has depth 1.
    pub fn depth(&self) -> usize {
        fn rec(nodes: &[Node], id: usize) -> usize {
            let n = &nodes[id];
            if n.is_leaf() {
                1
            } else {
                1 + rec(nodes, n.left as usize).max(rec(nodes, n.right as usize))
            }
        }
        rec(&self.nodes, 0)
    }

    /// Original point indices held by each leaf, left to right.
    pub fn leaf_index_sets(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| {
                self.indices[n.start as usize..n.end as usize]
                    .iter()
                    .map(|&i| i as usize)
                    .collect()
            })
            .collect()
    }

    /// Split axes of the internal nodes in construction order.
    pub fn split_axes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| !n.is_leaf())
            .map(|n| n.axis as usize)
            .collect()
    }

    /// Checks the partition invariant of every internal node.
    pub fn validate(&self) -> Result<()> {
        for (id, n) in self.nodes.iter().enumerate() {
            if n.is_leaf() {
                continue;
            }
            let axis = n.axis as usize;
            let (l, r) = (&self.nodes[n.left as usize], &self.nodes[n.right as usize]);
            let left_ok = self.points[l.start as usize..l.end as usize]
                .iter()
                .all(|p| p[axis] <= n.split);
            let right_ok = self.points[r.start as usize..r.end as usize]
                .iter()
                .all(|p| p[axis] >= n.split);
            if !left_ok || !right_ok || l.start != n.start || r.end != n.end || l.end != r.start {
                return Err(Error::Structural(format!("kd-tree node {id} violates its split")));
            }
        }
        Ok(())
    }

    /// The `k` nearest points to `query`, nearest first.
    pub fn knn(&self, query: &Point3, k: usize) -> Result<Vec<Neighbor>> {
        let mut out = Vec::with_capacity(k);
        self.knn_into(query, k, &mut out)?;
        Ok(out)
    }

    /// As [`KdTree::knn`], reusing `out`.
    pub fn knn_into(&self, query: &Point3, k: usize, out: &mut Vec<Neighbor>) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} must lie in [1, {}]",
                self.len()
            )));
        }
        if query.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("kNN query".into()));
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let sorted = heap.into_sorted_vec();
        out.clear();
        out.extend(sorted.into_iter().map(|c| Neighbor {
            index: c.index as usize,
            distance: c.d2.sqrt(),
        }));
        Ok(())
    }

    /// Indices of the `k` nearest points, nearest first.
    pub fn knn_indices(&self, query: &Point3, k: usize) -> Result<Vec<usize>> {
        Ok(self.knn(query, k)?.into_iter().map(|n| n.index).collect())
    }

    fn search(&self, id: usize, q: &Point3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let node = &self.nodes[id];
        if node.is_leaf() {
            for slot in node.start as usize..node.end as usize {
                let c = Candidate {
                    d2: dist2(q, &self.points[slot]),
                    index: self.indices[slot],
                };
                if heap.len() < k {
                    heap.push(c);
                } else if c < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(c);
                }
            }
            return;
        }
        let (near, far) = if q[node.axis as usize] <= node.split {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        for child in [near, far] {
            let c = &self.nodes[child as usize];
            // Equal distance must still be visited: a farther node may hold a
            // tied point with a smaller index.
            if heap.len() == k && c.min_dist2(q) > heap.peek().unwrap().d2 {
                continue;
            }
            self.search(child as usize, q, k, heap);
        }
    }
}

fn build_node(
    positions: &[Point3],
    indices: &mut [u32],
    offset: usize,
    leaf_size: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in indices.iter() {
        let p = positions[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let id = nodes.len();
    nodes.push(Node {
        lo,
        hi,
        start: offset as u32,
        end: (offset + indices.len()) as u32,
        left: u32::MAX,
        right: u32::MAX,
        axis: 0,
        split: 0.0,
    });
    if indices.len() <= leaf_size {
        return id as u32;
    }

    let mut axis = 0;
    for a in 1..3 {
        if hi[a] - lo[a] > hi[axis] - lo[axis] {
            axis = a;
        }
    }
    let mid = indices.len() / 2;
    indices.select_nth_unstable_by(mid, |&a, &b| {
        positions[a as usize][axis]
            .total_cmp(&positions[b as usize][axis])
            .then(a.cmp(&b))
    });
    let split = positions[indices[mid] as usize][axis];
    let (left_ix, right_ix) = indices.split_at_mut(mid);
    let left = build_node(positions, left_ix, offset, leaf_size, nodes);
    let right = build_node(positions, right_ix, offset + mid, leaf_size, nodes);
    let node = &mut nodes[id];
    node.left = left;
    node.right = right;
    node.axis = axis as u8;
    node.split = split;
    id as u32
}

/// Uniformly random anchor index in `[0, n)`.
pub fn random_anchor<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    assert!(n >= 1, "random_anchor needs at least one point");
    rng.random_range(0..n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(points: &[Point3], q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], i)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    #[test]
    fn single_point_is_one_leaf() {
        let tree = KdTree::from_points(&[[1.0, 2.0, 3.0]], 4).unwrap();
        assert_eq!(tree.depth(), 1);
        assert_eq!(tree.leaf_index_sets(), vec![vec![0]]);
    }

    #[test]
    fn collinear_points_split_on_line_axis() {
        let pts: Vec<Point3> = (0..8).map(|i| [0.0, i as f64, 0.0]).collect();
        let tree = KdTree::from_points(&pts, 2).unwrap();
        assert_eq!(tree.depth(), 3);
        assert!(tree.split_axes().iter().all(|&a| a == 1));
        let mut leaves = tree.leaf_index_sets();
        for l in &mut leaves {
            l.sort();
        }
        assert_eq!(leaves, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
        tree.validate().unwrap();
    }

    #[test]
    fn duplicates_are_all_indexed() {
        let pts = vec![[1.0, 1.0, 1.0]; 5];
        let tree = KdTree::from_points(&pts, 1).unwrap();
        let mut all: Vec<usize> = tree.leaf_index_sets().concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        let nn = tree.knn_indices(&[1.0, 1.0, 1.0], 3).unwrap();
        assert_eq!(nn, vec![0, 1, 2]);
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(KdTree::from_points(&[], 4).is_err());
    }

    #[test]
    fn self_query() {
        let pts: Vec<Point3> = (0..20).map(|i| [i as f64 * 0.3, (i % 3) as f64, 0.0]).collect();
        let tree = KdTree::from_points(&pts, 3).unwrap();
        let nn = tree.knn(&pts[7], 1).unwrap();
        assert_eq!(nn, vec![Neighbor { index: 7, distance: 0.0 }]);
    }

    #[test]
    fn grid_center_neighbours() {
        let mut pts = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                pts.push([x as f64, y as f64, 0.0]);
            }
        }
        let tree = KdTree::from_points(&pts, 2).unwrap();
        let nn = tree.knn(&[1.0, 1.0, 0.0], 5).unwrap();
        let expected: Vec<(usize, f64)> = brute_force(&pts, &[1.0, 1.0, 0.0], 5);
        assert_eq!(expected.iter().map(|e| e.0).collect::<Vec<_>>(), vec![4, 1, 3, 5, 7]);
        for (n, e) in nn.iter().zip(&expected) {
            assert_eq!((n.index, n.distance), *e);
        }
    }

    #[test]
    fn k_equals_n_returns_everything() {
        let pts: Vec<Point3> = (0..13).map(|i| [(i * 7 % 13) as f64, 0.5, -1.0]).collect();
        let tree = KdTree::from_points(&pts, 2).unwrap();
        let nn = tree.knn(&[0.0, 0.0, 0.0], 13).unwrap();
        let mut idx: Vec<usize> = nn.iter().map(|n| n.index).collect();
        assert!(nn.windows(2).all(|w| w[0].distance <= w[1].distance));
        idx.sort();
        assert_eq!(idx, (0..13).collect::<Vec<_>>());
        assert!(tree.knn(&[0.0; 3], 14).is_err());
        assert!(tree.knn(&[0.0; 3], 0).is_err());
    }

    #[test]
    fn random_anchor_single_choice_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| random_anchor(&mut rng, 1) == 0));
        let a: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..50).map(|_| random_anchor(&mut r, 1000)).collect()
        };
        let b: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..50).map(|_| random_anchor(&mut r, 1000)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn random_anchor_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[random_anchor(&mut rng, 4)] += 1;
        }
        // Binomial(100k, 1/4): sigma = sqrt(n p (1 - p)).
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 25_000.0).abs() < 4.0 * sigma, "{counts:?}");
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - 25_000.0).powi(2) / 25_000.0)
            .sum();
        // 3 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn knn_matches_brute_force(
            pts in prop::collection::vec(
                prop::array::uniform3(-10.0f64..10.0), 1..300),
            q in prop::array::uniform3(-12.0f64..12.0),
            k_seed in 0usize..1000,
            leaf in 1usize..12,
        ) {
            // Snap some coordinates to a coarse grid to provoke ties.
            let pts: Vec<Point3> = pts.iter().enumerate().map(|(i, p)| {
                if i % 3 == 0 { [p[0].round(), p[1].round(), p[2].round()] } else { *p }
            }).collect();
            let k = 1 + k_seed % pts.len();
            let tree = KdTree::from_points(&pts, leaf).unwrap();
            tree.validate().unwrap();
            let got: Vec<(usize, f64)> =
                tree.knn(&q, k).unwrap().iter().map(|n| (n.index, n.distance)).collect();
            prop_assert_eq!(got, brute_force(&pts, &q, k));
        }
    }
}
