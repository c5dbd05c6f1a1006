use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

/// Static 3-d tree over a point slice. Query results are exact and ordered by
/// `(distance², index)`, so ties resolve to the lower index.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// original index of each stored point
    ids: Vec<usize>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

#[derive(Debug, Clone)]
struct Node {
    /// position in `points`/`ids`
    item: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        Self::with_ids(points.iter().copied().enumerate().collect())
    }

    /// Builds over the rows of `points` whose `mask` entry is true; results
    /// report indices into the original slice.
    pub fn masked(points: &[Vector3<f64>], mask: &[bool]) -> Self {
        Self::with_ids(
            points
                .iter()
                .zip(mask)
                .enumerate()
                .filter(|(_, (_, &m))| m)
                .map(|(i, (p, _))| (i, *p))
                .collect(),
        )
    }

    fn with_ids(items: Vec<(usize, Vector3<f64>)>) -> Self {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut tree = KdTree {
            points: items.iter().map(|(_, p)| *p).collect(),
            ids: items.iter().map(|(i, _)| *i).collect(),
            nodes: Vec::with_capacity(items.len()),
            root: None,
        };
        tree.root = tree.build(&mut order);
        tree
    }

    fn build(&mut self, order: &mut [usize]) -> Option<usize> {
        if order.is_empty() {
            return None;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in order.iter() {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = order.len() / 2;
        let pts = &self.points;
        order.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let item = order[mid];
        let (left_items, rest) = order.split_at_mut(mid);
        let right_items = &mut rest[1..];
        let node = self.nodes.len();
        self.nodes.push(Node {
            item,
            axis,
            left: None,
            right: None,
        });
        let left = self.build(left_items);
        let right = self.build(right_items);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest stored points to `query` as `(index, distance²)`.
    /// `exclude` removes one original index from consideration (the query
    /// itself, typically).
    pub fn knn(&self, query: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            if let Some(root) = self.root {
                self.knn_rec(root, query, k, exclude, &mut heap);
            }
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.id, c.dist2)).collect()
    }

    fn knn_rec(
        &self,
        node: usize,
        q: &Vector3<f64>,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        let n = &self.nodes[node];
        let p = &self.points[n.item];
        let id = self.ids[n.item];
        if Some(id) != exclude {
            let c = Candidate {
                dist2: (p - q).norm_squared(),
                id,
            };
            if heap.len() < k {
                heap.push(c);
            } else if c < *heap.peek().unwrap() {
                heap.pop();
                heap.push(c);
            }
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.knn_rec(c, q, k, exclude, heap);
        }
        if let Some(c) = far {
            if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
                self.knn_rec(c, q, k, exclude, heap);
            }
        }
    }

    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(usize, f64)> {
        self.knn(query, 1, None).into_iter().next()
    }

    /// All stored points within `radius` of `query`, sorted by distance.
    pub fn radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if let Some(root) = self.root {
            self.radius_rec(root, query, radius * radius, &mut out);
        }
        out.sort();
        out.into_iter().map(|c| (c.id, c.dist2)).collect()
    }

    fn radius_rec(&self, node: usize, q: &Vector3<f64>, r2: f64, out: &mut Vec<Candidate>) {
        let n = &self.nodes[node];
        let p = &self.points[n.item];
        let d2 = (p - q).norm_squared();
        if d2 <= r2 {
            out.push(Candidate {
                dist2: d2,
                id: self.ids[n.item],
            });
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.radius_rec(c, q, r2, out);
        }
        if let Some(c) = far {
            if diff * diff <= r2 {
                self.radius_rec(c, q, r2, out);
            }
        }
    }
}
