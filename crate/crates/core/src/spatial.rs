//! Static k-d tree for nearest-neighbor queries over the embedded training set.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<Vec<f64>>,
    /// Implicit balanced tree: the median of each range is its node.
    order: Vec<usize>,
    split: Vec<usize>,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdTree {
    pub fn new(points: Vec<Vec<f64>>) -> Self {
        let dim = points.first().map_or(0, Vec::len);
        assert!(points.iter().all(|p| p.len() == dim), "points must share a dimension");
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut split = vec![0; points.len()];
        Self::build(&points, dim, &mut order, &mut split);
        Self {
            dim,
            points,
            order,
            split,
        }
    }

    fn build(points: &[Vec<f64>], dim: usize, order: &mut [usize], split: &mut [usize]) {
        if order.len() <= 1 || dim == 0 {
            return;
        }
        // split on the axis of largest spread
        let axis = (0..dim)
            .max_by(|&a, &b| {
                let spread = |ax: usize| {
                    let (lo, hi) = order.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        (lo.min(points[i][ax]), hi.max(points[i][ax]))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b)).then(b.cmp(&a))
            })
            .unwrap();
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        split[mid] = axis;
        let (left, right) = order.split_at_mut(mid);
        let (lsplit, rsplit) = split.split_at_mut(mid);
        Self::build(points, dim, left, lsplit);
        Self::build(points, dim, &mut right[1..], &mut rsplit[1..]);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The `r` nearest points as `(distance, index)`, nearest first.
    pub fn knn(&self, query: &[f64], r: usize) -> Vec<(f64, usize)> {
        assert_eq!(query.len(), self.dim, "query dimension");
        let r = r.min(self.points.len());
        if r == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(r + 1);
        self.search(query, r, 0, self.points.len(), &mut heap);
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|c| (c.0.sqrt(), c.1)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn search(&self, q: &[f64], r: usize, lo: usize, hi: usize, heap: &mut BinaryHeap<Candidate>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d = sq_dist(q, p);
        if heap.len() < r {
            heap.push(Candidate(d, idx));
        } else if d < heap.peek().unwrap().0 {
            heap.pop();
            heap.push(Candidate(d, idx));
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.split[mid];
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, r, near.0, near.1, heap);
        if heap.len() < r || diff * diff < heap.peek().unwrap().0 {
            self.search(q, r, far.0, far.1, heap);
        }
    }
}
