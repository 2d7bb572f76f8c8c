//! Exact k-d tree over 3D points for nearest-neighbor and fixed-radius
//! queries. Used by the evaluation metric (which requires exact nearest
//! neighbors) and by Euclidean clustering.

use crate::math::Point3;

struct Node {
    /// index into `points`
    point: usize,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

pub struct KdTree {
    points: Vec<Point3>,
    root: Option<Box<Node>>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let pts = points.to_vec();
        let root = Self::build_rec(&pts, &mut idx, 0);
        KdTree { points: pts, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_rec(points: &[Point3], idx: &mut [usize], depth: usize) -> Option<Box<Node>> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a]
                .component(axis)
                .partial_cmp(&points[b].component(axis))
                .unwrap()
        });
        let point = idx[mid];
        let (left, rest) = idx.split_at_mut(mid);
        let right = &mut rest[1..];
        Some(Box::new(Node {
            point,
            axis,
            left: Self::build_rec(points, left, depth + 1),
            right: Self::build_rec(points, right, depth + 1),
        }))
    }

    /// Index and distance of the nearest point to `q`.
    pub fn nearest(&self, q: Point3) -> Option<(usize, f64)> {
        let root = self.root.as_ref()?;
        let mut best = (root.point, f64::INFINITY);
        self.nearest_rec(root, q, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn nearest_rec(&self, node: &Node, q: Point3, best: &mut (usize, f64)) {
        let d2 = self.points[node.point].dist_sq(q);
        if d2 < best.1 {
            *best = (node.point, d2);
        }
        let delta = q.component(node.axis) - self.points[node.point].component(node.axis);
        let (near, far) = if delta < 0.0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            self.nearest_rec(n, q, best);
        }
        if delta * delta < best.1 {
            if let Some(f) = far {
                self.nearest_rec(f, q, best);
            }
        }
    }

    /// Nearest point to `q` skipping the point stored at index `skip`.
    pub fn nearest_excluding(&self, q: Point3, skip: usize) -> Option<(usize, f64)> {
        let root = self.root.as_ref()?;
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_excl_rec(root, q, skip, &mut best);
        if best.0 == usize::MAX {
            None
        } else {
            Some((best.0, best.1.sqrt()))
        }
    }

    fn nearest_excl_rec(&self, node: &Node, q: Point3, skip: usize, best: &mut (usize, f64)) {
        if node.point != skip {
            let d2 = self.points[node.point].dist_sq(q);
            if d2 < best.1 {
                *best = (node.point, d2);
            }
        }
        let delta = q.component(node.axis) - self.points[node.point].component(node.axis);
        let (near, far) = if delta < 0.0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            self.nearest_excl_rec(n, q, skip, best);
        }
        if delta * delta < best.1 {
            if let Some(f) = far {
                self.nearest_excl_rec(f, q, skip, best);
            }
        }
    }

    /// Indices of all points within `radius` of `q` (inclusive).
    pub fn within_radius(&self, q: Point3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(root) = &self.root {
            self.radius_rec(root, q, radius, radius * radius, &mut out);
        }
        out
    }

    fn radius_rec(&self, node: &Node, q: Point3, r: f64, r2: f64, out: &mut Vec<usize>) {
        if self.points[node.point].dist_sq(q) <= r2 {
            out.push(node.point);
        }
        let delta = q.component(node.axis) - self.points[node.point].component(node.axis);
        if delta - r <= 0.0 {
            if let Some(l) = &node.left {
                self.radius_rec(l, q, r, r2, out);
            }
        }
        if delta + r >= 0.0 {
            if let Some(rr) = &node.right {
                self.radius_rec(rr, q, r, r2, out);
            }
        }
    }
}

/// Median nearest-neighbor distance of a point set (excluding self).
pub fn median_nn_distance(points: &[Point3]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let tree = KdTree::build(points);
    let mut dists: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| tree.nearest_excluding(*p, i).map(|(_, d)| d).unwrap_or(0.0))
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}
