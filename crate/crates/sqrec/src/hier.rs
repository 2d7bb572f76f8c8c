//! Hierarchical multi-superquadric recovery.
//!
//! A single fit explains one primitive; the points it rejects are clustered
//! by Euclidean distance and each sufficiently large cluster is fitted in
//! the next layer. The result is a structure graph whose edges connect every
//! child fit to the fit whose outliers spawned it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ems::{self, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::geometry::Superquadric;
use crate::math::Point3;
use crate::spatial::{median_nn_distance, KdTree};

/// Clustering radius: a fixed value or data-derived.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClusterRadius {
    /// 2.5 x the median nearest-neighbor distance of the full cloud.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HierConfig {
    pub max_layers: usize,
    pub prune_min_points: usize,
    /// Posterior inlier probability below which a point counts as unfitted.
    pub z_threshold: f64,
    pub cluster_radius: ClusterRadius,
    pub fit: FitConfig,
}

impl Default for HierConfig {
    fn default() -> Self {
        HierConfig {
            max_layers: 3,
            prune_min_points: 60,
            z_threshold: 0.5,
            cluster_radius: ClusterRadius::Auto,
            fit: FitConfig::default(),
        }
    }
}

impl HierConfig {
    pub fn resolve_radius(&self, cloud: &PointCloud) -> f64 {
        match self.cluster_radius {
            ClusterRadius::Fixed(r) => r,
            ClusterRadius::Auto => 2.5 * median_nn_distance(&cloud.points),
        }
    }
}

/// One recovered primitive in the hierarchy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphNode {
    pub superquadric: Superquadric,
    /// 1-based layer index.
    pub layer: usize,
    /// Index of the cluster (within its layer) this node was fitted to.
    pub source_cluster: usize,
    /// Indices into the original cloud claimed by this fit (its inliers).
    pub point_indices: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StructureGraph {
    pub nodes: Vec<GraphNode>,
    /// (parent node index, child node index) pairs.
    pub edges: Vec<(usize, usize)>,
}

impl StructureGraph {
    pub fn children(&self, node: usize) -> Vec<usize> {
        self.edges.iter().filter(|(p, _)| *p == node).map(|(_, c)| *c).collect()
    }
}

/// Split a cloud's indices into (inliers, outliers) by posterior weight.
pub fn classify_outliers(
    result: &FitResult,
    cloud: &PointCloud,
    cfg: &HierConfig,
) -> (Vec<usize>, Vec<usize>) {
    debug_assert_eq!(result.z_hat.len(), cloud.len());
    let mut inliers = Vec::new();
    let mut outliers = Vec::new();
    for (i, &z) in result.z_hat.iter().enumerate() {
        if z < cfg.z_threshold {
            outliers.push(i);
        } else {
            inliers.push(i);
        }
    }
    (inliers, outliers)
}

/// Single-linkage connected components of the radius graph. Clusters are
/// ordered by size descending, ties broken by smallest contained index;
/// indices within a cluster are ascending.
pub fn euclidean_cluster(points: &[Point3], radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let tree = KdTree::build(points);
    let mut visited = vec![false; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        stack.push(seed);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in tree.within_radius(points[i], radius) {
                if !visited[j] {
                    visited[j] = true;
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    clusters
}

/// One layer of the hierarchy: fit every cluster, classify its outliers,
/// cluster them and keep the children that survive pruning. Failed fits are
/// recorded as `None` and contribute no children.
pub fn recover_layer(
    clusters: &[PointCloud],
    cfg: &HierConfig,
) -> (Vec<Option<FitResult>>, Vec<PointCloud>) {
    let fits: Vec<Option<FitResult>> = clusters
        .par_iter()
        .map(|c| ems::ems_fit(c, &cfg.fit).ok())
        .collect();
    let mut children = Vec::new();
    for (cloud, fit) in clusters.iter().zip(&fits) {
        let fit = match fit {
            Some(f) => f,
            None => continue,
        };
        let (_, outliers) = classify_outliers(fit, cloud, cfg);
        if outliers.is_empty() {
            continue;
        }
        let pts: Vec<Point3> = outliers.iter().map(|&i| cloud.points[i]).collect();
        let radius = cfg.resolve_radius(cloud);
        for cluster in euclidean_cluster(&pts, radius) {
            if cluster.len() >= cfg.prune_min_points {
                let child: Vec<Point3> = cluster.iter().map(|&i| pts[i]).collect();
                children.push(PointCloud::new(child).expect("non-empty cluster"));
            }
        }
    }
    (fits, children)
}

/// Full hierarchical recovery of a single cloud.
pub fn recover_hierarchy(cloud: &PointCloud, cfg: &HierConfig) -> Result<StructureGraph> {
    if cloud.len() < cfg.prune_min_points {
        return Err(Error::InsufficientPoints {
            got: cloud.len(),
            need: cfg.prune_min_points,
        });
    }
    let radius = cfg.resolve_radius(cloud);
    let mut graph = StructureGraph::default();
    // (global indices, parent node) clusters awaiting a fit in this layer
    let mut pending: Vec<(Vec<usize>, Option<usize>)> =
        vec![((0..cloud.len()).collect(), None)];

    for layer in 1..=cfg.max_layers {
        if pending.is_empty() {
            break;
        }
        let batch = std::mem::take(&mut pending);
        let fits: Vec<Option<FitResult>> = batch
            .par_iter()
            .map(|(indices, _)| {
                let pts: Vec<Point3> = indices.iter().map(|&i| cloud.points[i]).collect();
                let sub = PointCloud::new(pts).expect("non-empty cluster");
                ems::ems_fit(&sub, &cfg.fit).ok()
            })
            .collect();
        for (cluster_id, ((indices, parent), fit)) in
            batch.into_iter().zip(fits).enumerate()
        {
            let fit = match fit {
                Some(f) => f,
                None if layer == 1 => {
                    return Err(Error::FitFailure(format!(
                        "root fit failed on {} points",
                        indices.len()
                    )))
                }
                None => continue,
            };
            // split the cluster by posterior weight against the new fit
            let mut inliers = Vec::new();
            let mut outliers = Vec::new();
            for (local, &global) in indices.iter().enumerate() {
                if fit.z_hat[local] < cfg.z_threshold {
                    outliers.push(global);
                } else {
                    inliers.push(global);
                }
            }
            let node_id = graph.nodes.len();
            graph.nodes.push(GraphNode {
                superquadric: fit.superquadric,
                layer,
                source_cluster: cluster_id,
                point_indices: inliers,
            });
            if let Some(p) = parent {
                graph.edges.push((p, node_id));
            }
            if layer == cfg.max_layers || outliers.is_empty() {
                continue;
            }
            let pts: Vec<Point3> = outliers.iter().map(|&i| cloud.points[i]).collect();
            for cluster in euclidean_cluster(&pts, radius) {
                if cluster.len() >= cfg.prune_min_points {
                    let global: Vec<usize> =
                        cluster.iter().map(|&i| outliers[i]).collect();
                    pending.push((global, Some(node_id)));
                }
            }
        }
    }
    Ok(graph)
}

/// Label every point with the node whose surface is nearest under the
/// radial-projection distance; ties go to the smaller node index.
pub fn segment_points(graph: &StructureGraph, cloud: &PointCloud) -> Vec<usize> {
    assert!(!graph.nodes.is_empty(), "segment_points needs a non-empty graph");
    cloud
        .points
        .iter()
        .map(|&p| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, node) in graph.nodes.iter().enumerate() {
                let d = node.superquadric.radial_distance(p);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_surface_equidistant;
    use crate::math::{Pose, Quat, Vec3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn surface_cloud(sq: &Superquadric, spacing: f64) -> PointCloud {
        PointCloud::new(sample_surface_equidistant(sq, spacing).unwrap().points).unwrap()
    }

    fn brute_force_components(points: &[Point3], radius: f64) -> Vec<Vec<usize>> {
        let n = points.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if points[i].dist(points[j]) <= radius {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        for g in &mut out {
            g.sort_unstable();
        }
        out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        out
    }

    #[test]
    fn cluster_two_blobs() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(Point3::new(0.01 * i as f64, 0.0, 0.0));
        }
        for i in 0..5 {
            pts.push(Point3::new(10.0 + 0.01 * i as f64, 0.0, 0.0));
        }
        let clusters = euclidean_cluster(&pts, 0.1);
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].len(), 10);
        assert_eq!(clusters[1].len(), 5);
        assert_eq!(clusters[0][0], 0);
        assert_eq!(clusters[1][0], 10);
    }

    #[test]
    fn cluster_chain_is_one() {
        let pts: Vec<Point3> =
            (0..50).map(|i| Point3::new(0.09 * i as f64, 0.0, 0.0)).collect();
        let clusters = euclidean_cluster(&pts, 0.1);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].len(), 50);
    }

    #[test]
    fn cluster_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 50 + (trial * 17) % 150;
            let pts: Vec<Point3> = (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let radius = rng.gen_range(0.05..0.5);
            assert_eq!(
                euclidean_cluster(&pts, radius),
                brute_force_components(&pts, radius),
                "trial {trial} n {n} radius {radius}"
            );
        }
    }

    #[test]
    fn cluster_ordering_ties_by_smallest_index() {
        // two singletons: same size, ordering must follow the lowest index
        let pts = vec![
            Point3::new(5.0, 0.0, 0.0),
            Point3::new(0.0, 0.0, 0.0),
        ];
        let clusters = euclidean_cluster(&pts, 0.1);
        assert_eq!(clusters, vec![vec![0], vec![1]]);
    }

    fn compound(cap_points_target: usize) -> (PointCloud, usize) {
        // ellipsoid body with a small spherical cap sitting past its +z end
        let body = Superquadric::new(1.0, 1.0, 1.0, 1.0, 2.0, Pose::IDENTITY).unwrap();
        let mut pts = surface_cloud(&body, 0.15).points;
        let body_n = pts.len();
        let cap = Superquadric::new(
            1.0,
            1.0,
            0.35,
            0.35,
            0.35,
            Pose::new(Quat::IDENTITY, Vec3::new(0.0, 0.0, 2.55)),
        )
        .unwrap();
        // pick a spacing that lands near the requested cap size
        let mut spacing = 0.07;
        let mut cap_pts = sample_surface_equidistant(&cap, spacing).unwrap().points;
        while cap_pts.len() < cap_points_target {
            spacing *= 0.9;
            cap_pts = sample_surface_equidistant(&cap, spacing).unwrap().points;
        }
        while cap_pts.len() > cap_points_target {
            cap_pts.pop();
        }
        pts.extend(cap_pts);
        (PointCloud::new(pts).unwrap(), body_n)
    }

    #[test]
    fn hierarchy_two_part_compound() {
        let (cloud, body_n) = compound(220);
        let cfg = HierConfig::default();
        let graph = recover_hierarchy(&cloud, &cfg).unwrap();
        assert_eq!(graph.nodes.len(), 2, "expected body + cap nodes");
        assert_eq!(graph.edges, vec![(0, 1)]);
        assert_eq!(graph.nodes[0].layer, 1);
        assert_eq!(graph.nodes[1].layer, 2);

        let labels = segment_points(&graph, &cloud);
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| if *i < body_n { l == 0 } else { l == 1 })
            .count();
        let accuracy = correct as f64 / cloud.len() as f64;
        assert!(accuracy >= 0.95, "segmentation accuracy {accuracy}");
    }

    #[test]
    fn hierarchy_prunes_small_cap() {
        let (cloud, _) = compound(30);
        let cfg = HierConfig::default();
        let graph = recover_hierarchy(&cloud, &cfg).unwrap();
        assert_eq!(graph.nodes.len(), 1, "30-point cap must be pruned");
        assert!(graph.edges.is_empty());
    }

    #[test]
    fn hierarchy_single_primitive() {
        let sq = Superquadric::new(1.0, 1.0, 1.0, 0.8, 0.6, Pose::IDENTITY).unwrap();
        let cloud = surface_cloud(&sq, 0.1);
        let graph = recover_hierarchy(&cloud, &HierConfig::default()).unwrap();
        assert_eq!(graph.nodes.len(), 1);
        assert!(graph.edges.is_empty());
        let labels = segment_points(&graph, &cloud);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn hierarchy_max_layers_one() {
        let (cloud, _) = compound(220);
        let cfg = HierConfig { max_layers: 1, ..HierConfig::default() };
        let graph = recover_hierarchy(&cloud, &cfg).unwrap();
        assert_eq!(graph.nodes.len(), 1);
    }

    #[test]
    fn classify_threshold_zero_keeps_everything() {
        let sq = Superquadric::unit_sphere();
        let cloud = surface_cloud(&sq, 0.15);
        let fit = ems::ems_fit(&cloud, &FitConfig::default()).unwrap();
        let cfg = HierConfig { z_threshold: 0.0, ..HierConfig::default() };
        let (inliers, outliers) = classify_outliers(&fit, &cloud, &cfg);
        assert_eq!(inliers.len(), cloud.len());
        assert!(outliers.is_empty());
    }

    #[test]
    fn classify_clean_surface_no_outliers() {
        let sq = Superquadric::new(0.8, 1.2, 1.0, 0.7, 1.4, Pose::IDENTITY).unwrap();
        let cloud = surface_cloud(&sq, 0.12);
        let fit = ems::ems_fit(&cloud, &FitConfig::default()).unwrap();
        let cfg = HierConfig::default();
        let (inliers, outliers) = classify_outliers(&fit, &cloud, &cfg);
        assert_eq!(inliers.len() + outliers.len(), cloud.len());
        assert!(
            outliers.len() <= cloud.len() / 100,
            "{} of {} rejected",
            outliers.len(),
            cloud.len()
        );
    }

    #[test]
    fn recover_layer_single_cloud() {
        let sq = Superquadric::unit_sphere();
        let cloud = surface_cloud(&sq, 0.15);
        let cfg = HierConfig::default();
        let (fits, children) = recover_layer(&[cloud], &cfg);
        assert_eq!(fits.len(), 1);
        assert!(fits[0].is_some());
        assert!(children.is_empty());
    }

    #[test]
    fn hierarchy_point_bookkeeping() {
        let (cloud, _) = compound(220);
        let cfg = HierConfig::default();
        let graph = recover_hierarchy(&cloud, &cfg).unwrap();
        let mut seen = vec![0usize; cloud.len()];
        for node in &graph.nodes {
            for &i in &node.point_indices {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c <= 1), "a point was claimed twice");
        assert!(graph.nodes.len() <= cloud.len() / cfg.prune_min_points);
    }
}
