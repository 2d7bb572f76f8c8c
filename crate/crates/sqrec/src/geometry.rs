//! Superquadric geometry: implicit function, radial projection, surface
//! area (exact quadrature and a fast bilinear approximation), and
//! equal-arc-length surface sampling.
//!
//! The implicit function of a superquadric with shape exponents
//! `(eps1, eps2)` and scales `(ax, ay, az)` is
//!
//! ```text
//! F(x, y, z) = (|x/ax|^(2/eps2) + |y/ay|^(2/eps2))^(eps2/eps1) + |z/az|^(2/eps1)
//! ```
//!
//! with `F < 1` inside, `= 1` on the surface and `> 1` outside. All
//! exponent evaluations go through a guarded log-space path so that
//! exponents as extreme as `2/0.007` stay finite in double precision.

use crate::error::{Error, Result};
use crate::math::{Point3, Pose, Vec3};
use serde::{Deserialize, Serialize};

/// Lower clamp applied to the shape exponents inside evaluations.
pub const EPS_FLOOR: f64 = 0.007;
/// Upper bound of the convex shape vocabulary.
pub const EPS_CEIL: f64 = 2.0;
/// Coordinate magnitude floor used before taking logarithms.
const COORD_FLOOR: f64 = 1e-12;

/// A superquadric: shape exponents, per-axis scales and a rigid pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Superquadric {
    pub eps1: f64,
    pub eps2: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub pose: Pose,
}

impl Superquadric {
    pub fn new(eps1: f64, eps2: f64, ax: f64, ay: f64, az: f64, pose: Pose) -> Result<Self> {
        if !(eps1 > 0.0 && eps1 <= EPS_CEIL && eps2 > 0.0 && eps2 <= EPS_CEIL) {
            return Err(Error::InvalidParam(format!(
                "shape exponents must lie in (0, 2], got ({eps1}, {eps2})"
            )));
        }
        if !(ax > 0.0 && ay > 0.0 && az > 0.0) {
            return Err(Error::InvalidParam(format!(
                "scales must be positive, got ({ax}, {ay}, {az})"
            )));
        }
        Ok(Superquadric { eps1, eps2, ax, ay, az, pose })
    }

    pub fn unit_sphere() -> Self {
        Superquadric { eps1: 1.0, eps2: 1.0, ax: 1.0, ay: 1.0, az: 1.0, pose: Pose::IDENTITY }
    }

    fn e1(&self) -> f64 {
        self.eps1.max(EPS_FLOOR)
    }

    fn e2(&self) -> f64 {
        self.eps2.max(EPS_FLOOR)
    }

    /// `ln F(p)` for a point in the local frame.
    pub fn implicit_log_value(&self, p: Point3) -> f64 {
        let e1 = self.e1();
        let e2 = self.e2();
        let lx = (2.0 / e2) * (p.x / self.ax).abs().max(COORD_FLOOR).ln();
        let ly = (2.0 / e2) * (p.y / self.ay).abs().max(COORD_FLOOR).ln();
        let lz = (2.0 / e1) * (p.z / self.az).abs().max(COORD_FLOOR).ln();
        let lxy = log_add_exp(lx, ly) * (e2 / e1);
        log_add_exp(lxy, lz)
    }

    /// The inside-outside function `F(p)` for a point in the local frame.
    pub fn implicit_value(&self, p: Point3) -> f64 {
        self.implicit_log_value(p).exp()
    }

    /// Gradient of `F` in the local frame; sign(0) is taken as 0.
    pub fn implicit_gradient(&self, p: Point3) -> Vec3 {
        let e1 = self.e1();
        let e2 = self.e2();
        let ux = (p.x / self.ax).abs().max(COORD_FLOOR);
        let uy = (p.y / self.ay).abs().max(COORD_FLOOR);
        let uz = (p.z / self.az).abs().max(COORD_FLOOR);
        // G = ux^(2/e2) + uy^(2/e2); dF/dx = (e2/e1) G^(e2/e1 - 1) * (2/e2) ux^(2/e2-1) sign(x)/ax
        let lgx = (2.0 / e2) * ux.ln();
        let lgy = (2.0 / e2) * uy.ln();
        let lg = log_add_exp(lgx, lgy);
        let gpow = ((e2 / e1 - 1.0) * lg).exp();
        let gx = (2.0 / e1) * gpow * ux.powf(2.0 / e2 - 1.0) * sign0(p.x) / self.ax;
        let gy = (2.0 / e1) * gpow * uy.powf(2.0 / e2 - 1.0) * sign0(p.y) / self.ay;
        let gz = (2.0 / e1) * uz.powf(2.0 / e1 - 1.0) * sign0(p.z) / self.az;
        Vec3::new(gx, gy, gz)
    }

    /// Surface point of the trigonometric parameterization, local frame.
    /// `eta` is latitude in [-pi/2, pi/2], `omega` longitude in [-pi, pi].
    pub fn surface_point_local(&self, eta: f64, omega: f64) -> Point3 {
        let e1 = self.e1();
        let e2 = self.e2();
        let ce = sgn_pow(eta.cos(), e1);
        Point3::new(
            self.ax * ce * sgn_pow(omega.cos(), e2),
            self.ay * ce * sgn_pow(omega.sin(), e2),
            self.az * sgn_pow(eta.sin(), e1),
        )
    }

    /// Intersection of the local-frame ray through `p` (world frame) with
    /// the surface, returned in the world frame. `F` is homogeneous of
    /// degree `2/eps1` under radial scaling, so the exact intersection is
    /// `F^(-eps1/2) * p_local`.
    pub fn radial_project(&self, p: Point3) -> Point3 {
        let pl = self.pose.to_local(p);
        if pl.norm_sq() < COORD_FLOOR * COORD_FLOOR {
            // degenerate: surface point along local +z
            return self.pose.to_world(Point3::new(0.0, 0.0, self.az));
        }
        let s = (-self.e1() / 2.0 * self.implicit_log_value(pl)).exp();
        self.pose.to_world(pl * s)
    }

    /// Radial distance from `p` (world frame) to the surface.
    pub fn radial_distance(&self, p: Point3) -> f64 {
        let pl = self.pose.to_local(p);
        let n = pl.norm();
        if n < COORD_FLOOR {
            return self.az;
        }
        let s = (-self.e1() / 2.0 * self.implicit_log_value(pl)).exp();
        (1.0 - s).abs() * n
    }

    /// Surface area by summing triangle areas of an inscribed mesh.
    /// `n_eta` latitude cells (longitude uses `2 * n_eta`).
    ///
    /// Mesh nodes are radial projections of a uniform direction grid.
    /// The surface is star-shaped about the origin, so this mesh is
    /// always embedded (the trigonometric parameterization instead
    /// collapses onto edges and corners at small exponents and its mesh
    /// folds over itself there).
    pub fn surface_area_quadrature_res(&self, n_eta: usize) -> f64 {
        let n_eta = n_eta.max(8);
        let n_omega = 2 * n_eta;
        let deta = std::f64::consts::PI / n_eta as f64;
        let domega = 2.0 * std::f64::consts::PI / n_omega as f64;
        let node = |i: usize, j: usize| -> Point3 {
            let eta = -std::f64::consts::FRAC_PI_2 + i as f64 * deta;
            let omega = -std::f64::consts::PI + j as f64 * domega;
            let d = Point3::new(
                eta.cos() * omega.cos(),
                eta.cos() * omega.sin(),
                eta.sin(),
            );
            let s = (-self.e1() / 2.0 * self.implicit_log_value(d)).exp();
            d * s
        };
        let mut area = 0.0;
        let mut row0: Vec<Point3> = (0..=n_omega).map(|j| node(0, j)).collect();
        for i in 1..=n_eta {
            let row1: Vec<Point3> = (0..=n_omega).map(|j| node(i, j)).collect();
            for j in 0..n_omega {
                let (a, b, c, d) = (row0[j], row0[j + 1], row1[j], row1[j + 1]);
                area += 0.5 * (b - a).cross(c - a).norm();
                area += 0.5 * (c - d).cross(b - d).norm();
            }
            row0 = row1;
        }
        area
    }

    /// Surface area via the default quadrature resolution.
    pub fn surface_area_quadrature(&self) -> f64 {
        self.surface_area_quadrature_res(200)
    }

    /// Fast surface area: bilinear interpolation in `(eps1, eps2)` between
    /// the closed-form areas of the four corner solids at exponent 0 and 2
    /// (cuboid, rhombic prism, rectangular bipyramid, octahedron).
    pub fn surface_area_fast(&self) -> f64 {
        let (ax, ay, az) = (self.ax, self.ay, self.az);
        // eps1 = 0, eps2 = 0: cuboid with half-extents (ax, ay, az)
        let a00 = 8.0 * (ax * ay + ay * az + ax * az);
        // eps1 = 0, eps2 = 2: rhombic prism
        let a02 = 4.0 * ax * ay + 8.0 * az * (ax * ax + ay * ay).sqrt();
        // eps1 = 2, eps2 = 0: rectangular bipyramid over the 2ax x 2ay base
        let a20 = 4.0 * ax * (ay * ay + az * az).sqrt() + 4.0 * ay * (ax * ax + az * az).sqrt();
        // eps1 = 2, eps2 = 2: octahedron
        let a22 = 4.0 * (ay * ay * az * az + ax * ax * az * az + ax * ax * ay * ay).sqrt();
        let t1 = (self.eps1.clamp(0.0, 2.0)) / 2.0;
        let t2 = (self.eps2.clamp(0.0, 2.0)) / 2.0;
        (1.0 - t1) * (1.0 - t2) * a00 + (1.0 - t1) * t2 * a02 + t1 * (1.0 - t2) * a20 + t1 * t2 * a22
    }

    /// Axis-aligned local-frame extreme surface points (6 of them), world frame.
    pub fn axis_extremes(&self) -> [Point3; 6] {
        [
            self.pose.to_world(Point3::new(self.ax, 0.0, 0.0)),
            self.pose.to_world(Point3::new(-self.ax, 0.0, 0.0)),
            self.pose.to_world(Point3::new(0.0, self.ay, 0.0)),
            self.pose.to_world(Point3::new(0.0, -self.ay, 0.0)),
            self.pose.to_world(Point3::new(0.0, 0.0, self.az)),
            self.pose.to_world(Point3::new(0.0, 0.0, -self.az)),
        ]
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// sign(u) * |u|^e with a magnitude floor under the power.
fn sgn_pow(u: f64, e: f64) -> f64 {
    sign0(u) * u.abs().max(COORD_FLOOR).powf(e)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// An ordered point cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InsufficientPoints { got: 0, need: 1 });
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidParam(format!("non-finite point at index {i}")));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = Vec3::ZERO;
        for p in &self.points {
            c = c + *p;
        }
        c / self.points.len() as f64
    }

    /// Axis-aligned bounding box (min, max corners).
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            lo.z = lo.z.min(p.z);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
            hi.z = hi.z.max(p.z);
        }
        (lo, hi)
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        hi.dist(lo)
    }
}

/// Points sampled on a superquadric surface at a nominal spacing.
#[derive(Clone, Debug)]
pub struct SurfaceSamples {
    pub points: Vec<Point3>,
    pub spacing: f64,
}

/// Sample the surface with approximately equal spacing between neighbors.
///
/// Latitude bands are placed at equal arc-length steps along the
/// `omega = 0` meridian; each band's longitudinal step is then set from
/// that band's estimated circumference, so the sampling neither thins out
/// at the equator nor piles up at the poles.
pub fn sample_surface_equidistant(sq: &Superquadric, spacing: f64) -> Result<SurfaceSamples> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidParam(format!("spacing must be positive, got {spacing}")));
    }
    const MERIDIAN_RES: usize = 1024;
    // meridian arc-length table over eta
    let etas: Vec<f64> = (0..=MERIDIAN_RES)
        .map(|i| -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / MERIDIAN_RES as f64)
        .collect();
    let meridian: Vec<Point3> = etas.iter().map(|&e| sq.surface_point_local(e, 0.0)).collect();
    let mut cum = vec![0.0f64; etas.len()];
    for i in 1..etas.len() {
        cum[i] = cum[i - 1] + meridian[i].dist(meridian[i - 1]);
    }
    let total_len = *cum.last().unwrap();
    let n_bands = ((total_len / spacing).round() as usize).max(2);

    let mut pts: Vec<Point3> = Vec::new();
    for k in 0..n_bands {
        let target = (k as f64 + 0.5) * total_len / n_bands as f64;
        let eta = invert_arc_table(&cum, &etas, target);
        if sq.eps2 < EPS_FLOOR {
            // the trigonometric ring degenerates to the four corners of the
            // rectangular cross-section; walk its perimeter exactly instead
            let ce = sgn_pow(eta.cos(), sq.e1());
            let z = sq.az * sgn_pow(eta.sin(), sq.e1());
            sample_rectangle_ring(sq.ax * ce, sq.ay * ce, z, spacing, &sq.pose, &mut pts);
            continue;
        }
        // circumference of this latitude band via a polyline over omega
        const RING_RES: usize = 512;
        let omegas: Vec<f64> = (0..=RING_RES)
            .map(|j| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * j as f64 / RING_RES as f64)
            .collect();
        let ring: Vec<Point3> = omegas.iter().map(|&w| sq.surface_point_local(eta, w)).collect();
        let mut rcum = vec![0.0f64; omegas.len()];
        for j in 1..omegas.len() {
            rcum[j] = rcum[j - 1] + ring[j].dist(ring[j - 1]);
        }
        let circ = *rcum.last().unwrap();
        let m = ((circ / spacing).round() as usize).max(1);
        for j in 0..m {
            let t = j as f64 * circ / m as f64;
            let omega = invert_arc_table(&rcum, &omegas, t);
            pts.push(sq.pose.to_world(sq.surface_point_local(eta, omega)));
        }
    }
    if pts.len() < 8 {
        pts.extend_from_slice(&sq.axis_extremes());
    }
    Ok(SurfaceSamples { points: pts, spacing })
}

/// Equally spaced points along the perimeter of the axis-aligned
/// rectangle with half-extents `(wx, wy)` at height `z`, world frame.
fn sample_rectangle_ring(
    wx: f64,
    wy: f64,
    z: f64,
    spacing: f64,
    pose: &Pose,
    out: &mut Vec<Point3>,
) {
    let perimeter = 4.0 * (wx.abs() + wy.abs());
    if !(perimeter > 0.0) {
        out.push(pose.to_world(Point3::new(0.0, 0.0, z)));
        return;
    }
    // corners in counterclockwise order starting at (wx, wy)
    let corners = [
        Point3::new(wx, wy, z),
        Point3::new(-wx, wy, z),
        Point3::new(-wx, -wy, z),
        Point3::new(wx, -wy, z),
        Point3::new(wx, wy, z),
    ];
    let m = ((perimeter / spacing).round() as usize).max(1);
    let mut seg = 0usize;
    let mut seg_start = 0.0f64;
    for j in 0..m {
        let t = j as f64 * perimeter / m as f64;
        let mut seg_len = corners[seg + 1].dist(corners[seg]);
        while seg + 1 < 4 && t > seg_start + seg_len {
            seg_start += seg_len;
            seg += 1;
            seg_len = corners[seg + 1].dist(corners[seg]);
        }
        let frac = if seg_len > 0.0 { (t - seg_start) / seg_len } else { 0.0 };
        let p = corners[seg] + (corners[seg + 1] - corners[seg]) * frac;
        out.push(pose.to_world(p));
    }
}

/// Piecewise-linear inversion of a cumulative arc-length table.
fn invert_arc_table(cum: &[f64], params: &[f64], target: f64) -> f64 {
    let total = *cum.last().unwrap();
    let t = target.clamp(0.0, total);
    let idx = match cum.binary_search_by(|c| c.partial_cmp(&t).unwrap()) {
        Ok(i) => i,
        Err(i) => i,
    };
    if idx == 0 {
        return params[0];
    }
    if idx >= cum.len() {
        return *params.last().unwrap();
    }
    let seg = cum[idx] - cum[idx - 1];
    let frac = if seg > 0.0 { (t - cum[idx - 1]) / seg } else { 0.0 };
    params[idx - 1] + frac * (params[idx] - params[idx - 1])
}
