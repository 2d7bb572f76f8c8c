//! The EMS solver: PCA initialization, EM iterations with a bounded
//! trust-region M-step, and the S-step that switches between distant
//! parameter encodings of geometrically similar superquadrics.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Superquadric, EPS_CEIL, EPS_FLOOR};
use crate::gum::{self, Correspondences, GumConfig, GumState};
use crate::math::{sym_eigen_3x3, Point3, Pose, Quat, Vec3};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// How the surface-area term of the objective is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AreaMode {
    /// Bilinear interpolation between closed-form corner areas.
    Fast,
    /// Numerical quadrature (slower, for validation runs).
    Quadrature,
}

/// Fit configuration. All knobs have working defaults.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_em_iters: usize,
    pub rel_tol_nll: f64,
    pub param_tol: f64,
    pub max_switches: usize,
    pub candidate_refine_iters: usize,
    pub max_inner_iters: usize,
    pub w_o: f64,
    pub margin: f64,
    pub area_mode: AreaMode,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_em_iters: 100,
            rel_tol_nll: 1e-6,
            param_tol: 1e-4,
            max_switches: 4,
            candidate_refine_iters: 5,
            max_inner_iters: 10,
            w_o: 0.1,
            margin: 0.1,
            area_mode: AreaMode::Fast,
            seed: 0,
        }
    }
}

/// Which similarity produced a switch candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateKind {
    AxisX,
    AxisY,
    Duality,
    AxisXDuality,
    AxisYDuality,
}

/// A set of candidate parameter encodings for the S-step.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub candidates: Vec<(CandidateKind, Superquadric)>,
}

/// One S-step candidate evaluation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub candidate: CandidateKind,
    pub accepted: bool,
    pub nll_before: f64,
    pub nll_after: f64,
}

/// Result of a single-superquadric fit.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub superquadric: Superquadric,
    pub sigma2: f64,
    pub final_nll: f64,
    /// Marginal negative log-likelihood after each EM iteration,
    /// non-increasing within each EM phase.
    pub nll_trace: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub switch_log: Vec<SwitchRecord>,
    pub iterations: usize,
    pub wall_time_ms: f64,
    pub m_step_failures: usize,
}

// ---------------------------------------------------------------------------
// Parameter vector and bounds

const NPARAMS: usize = 11;

/// Flat parameter encoding used by the bounded minimizer:
/// `[eps1, eps2, ax, ay, az, r1, r2, r3, t1, t2, t3]` where the angles are
/// an intrinsic Euler correction applied on top of a reference rotation.
#[derive(Clone, Copy, Debug)]
pub struct ParamVector {
    pub v: [f64; NPARAMS],
}

/// Box bounds plus the reference rotation the Euler correction is
/// expressed against.
#[derive(Clone, Copy, Debug)]
pub struct ParamSpace {
    pub ref_rotation: Quat,
    pub lo: [f64; NPARAMS],
    pub hi: [f64; NPARAMS],
}

impl ParamSpace {
    /// Bounds derived from the cloud: scales within
    /// `[1e-3 * diagonal, diagonal]`, translation within the expanded
    /// bounding box, angles free within one turn.
    pub fn for_cloud(cloud: &PointCloud, ref_rotation: Quat) -> Self {
        let (lo_b, hi_b) = cloud.bounds();
        let center = (lo_b + hi_b) * 0.5;
        let diag = cloud.diagonal().max(1e-9);
        let a_min = 1e-3 * diag;
        let a_max = diag;
        let pi = std::f64::consts::PI;
        let lo = [
            EPS_FLOOR,
            EPS_FLOOR,
            a_min,
            a_min,
            a_min,
            -pi,
            -pi,
            -pi,
            center.x - diag,
            center.y - diag,
            center.z - diag,
        ];
        let hi = [
            EPS_CEIL,
            EPS_CEIL,
            a_max,
            a_max,
            a_max,
            pi,
            pi,
            pi,
            center.x + diag,
            center.y + diag,
            center.z + diag,
        ];
        ParamSpace { ref_rotation, lo, hi }
    }

    pub fn encode(&self, sq: &Superquadric) -> ParamVector {
        // rotation assumed equal to the reference (the caller re-centers)
        ParamVector {
            v: [
                sq.eps1,
                sq.eps2,
                sq.ax,
                sq.ay,
                sq.az,
                0.0,
                0.0,
                0.0,
                sq.pose.translation.x,
                sq.pose.translation.y,
                sq.pose.translation.z,
            ],
        }
    }

    pub fn decode(&self, p: &ParamVector) -> Superquadric {
        let rot = self
            .ref_rotation
            .mul_quat(Quat::from_euler_xyz(p.v[5], p.v[6], p.v[7]))
            .renormalize();
        Superquadric {
            eps1: p.v[0],
            eps2: p.v[1],
            ax: p.v[2],
            ay: p.v[3],
            az: p.v[4],
            pose: Pose::new(rot, Vec3::new(p.v[8], p.v[9], p.v[10])),
        }
    }

    pub fn clip(&self, p: &mut ParamVector) {
        for i in 0..NPARAMS {
            p.v[i] = p.v[i].clamp(self.lo[i], self.hi[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Fast residual evaluation

/// Rotation matrix + translation cached for tight residual loops.
struct FrameEval {
    /// world -> local rotation, row major
    m: [[f64; 3]; 3],
    t: Vec3,
    inv_a: [f64; 3],
    e1: f64,
    e2: f64,
}

impl FrameEval {
    fn new(sq: &Superquadric) -> Self {
        let r = sq.pose.rotation.to_matrix();
        // transpose: world -> local
        let m = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        FrameEval {
            m,
            t: sq.pose.translation,
            inv_a: [1.0 / sq.ax, 1.0 / sq.ay, 1.0 / sq.az],
            e1: sq.eps1.max(EPS_FLOOR),
            e2: sq.eps2.max(EPS_FLOOR),
        }
    }

    /// Radial distance from a world point to the surface.
    #[inline]
    fn radial_distance(&self, p: Point3) -> f64 {
        let d = p - self.t;
        let lx = self.m[0][0] * d.x + self.m[0][1] * d.y + self.m[0][2] * d.z;
        let ly = self.m[1][0] * d.x + self.m[1][1] * d.y + self.m[1][2] * d.z;
        let lz = self.m[2][0] * d.x + self.m[2][1] * d.y + self.m[2][2] * d.z;
        let n2 = lx * lx + ly * ly + lz * lz;
        if n2 < 1e-24 {
            return 1.0 / self.inv_a[2];
        }
        let ux = (lx * self.inv_a[0]).abs().max(1e-12);
        let uy = (ly * self.inv_a[1]).abs().max(1e-12);
        let uz = (lz * self.inv_a[2]).abs().max(1e-12);
        let ax2e = 2.0 / self.e2;
        let (gx, gy) = (ax2e * ux.ln(), ax2e * uy.ln());
        let lg = log_add_exp(gx, gy) * (self.e2 / self.e1);
        let lzt = (2.0 / self.e1) * uz.ln();
        let logf = log_add_exp(lg, lzt);
        let s = (-self.e1 / 2.0 * logf).exp();
        (1.0 - s).abs() * n2.sqrt()
    }
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Per-point radial distances of a cloud to a superquadric.
pub fn radial_distances(sq: &Superquadric, cloud: &PointCloud) -> Vec<f64> {
    let fe = FrameEval::new(sq);
    cloud.points.iter().map(|p| fe.radial_distance(*p)).collect()
}

// ---------------------------------------------------------------------------
// Bounded trust-region minimizer (Levenberg-style damped Gauss-Newton with
// box clipping; only cost-decreasing steps are accepted)

struct Objective<'a> {
    cloud: &'a PointCloud,
    /// per-point weights (posterior inlier expectations); empty = all ones
    weights: &'a [f64],
    /// multiplier on the sum of squared residuals (1 / (2 sigma^2))
    residual_scale: f64,
    /// multiplier on log(area); N for the full objective, 0 for plain LSQ
    area_weight: f64,
    area_mode: AreaMode,
}

impl<'a> Objective<'a> {
    fn area(&self, sq: &Superquadric) -> f64 {
        match self.area_mode {
            AreaMode::Fast => sq.surface_area_fast(),
            AreaMode::Quadrature => sq.surface_area_quadrature_res(100),
        }
    }

    /// Weighted residuals `sqrt(w_i) * d_i`.
    fn residuals(&self, sq: &Superquadric, out: &mut Vec<f64>) {
        let fe = FrameEval::new(sq);
        out.clear();
        if self.weights.is_empty() {
            out.extend(self.cloud.points.iter().map(|p| fe.radial_distance(*p)));
        } else {
            out.extend(
                self.cloud
                    .points
                    .iter()
                    .zip(self.weights)
                    .map(|(p, w)| w.sqrt() * fe.radial_distance(*p)),
            );
        }
    }

    fn value_from_residuals(&self, sq: &Superquadric, r: &[f64]) -> f64 {
        let ssq: f64 = r.iter().map(|x| x * x).sum();
        let mut f = self.residual_scale * ssq;
        if self.area_weight != 0.0 {
            f += self.area_weight * self.area(sq).ln();
        }
        f
    }

    fn value(&self, sq: &Superquadric) -> f64 {
        let mut r = Vec::new();
        self.residuals(sq, &mut r);
        self.value_from_residuals(sq, r.as_slice())
    }
}

/// Minimize the objective over the box; returns the new parameters, the
/// final cost and whether any improving step was taken.
fn minimize_bounded(
    obj: &Objective,
    start: &Superquadric,
    cloud: &PointCloud,
    max_iters: usize,
) -> (Superquadric, f64, bool) {
    let mut sq = *start;
    let mut improved = false;
    let mut lambda = 1e-3;
    let n = cloud.len();
    let mut r0: Vec<f64> = Vec::with_capacity(n);
    let mut rj: Vec<f64> = Vec::with_capacity(n);
    let mut jac = vec![vec![0.0f64; NPARAMS]; n];

    for _ in 0..max_iters {
        let space = ParamSpace::for_cloud(cloud, sq.pose.rotation);
        let p = space.encode(&sq);
        obj.residuals(&sq, &mut r0);
        let f0 = obj.value_from_residuals(&sq, &r0);

        // finite-difference Jacobian of the residual vector
        let mut area_grad = [0.0f64; NPARAMS];
        let base_area = if obj.area_weight != 0.0 { obj.area(&sq) } else { 1.0 };
        for j in 0..NPARAMS {
            let h0 = 1e-6 * (1.0 + p.v[j].abs());
            // step away from an active upper bound
            let h = if p.v[j] + h0 > space.hi[j] { -h0 } else { h0 };
            let mut pj = p;
            pj.v[j] += h;
            let sqj = space.decode(&pj);
            obj.residuals(&sqj, &mut rj);
            for i in 0..n {
                jac[i][j] = (rj[i] - r0[i]) / h;
            }
            if obj.area_weight != 0.0 && j < 5 {
                area_grad[j] = (obj.area(&sqj).ln() - base_area.ln()) / h;
            }
        }

        // gradient and Gauss-Newton Hessian
        let mut g = [0.0f64; NPARAMS];
        let mut h_mat = vec![vec![0.0f64; NPARAMS]; NPARAMS];
        for i in 0..n {
            let row = &jac[i];
            let ri = r0[i];
            for a in 0..NPARAMS {
                g[a] += 2.0 * obj.residual_scale * row[a] * ri;
                for b in a..NPARAMS {
                    h_mat[a][b] += 2.0 * obj.residual_scale * row[a] * row[b];
                }
            }
        }
        for a in 0..NPARAMS {
            g[a] += obj.area_weight * area_grad[a];
            for b in 0..a {
                h_mat[a][b] = h_mat[b][a];
            }
        }

        // damped steps until one decreases the cost
        let mut accepted = false;
        for _ in 0..12 {
            let mut a_mat = h_mat.clone();
            for d in 0..NPARAMS {
                a_mat[d][d] += lambda * h_mat[d][d].max(1e-12) + 1e-12;
            }
            let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
            let Some(delta) = crate::math::solve_spd(&a_mat, &rhs) else {
                lambda *= 10.0;
                continue;
            };
            let mut pn = p;
            for d in 0..NPARAMS {
                pn.v[d] += delta[d];
            }
            space.clip(&mut pn);
            let step: f64 = (0..NPARAMS).map(|d| (pn.v[d] - p.v[d]).abs()).sum();
            if step == 0.0 {
                lambda *= 10.0;
                continue;
            }
            let sqn = space.decode(&pn);
            let fnew = obj.value(&sqn);
            if fnew.is_finite() && fnew < f0 {
                sq = sqn;
                lambda = (lambda * 0.33).max(1e-12);
                improved = true;
                accepted = true;
                if f0 - fnew < 1e-12 * (1.0 + f0.abs()) {
                    return (sq, fnew, improved);
                }
                break;
            }
            lambda *= 8.0;
        }
        if !accepted {
            let f = obj.value(&sq);
            return (sq, f, improved);
        }
    }
    let f = obj.value(&sq);
    (sq, f, improved)
}

// ---------------------------------------------------------------------------
// PCA initialization

/// PCA-based initial superquadric: centroid, covariance eigenvectors
/// (largest eigenvalue along local z), 1.2x half-extent scales, and an
/// ellipsoid shape (`eps1 = eps2 = 1`).
pub fn pca_init(cloud: &PointCloud) -> Result<Superquadric> {
    pca_init_axis(cloud, 0)
}

/// PCA initialization with the principle axis assigned to the
/// `axis_rank`-th eigenvector (0 = largest eigenvalue). Ranks 0..3 give
/// the three classic restart initializations.
pub fn pca_init_axis(cloud: &PointCloud, axis_rank: usize) -> Result<Superquadric> {
    if cloud.len() < 10 {
        return Err(Error::InsufficientPoints { got: cloud.len(), need: 10 });
    }
    let c = cloud.centroid();
    let mut cov = [[0.0f64; 3]; 3];
    for p in &cloud.points {
        let d = *p - c;
        let v = [d.x, d.y, d.z];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += v[i] * v[j];
            }
        }
    }
    let inv_n = 1.0 / cloud.len() as f64;
    for row in cov.iter_mut() {
        for x in row.iter_mut() {
            *x *= inv_n;
        }
    }
    let (_, vecs) = sym_eigen_3x3(&cov);
    let z_axis = vecs[axis_rank % 3];
    let x_axis = vecs[(axis_rank + 1) % 3];
    let y_axis = z_axis.cross(x_axis).normalized();
    let x_axis = y_axis.cross(z_axis).normalized();
    let m = [
        [x_axis.x, y_axis.x, z_axis.x],
        [x_axis.y, y_axis.y, z_axis.y],
        [x_axis.z, y_axis.z, z_axis.z],
    ];
    let rot = Quat::from_matrix(&m);
    let pose = Pose::new(rot, c);
    // half-extents in the rotated frame
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        let l = pose.to_local(*p);
        for (i, v) in [l.x, l.y, l.z].into_iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    let floor = 1e-3 * cloud.diagonal();
    let half = |i: usize| (0.5 * (hi[i] - lo[i])).max(floor);
    Superquadric::new(1.0, 1.0, 1.2 * half(0), 1.2 * half(1), 1.2 * half(2), pose)
}

// ---------------------------------------------------------------------------
// Candidate generation (S-step similarities)

/// Right-handed axis permutations moving the principle axis to the local
/// x (resp. y) axis.
pub fn candidates_axis_mismatch(sq: &Superquadric) -> CandidateSet {
    // new z along old x: columns x'=(0,0,1), y'=(0,-1,0), z'=(1,0,0)
    let p_x = Quat::from_matrix(&[[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0]]);
    // new z along old y: columns x'=(1,0,0), y'=(0,0,-1), z'=(0,1,0)
    let p_y = Quat::from_matrix(&[[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]);
    let eps = sq.eps2;
    let cand_x = Superquadric {
        eps1: eps,
        eps2: eps,
        ax: sq.az,
        ay: sq.ay,
        az: sq.ax,
        pose: Pose::new(sq.pose.rotation.mul_quat(p_x), sq.pose.translation),
    };
    let cand_y = Superquadric {
        eps1: eps,
        eps2: eps,
        ax: sq.ax,
        ay: sq.az,
        az: sq.ay,
        pose: Pose::new(sq.pose.rotation.mul_quat(p_y), sq.pose.translation),
    };
    CandidateSet {
        candidates: vec![(CandidateKind::AxisX, cand_x), (CandidateKind::AxisY, cand_y)],
    }
}

/// Cross-section duality: `eps2 -> 2 - eps2` with a 45 degree rotation
/// about the principle axis and a scale factor that is exact at the
/// square/diamond endpoints (`sqrt(2)` at eps2 = 0, `1/sqrt(2)` at
/// eps2 = 2) and the identity at the circular cross-section `eps2 = 1`.
pub fn candidates_duality(sq: &Superquadric) -> CandidateSet {
    let s = duality_scale(sq.eps2);
    let rot45 = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_4);
    let cand = Superquadric {
        eps1: sq.eps1,
        eps2: (2.0 - sq.eps2).clamp(0.0, EPS_CEIL),
        ax: sq.ax * s,
        ay: sq.ay * s,
        az: sq.az,
        pose: Pose::new(sq.pose.rotation.mul_quat(rot45), sq.pose.translation),
    };
    CandidateSet { candidates: vec![(CandidateKind::Duality, cand)] }
}

/// Endpoint-exact duality scale: `2^((1 - eps2) / 2)`.
fn duality_scale(eps2: f64) -> f64 {
    2.0f64.powf((1.0 - eps2.clamp(0.0, 2.0)) / 2.0)
}

/// The full candidate set: two axis reassignments, the duality, and the
/// duality applied after each axis reassignment.
pub fn candidate_set(sq: &Superquadric) -> CandidateSet {
    let axis = candidates_axis_mismatch(sq);
    let mut all = axis.candidates.clone();
    all.extend(candidates_duality(sq).candidates);
    for (kind, base) in &axis.candidates {
        let combo_kind = match kind {
            CandidateKind::AxisX => CandidateKind::AxisXDuality,
            _ => CandidateKind::AxisYDuality,
        };
        for (_, dual) in candidates_duality(base).candidates {
            all.push((combo_kind, dual));
        }
    }
    CandidateSet { candidates: all }
}

// ---------------------------------------------------------------------------
// EM iterations and the public fitting entry points

struct EmContext<'a> {
    cloud: &'a PointCloud,
    gcfg: GumConfig,
    cfg: &'a FitConfig,
    sigma2_min: f64,
}

impl<'a> EmContext<'a> {
    fn area(&self, sq: &Superquadric) -> f64 {
        match self.cfg.area_mode {
            AreaMode::Fast => sq.surface_area_fast(),
            AreaMode::Quadrature => sq.surface_area_quadrature_res(100),
        }
    }

    fn marginal_nll(&self, sq: &Superquadric, sigma2: f64) -> f64 {
        let d = radial_distances(sq, self.cloud);
        let r2: Vec<f64> = d.iter().map(|x| x * x).collect();
        gum::incomplete_nll(&r2, sigma2, &self.gcfg, self.area(sq))
    }

    /// One E + M + sigma^2 iteration; returns the updated pair and the
    /// marginal NLL after the update, plus whether the M-step improved.
    fn em_iteration(
        &self,
        sq: &Superquadric,
        st: &GumState,
    ) -> Result<(Superquadric, GumState, f64, bool)> {
        let corr = gum::e_step(sq, self.cloud, &self.gcfg, st);
        if corr.z_sum() <= 0.0 {
            return Err(Error::AllOutliers);
        }
        let (new_sq, improved) = m_step_inner(
            sq,
            self.cloud,
            &corr.z_hat,
            st.sigma2,
            self.cfg,
        );
        // refresh residuals at the new parameters, keep z frozen
        let d = radial_distances(&new_sq, self.cloud);
        let frozen = Correspondences {
            mu_hat: Vec::new(),
            z_hat: corr.z_hat,
            residual_sq: d.iter().map(|x| x * x).collect(),
        };
        // Never let sigma^2 grow: taking the closed-form update only when
        // it shrinks is still a valid generalized-EM step (a larger value
        // would mean the Gaussian is diluting itself to cover outliers,
        // which opens the degenerate shrink-to-a-point path where the
        // area term dominates).
        let s2 = gum::sigma2_update(&frozen)?
            .max(self.sigma2_min)
            .min(st.sigma2);
        let st_new = GumState { sigma2: s2 };
        let nll = self.marginal_nll(&new_sq, s2);
        Ok((new_sq, st_new, nll, improved))
    }
}

fn m_step_inner(
    sq: &Superquadric,
    cloud: &PointCloud,
    z_hat: &[f64],
    sigma2: f64,
    cfg: &FitConfig,
) -> (Superquadric, bool) {
    let obj = Objective {
        cloud,
        weights: z_hat,
        residual_scale: 1.0 / (2.0 * sigma2),
        area_weight: cloud.len() as f64,
        area_mode: cfg.area_mode,
    };
    let (new_sq, _, improved) = minimize_bounded(&obj, sq, cloud, cfg.max_inner_iters);
    if improved {
        (new_sq, true)
    } else {
        (*sq, false)
    }
}

/// The M-step alone: minimizes the conditional NLL at frozen posterior
/// weights, then refreshes `sigma^2`. Never increases the objective; on
/// inner solver failure the input parameters come back unchanged.
pub fn m_step(
    sq: &Superquadric,
    cloud: &PointCloud,
    corr: &Correspondences,
    cfg: &FitConfig,
    st: &GumState,
) -> Result<(Superquadric, GumState, bool)> {
    if corr.z_sum() <= 0.0 {
        return Err(Error::AllOutliers);
    }
    let (new_sq, improved) = m_step_inner(sq, cloud, &corr.z_hat, st.sigma2, cfg);
    let d = radial_distances(&new_sq, cloud);
    let frozen = Correspondences {
        mu_hat: Vec::new(),
        z_hat: corr.z_hat.clone(),
        residual_sq: d.iter().map(|x| x * x).collect(),
    };
    let diag = cloud.diagonal();
    let s2 = gum::sigma2_update(&frozen)?.max((1e-4 * diag).powi(2));
    Ok((new_sq, GumState { sigma2: s2 }, improved))
}

/// S-step: refine every candidate for a few EM iterations and return the
/// best one if it beats the current NLL by the relative tolerance.
pub fn s_step(
    sq: &Superquadric,
    cloud: &PointCloud,
    gcfg: &GumConfig,
    st: &GumState,
    cfg: &FitConfig,
    current_nll: f64,
    switch_log: &mut Vec<SwitchRecord>,
) -> Option<(Superquadric, GumState, f64)> {
    let ctx = EmContext {
        cloud,
        gcfg: *gcfg,
        cfg,
        sigma2_min: (1e-4 * cloud.diagonal()).powi(2),
    };
    let mut best: Option<(Superquadric, GumState, f64, usize)> = None;
    let set = candidate_set(sq);
    let mut records = Vec::with_capacity(set.candidates.len());
    for (kind, cand) in &set.candidates {
        let mut c_sq = *cand;
        let mut c_st = *st;
        let mut c_nll = ctx.marginal_nll(&c_sq, c_st.sigma2);
        for _ in 0..cfg.candidate_refine_iters {
            match ctx.em_iteration(&c_sq, &c_st) {
                Ok((s, g, nll, _)) => {
                    if nll < c_nll {
                        c_sq = s;
                        c_st = g;
                        c_nll = nll;
                    } else {
                        break;
                    }
                }
                Err(_) => break,
            }
        }
        records.push((*kind, c_nll));
        // The area term is unbounded below as the shape shrinks to a point,
        // so a candidate that refines into the degenerate attractor can
        // report an arbitrarily good NLL; never switch onto one.
        let degenerate =
            c_sq.ax.max(c_sq.ay).max(c_sq.az) < 0.02 * cloud.diagonal();
        if !degenerate && best.as_ref().map_or(true, |b| c_nll < b.2) {
            best = Some((c_sq, c_st, c_nll, records.len() - 1));
        }
    }
    let threshold = current_nll - current_nll.abs() * cfg.rel_tol_nll;
    let accept = best.as_ref().map_or(false, |b| b.2 < threshold);
    let best_idx = best.as_ref().map(|b| b.3);
    for (i, (kind, nll)) in records.into_iter().enumerate() {
        switch_log.push(SwitchRecord {
            candidate: kind,
            accepted: accept && Some(i) == best_idx,
            nll_before: current_nll,
            nll_after: nll,
        });
    }
    if accept {
        best.map(|(s, g, nll, _)| (s, g, nll))
    } else {
        None
    }
}

/// Full EMS fit: EM phases to convergence with S-step switching,
/// restarted from the three PCA axis-ranking initializations; the restart
/// with the lowest final marginal NLL wins (non-degenerate fits preferred).
pub fn ems_fit(cloud: &PointCloud, cfg: &FitConfig) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for rank in 0..3 {
        match ems_fit_rank(cloud, cfg, rank) {
            Ok(res) => {
                let replace = match &best {
                    None => true,
                    Some(b) => {
                        let (bd, rd) = (is_degenerate(b, cloud), is_degenerate(&res, cloud));
                        rd == bd && res.final_nll < b.final_nll || bd && !rd
                    }
                };
                if replace {
                    best = Some(res);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(b) => Ok(b),
        None => Err(last_err.expect("three restarts attempted")),
    }
}

fn ems_fit_rank(cloud: &PointCloud, cfg: &FitConfig, rank: usize) -> Result<FitResult> {
    let nn = crate::spatial::median_nn_distance(&cloud.points);
    let first = ems_fit_with_floor(cloud, cfg, rank, (2.0 * nn).powi(2))?;
    if !is_degenerate(&first, cloud) {
        return Ok(first);
    }
    // The shrink-to-a-point failure mode: the whole fit is smaller than a
    // few sampling spacings. Retry with a much deeper anneal so the noise
    // scale resolves shells smaller than the default floor.
    let second = ems_fit_with_floor(cloud, cfg, rank, (0.5 * nn).powi(2))?;
    if is_degenerate(&second, cloud) && first.final_nll < second.final_nll {
        Ok(first)
    } else {
        Ok(second)
    }
}

fn is_degenerate(res: &FitResult, cloud: &PointCloud) -> bool {
    let sq = &res.superquadric;
    sq.ax.max(sq.ay).max(sq.az) < 0.02 * cloud.diagonal()
}

fn ems_fit_with_floor(
    cloud: &PointCloud,
    cfg: &FitConfig,
    rank: usize,
    anneal_floor: f64,
) -> Result<FitResult> {
    let t0 = Instant::now();
    let mut sq = pca_init_axis(cloud, rank)?;
    let volume = gum::workspace_volume(cloud, cfg.margin);
    let gcfg = GumConfig::new(cfg.w_o, volume)?;
    let diag = cloud.diagonal();
    let sigma2_min = (1e-4 * diag).powi(2);
    // robust start: median squared residual / 3 (the mean is hijacked by
    // outliers, inflating sigma^2 until nothing is ever rejected)
    let d0 = radial_distances(&sq, cloud);
    let mut r2: Vec<f64> = d0.iter().map(|x| x * x).collect();
    r2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = r2[r2.len() / 2];
    let mut st = GumState { sigma2: (med / 3.0).max(sigma2_min) };

    let ctx = EmContext { cloud, gcfg, cfg, sigma2_min };
    let mut trace: Vec<f64> = Vec::new();
    let mut switch_log: Vec<SwitchRecord> = Vec::new();
    let mut m_step_failures = 0usize;
    let mut total_iters = 0usize;

    // Annealed initialization. When the start is inflated by outliers the
    // stationary sigma^2 is so large that the uniform component rejects
    // nothing, and the area term then drives a degenerate shrink-to-a-point
    // fit. Force sigma^2 down a geometric schedule (EM's own update may
    // descend faster) until it reaches the sampling scale of the cloud, so
    // the surface locks onto the dense shell while the noise model tightens.
    // These iterations precede the first EM phase and are not recorded in
    // the NLL trace: the forced shrink is not a monotone EM step.
    let anneal_floor = anneal_floor.max(sigma2_min);
    let mut anneal_iters = 0usize;
    while st.sigma2 > anneal_floor * 1.01 && anneal_iters < 25 {
        let corr = gum::e_step(&sq, cloud, &gcfg, &st);
        if corr.z_sum() <= 0.0 {
            break;
        }
        // Area term deliberately off here: it is what creates the
        // degenerate attractor, and the anneal stage only needs to find
        // the dense shell, not optimize the full model objective.
        let obj = Objective {
            cloud,
            weights: &corr.z_hat,
            residual_scale: 1.0 / (2.0 * st.sigma2),
            area_weight: 0.0,
            area_mode: cfg.area_mode,
        };
        let (new_sq, _, improved) = minimize_bounded(&obj, &sq, cloud, cfg.max_inner_iters);
        if improved {
            sq = new_sq;
        }
        let d = radial_distances(&sq, cloud);
        let frozen = Correspondences {
            mu_hat: Vec::new(),
            z_hat: corr.z_hat,
            residual_sq: d.iter().map(|x| x * x).collect(),
        };
        let em_update = gum::sigma2_update(&frozen)?
            .max(sigma2_min)
            .min(st.sigma2);
        let forced = (0.7 * st.sigma2).max(anneal_floor);
        st.sigma2 = em_update.min(forced);
        anneal_iters += 1;
    }
    let mut switches = 0usize;
    let mut nll = ctx.marginal_nll(&sq, st.sigma2);
    trace.push(nll);

    'phases: loop {
        // EM phase
        loop {
            if total_iters >= cfg.max_em_iters {
                break 'phases;
            }
            let (new_sq, new_st, new_nll, improved) = match ctx.em_iteration(&sq, &st) {
                Ok(r) => r,
                Err(Error::AllOutliers) => {
                    return Err(Error::FitFailure(format!(
                        "all {} points classified outliers (sigma2 {:.3e}, w_o {})",
                        cloud.len(),
                        st.sigma2,
                        cfg.w_o
                    )))
                }
                Err(e) => return Err(e),
            };
            if !improved {
                m_step_failures += 1;
            }
            total_iters += 1;
            if new_nll > nll + 1e-9 {
                // approximate EM stopped making progress; keep previous state
                break;
            }
            let rel = (nll - new_nll).abs() / nll.abs().max(1.0);
            sq = new_sq;
            st = new_st;
            nll = new_nll;
            trace.push(nll);
            if rel < cfg.rel_tol_nll {
                break;
            }
        }
        // S-step
        if switches >= cfg.max_switches || total_iters >= cfg.max_em_iters {
            break;
        }
        match s_step(&sq, cloud, &gcfg, &st, cfg, nll, &mut switch_log) {
            Some((s, g, new_nll)) => {
                sq = s;
                st = g;
                nll = new_nll;
                trace.push(nll);
                switches += 1;
            }
            None => break,
        }
    }

    let corr = gum::e_step(&sq, cloud, &gcfg, &st);
    Ok(FitResult {
        superquadric: sq,
        sigma2: st.sigma2,
        final_nll: nll,
        nll_trace: trace,
        z_hat: corr.z_hat,
        switch_log,
        iterations: total_iters,
        wall_time_ms: t0.elapsed().as_secs_f64() * 1e3,
        m_step_failures,
    })
}

/// Plain bounded least-squares fit of the radial distances (no outlier
/// model, no area term, no switching) from a single PCA initialization.
pub fn radial_lsq_fit_single(
    cloud: &PointCloud,
    axis_rank: usize,
    max_iters: usize,
) -> Result<FitResult> {
    let t0 = Instant::now();
    let sq0 = pca_init_axis(cloud, axis_rank)?;
    let obj = Objective {
        cloud,
        weights: &[],
        residual_scale: 1.0,
        area_weight: 0.0,
        area_mode: AreaMode::Fast,
    };
    let (sq, f, _) = minimize_bounded(&obj, &sq0, cloud, max_iters);
    let n = cloud.len() as f64;
    Ok(FitResult {
        superquadric: sq,
        sigma2: (f / n / 3.0).max(1e-12),
        final_nll: f,
        nll_trace: vec![f],
        z_hat: vec![1.0; cloud.len()],
        switch_log: Vec::new(),
        iterations: max_iters,
        wall_time_ms: t0.elapsed().as_secs_f64() * 1e3,
        m_step_failures: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_surface_equidistant;

    fn sphere_cloud(spacing: f64) -> PointCloud {
        let sq = Superquadric::unit_sphere();
        PointCloud::new(sample_surface_equidistant(&sq, spacing).unwrap().points).unwrap()
    }

    #[test]
    fn pca_init_sphere() {
        let cloud = sphere_cloud(0.1);
        let sq = pca_init(&cloud).unwrap();
        assert!(sq.pose.translation.norm() < 0.05);
        for a in [sq.ax, sq.ay, sq.az] {
            assert!((a - 1.2).abs() < 0.06, "scale {a}");
        }
        assert_eq!(sq.eps1, 1.0);
        assert_eq!(sq.eps2, 1.0);
    }

    #[test]
    fn pca_init_translation_equivariant() {
        let cloud = sphere_cloud(0.15);
        let t = Vec3::new(3.0, -1.0, 2.0);
        let moved =
            PointCloud::new(cloud.points.iter().map(|p| *p + t).collect()).unwrap();
        let a = pca_init(&cloud).unwrap();
        let b = pca_init(&moved).unwrap();
        assert!((b.pose.translation - a.pose.translation - t).norm() < 1e-9);
    }

    #[test]
    fn pca_init_rotation_equivariant() {
        // elongated cloud so the principal axis is well defined
        let base = Superquadric::new(1.0, 1.0, 0.5, 0.5, 2.0, Pose::IDENTITY).unwrap();
        let cloud =
            PointCloud::new(sample_surface_equidistant(&base, 0.15).unwrap().points).unwrap();
        let rot = Quat::from_axis_angle(Vec3::new(1.0, 0.3, -0.2), 1.1);
        let rotated =
            PointCloud::new(cloud.points.iter().map(|p| rot.rotate(*p)).collect()).unwrap();
        let a = pca_init(&cloud).unwrap();
        let b = pca_init(&rotated).unwrap();
        let za = a.pose.rotation.rotate(Vec3::new(0.0, 0.0, 1.0));
        let zb = b.pose.rotation.rotate(Vec3::new(0.0, 0.0, 1.0));
        let expected = rot.rotate(za);
        assert!(zb.dot(expected).abs() > 1.0 - 1e-6);
    }

    #[test]
    fn pca_init_insufficient_points() {
        let cloud = PointCloud::new(vec![Vec3::new(0.0, 0.0, 0.0); 5]).unwrap();
        assert!(matches!(
            pca_init(&cloud),
            Err(Error::InsufficientPoints { got: 5, need: 10 })
        ));
    }

    #[test]
    fn m_step_stationary_at_ground_truth() {
        let truth = Superquadric::new(0.8, 1.2, 1.0, 0.7, 1.4, Pose::IDENTITY).unwrap();
        let cloud =
            PointCloud::new(sample_surface_equidistant(&truth, 0.1).unwrap().points).unwrap();
        let cfg = FitConfig::default();
        let gcfg = GumConfig::new(0.0, gum::workspace_volume(&cloud, 0.1)).unwrap();
        let st = GumState::new(1e-4).unwrap();
        let corr = gum::e_step(&truth, &cloud, &gcfg, &st);
        let (sq, _, _) = m_step(&truth, &cloud, &corr, &cfg, &st).unwrap();
        assert!((sq.eps1 - truth.eps1).abs() < 1e-3 * (1.0 + truth.eps1));
        assert!((sq.ax - truth.ax).abs() < 1e-3 * (1.0 + truth.ax));
        assert!((sq.pose.translation - truth.pose.translation).norm() < 1e-3);
    }

    #[test]
    fn m_step_shrinks_inflated_scales() {
        // 1-D oracle: objective over a uniform scale has its minimum near 1
        let cloud = sphere_cloud(0.1);
        let cfg = FitConfig::default();
        let gcfg = GumConfig::new(0.0, gum::workspace_volume(&cloud, 0.1)).unwrap();
        let st = GumState::new(0.01).unwrap();
        let start = Superquadric::new(1.0, 1.0, 1.5, 1.5, 1.5, Pose::IDENTITY).unwrap();

        let mut best_scale = 0.0;
        let mut best_val = f64::INFINITY;
        for k in 0..60 {
            let s = 0.5 + k as f64 * 0.025;
            let sq = Superquadric::new(1.0, 1.0, s, s, s, Pose::IDENTITY).unwrap();
            let d = radial_distances(&sq, &cloud);
            let v: f64 = d.iter().map(|x| x * x / (2.0 * st.sigma2)).sum::<f64>()
                + cloud.len() as f64 * sq.surface_area_fast().ln();
            if v < best_val {
                best_val = v;
                best_scale = s;
            }
        }
        assert!((best_scale - 1.0).abs() < 0.1, "grid oracle minimum at {best_scale}");

        let corr = gum::e_step(&start, &cloud, &gcfg, &st);
        let before = gum::negative_log_likelihood(&corr, st.sigma2, start.surface_area_fast());
        let (sq, st2, _) = m_step(&start, &cloud, &corr, &cfg, &st).unwrap();
        assert!(sq.ax < 1.4 && sq.ay < 1.4 && sq.az < 1.4);
        let d = radial_distances(&sq, &cloud);
        let frozen = Correspondences {
            mu_hat: Vec::new(),
            z_hat: corr.z_hat.clone(),
            residual_sq: d.iter().map(|x| x * x).collect(),
        };
        let after = gum::negative_log_likelihood(&frozen, st.sigma2, sq.surface_area_fast());
        assert!(after <= before + 1e-12);
        assert!(st2.sigma2 > 0.0);
    }

    #[test]
    fn em_nll_trace_monotone() {
        let truth = Superquadric::new(0.5, 1.5, 1.0, 0.8, 1.6, Pose::IDENTITY).unwrap();
        let cloud =
            PointCloud::new(sample_surface_equidistant(&truth, 0.2).unwrap().points).unwrap();
        let cfg = FitConfig::default();
        let res = ems_fit(&cloud, &cfg).unwrap();
        for w in res.nll_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "trace increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn candidates_sphere_are_identity() {
        let sq = Superquadric::unit_sphere();
        for (_, cand) in candidate_set(&sq).candidates {
            let samples = sample_surface_equidistant(&cand, 0.3).unwrap();
            for p in samples.points {
                assert!(sq.radial_distance(p) < 1e-9);
            }
        }
    }

    #[test]
    fn candidates_axis_exact_when_eps_equal() {
        let sq = Superquadric::new(0.6, 0.6, 1.0, 0.7, 1.5, Pose::IDENTITY).unwrap();
        for (_, cand) in candidates_axis_mismatch(&sq).candidates {
            let samples = sample_surface_equidistant(&cand, 0.2).unwrap();
            for p in samples.points {
                assert!(sq.radial_distance(p) <= 1e-6 * 1.5, "deviation {}", sq.radial_distance(p));
            }
        }
    }

    #[test]
    fn candidates_axis_preserve_bounding_box() {
        let sq = Superquadric::new(0.3, 0.9, 1.0, 0.7, 1.5, Pose::IDENTITY).unwrap();
        for (_, cand) in candidates_axis_mismatch(&sq).candidates {
            // axis extremes of the candidate stay on the original's axes
            let exts: Vec<f64> = cand
                .axis_extremes()
                .iter()
                .map(|p| p.norm())
                .collect();
            let mut got: Vec<f64> = exts.clone();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want = vec![0.7, 0.7, 1.0, 1.0, 1.5, 1.5];
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duality_square_diamond_exact() {
        // diamond cross-section (eps2 = 2) maps to an exact square
        let sq = Superquadric::new(1.0, 2.0, 1.0, 1.0, 0.8, Pose::IDENTITY).unwrap();
        let (_, cand) = candidates_duality(&sq).candidates[0];
        assert!((cand.eps2 - 0.0).abs() < 1e-12);
        assert!((cand.ax - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        // sample the square-cross-section candidate, check against the
        // diamond's exact implicit surface
        let samples = sample_surface_equidistant(&cand, 0.05).unwrap();
        for p in samples.points {
            assert!(sq.radial_distance(p) <= 1e-9, "deviation {}", sq.radial_distance(p));
        }
    }

    #[test]
    fn duality_fixed_point_at_circular_section() {
        let sq = Superquadric::new(0.7, 1.0, 1.0, 1.0, 1.3, Pose::IDENTITY).unwrap();
        let (_, cand) = candidates_duality(&sq).candidates[0];
        assert!((cand.eps2 - 1.0).abs() < 1e-12);
        assert!((cand.ax - sq.ax).abs() < 1e-12);
        assert!((cand.ay - sq.ay).abs() < 1e-12);
    }

    #[test]
    fn duality_involution() {
        let sq = Superquadric::new(0.9, 0.4, 1.1, 1.1, 0.6, Pose::IDENTITY).unwrap();
        let (_, once) = candidates_duality(&sq).candidates[0];
        let (_, twice) = candidates_duality(&once).candidates[0];
        assert!((twice.eps2 - sq.eps2).abs() < 1e-9);
        assert!((twice.ax - sq.ax).abs() < 1e-9);
        assert!((twice.ay - sq.ay).abs() < 1e-9);
        assert!((twice.az - sq.az).abs() < 1e-9);
    }

    #[test]
    fn s_step_rejects_at_ground_truth() {
        let truth = Superquadric::new(1.0, 1.0, 1.0, 1.0, 1.0, Pose::IDENTITY).unwrap();
        let cloud =
            PointCloud::new(sample_surface_equidistant(&truth, 0.15).unwrap().points).unwrap();
        let cfg = FitConfig::default();
        let res = ems_fit(&cloud, &cfg).unwrap();
        // a converged fit must not accept further switches
        let gcfg = GumConfig::new(cfg.w_o, gum::workspace_volume(&cloud, cfg.margin)).unwrap();
        let st = GumState::new(res.sigma2).unwrap();
        let mut log = Vec::new();
        let out = s_step(&res.superquadric, &cloud, &gcfg, &st, &cfg, res.final_nll, &mut log);
        assert!(out.is_none());
    }

    #[test]
    fn max_switches_zero_disables_switching() {
        let truth = Superquadric::new(0.3, 1.7, 1.2, 0.6, 1.9, Pose::IDENTITY).unwrap();
        let cloud =
            PointCloud::new(sample_surface_equidistant(&truth, 0.2).unwrap().points).unwrap();
        let cfg = FitConfig { max_switches: 0, ..FitConfig::default() };
        let res = ems_fit(&cloud, &cfg).unwrap();
        assert!(res.switch_log.is_empty());
    }

    #[test]
    fn ems_fit_deterministic() {
        let truth = Superquadric::new(0.6, 1.1, 1.0, 0.8, 1.5, Pose::IDENTITY).unwrap();
        let cloud =
            PointCloud::new(sample_surface_equidistant(&truth, 0.2).unwrap().points).unwrap();
        let cfg = FitConfig::default();
        let a = ems_fit(&cloud, &cfg).unwrap();
        let b = ems_fit(&cloud, &cfg).unwrap();
        assert_eq!(a.superquadric, b.superquadric);
        assert_eq!(a.final_nll, b.final_nll);
    }
}
