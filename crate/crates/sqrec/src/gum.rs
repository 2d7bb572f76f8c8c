//! Gaussian-uniform mixture layer: posterior inlier inference (E-step),
//! the noise variance update, and the negative log-likelihood objective.
//!
//! Each observed point is modeled as either drawn from an isotropic
//! Gaussian centered on its surface correspondence (inlier) or from a
//! uniform density over a workspace volume (outlier).

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Superquadric};
use crate::math::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Mixture configuration: outlier weight and workspace volume.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GumConfig {
    /// Probability of a point being sampled from the outlier component.
    pub w_o: f64,
    /// Volume of the workspace the uniform component is spread over.
    pub volume: f64,
}

impl GumConfig {
    pub fn new(w_o: f64, volume: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&w_o) {
            return Err(Error::InvalidParam(format!("w_o must lie in [0, 1), got {w_o}")));
        }
        if !(volume > 0.0) {
            return Err(Error::InvalidParam(format!("volume must be positive, got {volume}")));
        }
        Ok(GumConfig { w_o, volume })
    }

    /// Density of the uniform outlier component.
    pub fn p_o(&self) -> f64 {
        1.0 / self.volume
    }
}

/// Mutable mixture state: the isotropic noise variance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GumState {
    pub sigma2: f64,
}

impl GumState {
    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidParam(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(GumState { sigma2 })
    }

    /// Gaussian normalizing constant `(2 pi sigma^2)^(-3/2)`, recomputed on
    /// demand so it can never go stale.
    pub fn gauss_norm(&self) -> f64 {
        (2.0 * std::f64::consts::PI * self.sigma2).powf(-1.5)
    }
}

/// Per-point surface correspondences and posterior inlier expectations.
#[derive(Clone, Debug)]
pub struct Correspondences {
    pub mu_hat: Vec<Point3>,
    pub z_hat: Vec<f64>,
    pub residual_sq: Vec<f64>,
}

impl Correspondences {
    pub fn len(&self) -> usize {
        self.z_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_hat.is_empty()
    }

    pub fn z_sum(&self) -> f64 {
        self.z_hat.iter().sum()
    }
}

/// Posterior inlier probability for a squared residual.
fn posterior_z(residual_sq: f64, sigma2: f64, cfg: &GumConfig) -> f64 {
    if cfg.w_o == 0.0 {
        return 1.0;
    }
    let c = (2.0 * std::f64::consts::PI * sigma2).powf(-1.5);
    let gauss = c * (-residual_sq / (2.0 * sigma2)).exp();
    let outlier = cfg.w_o * cfg.p_o() / (1.0 - cfg.w_o);
    gauss / (gauss + outlier)
}

/// E-step: radial correspondences and posterior inlier expectations.
pub fn e_step(
    sq: &Superquadric,
    cloud: &PointCloud,
    cfg: &GumConfig,
    st: &GumState,
) -> Correspondences {
    let eval = |p: &Point3| {
        let mu = sq.radial_project(*p);
        let r2 = p.dist_sq(mu);
        (mu, posterior_z(r2, st.sigma2, cfg), r2)
    };
    let rows: Vec<(Point3, f64, f64)> = if cloud.len() >= 4096 {
        cloud.points.par_iter().map(eval).collect()
    } else {
        cloud.points.iter().map(eval).collect()
    };
    let mut corr = Correspondences {
        mu_hat: Vec::with_capacity(rows.len()),
        z_hat: Vec::with_capacity(rows.len()),
        residual_sq: Vec::with_capacity(rows.len()),
    };
    for (mu, z, r2) in rows {
        corr.mu_hat.push(mu);
        corr.z_hat.push(z);
        corr.residual_sq.push(r2);
    }
    corr
}

/// Closed-form noise variance update: the stationary point of the
/// negative log-likelihood in `sigma^2` for a 3D isotropic Gaussian.
pub fn sigma2_update(corr: &Correspondences) -> Result<f64> {
    let zsum = corr.z_sum();
    if zsum <= 0.0 {
        return Err(Error::AllOutliers);
    }
    let weighted: f64 = corr
        .z_hat
        .iter()
        .zip(&corr.residual_sq)
        .map(|(z, r2)| z * r2)
        .sum();
    Ok(weighted / (3.0 * zsum))
}

/// The conditional negative log-likelihood (the M-step objective):
/// `sum_i z_i (r_i^2 / (2 sigma^2) - log c) + N log(area)`.
pub fn negative_log_likelihood(corr: &Correspondences, sigma2: f64, area: f64) -> f64 {
    let c = (2.0 * std::f64::consts::PI * sigma2).powf(-1.5);
    let log_c = c.ln();
    let gauss: f64 = corr
        .z_hat
        .iter()
        .zip(&corr.residual_sq)
        .map(|(z, r2)| z * (r2 / (2.0 * sigma2) - log_c))
        .sum();
    gauss + corr.len() as f64 * area.ln()
}

/// Negative log-likelihood of the observed data with the inlier/outlier
/// membership marginalized out. EM iterations on the membership variable
/// never increase this quantity, so it is what the fit traces record.
pub fn incomplete_nll(
    residual_sq: &[f64],
    sigma2: f64,
    cfg: &GumConfig,
    area: f64,
) -> f64 {
    let log_c = -1.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
    let log_in = (1.0 - cfg.w_o).ln() + log_c;
    let log_out = if cfg.w_o > 0.0 {
        (cfg.w_o * cfg.p_o()).ln()
    } else {
        f64::NEG_INFINITY
    };
    let mut total = 0.0;
    for &r2 in residual_sq {
        let a = log_in - r2 / (2.0 * sigma2);
        let m = a.max(log_out);
        total -= m + ((a - m).exp() + (log_out - m).exp()).ln();
    }
    total + residual_sq.len() as f64 * area.ln()
}

/// Volume of the cloud's bounding box expanded by `margin` per side, with
/// a floor thickness of 1% of the largest extent for degenerate flat clouds.
pub fn workspace_volume(cloud: &PointCloud, margin: f64) -> f64 {
    let (lo, hi) = cloud.bounds();
    let ext = hi - lo;
    let max_ext = ext.x.max(ext.y).max(ext.z).max(1e-12);
    let floor = 0.01 * max_ext;
    let dx = ext.x.max(floor) * (1.0 + 2.0 * margin);
    let dy = ext.y.max(floor) * (1.0 + 2.0 * margin);
    let dz = ext.z.max(floor) * (1.0 + 2.0 * margin);
    dx * dy * dz
}
