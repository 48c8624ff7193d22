//! Closed-form absolute orientation (Umeyama) between corresponded point sets.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Rotation, SimilarityTransform, Vec3};

/// Source/target clouds in index correspondence, optionally weighted.
#[derive(Debug, Clone)]
pub struct CorrespondedPair {
    source: PointCloud,
    target: PointCloud,
    weights: Option<Vec<f64>>,
}

impl CorrespondedPair {
    pub fn new(source: PointCloud, target: PointCloud) -> Result<Self> {
        Self::build(source, target, None)
    }

    pub fn weighted(source: PointCloud, target: PointCloud, weights: Vec<f64>) -> Result<Self> {
        Self::build(source, target, Some(weights))
    }

    fn build(source: PointCloud, target: PointCloud, weights: Option<Vec<f64>>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "source has {} points, target has {}",
                source.len(),
                target.len()
            )));
        }
        if source.len() < 3 {
            return Err(Error::InsufficientData {
                needed: 3,
                got: source.len(),
            });
        }
        if let Some(w) = &weights {
            if w.len() != source.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} weights for {} points",
                    w.len(),
                    source.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("weights must be finite and non-negative".into()));
            }
            if !(w.iter().sum::<f64>() > 0.0) {
                return Err(Error::DegenerateGeometry("weights sum to zero".into()));
            }
        }
        Ok(CorrespondedPair {
            source,
            target,
            weights,
        })
    }

    pub fn source(&self) -> &PointCloud {
        &self.source
    }

    pub fn target(&self) -> &PointCloud {
        &self.target
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }
}

/// Least-squares similarity transform mapping `source` onto `target`.
///
/// Minimizes `Σ wᵢ ‖targetᵢ − (s R sourceᵢ + T)‖²` over `R ∈ SO(3)`; a
/// reflection in the SVD solution is replaced by flipping the direction of the
/// smallest singular value. With `estimate_scale == false`, `s = 1`.
pub fn solve_umeyama(pair: &CorrespondedPair, estimate_scale: bool) -> Result<SimilarityTransform> {
    let n = pair.source.len();
    let total_w: f64 = (0..n).map(|i| pair.weight(i)).sum();

    let mut mu_s = Vec3::zeros();
    let mut mu_t = Vec3::zeros();
    for i in 0..n {
        let w = pair.weight(i);
        mu_s += w * pair.source.points()[i];
        mu_t += w * pair.target.points()[i];
    }
    mu_s /= total_w;
    mu_t /= total_w;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for i in 0..n {
        let w = pair.weight(i);
        let ds = pair.source.points()[i] - mu_s;
        let dt = pair.target.points()[i] - mu_t;
        cov += w * dt * ds.transpose();
        var_s += w * ds.norm_squared();
    }
    cov /= total_w;
    var_s /= total_w;

    let extent = pair.source.iter().map(|p| p.abs().max()).fold(0.0, f64::max).max(1.0);
    if !(var_s > 1e-24 * extent * extent) {
        return Err(Error::DegenerateGeometry("source points have zero variance".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut sv = svd.singular_values;
    // nalgebra does not guarantee ordering; find the smallest singular value
    let smallest = sv.imin();
    let mut flip = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        flip[(smallest, smallest)] = -1.0;
        sv[smallest] = -sv[smallest];
    }
    let r = u * flip * v_t;
    let rotation = Rotation::from_matrix_unchecked(r);

    let scale = if estimate_scale { sv.sum() / var_s } else { 1.0 };
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "recovered scale {scale} is not positive"
        )));
    }
    let translation = mu_t - scale * (r * mu_s);
    SimilarityTransform::new(rotation, translation, scale)
}

/// Root-mean-square (weighted if weights were given) alignment error of `t`.
pub fn residual_rms(pair: &CorrespondedPair, t: &SimilarityTransform) -> f64 {
    let n = pair.source.len();
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for i in 0..n {
        let w = pair.weight(i);
        let p = t.apply_point(&pair.source.points()[i]);
        acc += w * (pair.target.points()[i] - p).norm_squared();
        wsum += w;
    }
    (acc / wsum).sqrt()
}
