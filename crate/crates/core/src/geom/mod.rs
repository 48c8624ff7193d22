//! Point clouds, similarity transforms, oriented boxes and the spatial index
//! shared by every other module.

pub mod io;
mod kdtree;

pub use kdtree::SpatialIndex;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

/// A proper rotation, `RᵀR = I` and `det R = +1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and orientation.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rotation matrix".into()));
        }
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!(
                "columns not orthonormal (max deviation {err:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix produced by an orthogonal construction (SVD, products
    /// of rotations) without re-validating it.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let axis = Unit::new_normalize(*axis);
        Rotation(
            *UnitQuaternion::from_axis_angle(&axis, angle)
                .to_rotation_matrix()
                .matrix(),
        )
    }

    /// Rotation about the canonical vertical (+y) axis.
    pub fn yaw(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn mul(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic angle of this rotation, in radians.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Rotation::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        let m = r.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

/// `p ↦ scale · R p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub rotation: Rotation,
    #[serde(with = "vec3_serde")]
    pub translation: Vec3,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn new(rotation: Rotation, translation: Vec3, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::DegenerateGeometry(format!(
                "scale must be positive, got {scale}"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(SimilarityTransform {
            rotation,
            translation,
            scale,
        })
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation.matrix() * p) + self.translation
    }

    pub fn apply(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            points: pc.points.iter().map(|p| self.apply_point(p)).collect(),
            label: pc.label.clone(),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            rotation: self.rotation.mul(&other.rotation),
            translation: self.scale * (self.rotation.matrix() * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn invert(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        SimilarityTransform {
            rotation: rt,
            translation: -inv_s * (rt.matrix() * self.translation),
            scale: inv_s,
        }
    }
}

/// Ordered list of finite 3D points, optionally tagged with a category.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    pub label: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        Ok(PointCloud { points, label: None })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false for a constructed cloud; provided for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    /// Axis-aligned (min, max) corners.
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Length of the axis-aligned bounding-box diagonal.
    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.aabb();
        (hi - lo).norm()
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label.clone(),
        }
    }

    /// Concatenates `other` after `self`.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud {
            points,
            label: self.label.clone(),
        }
    }

    /// Row-major `N × 3` matrix of coordinates.
    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.len(), 3, |r, c| self.points[r][c])
    }

    pub fn from_matrix(m: &nalgebra::DMatrix<f64>) -> Result<Self> {
        if m.ncols() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected N×3, got {}×{}",
                m.nrows(),
                m.ncols()
            )));
        }
        PointCloud::new(
            (0..m.nrows())
                .map(|r| Vec3::new(m[(r, 0)], m[(r, 1)], m[(r, 2)]))
                .collect(),
        )
    }
}

/// Box with arbitrary orientation; `extents` are full side lengths along the
/// box's local axes (the columns of `rotation`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    #[serde(with = "vec3_serde")]
    pub center: Vec3,
    pub rotation: Rotation,
    #[serde(with = "vec3_serde")]
    pub extents: Vec3,
}

impl OrientedBox {
    pub fn new(center: Vec3, rotation: Rotation, extents: Vec3) -> Result<Self> {
        if extents.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::DegenerateGeometry(format!(
                "box extents must be positive, got {extents:?}"
            )));
        }
        Ok(OrientedBox {
            center,
            rotation,
            extents,
        })
    }

    pub fn volume(&self) -> f64 {
        self.extents.x * self.extents.y * self.extents.z
    }

    /// Point expressed in the box's local frame (origin at the center).
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.rotation.matrix().tr_mul(&(p - self.center))
    }

    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.rotation.matrix() * local + self.center
    }

    /// Closed-box membership with a relative slack of `1e-12` per axis so that
    /// points sampled inside a box survive the world/local round trip.
    pub fn contains(&self, p: &Vec3) -> bool {
        let q = self.to_local(p);
        (0..3).all(|k| q[k].abs() <= 0.5 * self.extents[k] * (1.0 + 1e-12))
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.extents / 2.0;
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *c = self.to_world(&Vec3::new(sx * h.x, sy * h.y, sz * h.z));
        }
        out
    }

    /// Box placed by a similarity transform.
    pub fn transformed(&self, t: &SimilarityTransform) -> OrientedBox {
        OrientedBox {
            center: t.apply_point(&self.center),
            rotation: t.rotation.mul(&self.rotation),
            extents: self.extents * t.scale,
        }
    }
}

/// `(sin x, cos x)` from a portable implementation, so results do not depend
/// on which system routine the optimizer picks for a paired sine and cosine.
pub fn sin_cos(x: f64) -> (f64, f64) {
    (libm::sin(x), libm::cos(x))
}

/// Uniformly distributed rotation from a unit quaternion (Shoemake's
/// subgroup algorithm), deterministic per seed.
pub fn random_rotation(seed: u64) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

pub fn random_rotation_with<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    use std::f64::consts::TAU;
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = sin_cos(TAU * u2);
    let (s3, c3) = sin_cos(TAU * u3);
    let q = nalgebra::Quaternion::new(b * c3, a * s2, a * c2, b * s3);
    let uq = UnitQuaternion::from_quaternion(q);
    Rotation(*uq.to_rotation_matrix().matrix())
}

/// Fixed-size resampling. Without replacement when `n <= N`; otherwise every
/// point appears once and the remaining `n - N` are drawn with replacement.
pub fn downsample(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Config("downsample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = pc.len();
    let idx: Vec<usize> = if n <= total {
        index::sample(&mut rng, total, n).into_vec()
    } else {
        let mut all: Vec<usize> = index::sample(&mut rng, total, total).into_vec();
        all.extend((0..n - total).map(|_| rng.random_range(0..total)));
        all
    };
    Ok(pc.select(&idx))
}

/// Centers the cloud on its bounding-box center and scales it to unit
/// bounding-box diagonal. The returned transform maps the normalized cloud
/// back onto the input.
pub fn nocs_normalize(pc: &PointCloud) -> Result<(PointCloud, SimilarityTransform)> {
    let (lo, hi) = pc.aabb();
    let diag = (hi - lo).norm();
    if !(diag > 0.0) {
        return Err(Error::ZeroExtent);
    }
    let center = (lo + hi) / 2.0;
    let to_input = SimilarityTransform::new(Rotation::identity(), center, diag)?;
    let normalized = PointCloud {
        points: pc.points.iter().map(|p| (p - center) / diag).collect(),
        label: pc.label.clone(),
    };
    Ok((normalized, to_input))
}

/// Smallest box with the given orientation that contains every point.
/// Flat directions get a floor extent of `1e-12` to keep the box valid.
pub fn bbox_from_cloud(pc: &PointCloud, rotation: &Rotation) -> OrientedBox {
    let rt = rotation.matrix().transpose();
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in pc.iter() {
        let q = rt * p;
        lo = lo.inf(&q);
        hi = hi.sup(&q);
    }
    let extents = (hi - lo).map(|e| e.max(1e-12));
    OrientedBox {
        center: rotation.matrix() * ((lo + hi) / 2.0),
        rotation: *rotation,
        extents,
    }
}

/// Voxel-grid downsampling. One representative per occupied cell: the member
/// point closest to the cell's centroid (ties broken by coordinates). Cells
/// are emitted in lexicographic key order, so the result does not depend on
/// the input point order. Returns the sampled cloud and its source indices.
pub fn voxel_downsample(pc: &PointCloud, cell: f64) -> Result<(PointCloud, Vec<usize>)> {
    if !(cell.is_finite() && cell > 0.0) {
        return Err(Error::Config(format!("voxel cell size must be positive, got {cell}")));
    }
    let (lo, _) = pc.aabb();
    let mut cells: std::collections::BTreeMap<(i64, i64, i64), Vec<usize>> = Default::default();
    for (i, p) in pc.iter().enumerate() {
        let k = (p - lo) / cell;
        let key = (k.x.floor() as i64, k.y.floor() as i64, k.z.floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let mut picked = Vec::with_capacity(cells.len());
    for members in cells.values() {
        // centroid of the cell, summed in coordinate order for order independence
        let mut sorted: Vec<&Vec3> = members.iter().map(|&i| &pc.points[i]).collect();
        sorted.sort_by(|a, b| lex_cmp(a, b));
        let c = sorted.iter().copied().sum::<Vec3>() / sorted.len() as f64;
        let best = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = (pc.points[a] - c).norm_squared();
                let db = (pc.points[b] - c).norm_squared();
                da.total_cmp(&db).then_with(|| lex_cmp(&pc.points[a], &pc.points[b]))
            })
            .expect("non-empty cell");
        picked.push(best);
    }
    Ok((pc.select(&picked), picked))
}

fn lex_cmp(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// Farthest-point sampling starting from index 0. Returns selected indices.
pub fn farthest_point_sample(pc: &PointCloud, n: usize) -> Vec<usize> {
    let n = n.min(pc.len());
    let mut chosen = Vec::with_capacity(n);
    if n == 0 {
        return chosen;
    }
    let mut dist = vec![f64::INFINITY; pc.len()];
    let mut current = 0usize;
    for _ in 0..n {
        chosen.push(current);
        let c = pc.points[current];
        let mut next = 0usize;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in pc.points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > far {
                far = dist[i];
                next = i;
            }
        }
        current = next;
    }
    chosen
}

pub(crate) mod vec3_serde {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}
