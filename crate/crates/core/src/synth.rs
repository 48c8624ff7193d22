//! Parametric category shapes, posed partial views and category priors.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::chamfer::chamfer_l2sq;
use crate::deform::CategoryPrior;
use crate::error::{Error, Result};
use crate::geom::io::{read_points, write_points};
use crate::geom::{
    bbox_from_cloud, farthest_point_sample, nocs_normalize, random_rotation_with, sin_cos, OrientedBox, PointCloud,
    Rotation, SimilarityTransform, SpatialIndex, Vec3,
};
use crate::seeds;

/// Surface samples per canonical model.
pub const MODEL_POINTS: usize = 2048;
/// Points per category prior.
pub const PRIOR_POINTS: usize = 1024;
/// Accepted fraction of model points visible from the camera.
pub const RETENTION_RANGE: (f64, f64) = (0.3, 0.7);
const MAX_VIEW_ATTEMPTS: usize = 1000;

/// Surface samples paired with outward unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedCloud {
    pub cloud: PointCloud,
    pub normals: Vec<Vec3>,
}

impl OrientedCloud {
    pub fn new(cloud: PointCloud, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != cloud.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} points but {} normals",
                cloud.len(),
                normals.len()
            )));
        }
        Ok(OrientedCloud { cloud, normals })
    }

    pub fn transformed(&self, t: &SimilarityTransform) -> OrientedCloud {
        OrientedCloud {
            cloud: t.apply(&self.cloud),
            normals: self.normals.iter().map(|n| t.rotation.rotate(n)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Part {
    /// Flat ring in the plane `y`, facing `+y` when `up`.
    Annulus { r0: f64, r1: f64, y: f64, up: bool },
    /// Lateral surface of a cone frustum about the y axis.
    Frustum {
        y0: f64,
        y1: f64,
        r0: f64,
        r1: f64,
        outward: bool,
    },
    /// Parallelogram `center + a u + b v`, `a, b ∈ [-1, 1]`, facing `u × v`,
    /// with an optional circular cut-out.
    Rect {
        center: Vec3,
        u: Vec3,
        v: Vec3,
        hole: Option<(Vec3, f64)>,
    },
    /// Sphere zone around the `-y` pole down to polar cosine `cos_min`.
    SphereZone { radius: f64, cos_min: f64, outward: bool },
    /// Torus patch in the xy plane, major angle in `[phi0, phi1]`.
    TorusArc {
        center: Vec3,
        major: f64,
        minor: f64,
        phi0: f64,
        phi1: f64,
    },
}

impl Part {
    fn area(&self) -> f64 {
        match *self {
            Part::Annulus { r0, r1, .. } => PI * (r1 * r1 - r0 * r0),
            Part::Frustum { y0, y1, r0, r1, .. } => PI * (r0 + r1) * ((y1 - y0).powi(2) + (r1 - r0).powi(2)).sqrt(),
            Part::Rect { u, v, hole, .. } => 4.0 * u.cross(&v).norm() - hole.map_or(0.0, |(_, r)| PI * r * r),
            Part::SphereZone { radius, cos_min, .. } => 2.0 * PI * radius * radius * (1.0 - cos_min),
            Part::TorusArc {
                major,
                minor,
                phi0,
                phi1,
                ..
            } => (phi1 - phi0) * 2.0 * PI * minor * major,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec3, Vec3) {
        match *self {
            Part::Annulus { r0, r1, y, up } => {
                let r = (r0 * r0 + rng.random::<f64>() * (r1 * r1 - r0 * r0)).sqrt();
                let th = rng.random_range(0.0..2.0 * PI);
                let n = if up { Vec3::y() } else { -Vec3::y() };
                let (s, c) = sin_cos(th);
                (Vec3::new(r * c, y, r * s), n)
            }
            Part::Frustum {
                y0,
                y1,
                r0,
                r1,
                outward,
            } => {
                let u: f64 = rng.random();
                let t = if (r1 - r0).abs() < 1e-12 {
                    u
                } else {
                    ((r0 * r0 + u * (r1 * r1 - r0 * r0)).sqrt() - r0) / (r1 - r0)
                };
                let r = r0 + (r1 - r0) * t;
                let th = rng.random_range(0.0..2.0 * PI);
                let slope = (r1 - r0) / (y1 - y0);
                let (s, c) = sin_cos(th);
                let mut n = Vec3::new(c, -slope, s).normalize();
                if !outward {
                    n = -n;
                }
                (Vec3::new(r * c, y0 + t * (y1 - y0), r * s), n)
            }
            Part::Rect { center, u, v, hole } => {
                let n = u.cross(&v).normalize();
                loop {
                    let p = center + u * rng.random_range(-1.0..=1.0) + v * rng.random_range(-1.0..=1.0);
                    match hole {
                        Some((c, r)) if (p - c).norm() < r => continue,
                        _ => return (p, n),
                    }
                }
            }
            Part::SphereZone {
                radius,
                cos_min,
                outward,
            } => {
                let c = rng.random_range(cos_min..=1.0);
                let rho = (1.0 - c * c).max(0.0).sqrt();
                let th = rng.random_range(0.0..2.0 * PI);
                let (s, co) = sin_cos(th);
                let dir = Vec3::new(rho * co, -c, rho * s);
                (dir * radius, if outward { dir } else { -dir })
            }
            Part::TorusArc {
                center,
                major,
                minor,
                phi0,
                phi1,
            } => {
                let phi = rng.random_range(phi0..=phi1);
                let psi = loop {
                    let psi = rng.random_range(0.0..2.0 * PI);
                    if rng.random::<f64>() * (major + minor) <= major + minor * psi.cos() {
                        break psi;
                    }
                };
                let (sp, cp) = sin_cos(phi);
                let (ss, cs) = sin_cos(psi);
                let radial = Vec3::new(cp, sp, 0.0);
                let n = radial * cs + Vec3::z() * ss;
                (center + radial * major + n * minor, n)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    part: Part,
    rot: Matrix3<f64>,
    offset: Vec3,
}

impl From<Part> for Placed {
    fn from(part: Part) -> Self {
        Placed {
            part,
            rot: Matrix3::identity(),
            offset: Vec3::zeros(),
        }
    }
}

/// The six faces of a box with right-handed unit `axes`.
fn box_faces(center: Vec3, axes: [Vec3; 3], half: [f64; 3]) -> Vec<Part> {
    let mut faces = Vec::with_capacity(6);
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let u = axes[j] * half[j];
        let v = axes[k] * half[k];
        faces.push(Part::Rect {
            center: center + axes[i] * half[i],
            u,
            v,
            hole: None,
        });
        faces.push(Part::Rect {
            center: center - axes[i] * half[i],
            u: v,
            v: u,
            hole: None,
        });
    }
    faces
}

fn shape_parts<R: Rng + ?Sized>(category: Category, rng: &mut R) -> Vec<Placed> {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
    match category {
        Category::Bottle => {
            let (rb, hb, hs) = (u(0.25, 0.4), u(0.9, 1.3), u(0.15, 0.35));
            let (rn, hn) = (u(0.08, 0.14), u(0.15, 0.35));
            let top = hb + hs + hn;
            vec![
                Part::Annulus {
                    r0: 0.0,
                    r1: rb,
                    y: 0.0,
                    up: false,
                }
                .into(),
                Part::Frustum {
                    y0: 0.0,
                    y1: hb,
                    r0: rb,
                    r1: rb,
                    outward: true,
                }
                .into(),
                Part::Frustum {
                    y0: hb,
                    y1: hb + hs,
                    r0: rb,
                    r1: rn,
                    outward: true,
                }
                .into(),
                Part::Frustum {
                    y0: hb + hs,
                    y1: top,
                    r0: rn,
                    r1: rn,
                    outward: true,
                }
                .into(),
                Part::Annulus {
                    r0: 0.0,
                    r1: rn,
                    y: top,
                    up: true,
                }
                .into(),
            ]
        }
        Category::Can => {
            let (r, h) = (u(0.3, 0.5), u(0.7, 1.3));
            vec![
                Part::Annulus {
                    r0: 0.0,
                    r1: r,
                    y: 0.0,
                    up: false,
                }
                .into(),
                Part::Frustum {
                    y0: 0.0,
                    y1: h,
                    r0: r,
                    r1: r,
                    outward: true,
                }
                .into(),
                Part::Annulus {
                    r0: 0.0,
                    r1: r,
                    y: h,
                    up: true,
                }
                .into(),
            ]
        }
        Category::Bowl => {
            let (theta, t) = (u(55.0, 80.0).to_radians(), u(0.03, 0.08));
            let (sin_outer, cos_outer) = sin_cos(theta);
            let inner = 1.0 - t;
            let cos_inner = (cos_outer / inner).min(1.0);
            let rim_y = -cos_outer;
            vec![
                Part::SphereZone {
                    radius: 1.0,
                    cos_min: cos_outer,
                    outward: true,
                }
                .into(),
                Part::SphereZone {
                    radius: inner,
                    cos_min: cos_inner,
                    outward: false,
                }
                .into(),
                Part::Annulus {
                    r0: inner * (1.0 - cos_inner * cos_inner).sqrt(),
                    r1: sin_outer,
                    y: rim_y,
                    up: true,
                }
                .into(),
            ]
        }
        Category::Camera => {
            let (a, b, c) = (u(0.5, 0.7), u(0.3, 0.45), u(0.18, 0.3));
            let (rl, ll) = (b * u(0.5, 0.75), u(0.2, 0.5));
            let lens_at = Vec3::new(a * u(-0.25, 0.25), 0.0, c);
            let mut parts: Vec<Placed> = box_faces(Vec3::zeros(), [Vec3::x(), Vec3::y(), Vec3::z()], [a, b, c])
                .into_iter()
                .map(|mut f| {
                    if let Part::Rect { center, hole, .. } = &mut f {
                        if center.z > 0.0 {
                            *hole = Some((lens_at, rl));
                        }
                    }
                    f.into()
                })
                .collect();
            let rot = *Rotation3::from_axis_angle(&Vec3::x_axis(), PI / 2.0).matrix();
            for part in [
                Part::Frustum {
                    y0: 0.0,
                    y1: ll,
                    r0: rl,
                    r1: rl,
                    outward: true,
                },
                Part::Annulus {
                    r0: 0.0,
                    r1: rl,
                    y: ll,
                    up: true,
                },
            ] {
                parts.push(Placed {
                    part,
                    rot,
                    offset: lens_at,
                });
            }
            parts
        }
        Category::Laptop => {
            let (w, d, tb, ts) = (u(0.55, 0.75), u(0.4, 0.55), u(0.03, 0.06), u(0.02, 0.04));
            let (len, alpha) = (2.0 * d * u(0.85, 1.0), u(95.0, 135.0).to_radians());
            let (sa, ca) = sin_cos(alpha);
            let dir = Vec3::new(0.0, sa, ca);
            let nrm = Vec3::new(0.0, -ca, sa);
            let hinge = Vec3::new(0.0, tb, -d);
            let mut parts = box_faces(
                Vec3::new(0.0, tb / 2.0, 0.0),
                [Vec3::x(), Vec3::y(), Vec3::z()],
                [w, tb / 2.0, d],
            );
            parts.extend(box_faces(
                hinge + dir * (len / 2.0) - nrm * (ts / 2.0),
                [Vec3::x(), dir, nrm],
                [w, len / 2.0, ts / 2.0],
            ));
            parts.into_iter().map(Placed::from).collect()
        }
        Category::Mug => {
            let (r, h, t) = (u(0.3, 0.42), u(0.7, 1.05), u(0.03, 0.06));
            let (major, minor) = (h * u(0.22, 0.32), u(0.04, 0.07));
            vec![
                Part::Annulus {
                    r0: 0.0,
                    r1: r,
                    y: 0.0,
                    up: false,
                }
                .into(),
                Part::Frustum {
                    y0: 0.0,
                    y1: h,
                    r0: r,
                    r1: r,
                    outward: true,
                }
                .into(),
                Part::Frustum {
                    y0: t,
                    y1: h,
                    r0: r - t,
                    r1: r - t,
                    outward: false,
                }
                .into(),
                Part::Annulus {
                    r0: 0.0,
                    r1: r - t,
                    y: t,
                    up: true,
                }
                .into(),
                Part::Annulus {
                    r0: r - t,
                    r1: r,
                    y: h,
                    up: true,
                }
                .into(),
                Part::TorusArc {
                    center: Vec3::new(r, h / 2.0, 0.0),
                    major,
                    minor,
                    phi0: -PI / 2.0,
                    phi1: PI / 2.0,
                }
                .into(),
            ]
        }
    }
}

/// Samples a random instance of `category` to [`MODEL_POINTS`] surface
/// points and normalizes it to the unit-diagonal canonical frame.
/// The canonical up axis is `+y`.
pub fn sample_surface(category: Category, shape_seed: u64) -> Result<OrientedCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(shape_seed);
    let parts = shape_parts(category, &mut rng);
    let cumulative: Vec<f64> = parts
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.part.area();
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().expect("every shape has parts");
    let mut points = Vec::with_capacity(MODEL_POINTS);
    let mut normals = Vec::with_capacity(MODEL_POINTS);
    for _ in 0..MODEL_POINTS {
        let x = rng.random::<f64>() * total;
        let k = cumulative.partition_point(|&c| c <= x).min(parts.len() - 1);
        let placed = &parts[k];
        let (p, n) = placed.part.sample(&mut rng);
        points.push(placed.rot * p + placed.offset);
        normals.push(placed.rot * n);
    }
    let (cloud, _) = nocs_normalize(&PointCloud::new(points)?)?;
    OrientedCloud::new(cloud, normals)
}

/// Keeps the points whose outward normal faces `viewpoint`, returning the
/// view and the index of each kept point in `full`.
pub fn partial_view(full: &OrientedCloud, viewpoint: &Vec3) -> Result<(PointCloud, Vec<usize>)> {
    let map: Vec<usize> = (0..full.cloud.len())
        .filter(|&i| full.normals[i].dot(&(viewpoint - full.cloud.points()[i])) > 0.0)
        .collect();
    if map.is_empty() {
        return Err(Error::DegenerateGeometry("no point faces the viewpoint".into()));
    }
    Ok((full.cloud.select(&map), map))
}

/// Gaussian jitter of standard deviation `sigma` on every point, then
/// exactly `round(fraction · N)` points replaced by uniform samples from
/// the bounding box enlarged 1.5× about its center. Returns the cloud and
/// the sorted replaced indices.
pub fn add_noise_outliers(pc: &PointCloud, sigma: f64, fraction: f64, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if !(0.0..=0.2).contains(&fraction) {
        return Err(Error::Config(format!(
            "outlier fraction must lie in [0, 0.2], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = pc.points().to_vec();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        for p in &mut pts {
            *p += Vec3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            );
        }
    }
    let count = (fraction * pc.len() as f64).round() as usize;
    let mut replaced = sample_indices(&mut rng, pc.len(), count).into_vec();
    replaced.sort_unstable();
    let (lo, hi) = pc.aabb();
    let (center, half) = ((lo + hi) / 2.0, (hi - lo) * 0.75);
    for &i in &replaced {
        pts[i] = center + Vec3::from_fn(|a, _| half[a] * rng.random_range(-1.0..=1.0));
    }
    Ok((PointCloud::new(pts)?, replaced))
}

/// Sensor corruption applied to partial views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Jitter standard deviation in meters.
    pub sigma: f64,
    pub outlier_fraction: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma: 0.002,
            outlier_fraction: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec {
            sigma: 0.0,
            outlier_fraction: 0.0,
        }
    }
}

/// One synthetic observation with full ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub id: String,
    pub category: Category,
    /// Canonical model, unit diagonal.
    pub model_nocs: PointCloud,
    /// Observed points in the camera frame, meters.
    pub partial_obs: PointCloud,
    /// Maps canonical coordinates to the camera frame.
    pub gt_pose: SimilarityTransform,
    /// Canonical coordinate of every observed point. Outliers carry the
    /// canonical position of their camera-frame location.
    pub gt_nocs_of_obs: PointCloud,
    pub gt_box: OrientedBox,
    pub shape_seed: u64,
    pub pose_seed: u64,
}

/// Generates one instance. The camera sits at the origin looking down `+z`;
/// scale is drawn from `[0.1, 0.5]` m, translation from
/// `[-0.5, 0.5]² × [1, 2]` m and the rotation uniformly, redrawing the
/// rotation until the visible fraction lies in [`RETENTION_RANGE`].
pub fn gen_instance(category: Category, shape_seed: u64, pose_seed: u64, noise: &NoiseSpec) -> Result<InstanceRecord> {
    let model = sample_surface(category, shape_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed);
    let scale = rng.random_range(0.1..=0.5);
    let translation = Vec3::new(
        rng.random_range(-0.5..=0.5),
        rng.random_range(-0.5..=0.5),
        rng.random_range(1.0..=2.0),
    );
    let camera = Vec3::zeros();
    for _ in 0..MAX_VIEW_ATTEMPTS {
        let pose = SimilarityTransform::new(random_rotation_with(&mut rng), translation, scale)?;
        let posed = model.transformed(&pose);
        let Ok((partial, map)) = partial_view(&posed, &camera) else {
            continue;
        };
        let frac = map.len() as f64 / model.cloud.len() as f64;
        if !(RETENTION_RANGE.0..=RETENTION_RANGE.1).contains(&frac) {
            continue;
        }
        let (obs, outliers) = add_noise_outliers(
            &partial,
            noise.sigma,
            noise.outlier_fraction,
            seeds::derive(pose_seed, &[1]),
        )?;
        let mut nocs = model.cloud.select(&map).into_points();
        let inverse = pose.invert();
        for &i in &outliers {
            nocs[i] = inverse.apply_point(&obs.points()[i]);
        }
        return Ok(InstanceRecord {
            id: String::new(),
            category,
            gt_box: bbox_from_cloud(&model.cloud, &Rotation::identity()).transformed(&pose),
            model_nocs: model.cloud,
            partial_obs: obs,
            gt_pose: pose,
            gt_nocs_of_obs: PointCloud::new(nocs)?,
            shape_seed,
            pose_seed,
        });
    }
    Err(Error::Unreachable(format!(
        "no view of {category} (shape seed {shape_seed}) keeps {:.0}-{:.0}% of the surface",
        RETENTION_RANGE.0 * 100.0,
        RETENTION_RANGE.1 * 100.0
    )))
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub categories: Vec<Category>,
    pub count_per_category: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() || self.count_per_category == 0 {
            return Err(Error::Config(
                "dataset needs at least one category and one instance".into(),
            ));
        }
        let mut seen = self.categories.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.categories.len() {
            return Err(Error::Config("dataset categories repeat".into()));
        }
        // Reuse the generator's own parameter checks.
        let probe = PointCloud::new(vec![Vec3::zeros()])?;
        add_noise_outliers(&probe, self.noise.sigma, self.noise.outlier_fraction, 0).map(|_| ())
    }
}

/// Generates the whole dataset; instance `k` of category `c` uses seeds
/// derived from `(seed, c, k)`, so the result is independent of thread count.
pub fn gen_dataset(config: &DatasetConfig, seed: u64) -> Result<Vec<InstanceRecord>> {
    config.validate()?;
    let jobs: Vec<(Category, usize)> = config
        .categories
        .iter()
        .flat_map(|&c| (0..config.count_per_category).map(move |k| (c, k)))
        .collect();
    jobs.par_iter()
        .map(|&(c, k)| {
            let path = [c.index() as u64, k as u64];
            let shape_seed = seeds::derive(seed, &[1, path[0], path[1]]);
            let pose_seed = seeds::derive(seed, &[2, path[0], path[1]]);
            let mut rec = gen_instance(c, shape_seed, pose_seed, &config.noise)?;
            rec.id = format!("{c}_{k:04}");
            Ok(rec)
        })
        .collect()
}

pub const DATASET_FORMAT: &str = "drpose-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub config: DatasetConfig,
    /// Paths of the per-instance metadata files, relative to the dataset root.
    pub instances: Vec<String>,
}

/// Per-instance metadata; point files are referenced relative to the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMeta {
    pub id: String,
    pub category: Category,
    pub shape_seed: u64,
    pub pose_seed: u64,
    pub gt_pose: SimilarityTransform,
    pub gt_box: OrientedBox,
    pub model: String,
    pub partial: String,
    pub gt_nocs: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes point files, metadata and `manifest.json` under `dir`. Returns the
/// relative paths of every file written.
pub fn write_dataset(dir: &Path, config: &DatasetConfig, seed: u64, records: &[InstanceRecord]) -> Result<Vec<String>> {
    let inst_dir = dir.join("instances");
    fs::create_dir_all(&inst_dir).map_err(|e| Error::io(&inst_dir, e))?;
    let mut written = Vec::new();
    let mut metas = Vec::new();
    for rec in records {
        let rel = |suffix: &str| format!("instances/{}.{suffix}", rec.id);
        let meta = InstanceMeta {
            id: rec.id.clone(),
            category: rec.category,
            shape_seed: rec.shape_seed,
            pose_seed: rec.pose_seed,
            gt_pose: rec.gt_pose,
            gt_box: rec.gt_box,
            model: rel("model.xyz"),
            partial: rel("partial.xyz"),
            gt_nocs: rel("gt_nocs.xyz"),
        };
        write_points(&dir.join(&meta.model), &rec.model_nocs)?;
        write_points(&dir.join(&meta.partial), &rec.partial_obs)?;
        write_points(&dir.join(&meta.gt_nocs), &rec.gt_nocs_of_obs)?;
        let meta_rel = rel("json");
        write_json(&dir.join(&meta_rel), &meta)?;
        written.extend([
            meta.model.clone(),
            meta.partial.clone(),
            meta.gt_nocs.clone(),
            meta_rel.clone(),
        ]);
        metas.push(meta_rel);
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        seed,
        config: config.clone(),
        instances: metas,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    written.push(MANIFEST_FILE.into());
    Ok(written)
}

/// Loads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<InstanceRecord>)> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::parse(
            &dir.join(MANIFEST_FILE),
            format!("unknown dataset format `{}`", manifest.format),
        ));
    }
    let records = manifest
        .instances
        .iter()
        .map(|rel| {
            let meta: InstanceMeta = read_json(&dir.join(rel))?;
            let partial_obs = read_points(&dir.join(&meta.partial))?;
            let gt_nocs_of_obs = read_points(&dir.join(&meta.gt_nocs))?;
            if partial_obs.len() != gt_nocs_of_obs.len() {
                return Err(Error::parse(&dir.join(rel), "partial and gt_nocs lengths differ"));
            }
            Ok(InstanceRecord {
                id: meta.id,
                category: meta.category,
                model_nocs: read_points(&dir.join(&meta.model))?,
                partial_obs,
                gt_pose: meta.gt_pose,
                gt_nocs_of_obs,
                gt_box: meta.gt_box,
                shape_seed: meta.shape_seed,
                pose_seed: meta.pose_seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Coherent-point mean of canonical models: [`PRIOR_POINTS`] seeds are
/// chosen by farthest-point sampling on the merged models, each seed is
/// replaced by the mean of its nearest neighbor in every model, and the
/// result is renormalized to unit diagonal.
pub fn build_prior(category: Category, models: &[&PointCloud]) -> Result<CategoryPrior> {
    if models.is_empty() {
        return Err(Error::EmptyCategory(category.to_string()));
    }
    if models.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: models.len(),
        });
    }
    let merged = models[1..].iter().fold(models[0].clone(), |acc, m| acc.concat(m));
    let seeds_idx = farthest_point_sample(&merged, PRIOR_POINTS.min(merged.len()));
    let indices: Vec<SpatialIndex> = models.iter().map(|m| SpatialIndex::build(m)).collect();
    let mean: Vec<Vec3> = seeds_idx
        .iter()
        .map(|&s| {
            let q = merged.points()[s];
            let sum: Vec3 = indices.iter().map(|ix| *ix.point(ix.nearest(&q).0)).sum();
            sum / models.len() as f64
        })
        .collect();
    let (cloud, _) = nocs_normalize(&PointCloud::new(mean)?)?;
    CategoryPrior::new(category, cloud)
}

/// Smooth random displacement field: a sum of a few sinusoidal plane waves.
struct WaveField {
    waves: Vec<(Vec3, Vec3, f64)>,
}

impl WaveField {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..6)
            .map(|_| {
                let amp = random_rotation_with(&mut rng).rotate(&Vec3::x()) / 6f64.sqrt();
                let freq = 2.0 * PI * rng.random_range(0.5..=1.5);
                let dir = random_rotation_with(&mut rng).rotate(&Vec3::x()) * freq;
                (amp, dir, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        WaveField { waves }
    }

    fn displace(&self, pc: &PointCloud, alpha: f64) -> Result<PointCloud> {
        PointCloud::new(
            pc.iter()
                .map(|p| {
                    p + self
                        .waves
                        .iter()
                        .map(|(a, k, ph)| a * (k.dot(p) + ph).sin())
                        .sum::<Vec3>()
                        * alpha
                })
                .collect(),
        )
    }
}

/// Adds a smooth random deformation whose amplitude is calibrated by
/// bisection until the squared-L2 Chamfer distance to `p_def` is within 5%
/// of `cd_target`.
pub fn perturb_prior(p_def: &PointCloud, cd_target: f64, seed: u64) -> Result<PointCloud> {
    if !(cd_target >= 0.0 && cd_target.is_finite()) {
        return Err(Error::Config(format!(
            "Chamfer target must be finite and non-negative, got {cd_target}"
        )));
    }
    if cd_target == 0.0 {
        return Ok(p_def.clone());
    }
    let field = WaveField::new(seed);
    let cd_at = |alpha: f64| -> Result<(f64, PointCloud)> {
        let pc = field.displace(p_def, alpha)?;
        Ok((chamfer_l2sq(&pc, p_def).total, pc))
    };
    let within = |cd: f64| (cd - cd_target).abs() <= 0.02 * cd_target;
    let (mut lo, mut hi) = (0.0, 1e-3);
    loop {
        let (cd, pc) = cd_at(hi)?;
        if within(cd) {
            return Ok(pc);
        }
        if cd > cd_target {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > 100.0 {
            return Err(Error::Unreachable(format!(
                "Chamfer target {cd_target} exceeds the field's reach"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (cd, pc) = cd_at(mid)?;
        if within(cd) {
            return Ok(pc);
        }
        if cd < cd_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Unreachable(format!(
        "bisection did not reach Chamfer target {cd_target}"
    )))
}
