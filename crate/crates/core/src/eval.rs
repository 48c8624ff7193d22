//! Pose metrics: oriented-box IoU, rotation and translation errors with
//! symmetry handling, per-category hit rates and the prior-quality trend
//! study.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::chamfer::chamfer_l2sq;
use crate::error::{Error, Result};
use crate::geom::{OrientedBox, PointCloud, Rotation, SimilarityTransform, Vec3};
use crate::regis::{infer, RegistrationModel};
use crate::seeds;
use crate::synth::{perturb_prior, InstanceRecord};

/// Which categories are rotation-symmetric about the canonical `+y` axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymmetrySpec(BTreeMap<Category, bool>);

impl Default for SymmetrySpec {
    fn default() -> Self {
        SymmetrySpec(
            Category::ALL
                .iter()
                .map(|c| (*c, matches!(c, Category::Bottle | Category::Bowl | Category::Can)))
                .collect(),
        )
    }
}

impl SymmetrySpec {
    pub fn new(flags: BTreeMap<Category, bool>) -> Result<Self> {
        let spec = SymmetrySpec(flags);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match Category::ALL.iter().find(|c| !self.0.contains_key(c)) {
            Some(c) => Err(Error::Config(format!("symmetry flag missing for {c}"))),
            None => Ok(()),
        }
    }

    pub fn is_symmetric(&self, c: Category) -> bool {
        self.0.get(&c).copied().unwrap_or(false)
    }
}

/// Rotation error in degrees. For symmetric objects this is the smallest
/// geodesic angle over yaw rotations of `gt` about its `+y` axis, which is
/// the angle between the two rotated `+y` axes.
pub fn rot_error_deg(pred: &Rotation, gt: &Rotation, symmetric: bool) -> f64 {
    let angle = if symmetric {
        let a = pred.rotate(&Vec3::y());
        let b = gt.rotate(&Vec3::y());
        a.cross(&b).norm().atan2(a.dot(&b))
    } else {
        // atan2 form of arccos((tr(predᵀ gt) − 1) / 2), accurate near 0 and π.
        let m = pred.matrix().tr_mul(gt.matrix());
        let skew = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        (0.5 * skew.norm()).atan2(0.5 * (m.trace() - 1.0))
    };
    angle.to_degrees()
}

pub fn trans_error(pred: &Vec3, gt: &Vec3) -> f64 {
    (pred - gt).norm()
}

/// Monte Carlo IoU estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouEstimate {
    pub iou: f64,
    pub std_err: f64,
}

/// Samples `samples` points uniformly in each box, estimates the
/// intersection volume from both sides and averages. Identical boxes give
/// exactly 1 and disjoint boxes exactly 0.
pub fn iou_3d(a: &OrientedBox, b: &OrientedBox, samples: usize, seed: u64) -> Result<IouEstimate> {
    if samples == 0 {
        return Err(Error::Config("IoU needs at least one sample".into()));
    }
    let (va, vb) = (a.volume(), b.volume());
    if !(va > 0.0 && vb > 0.0) {
        return Err(Error::DegenerateGeometry("IoU of a zero-volume box".into()));
    }
    if a == b {
        return Ok(IouEstimate { iou: 1.0, std_err: 0.0 });
    }
    let frac_inside = |from: &OrientedBox, to: &OrientedBox, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[stream]));
        let hits = (0..samples)
            .filter(|_| {
                let u = Vec3::from_fn(|i, _| (rng.random::<f64>() - 0.5) * from.extents[i]);
                to.contains(&from.to_world(&u))
            })
            .count();
        hits as f64 / samples as f64
    };
    let (pa, pb) = (frac_inside(a, b, 0), frac_inside(b, a, 1));
    let inter = 0.5 * (pa * va + pb * vb);
    let union = va + vb - inter;
    let iou = (inter / union).clamp(0.0, 1.0);
    // Delta method: dIoU/dI = (Va + Vb) / U².
    let var_i = 0.25 * (va * va * pa * (1.0 - pa) + vb * vb * pb * (1.0 - pb)) / samples as f64;
    let std_err = var_i.sqrt() * (va + vb) / (union * union);
    Ok(IouEstimate { iou, std_err })
}

/// A predicted or ground-truth pose with its box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseBox {
    pub pose: SimilarityTransform,
    pub bbox: OrientedBox,
}

/// `rot_error ≤ deg` and `trans_error ≤ cm / 100`.
pub fn pose_hit(pred: &PoseBox, gt: &PoseBox, deg: f64, cm: f64, symmetric: bool) -> bool {
    rot_error_deg(&pred.pose.rotation, &gt.pose.rotation, symmetric) <= deg
        && trans_error(&pred.pose.translation, &gt.pose.translation) <= cm / 100.0
}

/// For symmetric objects, spins the predicted box about its own `+y` axis to
/// the yaw that best agrees with the ground-truth box.
fn align_symmetric_box(pred: &OrientedBox, gt: &OrientedBox) -> OrientedBox {
    let m = gt.rotation.matrix().tr_mul(pred.rotation.matrix());
    let yaw = (m[(2, 0)] - m[(0, 2)]).atan2(m[(0, 0)] + m[(2, 2)]);
    OrientedBox {
        rotation: pred.rotation.mul(&Rotation::yaw(yaw)),
        ..*pred
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub category: Category,
    #[serde(flatten)]
    pub pose_box: PoseBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    pub category: Category,
    #[serde(flatten)]
    pub pose_box: PoseBox,
}

impl From<&InstanceRecord> for GroundTruth {
    fn from(r: &InstanceRecord) -> Self {
        GroundTruth {
            id: r.id.clone(),
            category: r.category,
            pose_box: PoseBox {
                pose: r.gt_pose,
                bbox: r.gt_box,
            },
        }
    }
}

/// Hit rates for the six reported thresholds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub iou50: f64,
    pub iou75: f64,
    pub deg5_cm2: f64,
    pub deg5_cm5: f64,
    pub deg10_cm2: f64,
    pub deg10_cm5: f64,
}

impl Rates {
    pub const COLUMNS: [&'static str; 6] = ["iou50", "iou75", "deg5_cm2", "deg5_cm5", "deg10_cm2", "deg10_cm5"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.iou50,
            self.iou75,
            self.deg5_cm2,
            self.deg5_cm5,
            self.deg10_cm2,
            self.deg10_cm5,
        ]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Rates {
            iou50: v[0],
            iou75: v[1],
            deg5_cm2: v[2],
            deg5_cm5: v[3],
            deg10_cm2: v[4],
            deg10_cm5: v[5],
        }
    }

    /// Element-wise mean; zero for an empty slice.
    pub fn mean(all: &[Rates]) -> Rates {
        let mut acc = [0.0; 6];
        for r in all {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Rates::from_values(acc.map(|a| if all.is_empty() { 0.0 } else { a / all.len() as f64 }))
    }
}

/// Errors of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceErrors {
    pub id: String,
    pub category: Category,
    pub rot_deg: f64,
    pub trans_m: f64,
    pub iou: f64,
    pub iou_std_err: f64,
}

impl InstanceErrors {
    fn hits(&self) -> [bool; 6] {
        let pose = |deg: f64, cm: f64| self.rot_deg <= deg && self.trans_m <= cm / 100.0;
        [
            self.iou >= 0.5,
            self.iou >= 0.75,
            pose(5.0, 2.0),
            pose(5.0, 5.0),
            pose(10.0, 2.0),
            pose(10.0, 5.0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRates {
    pub category: Category,
    pub count: usize,
    pub rates: Rates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub categories: Vec<CategoryRates>,
    /// Unweighted mean over the categories present.
    pub mean: Rates,
    pub instances: Vec<InstanceErrors>,
}

pub const REPORT_HEADER: &str = "category,count,iou50,iou75,deg5_cm2,deg5_cm5,deg10_cm2,deg10_cm5";

fn rates_csv(out: &mut String, rates: &Rates) {
    for v in rates.values() {
        write!(out, ",{v:.6}").expect("write to string");
    }
    out.push('\n');
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for c in &self.categories {
            write!(out, "{},{}", c.category, c.count).expect("write to string");
            rates_csv(&mut out, &c.rates);
        }
        write!(out, "mean,{}", self.count).expect("write to string");
        rates_csv(&mut out, &self.mean);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Rate for one category, if present.
    pub fn category(&self, c: Category) -> Option<&CategoryRates> {
        self.categories.iter().find(|r| r.category == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Monte Carlo samples per box for IoU.
    pub iou_samples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            iou_samples: 100_000,
            seed: 0,
        }
    }
}

/// FNV-1a, so that each instance's IoU samples depend only on its id.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn instance_errors(
    pred: &Prediction,
    gt: &GroundTruth,
    sym: &SymmetrySpec,
    opts: &EvalOptions,
) -> Result<InstanceErrors> {
    let symmetric = sym.is_symmetric(gt.category);
    let (p, g) = (&pred.pose_box, &gt.pose_box);
    let pred_box = if symmetric {
        align_symmetric_box(&p.bbox, &g.bbox)
    } else {
        p.bbox
    };
    let iou = iou_3d(
        &pred_box,
        &g.bbox,
        opts.iou_samples,
        seeds::derive(opts.seed, &[id_hash(&gt.id)]),
    )?;
    Ok(InstanceErrors {
        id: gt.id.clone(),
        category: gt.category,
        rot_deg: rot_error_deg(&p.pose.rotation, &g.pose.rotation, symmetric),
        trans_m: trans_error(&p.pose.translation, &g.pose.translation),
        iou: iou.iou,
        iou_std_err: iou.std_err,
    })
}

/// Per-category hit rates, with predictions matched to ground truth by id.
/// Detection is taken as perfect, so a rate is the fraction of instances
/// passing the threshold.
pub fn evaluate(
    preds: &[Prediction],
    gts: &[GroundTruth],
    sym: &SymmetrySpec,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if gts.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut pairs = Vec::with_capacity(gts.len());
    for g in gts {
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::ShapeMismatch(format!("no prediction for instance `{}`", g.id)))?;
        if p.category != g.category {
            return Err(Error::ShapeMismatch(format!("category mismatch for `{}`", g.id)));
        }
        pairs.push((*p, g));
    }
    pairs.sort_by(|a, b| (a.1.category, &a.1.id).cmp(&(b.1.category, &b.1.id)));
    let instances = pairs
        .par_iter()
        .map(|(p, g)| instance_errors(p, g, sym, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_errors(instances))
}

/// Aggregates per-instance errors into a report.
pub fn report_from_errors(mut instances: Vec<InstanceErrors>) -> MetricReport {
    instances.sort_by(|a, b| (a.category, &a.id).cmp(&(b.category, &b.id)));
    let mut categories = Vec::new();
    for c in Category::ALL {
        let rows: Vec<&InstanceErrors> = instances.iter().filter(|e| e.category == c).collect();
        if rows.is_empty() {
            continue;
        }
        let mut hits = [0usize; 6];
        for e in &rows {
            for (h, ok) in hits.iter_mut().zip(e.hits()) {
                *h += ok as usize;
            }
        }
        categories.push(CategoryRates {
            category: c,
            count: rows.len(),
            rates: Rates::from_values(hits.map(|h| h as f64 / rows.len() as f64)),
        });
    }
    let mean = Rates::mean(&categories.iter().map(|c| c.rates).collect::<Vec<_>>());
    MetricReport {
        count: instances.len(),
        categories,
        mean,
        instances,
    }
}

/// One instance of the trend study: its record and the stage-one prior.
#[derive(Debug, Clone, Copy)]
pub struct TrendInstance<'a> {
    pub record: &'a InstanceRecord,
    pub prior_def: &'a PointCloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub cd_target: f64,
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    /// Mean chamfer distance between perturbed and unperturbed priors.
    pub achieved_cd: f64,
    pub count: usize,
    pub rates: Rates,
}

pub const TREND_HEADER: &str = "cd_target,seed,achieved_cd,count,iou50,iou75,deg5_cm2,deg5_cm5,deg10_cm2,deg10_cm5";

pub fn trend_csv(rows: &[TrendRow]) -> String {
    let mut out = format!("{TREND_HEADER}\n");
    for r in rows {
        let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
        write!(out, "{:.6},{seed},{:.8},{}", r.cd_target, r.achieved_cd, r.count).expect("write to string");
        rates_csv(&mut out, &r.rates);
    }
    out
}

/// Perturbs each stage-one prior to every chamfer target, reruns the frozen
/// registration network and evaluates. One row per (target, seed), then one
/// mean row per target.
pub fn trend_study(
    instances: &[TrendInstance<'_>],
    cd_targets: &[f64],
    model: &RegistrationModel,
    seeds_list: &[u64],
    sym: &SymmetrySpec,
    opts: &EvalOptions,
) -> Result<Vec<TrendRow>> {
    if instances.is_empty() || cd_targets.is_empty() || seeds_list.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut rows = Vec::new();
    for (ti, &target) in cd_targets.iter().enumerate() {
        let mut per_seed = Vec::with_capacity(seeds_list.len());
        for &seed in seeds_list {
            let outcome = instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    let s = seeds::derive(seed, &[ti as u64, i as u64]);
                    let prior = perturb_prior(inst.prior_def, target, s)?;
                    let cd = chamfer_l2sq(&prior, inst.prior_def).total;
                    let res = infer(model, &inst.record.partial_obs, &prior)?;
                    let pred = Prediction {
                        id: inst.record.id.clone(),
                        category: inst.record.category,
                        pose_box: PoseBox {
                            pose: res.pose,
                            bbox: res.bbox,
                        },
                    };
                    let eval_opts = EvalOptions {
                        seed: seeds::derive(opts.seed, &[seed]),
                        ..*opts
                    };
                    Ok((
                        cd,
                        instance_errors(&pred, &GroundTruth::from(inst.record), sym, &eval_opts)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let achieved = outcome.iter().map(|(cd, _)| cd).sum::<f64>() / outcome.len() as f64;
            let report = report_from_errors(outcome.into_iter().map(|(_, e)| e).collect());
            let row = TrendRow {
                cd_target: target,
                seed: Some(seed),
                achieved_cd: achieved,
                count: report.count,
                rates: report.mean,
            };
            per_seed.push(row);
        }
        let mean = TrendRow {
            cd_target: target,
            seed: None,
            achieved_cd: per_seed.iter().map(|r| r.achieved_cd).sum::<f64>() / per_seed.len() as f64,
            count: per_seed[0].count,
            rates: Rates::mean(&per_seed.iter().map(|r| r.rates).collect::<Vec<_>>()),
        };
        rows.extend(per_seed);
        rows.push(mean);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_rotation;
    use std::f64::consts::FRAC_PI_2;

    fn unit_box(center: Vec3, extents: Vec3) -> OrientedBox {
        OrientedBox {
            center,
            rotation: Rotation::identity(),
            extents,
        }
    }

    fn geodesic_acos(a: &Rotation, b: &Rotation) -> f64 {
        let t = a.matrix().tr_mul(b.matrix()).trace();
        ((t - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn rotation_error_basics() {
        let r = random_rotation(1);
        assert_eq!(rot_error_deg(&r, &r, false), 0.0);
        let z = Rotation::from_axis_angle(&Vec3::z(), FRAC_PI_2);
        assert!((rot_error_deg(&Rotation::identity(), &z, false) - 90.0).abs() < 1e-12);
        for s in 0..20 {
            let (a, b) = (random_rotation(2 * s), random_rotation(2 * s + 1));
            assert!((rot_error_deg(&a, &b, false) - geodesic_acos(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_error_matches_dense_yaw_search() {
        for s in 0..10 {
            let (pred, gt) = (random_rotation(100 + s), random_rotation(200 + s));
            let oracle = (0..3600)
                .map(|k| {
                    let yaw = Rotation::yaw(k as f64 * std::f64::consts::TAU / 3600.0);
                    geodesic_acos(&pred, &gt.mul(&yaw))
                })
                .fold(f64::INFINITY, f64::min);
            let closed = rot_error_deg(&pred, &gt, true);
            assert!(closed <= oracle + 1e-9);
            assert!(oracle - closed < 0.01, "{closed} vs {oracle}");
        }
        let gt = random_rotation(3);
        assert!(rot_error_deg(&gt.mul(&Rotation::yaw(1.1)), &gt, true) < 1e-6);
    }

    #[test]
    fn rotation_error_is_a_metric() {
        for s in 0..50 {
            let (a, b, c) = (
                random_rotation(3 * s),
                random_rotation(3 * s + 1),
                random_rotation(3 * s + 2),
            );
            for sym in [false, true] {
                let ab = rot_error_deg(&a, &b, sym);
                assert!((ab - rot_error_deg(&b, &a, sym)).abs() < 1e-9);
                assert!(ab <= rot_error_deg(&a, &c, sym) + rot_error_deg(&c, &b, sym) + 1e-9);
            }
            let before = rot_error_deg(&a, &b, true);
            let after = rot_error_deg(&a, &b.mul(&Rotation::yaw(s as f64 * 0.37)), true);
            assert!((before - after).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_error() {
        assert_eq!(trans_error(&Vec3::zeros(), &Vec3::zeros()), 0.0);
        assert!((trans_error(&Vec3::zeros(), &Vec3::new(0.0, 0.03, 0.04)) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn iou_fixtures() {
        let a = unit_box(Vec3::zeros(), Vec3::repeat(1.0));
        assert_eq!(iou_3d(&a, &a, 10, 0).unwrap().iou, 1.0);
        let far = unit_box(Vec3::new(3.0, 0.0, 0.0), Vec3::repeat(1.0));
        assert_eq!(iou_3d(&a, &far, 1000, 0).unwrap().iou, 0.0);
        let b = unit_box(Vec3::new(0.5, 0.0, 0.0), Vec3::repeat(1.0));
        let est = iou_3d(&a, &b, 100_000, 1).unwrap();
        assert!((est.iou - 1.0 / 3.0).abs() < 0.01);
        assert!((est.iou - 1.0 / 3.0).abs() < 3.0 * est.std_err + 1e-12);
        let inner = unit_box(Vec3::zeros(), Vec3::repeat(0.5));
        assert!((iou_3d(&a, &inner, 100_000, 2).unwrap().iou - 0.125).abs() < 0.01);
    }

    #[test]
    fn pose_hit_thresholds() {
        let gt = PoseBox {
            pose: SimilarityTransform::new(Rotation::identity(), Vec3::new(0.0, 0.0, 1.0), 0.3).unwrap(),
            bbox: unit_box(Vec3::new(0.0, 0.0, 1.0), Vec3::repeat(0.3)),
        };
        assert!(pose_hit(&gt, &gt, 5.0, 2.0, false));
        let mut pred = gt;
        pred.pose.rotation = Rotation::from_axis_angle(&Vec3::x(), 6f64.to_radians());
        pred.pose.translation += Vec3::new(0.01, 0.0, 0.0);
        assert!(!pose_hit(&pred, &gt, 5.0, 2.0, false));
        assert!(pose_hit(&pred, &gt, 10.0, 2.0, false));
        pred.pose.rotation = Rotation::yaw(0.8);
        assert!(!pose_hit(&pred, &gt, 10.0, 5.0, false));
        assert!(pose_hit(&pred, &gt, 5.0, 2.0, true));
    }

    fn fixture(id: &str, c: Category, rot_deg: f64, trans_cm: f64) -> (Prediction, GroundTruth) {
        let center = Vec3::new(0.1, 0.0, 1.5);
        let gt_box = OrientedBox {
            center,
            rotation: Rotation::identity(),
            extents: Vec3::new(0.2, 0.3, 0.25),
        };
        let gt = GroundTruth {
            id: id.into(),
            category: c,
            pose_box: PoseBox {
                pose: SimilarityTransform::new(Rotation::identity(), center, 0.3).unwrap(),
                bbox: gt_box,
            },
        };
        let r = Rotation::from_axis_angle(&Vec3::x(), rot_deg.to_radians());
        let t = center + Vec3::new(trans_cm / 100.0, 0.0, 0.0);
        let pred = Prediction {
            id: id.into(),
            category: c,
            pose_box: PoseBox {
                pose: SimilarityTransform::new(r, t, 0.3).unwrap(),
                bbox: OrientedBox {
                    center: t,
                    rotation: r,
                    extents: gt_box.extents,
                },
            },
        };
        (pred, gt)
    }

    #[test]
    fn exact_predictions_score_one() {
        let (p, g): (Vec<_>, Vec<_>) = Category::ALL
            .iter()
            .map(|c| fixture(&format!("{c}_0"), *c, 0.0, 0.0))
            .map(|(mut p, g)| {
                p.pose_box = g.pose_box;
                (p, g)
            })
            .unzip();
        let r = evaluate(&p, &g, &SymmetrySpec::default(), &EvalOptions::default()).unwrap();
        assert!(r.mean.values().iter().all(|v| *v == 1.0));
        assert_eq!(r.categories.len(), 6);
    }

    #[test]
    fn hand_counted_report() {
        // (rot°, cm): hits for 5°2cm / 5°5cm / 10°2cm / 10°5cm.
        let camera = [(1.0, 1.0), (4.0, 3.0), (7.0, 1.0), (7.0, 4.0), (12.0, 0.5)];
        let mug = [(0.5, 0.5), (3.0, 1.5), (3.0, 6.0), (9.0, 1.9), (20.0, 10.0)];
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (c, errs) in [(Category::Camera, camera), (Category::Mug, mug)] {
            for (k, (deg, cm)) in errs.iter().enumerate() {
                let (p, g) = fixture(&format!("{c}_{k}"), c, *deg, *cm);
                preds.push(p);
                gts.push(g);
            }
        }
        let r = evaluate(&preds, &gts, &SymmetrySpec::default(), &EvalOptions::default()).unwrap();
        let cam = r.category(Category::Camera).unwrap().rates;
        assert_eq!(
            [cam.deg5_cm2, cam.deg5_cm5, cam.deg10_cm2, cam.deg10_cm5],
            [0.2, 0.4, 0.4, 0.8]
        );
        let mug = r.category(Category::Mug).unwrap().rates;
        assert_eq!(
            [mug.deg5_cm2, mug.deg5_cm5, mug.deg10_cm2, mug.deg10_cm5],
            [0.4, 0.4, 0.6, 0.6]
        );
        assert!((r.mean.deg10_cm5 - 0.7).abs() < 1e-15);
        assert_eq!(r.count, 10);

        preds.reverse();
        let shuffled = evaluate(&preds, &gts, &SymmetrySpec::default(), &EvalOptions::default()).unwrap();
        assert_eq!(shuffled, r);
        let mut gts2 = gts.clone();
        gts2.rotate_left(3);
        assert_eq!(
            evaluate(&preds, &gts2, &SymmetrySpec::default(), &EvalOptions::default()).unwrap(),
            r
        );

        assert!(evaluate(&preds[1..], &gts, &SymmetrySpec::default(), &EvalOptions::default()).is_err());
        let csv = r.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("camera,5,"));
    }

    #[test]
    fn symmetric_box_alignment_recovers_yaw() {
        let (mut p, g) = fixture("can_0", Category::Can, 0.0, 0.0);
        let yawed = g.pose_box.bbox.rotation.mul(&Rotation::yaw(0.9));
        p.pose_box.bbox.rotation = yawed;
        p.pose_box.pose.rotation = yawed;
        let e = instance_errors(&p, &g, &SymmetrySpec::default(), &EvalOptions::default()).unwrap();
        assert!(e.iou > 0.999 && e.rot_deg < 1e-6);
        let e = instance_errors(
            &Prediction {
                category: Category::Camera,
                ..p
            },
            &GroundTruth {
                category: Category::Camera,
                ..g
            },
            &SymmetrySpec::default(),
            &EvalOptions::default(),
        )
        .unwrap();
        assert!(e.iou < 0.9);
    }

    #[test]
    fn symmetry_spec_defaults_and_validation() {
        let s = SymmetrySpec::default();
        assert!(s.is_symmetric(Category::Can) && !s.is_symmetric(Category::Mug));
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<SymmetrySpec>(&json).unwrap(), s);
        assert!(SymmetrySpec::new(BTreeMap::new()).is_err());
    }
}
