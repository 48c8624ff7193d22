//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 8-10 share a single training run of the bundled toy
//! configuration; criterion 11 reruns commands and compares bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use drpose::chamfer::{chamfer_l1, chamfer_l2sq};
use drpose::deform::{loss_def_graph, CategoryPrior, DeformDims, DeformLossWeights, DeformationModel};
use drpose::eval::{evaluate, iou_3d, rot_error_deg, EvalOptions, GroundTruth, PoseBox, Prediction, SymmetrySpec};
use drpose::geom::{random_rotation_with, OrientedBox, PointCloud, Rotation, SimilarityTransform, Vec3};
use drpose::nn::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use drpose::nn::{
    smooth_l1, softmax_rows, Activation, AttentionParams, Graph, Init, Matrix, MlpParams, ParamStore, Var,
};
use drpose::pipeline::{self, ExperimentConfig, RunDir};
use drpose::regis::{
    apply_scaling, correspondence, loss_corr, loss_regis_graph, predict_nocs, predict_scaling, prepare_input,
    CorrespondenceMatrix, NocsPrediction, RegisDims, RegisLossWeights, RegistrationModel,
};
use drpose::similarity::{solve_umeyama, CorrespondedPair};
use drpose::Category;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_cloud(r: &mut ChaCha8Rng, n: usize, half: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Vec3::from_fn(|_, _| r.random_range(-half..half)))
            .collect(),
    )
    .unwrap()
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(10..=200);
        let src = random_cloud(&mut r, n, 1.0);
        let truth = SimilarityTransform::new(
            random_rotation_with(&mut r),
            Vec3::from_fn(|_, _| r.random_range(-2.0..2.0)),
            r.random_range(0.2..=5.0),
        )
        .unwrap();
        let pair = CorrespondedPair::new(src.clone(), truth.apply(&src)).unwrap();
        let fit = solve_umeyama(&pair, true).map_err(|e| e.to_string())?;
        let err = (fit.rotation.matrix() - truth.rotation.matrix())
            .norm()
            .max((fit.translation - truth.translation).norm())
            .max((fit.scale - truth.scale).abs());
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-8 && elapsed < Duration::from_secs(5),
        format!("worst error {worst:.2e} over 1000 pairs in {elapsed:.2?}"),
    )
}

fn brute(a: &PointCloud, b: &PointCloud, term: fn(f64) -> f64) -> (f64, f64) {
    let one_way = |from: &PointCloud, to: &PointCloud| {
        let sum: f64 = from
            .iter()
            .map(|p| term(to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)))
            .sum();
        sum / from.len() as f64
    };
    (one_way(a, b), one_way(b, a))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut mismatches = 0;
    for k in 0..200 {
        let (na, nb) = (r.random_range(1..=1024), r.random_range(1..=1024));
        let a = random_cloud(&mut r, na, 0.5);
        // Every tenth pair is quantized so that exact ties occur.
        let b = if k % 10 == 0 {
            PointCloud::new(a.iter().map(|p| p.map(|v| (v * 8.0).round() / 8.0)).collect()).unwrap()
        } else {
            random_cloud(&mut r, nb, 0.5)
        };
        let l2 = chamfer_l2sq(&a, &b);
        let l1 = chamfer_l1(&a, &b);
        if (l2.forward, l2.backward) != brute(&a, &b, |d| d) || (l1.forward, l1.backward) != brute(&a, &b, f64::sqrt) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        mismatches == 0 && elapsed < Duration::from_secs(30),
        format!("{mismatches} of 200 pairs differ from brute force, {elapsed:.2?}"),
    )
}

/// Registers `m` as a parameter so the checker perturbs it.
fn as_param(store: &mut ParamStore, name: &str, m: Matrix) -> drpose::nn::ParamId {
    store.add(name, m)
}

/// Reduces a matrix node to a scalar through fixed random weights.
fn project(g: &mut Graph<'_>, x: Var, weights: &Matrix) -> Var {
    let w = g.input(weights.clone());
    let p = g.mul(x, w);
    g.sum(p)
}

fn small_regis_dims() -> RegisDims {
    RegisDims {
        dim: 6,
        enc_hidden: 5,
        attn_hidden: 4,
        scale_hidden: 3,
        cell_fraction: 0.25,
        neighborhood: 2.0,
        scaling: true,
    }
}

fn small_deform_dims() -> DeformDims {
    DeformDims {
        dim: 6,
        hidden: 5,
        head_hidden: 4,
        ..DeformDims::default()
    }
}

fn gradient_cases(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let opts = GradCheckOptions::default();
    let mut out = Vec::new();
    let mut r = rng(1000 + seed);

    // MLP.
    let mut store = ParamStore::new();
    let mlp = MlpParams::new(&mut store, "mlp", &[4, 6, 3], Init::Uniform, &mut r);
    let x = as_param(&mut store, "x", random_matrix(&mut r, 5, 4));
    let w = random_matrix(&mut r, 5, 3);
    out.push((
        "mlp",
        check_gradients(&store, &[], opts, |g| {
            let xv = g.param(x);
            let y = mlp.forward(g, xv, Activation::LeakyRelu);
            project(g, y, &w)
        }),
    ));

    // Row softmax.
    let mut store = ParamStore::new();
    let s = as_param(&mut store, "scores", random_matrix(&mut r, 4, 7) * 3.0);
    let w = random_matrix(&mut r, 4, 7);
    out.push((
        "softmax",
        check_gradients(&store, &[], opts, |g| {
            let sv = g.param(s);
            let a = g.softmax_rows(sv);
            project(g, a, &w)
        }),
    ));

    // Attention block, queries and keys from different sets.
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "attn", 6, 5, Init::Uniform, &mut r);
    let q = as_param(&mut store, "q", random_matrix(&mut r, 4, 6));
    let kv = as_param(&mut store, "kv", random_matrix(&mut r, 7, 6));
    let w = random_matrix(&mut r, 4, 6);
    out.push((
        "attention",
        check_gradients(&store, &[], opts, |g| {
            let (qv, kvv) = (g.param(q), g.param(kv));
            let y = attn.forward(g, qv, kvv);
            project(g, y, &w)
        }),
    ));

    // Scaling head and row scaling.
    let mut store = ParamStore::new();
    let head = MlpParams::new(&mut store, "scale", &[6, 3, 1], Init::Uniform, &mut r);
    let feats = as_param(&mut store, "x", random_matrix(&mut r, 5, 6));
    let a = as_param(&mut store, "a", random_matrix(&mut r, 5, 3));
    let w = random_matrix(&mut r, 5, 3);
    out.push((
        "scaling head",
        check_gradients(&store, &[], opts, |g| {
            let xv = g.param(feats);
            let h = head.forward(g, xv, Activation::LeakyRelu);
            let t = g.tanh(h);
            let t = g.scale(t, 0.5);
            let gamma = g.offset(t, 1.0);
            let av = g.param(a);
            let y = g.scale_rows(av, gamma);
            project(g, y, &w)
        }),
    ));

    // Chamfer and deformation losses on free point sets.
    let mut store = ParamStore::new();
    let prior = as_param(&mut store, "prior", random_matrix(&mut r, 12, 3));
    let d = as_param(&mut store, "d", random_matrix(&mut r, 12, 3) * 0.2);
    let gt = random_matrix(&mut r, 15, 3);
    let wts = DeformLossWeights::default();
    out.push((
        "chamfer",
        check_gradients(&store, &[prior], opts, |g| {
            let (p, t) = (g.param(prior), g.input(gt.clone()));
            g.chamfer_l2sq(p, t)
        }),
    ));
    out.push((
        "deformation loss",
        check_gradients(&store, &[], opts, |g| {
            let (p, dv, t) = (g.param(prior), g.param(d), g.input(gt.clone()));
            loss_def_graph(g, p, dv, t, &wts).0
        }),
    ));

    // Correspondence and entropy losses on free predictions.
    let mut store = ParamStore::new();
    let pred = as_param(&mut store, "pred", random_matrix(&mut r, 9, 3) * 0.3);
    let scores = as_param(&mut store, "scores", random_matrix(&mut r, 9, 5) * 2.0);
    let target = random_matrix(&mut r, 9, 3) * 0.3;
    out.push((
        "correspondence loss",
        check_gradients(&store, &[pred], opts, |g| {
            let (p, t) = (g.param(pred), g.input(target.clone()));
            let diff = g.sub(p, t);
            let pen = g.smooth_l1(diff);
            g.sum(pen)
        }),
    ));
    out.push((
        "entropy loss",
        check_gradients(&store, &[scores], opts, |g| {
            let s = g.param(scores);
            let a = g.softmax_rows(s);
            let xl = g.xlogx(a);
            let sum = g.sum(xl);
            g.scale(sum, -1.0)
        }),
    ));

    // Full stage-two loss through the registration network.
    let mut model = RegistrationModel::new(small_regis_dims(), seed).unwrap();
    for l in model.scale_head.layers.clone() {
        for id in [l.weight, l.bias] {
            let v = model.store.get(id).map(|_| r.random_range(-0.5..0.5));
            model.store.set(id, v);
        }
    }
    let obs = random_cloud(&mut r, 40, 0.3)
        .into_points()
        .into_iter()
        .map(|p| p + Vec3::new(0.0, 0.0, 1.4))
        .collect();
    let obs = PointCloud::new(obs).unwrap();
    let prior_cloud = random_cloud(&mut r, 50, 0.5);
    let inp = prepare_input(&obs, &prior_cloud, &model.dims).unwrap();
    let tgt = random_matrix(&mut r, inp.obs.len(), 3) * 0.4;
    let rw = RegisLossWeights::default();
    out.push((
        "registration loss",
        check_gradients(&model.store, &[], opts, |g| {
            let v = model.forward(g, &inp);
            let t = g.input(tgt.clone());
            loss_regis_graph(g, &v, t, &rw, true).total
        }),
    ));

    // Full stage-one loss through the deformation network.
    let dm = DeformationModel::new(small_deform_dims(), seed).unwrap();
    let prior = CategoryPrior::new(Category::Mug, random_cloud(&mut r, 30, 0.5)).unwrap();
    let completed = random_cloud(&mut r, 40, 0.3);
    let gt_cloud = random_cloud(&mut r, 35, 0.5);
    out.push((
        "deformation network",
        check_gradients(&dm.store, &[], opts, |g| {
            let dv = dm.forward(g, &prior, &completed).unwrap();
            let (p, t) = (g.points(&prior.cloud), g.points(&gt_cloud));
            loss_def_graph(g, p, dv, t, &wts).0
        }),
    ));
    out
}

fn criterion_3() -> Outcome {
    let mut worst = (0.0, "");
    let mut failures = Vec::new();
    let mut count = 0;
    let (mut entries, mut refined) = (0, 0);
    for seed in 0..20 {
        for (name, report) in gradient_cases(seed) {
            count += 1;
            entries += report.checked;
            refined += report.refined;
            if report.max_rel_error > worst.0 {
                worst = (report.max_rel_error, name);
            }
            if !report.passes(1e-4) {
                failures.push(format!(
                    "{name}@{seed} ({} {:?}: {:.2e})",
                    report.worst_param.as_deref().unwrap_or("?"),
                    report.worst_entry,
                    report.max_rel_error
                ));
            }
        }
    }
    check(
        failures.is_empty(),
        format!(
            "{count} checks over {entries} entries ({refined} refined near kinks), worst relative error {:.2e} ({}){}",
            worst.0,
            worst.1,
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failures.join(" "))
            }
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut worst_unscaled: f64 = 0.0;
    let mut worst_scaled: f64 = 0.0;
    let mut worst_linear: f64 = 0.0;
    for seed in 0..20 {
        let mut r = rng(400 + seed);
        let mut model = RegistrationModel::new(small_regis_dims(), seed).unwrap();
        for l in model.scale_head.layers.clone() {
            for id in [l.weight, l.bias] {
                let v = model.store.get(id).map(|_| r.random_range(-2.0..2.0));
                model.store.set(id, v);
            }
        }
        let x_o = random_matrix(&mut r, 30, 6) * 3.0;
        let x_p = random_matrix(&mut r, 45, 6) * 3.0;
        let prior = random_cloud(&mut r, 45, 0.5);
        let s = drpose::regis::score(&x_o, &x_p, &model).unwrap();
        let a = correspondence(&s);
        let gamma = predict_scaling(&x_o, &model).unwrap();
        let b = apply_scaling(&a, &gamma).unwrap();
        worst_unscaled = a
            .row_sums()
            .iter()
            .map(|v| (v - 1.0).abs())
            .fold(worst_unscaled, f64::max);
        for (sum, g) in b.row_sums().iter().zip(gamma.values()) {
            worst_scaled = worst_scaled.max((sum - g).abs());
        }
        let p0 = predict_nocs(&a, &prior).unwrap();
        let p1 = predict_nocs(&b, &prior).unwrap();
        for ((u, v), g) in p0.cloud.iter().zip(p1.cloud.iter()).zip(gamma.values()) {
            worst_linear = worst_linear.max((u * *g - v).norm());
        }
    }
    check(
        worst_unscaled <= 1e-9 && worst_scaled <= 1e-9 && worst_linear <= 1e-9,
        format!("row sums {worst_unscaled:.1e}, scaled rows {worst_scaled:.1e}, linearity {worst_linear:.1e}"),
    )
}

fn criterion_5() -> Outcome {
    // Prior: points on the cube [-0.5, 0.5]³, including a point on the +x face.
    let mut r = rng(5);
    let anchor = Vec3::new(0.5, 0.25, -0.1);
    let mut pts: Vec<Vec3> = (0..63)
        .map(|_| {
            let mut p = Vec3::from_fn(|_, _| r.random_range(-0.5..0.5));
            let axis = r.random_range(0..3);
            p[axis] = if r.random_bool(0.5) { 0.5 } else { -0.5 };
            p
        })
        .collect();
    pts.push(anchor);
    let prior = PointCloud::new(pts).unwrap();
    let gt = PointCloud::new(vec![anchor * 1.8]).unwrap();
    // Any convex combination has x ≤ 0.5, so the x error alone is ≥ 0.4.
    let bound = smooth_l1(gt.points()[0].x - 0.5);
    let mut best = f64::INFINITY;
    for k in 0..10_000 {
        let temperature = 10f64.powf(r.random_range(-1.0..2.0));
        let mut scores = Matrix::from_fn(1, prior.len(), |_, _| r.random_range(-1.0..1.0) * temperature);
        if k % 4 == 0 {
            // Sharp rows concentrated near the anchor.
            scores[(0, prior.len() - 1)] += 50.0;
        }
        let a = CorrespondenceMatrix::new(softmax_rows(&scores)).map_err(|e| e.to_string())?;
        best = best.min(loss_corr(&predict_nocs(&a, &prior).unwrap(), &gt).unwrap());
    }
    let mut onehot = Matrix::zeros(1, prior.len());
    onehot[(0, prior.len() - 1)] = 1.0;
    let gamma = drpose::regis::ScalingFactors::new(vec![1.8]).unwrap();
    let scaled = apply_scaling(&CorrespondenceMatrix::new(onehot).unwrap(), &gamma).unwrap();
    let NocsPrediction { cloud } = predict_nocs(&scaled, &prior).unwrap();
    let scaled_err = (cloud.points()[0] - gt.points()[0]).norm();
    check(
        best >= bound && bound > 0.3 && scaled_err < 1e-6,
        format!("best unscaled loss {best:.4} ≥ hull bound {bound:.4}; scaled error {scaled_err:.1e}"),
    )
}

fn criterion_6() -> Outcome {
    let knee = 0.1;
    let mut worst: f64 = 0.0;
    for e in [knee, -knee] {
        for delta in [-1e-7, 1e-7] {
            worst = worst.max((smooth_l1(e + delta) - smooth_l1(e)).abs());
        }
    }
    let inside = smooth_l1(knee.next_down());
    let outside = smooth_l1(knee.next_up());
    let at = smooth_l1(knee);
    // The graph op must agree with the scalar form at the knee.
    let mut g = Graph::new();
    let x = g.input(Matrix::from_row_slice(1, 2, &[knee, -knee]));
    let y = g.smooth_l1(x);
    let graph_vals: Vec<f64> = g.value(y).iter().copied().collect();
    let exact = at == 0.05 && smooth_l1(-knee) == 0.05 && graph_vals == [0.05, 0.05];
    let sided = (inside - 0.05).abs() < 1e-15 && (outside - 0.05).abs() < 1e-15;
    check(
        worst < 1e-6 && exact && sided,
        format!("max change across the knee {worst:.2e}; value at knee {at}; neighbors {inside} / {outside}"),
    )
}

fn aa_box(center: [f64; 3], extents: [f64; 3]) -> OrientedBox {
    OrientedBox::new(Vec3::from(center), Rotation::identity(), Vec3::from(extents)).unwrap()
}

fn analytic_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let overlap: f64 = (0..3)
        .map(|i| {
            let lo = (a.center[i] - a.extents[i] / 2.0).max(b.center[i] - b.extents[i] / 2.0);
            let hi = (a.center[i] + a.extents[i] / 2.0).min(b.center[i] + b.extents[i] / 2.0);
            (hi - lo).max(0.0)
        })
        .product();
    overlap / (a.volume() + b.volume() - overlap)
}

fn fixture_pair(id: &str, c: Category, rot_deg: f64, trans_cm: f64) -> (Prediction, GroundTruth) {
    let center = Vec3::new(-0.2, 0.1, 1.3);
    let extents = Vec3::new(0.2, 0.3, 0.25);
    let gt = PoseBox {
        pose: SimilarityTransform::new(Rotation::identity(), center, 0.3).unwrap(),
        bbox: OrientedBox::new(center, Rotation::identity(), extents).unwrap(),
    };
    let rot = Rotation::from_axis_angle(&Vec3::z(), rot_deg.to_radians());
    let t = center + Vec3::new(0.0, trans_cm / 100.0, 0.0);
    let pred = PoseBox {
        pose: SimilarityTransform::new(rot, t, 0.3).unwrap(),
        bbox: OrientedBox::new(t, rot, extents).unwrap(),
    };
    (
        Prediction {
            id: id.into(),
            category: c,
            pose_box: pred,
        },
        GroundTruth {
            id: id.into(),
            category: c,
            pose_box: gt,
        },
    )
}

fn criterion_7() -> Outcome {
    let fixtures = [
        (aa_box([0.0; 3], [1.0; 3]), aa_box([0.5, 0.0, 0.0], [1.0; 3])),
        (aa_box([0.0; 3], [1.0; 3]), aa_box([0.3, 0.3, 0.0], [1.0; 3])),
        (aa_box([0.0; 3], [2.0, 1.0, 1.0]), aa_box([0.0; 3], [1.0, 1.0, 2.0])),
        (aa_box([0.0; 3], [1.0; 3]), aa_box([0.1, -0.1, 0.2], [0.6, 0.8, 0.5])),
        (
            aa_box([1.0, 2.0, 3.0], [0.4, 0.5, 0.6]),
            aa_box([1.2, 2.1, 2.9], [0.4, 0.5, 0.6]),
        ),
    ];
    let mut worst_iou: f64 = 0.0;
    let mut within_3se = true;
    for (k, (a, b)) in fixtures.iter().enumerate() {
        let est = iou_3d(a, b, 100_000, k as u64).unwrap();
        let err = (est.iou - analytic_iou(a, b)).abs();
        worst_iou = worst_iou.max(err);
        within_3se &= err <= 3.0 * est.std_err;
    }

    let mut r = rng(7);
    let mut worst_yaw: f64 = 0.0;
    for _ in 0..200 {
        let (pred, gt) = (random_rotation_with(&mut r), random_rotation_with(&mut r));
        let yawed = gt.mul(&Rotation::yaw(r.random_range(0.0..std::f64::consts::TAU)));
        worst_yaw = worst_yaw.max((rot_error_deg(&pred, &gt, true) - rot_error_deg(&pred, &yawed, true)).abs());
    }

    // (rot°, cm) with hand-counted hits at 5°2cm / 5°5cm / 10°2cm / 10°5cm.
    let camera = [(1.0, 1.0), (4.0, 3.0), (7.0, 1.0), (7.0, 4.0), (12.0, 0.5)];
    let laptop = [(0.5, 0.5), (3.0, 1.5), (3.0, 6.0), (9.0, 1.9), (20.0, 10.0)];
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for (c, errs) in [(Category::Camera, camera), (Category::Laptop, laptop)] {
        for (k, (deg, cm)) in errs.iter().enumerate() {
            let (p, g) = fixture_pair(&format!("{c}_{k}"), c, *deg, *cm);
            preds.push(p);
            gts.push(g);
        }
    }
    let report = evaluate(&preds, &gts, &SymmetrySpec::default(), &EvalOptions::default()).unwrap();
    let rates = |c| {
        let r = report.category(c).unwrap().rates;
        [r.deg5_cm2, r.deg5_cm5, r.deg10_cm2, r.deg10_cm5]
    };
    let counts_ok = rates(Category::Camera) == [0.2, 0.4, 0.4, 0.8] && rates(Category::Laptop) == [0.4, 0.4, 0.6, 0.6];
    check(
        worst_iou <= 0.01 && within_3se && worst_yaw <= 1e-9 && counts_ok,
        format!(
            "IoU worst error {worst_iou:.4} (within 3 SE: {within_3se}); yaw invariance {worst_yaw:.1e}; hand counts match: {counts_ok}"
        ),
    )
}

fn toy_config() -> (ExperimentConfig, String) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    ExperimentConfig::load(&path).unwrap()
}

struct ToyRun {
    dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    stage_one: Duration,
    stage_two: Duration,
    chamfer: Vec<pipeline::ChamferRow>,
    report: drpose::eval::MetricReport,
}

fn toy_run() -> Result<ToyRun, String> {
    let (cfg, text) = toy_config();
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunDir::open(dir.path()).map_err(|e| e.to_string())?;
    pipeline::snapshot_config(&mut run, &text).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    pipeline::synth_gen(&cfg, 0, &mut run).map_err(|e| e.to_string())?;
    let chamfer = pipeline::train_deform(&cfg, 0, &mut run).map_err(|e| e.to_string())?;
    let stage_one = t0.elapsed();
    let t1 = Instant::now();
    pipeline::train_regis(&cfg, 0, &mut run).map_err(|e| e.to_string())?;
    let stage_two = t1.elapsed();
    pipeline::infer_run(&mut run).map_err(|e| e.to_string())?;
    let report = pipeline::eval_run(&cfg, 0, &mut run).map_err(|e| e.to_string())?;
    run.finish(0).map_err(|e| e.to_string())?;
    Ok(ToyRun {
        dir,
        cfg,
        stage_one,
        stage_two,
        chamfer,
        report,
    })
}

fn criterion_8(toy: &ToyRun) -> Outcome {
    let worse: Vec<String> = toy
        .chamfer
        .iter()
        .filter(|c| c.deformed_cd >= c.prior_cd)
        .map(|c| c.category.to_string())
        .collect();
    let categories_ok = toy.chamfer.len() == 6 && worse.is_empty();
    let rate = toy.report.mean.deg10_cm5;
    let total = toy.stage_one + toy.stage_two;
    let cd_summary: Vec<String> = toy
        .chamfer
        .iter()
        .map(|c| format!("{} {:.2e}->{:.2e}", c.category, c.prior_cd, c.deformed_cd))
        .collect();
    check(
        categories_ok && rate >= 0.8 && total < Duration::from_secs(30 * 60),
        format!(
            "CD prior->deformed [{}]; held-in 10deg5cm {rate:.3}; training {:.0?} + {:.0?}",
            cd_summary.join(", "),
            toy.stage_one,
            toy.stage_two
        ),
    )
}

fn criterion_9(toy: &ToyRun) -> Outcome {
    let mut run = RunDir::open(toy.dir.path()).map_err(|e| e.to_string())?;
    let rows = pipeline::trend_run(&toy.cfg, 0, &mut run).map_err(|e| e.to_string())?;
    run.finish(0).map_err(|e| e.to_string())?;
    let means: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.seed.is_none())
        .map(|r| (r.cd_target, r.rates.deg5_cm2))
        .collect();
    let at_zero = means
        .iter()
        .find(|(t, _)| *t == 0.0)
        .map(|m| m.1)
        .ok_or("no CD=0 arm")?;
    let max = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let curve: Vec<String> = means.iter().map(|(t, v)| format!("{t}:{v:.3}")).collect();
    check(
        at_zero >= max,
        format!("mean 5deg2cm by CD target [{}]", curve.join(", ")),
    )
}

fn criterion_10(toy: &ToyRun) -> Outcome {
    let mut run = RunDir::open(toy.dir.path()).map_err(|e| e.to_string())?;
    let rows = pipeline::ablate_scaling(&toy.cfg, 0, &mut run).map_err(|e| e.to_string())?;
    run.finish(0).map_err(|e| e.to_string())?;
    let mean = |scaling: bool| {
        rows.iter()
            .find(|r| r.seed.is_none() && r.scaling == scaling)
            .map(|r| r.rates.deg5_cm2)
            .unwrap_or(f64::NAN)
    };
    let (on, off) = (mean(true), mean(false));
    check(
        on >= off,
        format!("mean 5deg2cm with scaling {on:.3}, without {off:.3}"),
    )
}

const TINY: &str = r#"{
  "dataset": {"categories": ["bowl", "camera"], "count_per_category": 3, "noise": {"sigma": 0.002, "outlier_fraction": 0.05}},
  "deform": {"dims": {"dim": 12, "hidden": 8, "head_hidden": 8}, "train": {"epochs": 2, "batch": 4}},
  "regis": {"dims": {"dim": 12, "enc_hidden": 8, "attn_hidden": 8, "scale_hidden": 4}, "train": {"epochs": 3, "batch": 2}, "val_every": 1},
  "eval": {"iou_samples": 5000},
  "trend": {"cd_targets": [0.0, 0.002], "seeds": [1, 2], "iou_samples": 1000},
  "ablation": {"seeds": [1], "iou_samples": 1000}
}
"#;

fn tiny_run(dir: &Path, threads: usize) -> Result<Vec<(String, Vec<u8>)>, String> {
    let cfg = ExperimentConfig::from_json(TINY).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| -> drpose::Result<()> {
        let mut run = RunDir::open(dir)?;
        pipeline::snapshot_config(&mut run, TINY)?;
        pipeline::run_all(&cfg, 11, &mut run)?;
        pipeline::trend_run(&cfg, 11, &mut run)?;
        pipeline::ablate_scaling(&cfg, 11, &mut run)?;
        run.finish(11)
    })
    .map_err(|e| e.to_string())?;
    [
        pipeline::REPORT_CSV,
        pipeline::TREND_CSV,
        pipeline::ABLATION_CSV,
        pipeline::DEFORM_REPORT,
    ]
    .iter()
    .map(|f| Ok((f.to_string(), fs::read(dir.join(f)).map_err(|e| e.to_string())?)))
    .collect()
}

fn criterion_11(toy: &ToyRun) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = (0..3).map(|k| tmp.path().join(format!("run{k}"))).collect();
    let a = tiny_run(&dirs[0], 1)?;
    let b = tiny_run(&dirs[1], 1)?;
    let c = tiny_run(&dirs[2], 3)?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .zip(&c)
        .filter(|((x, y), z)| x.1 != y.1 || x.1 != z.1)
        .map(|((x, _), _)| x.0.as_str())
        .collect();

    // Re-evaluating the toy run must reproduce its report byte for byte.
    let before = fs::read(toy.dir.path().join(pipeline::REPORT_CSV)).unwrap();
    let mut run = RunDir::open(toy.dir.path()).map_err(|e| e.to_string())?;
    pipeline::eval_run(&toy.cfg, 0, &mut run).map_err(|e| e.to_string())?;
    let after = fs::read(toy.dir.path().join(pipeline::REPORT_CSV)).unwrap();
    check(
        differing.is_empty() && before == after,
        format!(
            "{} metric CSVs compared across reruns and thread counts, differing: {:?}; toy report rerun identical: {}",
            a.len(),
            differing,
            before == after
        ),
    )
}

fn main() -> ExitCode {
    // Accept and ignore libtest arguments such as `--nocapture`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut failed = 0;
    let mut report = |n: usize, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag}: {detail}");
    };
    let quick: [(usize, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
    ];
    for (n, f) in quick {
        if wanted(n) {
            report(n, f());
        }
    }
    let slow: [(usize, fn(&ToyRun) -> Outcome); 4] = [
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
    ];
    if slow.iter().any(|(n, _)| wanted(*n)) {
        match toy_run() {
            Ok(toy) => {
                for (n, f) in slow {
                    if wanted(n) {
                        report(n, f(&toy));
                    }
                }
            }
            Err(e) => {
                for (n, _) in slow {
                    if wanted(n) {
                        report(n, Err(format!("toy pipeline failed: {e}")));
                    }
                }
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
