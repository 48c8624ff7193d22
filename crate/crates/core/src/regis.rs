//! Stage two: soft correspondences between the observation and the deformed
//! prior, per-point scaling factors and the final similarity fit.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::ModelFile;
use crate::error::{Error, Result};
use crate::geom::{bbox_from_cloud, voxel_downsample, OrientedBox, PointCloud, Rotation, SimilarityTransform, Vec3};
use crate::nn::{
    positional_encode, smooth_l1, softmax_rows, Activation, AttentionParams, Graph, Init, Matrix, MlpParams, Optimizer,
    OptimizerConfig, ParamGrads, ParamId, ParamStore, Var,
};
use crate::seeds;
use crate::similarity::{solve_umeyama, CorrespondedPair};
use crate::synth::{read_json, write_json};

/// Width of the per-point geometric input features.
pub const INPUT_FEATURES: usize = 8;

/// `S(i, j) = ⟨x_o^i W_o, x_p^j W_p⟩ / √d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(pub Matrix);

/// Soft assignment of observed points (rows) to prior points (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    values: Matrix,
    scaled: bool,
}

impl CorrespondenceMatrix {
    /// Wraps a row-stochastic matrix (rows are checked to sum to 1 within 1e-9).
    pub fn new(values: Matrix) -> Result<Self> {
        for r in 0..values.nrows() {
            let row = values.row(r);
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "correspondence row {r} is not a probability vector"
                )));
            }
        }
        Ok(CorrespondenceMatrix { values, scaled: false })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.values.nrows()).map(|r| self.values.row(r).sum()).collect()
    }
}

/// Positive per-observed-point multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFactors(Vec<f64>);

impl ScalingFactors {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Config("scaling factors must be positive and finite".into()));
        }
        Ok(ScalingFactors(gamma))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Canonical coordinates predicted for each observed point.
#[derive(Debug, Clone, PartialEq)]
pub struct NocsPrediction {
    pub cloud: PointCloud,
}

pub fn score_with(x_o: &Matrix, x_p: &Matrix, w_o: &Matrix, w_p: &Matrix) -> Result<ScoreMatrix> {
    if x_o.ncols() != w_o.nrows() || x_p.ncols() != w_p.nrows() || w_o.ncols() != w_p.ncols() {
        return Err(Error::ShapeMismatch("score projections do not chain".into()));
    }
    let d = w_o.ncols() as f64;
    Ok(ScoreMatrix((x_o * w_o) * (x_p * w_p).transpose() / d.sqrt()))
}

pub fn score(x_o: &Matrix, x_p: &Matrix, m: &RegistrationModel) -> Result<ScoreMatrix> {
    score_with(x_o, x_p, m.store.get(m.w_o), m.store.get(m.w_p))
}

/// Row-wise softmax of the scores.
pub fn correspondence(s: &ScoreMatrix) -> CorrespondenceMatrix {
    CorrespondenceMatrix {
        values: softmax_rows(&s.0),
        scaled: false,
    }
}

/// `γ = 1 + 0.5 · tanh(head(x_o))`, one factor per observed point.
pub fn predict_scaling(x_o: &Matrix, m: &RegistrationModel) -> Result<ScalingFactors> {
    if x_o.ncols() != m.dims.dim {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, model expects {}",
            x_o.ncols(),
            m.dims.dim
        )));
    }
    let mut g = Graph::with_params(&m.store);
    let x = g.input(x_o.clone());
    let gamma = m.gamma(&mut g, x);
    ScalingFactors::new(g.value(gamma).iter().copied().collect())
}

/// `a_ij ← γ_i a_ij`.
pub fn apply_scaling(a: &CorrespondenceMatrix, g: &ScalingFactors) -> Result<CorrespondenceMatrix> {
    if a.scaled {
        return Err(Error::AlreadyScaled);
    }
    if a.values.nrows() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows but {} scaling factors",
            a.values.nrows(),
            g.len()
        )));
    }
    let mut values = a.values.clone();
    for (r, gamma) in g.0.iter().enumerate() {
        values.row_mut(r).scale_mut(*gamma);
    }
    Ok(CorrespondenceMatrix { values, scaled: true })
}

/// `O_nocs^i = Σ_j a_ij P̂_j`.
pub fn predict_nocs(a: &CorrespondenceMatrix, prior_def: &PointCloud) -> Result<NocsPrediction> {
    if a.values.ncols() != prior_def.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} correspondence columns for {} prior points",
            a.values.ncols(),
            prior_def.len()
        )));
    }
    let out = &a.values * prior_def.to_matrix();
    Ok(NocsPrediction {
        cloud: PointCloud::from_matrix(&out)?,
    })
}

/// Smoothed-L1 penalty per coordinate, summed over coordinates and averaged
/// over points.
pub fn loss_corr(pred: &NocsPrediction, gt: &PointCloud) -> Result<f64> {
    if pred.cloud.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.cloud.len(),
            gt.len()
        )));
    }
    let total: f64 = pred
        .cloud
        .iter()
        .zip(gt.iter())
        .map(|(p, q)| (p - q).iter().map(|e| smooth_l1(*e)).sum::<f64>())
        .sum();
    Ok(total / gt.len() as f64)
}

/// Stage-two loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisLossWeights {
    /// Weight of the unscaled correspondence loss.
    pub corr0: f64,
    /// Weight of the scaled correspondence loss.
    pub corr1: f64,
    /// Weight of the combined correspondence loss.
    pub corr: f64,
    pub entropy: f64,
}

impl Default for RegisLossWeights {
    fn default() -> Self {
        RegisLossWeights {
            corr0: 0.6,
            corr1: 0.4,
            corr: 1.0,
            entropy: 1e-4,
        }
    }
}

pub fn loss_corr_combined(
    pred_unscaled: &NocsPrediction,
    pred_scaled: &NocsPrediction,
    gt: &PointCloud,
    w: &RegisLossWeights,
) -> Result<f64> {
    Ok(w.corr0 * loss_corr(pred_unscaled, gt)? + w.corr1 * loss_corr(pred_scaled, gt)?)
}

/// Mean row entropy `−Σ_j a_ij ln a_ij`, with `0 ln 0 = 0`.
pub fn loss_entropy(a: &CorrespondenceMatrix) -> Result<f64> {
    if a.scaled {
        return Err(Error::AlreadyScaled);
    }
    let v = &a.values;
    let total: f64 = v.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum();
    Ok(total / v.nrows().max(1) as f64)
}

pub fn loss_regis(corr: f64, entropy: f64, w: &RegisLossWeights) -> f64 {
    w.corr * corr + w.entropy * entropy
}

/// Similarity transform taking the prediction onto the observation, and the
/// tight canonical box of the prediction placed by it.
pub fn fit_pose(obs: &PointCloud, pred: &NocsPrediction) -> Result<(SimilarityTransform, OrientedBox)> {
    let pair = CorrespondedPair::new(pred.cloud.clone(), obs.clone())?;
    let pose = solve_umeyama(&pair, true)?;
    let bbox = bbox_from_cloud(&pred.cloud, &Rotation::identity()).transformed(&pose);
    Ok((pose, bbox))
}

/// Yaw about the canonical up axis that puts the camera in the canonical
/// `+z` half of the `yz` plane. Rotating the targets of a rotation-symmetric
/// object by it removes the unobservable yaw from the regression target.
pub fn view_yaw(pose: &SimilarityTransform) -> f64 {
    let v = pose.rotation.matrix().tr_mul(&(-pose.translation));
    v.x.atan2(v.z)
}

/// Re-expresses canonical coordinates and pose after removing the view yaw.
/// The posed geometry is unchanged.
pub fn canonicalize_symmetric(
    nocs: &PointCloud,
    pose: &SimilarityTransform,
) -> Result<(PointCloud, SimilarityTransform)> {
    let yaw = Rotation::yaw(view_yaw(pose));
    let inv = yaw.transpose();
    let cloud = PointCloud::new(nocs.iter().map(|p| inv.rotate(p)).collect())?;
    let pose = SimilarityTransform::new(pose.rotation.mul(&yaw), pose.translation, pose.scale)?;
    Ok((cloud, pose))
}

/// Architecture of the registration network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisDims {
    /// Feature width `d`; a multiple of 6 for the positional encoding.
    pub dim: usize,
    pub enc_hidden: usize,
    pub attn_hidden: usize,
    pub scale_hidden: usize,
    /// Voxel cell as a fraction of each cloud's diagonal.
    pub cell_fraction: f64,
    /// Neighborhood radius for local shape features, in voxel cells.
    pub neighborhood: f64,
    /// Predict per-point scaling factors.
    pub scaling: bool,
}

impl Default for RegisDims {
    fn default() -> Self {
        RegisDims {
            dim: 96,
            enc_hidden: 64,
            attn_hidden: 64,
            scale_hidden: 32,
            cell_fraction: 1.0 / 16.0,
            neighborhood: 2.0,
            scaling: true,
        }
    }
}

impl RegisDims {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 6 != 0 {
            return Err(Error::Config(format!(
                "registration dim {} is not a positive multiple of 6",
                self.dim
            )));
        }
        if self.enc_hidden == 0 || self.attn_hidden == 0 || self.scale_hidden == 0 {
            return Err(Error::Config("registration widths must be positive".into()));
        }
        for (name, v) in [
            ("cell_fraction", self.cell_fraction),
            ("neighborhood", self.neighborhood),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("registration {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Shared encoder, attention blocks, score projections and scaling head.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationModel {
    pub dims: RegisDims,
    pub store: ParamStore,
    pub encoder: MlpParams,
    pub self_o: AttentionParams,
    pub self_p: AttentionParams,
    pub cross_o: AttentionParams,
    pub cross_p: AttentionParams,
    pub w_o: ParamId,
    pub w_p: ParamId,
    pub scale_head: MlpParams,
}

const REGIS_KIND: &str = "registration";

impl RegistrationModel {
    /// Random initialization; the scaling head starts at `γ = 1`.
    pub fn new(dims: RegisDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = dims.dim;
        let encoder = MlpParams::new(
            &mut store,
            "encoder",
            &[INPUT_FEATURES, dims.enc_hidden, dims.enc_hidden, d],
            Init::Uniform,
            &mut rng,
        );
        let mut attn = |name: &str, store: &mut ParamStore| {
            AttentionParams::new(store, name, d, dims.attn_hidden, Init::Uniform, &mut rng)
        };
        let self_o = attn("self_o", &mut store);
        let self_p = attn("self_p", &mut store);
        let cross_o = attn("cross_o", &mut store);
        let cross_p = attn("cross_p", &mut store);
        let w_o = store.uniform("w_o", d, d, d, &mut rng);
        let w_p = store.uniform("w_p", d, d, d, &mut rng);
        let scale_head = MlpParams::new(&mut store, "scale", &[d, dims.scale_hidden, 1], Init::Uniform, &mut rng);
        scale_head.zero_output(&mut store);
        Ok(RegistrationModel {
            dims,
            store,
            encoder,
            self_o,
            self_p,
            cross_o,
            cross_p,
            w_o,
            w_p,
            scale_head,
        })
    }

    pub fn attention_blocks(&self) -> [&AttentionParams; 4] {
        [&self.self_o, &self.self_p, &self.cross_o, &self.cross_p]
    }

    fn gamma(&self, g: &mut Graph<'_>, x_o: Var) -> Var {
        let h = self.scale_head.forward(g, x_o, Activation::LeakyRelu);
        let t = g.tanh(h);
        let t = g.scale(t, 0.5);
        g.offset(t, 1.0)
    }

    /// Builds the full stage-two forward pass on `g`.
    pub fn forward(&self, g: &mut Graph<'_>, inp: &RegisInput) -> RegisVars {
        let fo = g.input(inp.obs_feat.clone());
        let fp = g.input(inp.prior_feat.clone());
        let xo = self.encoder.forward(g, fo, Activation::LeakyRelu);
        let xp = self.encoder.forward(g, fp, Activation::LeakyRelu);
        let (x_o, x_p) = self.enhance_vars(g, xo, xp, inp);
        let (scores, a) = self.scores_vars(g, x_o, x_p);
        let pts = g.points(&inp.prior);
        let pred0 = g.matmul(a, pts);
        let (gamma, pred1) = if self.dims.scaling {
            let gamma = self.gamma(g, x_o);
            (Some(gamma), g.scale_rows(pred0, gamma))
        } else {
            (None, pred0)
        };
        RegisVars {
            x_o,
            x_p,
            scores,
            a,
            gamma,
            pred0,
            pred1,
        }
    }

    fn enhance_vars(&self, g: &mut Graph<'_>, xo: Var, xp: Var, inp: &RegisInput) -> (Var, Var) {
        let pe_o = g.input(inp.obs_pe.clone());
        let pe_p = g.input(inp.prior_pe.clone());
        let xo = g.add(xo, pe_o);
        let xp = g.add(xp, pe_p);
        let xo = self.self_o.forward(g, xo, xo);
        let xp = self.self_p.forward(g, xp, xp);
        (self.cross_o.forward(g, xo, xp), self.cross_p.forward(g, xp, xo))
    }

    fn scores_vars(&self, g: &mut Graph<'_>, x_o: Var, x_p: Var) -> (Var, Var) {
        let wo = g.param(self.w_o);
        let wp = g.param(self.w_p);
        let po = g.matmul(x_o, wo);
        let pp = g.matmul(x_p, wp);
        let s = g.matmul_t(po, pp);
        let s = g.scale(s, 1.0 / (self.dims.dim as f64).sqrt());
        (s, g.softmax_rows(s))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &ModelFile {
                kind: REGIS_KIND.into(),
                dims: self.dims,
                params: self.store.to_checkpoint(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile<RegisDims> = read_json(path)?;
        if file.kind != REGIS_KIND {
            return Err(Error::parse(
                path,
                format!("expected a {REGIS_KIND} checkpoint, found `{}`", file.kind),
            ));
        }
        let mut m = Self::new(file.dims, 0)?;
        m.store
            .load_from(&crate::nn::ParamStore::from_checkpoint(&file.params)?)?;
        Ok(m)
    }
}

/// Graph nodes produced by [`RegistrationModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct RegisVars {
    pub x_o: Var,
    pub x_p: Var,
    pub scores: Var,
    pub a: Var,
    pub gamma: Option<Var>,
    pub pred0: Var,
    /// Scaled prediction; equal to `pred0` when scaling is disabled.
    pub pred1: Var,
}

/// Downsampled clouds with their precomputed input features and positional
/// encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisInput {
    /// Indices of the kept observed points in the input observation.
    pub obs_idx: Vec<usize>,
    pub obs: PointCloud,
    pub prior: PointCloud,
    pub obs_feat: Matrix,
    pub prior_feat: Matrix,
    pub obs_pe: Matrix,
    pub prior_pe: Matrix,
}

/// Orthonormal frame whose third axis points from the camera to `c`.
fn view_frame(c: &Vec3) -> Matrix3<f64> {
    let w = if c.norm() > 0.0 { c.normalize() } else { Vec3::z() };
    let helper = if w.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = (helper - w * helper.dot(&w)).normalize();
    let v = w.cross(&u);
    Matrix3::from_rows(&[u.transpose(), v.transpose(), w.transpose()])
}

/// Per kept point: coordinates normalized by the subset's centroid and RMS
/// radius (in `frame`), the normalized radius, the sorted normalized
/// eigenvalues of the local covariance, and `|n · r̂|` for the local normal.
/// Returns features and normalized coordinates.
fn geometric_features(full: &PointCloud, idx: &[usize], frame: &Matrix3<f64>, radius: f64) -> (Matrix, Vec<Vec3>) {
    let sub: Vec<Vec3> = idx.iter().map(|&i| full.points()[i]).collect();
    let c = sub.iter().sum::<Vec3>() / sub.len() as f64;
    let rms = (sub.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / sub.len() as f64).sqrt();
    let rms = if rms > 0.0 { rms } else { 1.0 };
    let r2 = radius * radius;
    let mut feat = Matrix::zeros(sub.len(), INPUT_FEATURES);
    let mut coords = Vec::with_capacity(sub.len());
    for (row, p) in sub.iter().enumerate() {
        let q = frame * (p - c) / rms;
        let nbrs: Vec<&Vec3> = full.iter().filter(|x| (*x - p).norm_squared() <= r2).collect();
        let mean = nbrs.iter().copied().sum::<Vec3>() / nbrs.len() as f64;
        let cov = nbrs.iter().fold(Matrix3::zeros(), |acc, x| {
            let d = *x - mean;
            acc + d * d.transpose()
        });
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
        let lam = |k: usize| {
            if total > 0.0 {
                eig.eigenvalues[order[k]].max(0.0) / total
            } else {
                1.0 / 3.0
            }
        };
        let normal = eig.eigenvectors.column(order[2]).into_owned();
        let radial = p - c;
        let facing = if radial.norm() > 0.0 && total > 0.0 {
            normal.dot(&radial.normalize()).abs()
        } else {
            0.0
        };
        let values = [q.x, q.y, q.z, radial.norm() / rms, lam(0), lam(1), lam(2), facing];
        for (col, v) in values.into_iter().enumerate() {
            feat[(row, col)] = v;
        }
        coords.push(q);
    }
    (feat, coords)
}

fn downsample_for(pc: &PointCloud, dims: &RegisDims) -> Result<(Vec<usize>, f64)> {
    let diag = pc.diagonal();
    let cell = if diag > 0.0 { diag * dims.cell_fraction } else { 1.0 };
    let (_, idx) = voxel_downsample(pc, cell)?;
    Ok((idx, cell))
}

/// Voxel-downsamples both clouds and computes encoder inputs and positional
/// encodings. The observation is expressed in a view-aligned frame, the
/// prior in its canonical frame. Fails when fewer than three observed points
/// survive downsampling.
pub fn prepare_input(obs: &PointCloud, prior_def: &PointCloud, dims: &RegisDims) -> Result<RegisInput> {
    dims.validate()?;
    let (obs_idx, obs_cell) = downsample_for(obs, dims)?;
    let (prior_idx, prior_cell) = downsample_for(prior_def, dims)?;
    if obs_idx.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} observed points left after downsampling",
            obs_idx.len()
        )));
    }
    let obs_sub = obs.select(&obs_idx);
    let frame = view_frame(&obs_sub.centroid());
    let (obs_feat, obs_coords) = geometric_features(obs, &obs_idx, &frame, dims.neighborhood * obs_cell);
    let (prior_feat, prior_coords) = geometric_features(
        prior_def,
        &prior_idx,
        &Matrix3::identity(),
        dims.neighborhood * prior_cell,
    );
    Ok(RegisInput {
        obs_idx,
        obs: obs_sub,
        prior: prior_def.select(&prior_idx),
        obs_feat,
        prior_feat,
        obs_pe: positional_encode(&obs_coords, dims.dim)?,
        prior_pe: positional_encode(&prior_coords, dims.dim)?,
    })
}

/// Shared-encoder features of both downsampled clouds, before enhancement.
pub fn extract_features(
    obs: &PointCloud,
    prior_def: &PointCloud,
    m: &RegistrationModel,
) -> Result<(Matrix, Matrix, PointCloud, PointCloud)> {
    let inp = prepare_input(obs, prior_def, &m.dims)?;
    let mut g = Graph::with_params(&m.store);
    let fo = g.input(inp.obs_feat.clone());
    let fp = g.input(inp.prior_feat.clone());
    let xo = m.encoder.forward(&mut g, fo, Activation::LeakyRelu);
    let xp = m.encoder.forward(&mut g, fp, Activation::LeakyRelu);
    Ok((g.value(xo).clone(), g.value(xp).clone(), inp.obs, inp.prior))
}

/// Adds the positional encoding of each downsampled cloud, then applies
/// self-attention within and cross-attention between the clouds.
pub fn enhance(
    x_o: &Matrix,
    x_p: &Matrix,
    obs: &PointCloud,
    prior_def: &PointCloud,
    m: &RegistrationModel,
) -> Result<(Matrix, Matrix)> {
    let d = m.dims.dim;
    if x_o.shape() != (obs.len(), d) || x_p.shape() != (prior_def.len(), d) {
        return Err(Error::ShapeMismatch(
            "features do not match the downsampled clouds".into(),
        ));
    }
    let frame = view_frame(&obs.centroid());
    let all_o: Vec<usize> = (0..obs.len()).collect();
    let all_p: Vec<usize> = (0..prior_def.len()).collect();
    let (_, co) = geometric_features(obs, &all_o, &frame, 0.0);
    let (_, cp) = geometric_features(prior_def, &all_p, &Matrix3::identity(), 0.0);
    let inp = RegisInput {
        obs_idx: all_o,
        obs: obs.clone(),
        prior: prior_def.clone(),
        obs_feat: Matrix::zeros(0, 0),
        prior_feat: Matrix::zeros(0, 0),
        obs_pe: positional_encode(&co, d)?,
        prior_pe: positional_encode(&cp, d)?,
    };
    let mut g = Graph::with_params(&m.store);
    let xo = g.input(x_o.clone());
    let xp = g.input(x_p.clone());
    let (a, b) = m.enhance_vars(&mut g, xo, xp, &inp);
    Ok((g.value(a).clone(), g.value(b).clone()))
}

/// Graph form of the stage-two loss; `gt` is the `N_o×3` target node.
pub fn loss_regis_graph(
    g: &mut Graph<'_>,
    v: &RegisVars,
    gt: Var,
    w: &RegisLossWeights,
    scaling: bool,
) -> RegisLossVars {
    let n = g.shape(gt).0 as f64;
    let corr_of = |g: &mut Graph<'_>, pred: Var| {
        let diff = g.sub(pred, gt);
        let pen = g.smooth_l1(diff);
        let s = g.sum(pen);
        g.scale(s, 1.0 / n)
    };
    let corr0 = corr_of(g, v.pred0);
    let corr1 = corr_of(g, v.pred1);
    let corr = if scaling {
        let a = g.scale(corr0, w.corr0);
        let b = g.scale(corr1, w.corr1);
        g.add(a, b)
    } else {
        corr0
    };
    let xl = g.xlogx(v.a);
    let s = g.sum(xl);
    let entropy = g.scale(s, -1.0 / n);
    let a = g.scale(corr, w.corr);
    let b = g.scale(entropy, w.entropy);
    RegisLossVars {
        total: g.add(a, b),
        corr0,
        corr1,
        entropy,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegisLossVars {
    pub total: Var,
    pub corr0: Var,
    pub corr1: Var,
    pub entropy: Var,
}

/// Stage-two output for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisResult {
    pub pose: SimilarityTransform,
    pub bbox: OrientedBox,
    /// Downsampled observation the pose was fitted to.
    pub obs: PointCloud,
    pub nocs: NocsPrediction,
    pub gamma: Option<Vec<f64>>,
}

/// Runs the network and fits the pose to its (scaled, when enabled) prediction.
pub fn infer(m: &RegistrationModel, obs: &PointCloud, prior_def: &PointCloud) -> Result<RegisResult> {
    let inp = prepare_input(obs, prior_def, &m.dims)?;
    infer_prepared(m, &inp)
}

pub fn infer_prepared(m: &RegistrationModel, inp: &RegisInput) -> Result<RegisResult> {
    let mut g = Graph::with_params(&m.store);
    let v = m.forward(&mut g, inp);
    let nocs = NocsPrediction {
        cloud: PointCloud::from_matrix(g.value(v.pred1))?,
    };
    let (pose, bbox) = fit_pose(&inp.obs, &nocs)?;
    Ok(RegisResult {
        pose,
        bbox,
        obs: inp.obs.clone(),
        nocs,
        gamma: v.gamma.map(|x| g.value(x).iter().copied().collect()),
    })
}

/// One stage-two training example.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisSample {
    pub input: RegisInput,
    /// Canonical targets of the kept observed points, `N_o×3`.
    pub target: Matrix,
}

pub fn make_sample(
    obs: &PointCloud,
    prior_def: &PointCloud,
    gt_nocs_of_obs: &PointCloud,
    dims: &RegisDims,
) -> Result<RegisSample> {
    if obs.len() != gt_nocs_of_obs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} observed points but {} targets",
            obs.len(),
            gt_nocs_of_obs.len()
        )));
    }
    let input = prepare_input(obs, prior_def, dims)?;
    let target = gt_nocs_of_obs.select(&input.obs_idx).to_matrix();
    Ok(RegisSample { input, target })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub clip_norm: f64,
}

impl Default for RegisTrainConfig {
    fn default() -> Self {
        RegisTrainConfig {
            epochs: 150,
            batch: 8,
            optimizer: OptimizerConfig::adam(1e-3),
            clip_norm: 1.0,
        }
    }
}

impl RegisTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegisEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub corr0: f64,
    pub entropy: f64,
}

fn sample_step(m: &RegistrationModel, s: &RegisSample, w: &RegisLossWeights) -> (f64, f64, f64, ParamGrads) {
    let mut g = Graph::with_params(&m.store);
    let v = m.forward(&mut g, &s.input);
    let gt = g.input(s.target.clone());
    let l = loss_regis_graph(&mut g, &v, gt, w, m.dims.scaling);
    let grads = g.backward(l.total).params(&g, &m.store);
    (g.scalar(l.total), g.scalar(l.corr0), g.scalar(l.entropy), grads)
}

/// Mini-batch training on prepared samples. `on_epoch` sees the statistics
/// and the model after each epoch.
pub fn train_registration(
    model: &mut RegistrationModel,
    samples: &[RegisSample],
    weights: &RegisLossWeights,
    cfg: &RegisTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&RegisEpoch, &RegistrationModel),
) -> Result<Vec<RegisEpoch>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut opt = Optimizer::new(cfg.optimizer, Some(cfg.clip_norm), &model.store);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut corr_sum, mut ent_sum) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let results: Vec<_> = chunk
                .par_iter()
                .map(|&i| sample_step(model, &samples[i], weights))
                .collect();
            let mut total = ParamGrads::zeros_like(&model.store);
            for (loss, corr0, ent, grads) in results {
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                loss_sum += loss;
                corr_sum += corr0;
                ent_sum += ent;
                total.add_assign(&grads);
            }
            total.scale(1.0 / chunk.len() as f64);
            opt.step(&mut model.store, &total);
        }
        let n = samples.len() as f64;
        let stats = RegisEpoch {
            epoch,
            loss: loss_sum / n,
            corr0: corr_sum / n,
            entropy: ent_sum / n,
        };
        on_epoch(&stats, model);
        history.push(stats);
    }
    Ok(history)
}
