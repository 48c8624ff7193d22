//! Stage one: completion, encoding and the prior deformation field.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::chamfer::chamfer_l2sq;
use crate::error::{Error, Result};
use crate::geom::{downsample, voxel_downsample, PointCloud, SimilarityTransform, Vec3};
use crate::nn::AttentionParams;
use crate::nn::{
    Activation, Checkpoint, Graph, Init, Matrix, MlpParams, Optimizer, OptimizerConfig, ParamGrads, ParamStore, Var,
};
use crate::seeds;
use crate::synth::{read_json, write_json};

/// Points generated by completion before the input is appended.
pub const COMPLETION_POINTS: usize = 1152;
/// Input points appended behind the generated ones.
pub const COMPLETION_INPUT_POINTS: usize = 1024;

/// Canonical mean shape of a category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPrior {
    pub category: Category,
    pub cloud: PointCloud,
}

impl CategoryPrior {
    pub fn new(category: Category, cloud: PointCloud) -> Result<Self> {
        Ok(CategoryPrior { category, cloud })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Per-point offsets added to a prior.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    offsets: Vec<Vec3>,
}

impl DeformationField {
    pub fn new(offsets: Vec<Vec3>) -> Result<Self> {
        if offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("deformation offset".into()));
        }
        Ok(DeformationField { offsets })
    }

    pub fn zeros(n: usize) -> Self {
        DeformationField {
            offsets: vec![Vec3::zeros(); n],
        }
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::new(
            (0..m.nrows())
                .map(|r| Vec3::new(m[(r, 0)], m[(r, 1)], m[(r, 2)]))
                .collect(),
        )
    }
}

/// `P + D`.
pub fn apply_deformation(prior: &CategoryPrior, d: &DeformationField) -> Result<PointCloud> {
    if prior.len() != d.len() {
        return Err(Error::ShapeMismatch(format!(
            "prior has {} points, field has {} offsets",
            prior.len(),
            d.len()
        )));
    }
    PointCloud::new(prior.cloud.iter().zip(&d.offsets).map(|(p, o)| p + o).collect())
}

/// Source of the completed observation fed to the deformation network.
pub trait CompletionProvider {
    fn complete(&self, partial: &PointCloud) -> Result<PointCloud>;
}

/// Passes the partial observation through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoopCompletion;

impl CompletionProvider for NoopCompletion {
    fn complete(&self, partial: &PointCloud) -> Result<PointCloud> {
        Ok(noop_complete(partial))
    }
}

pub fn noop_complete(partial: &PointCloud) -> PointCloud {
    partial.clone()
}

/// Perfect completion from the ground-truth model, for synthetic data.
#[derive(Debug, Clone)]
pub struct OracleCompletion<'a> {
    pub model: &'a PointCloud,
    pub pose: SimilarityTransform,
    pub seed: u64,
    pub append_input: bool,
}

impl CompletionProvider for OracleCompletion<'_> {
    fn complete(&self, partial: &PointCloud) -> Result<PointCloud> {
        let generated = self.pose.apply(&downsample(self.model, COMPLETION_POINTS, self.seed)?);
        if !self.append_input {
            return Ok(generated);
        }
        let input = downsample(partial, COMPLETION_INPUT_POINTS, seeds::derive(self.seed, &[1]))?;
        Ok(generated.concat(&input))
    }
}

/// The posed model resampled to [`COMPLETION_POINTS`], followed by the
/// input resampled to [`COMPLETION_INPUT_POINTS`].
pub fn oracle_complete(
    partial: &PointCloud,
    ground_truth_model: &PointCloud,
    pose: &SimilarityTransform,
    seed: u64,
) -> Result<PointCloud> {
    OracleCompletion {
        model: ground_truth_model,
        pose: *pose,
        seed,
        append_input: true,
    }
    .complete(partial)
}

/// Per-point encoder inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInput {
    /// Distance to the centroid divided by the RMS radius; invariant to
    /// rotation, translation and scale.
    Radial,
    /// Absolute coordinates in the principal-axis frame (largest variance
    /// first) divided by the RMS radius, followed by the radial feature.
    /// Invariant to rotation, translation and scale; keeps the proportions.
    Principal,
    /// Raw coordinates.
    Coordinates,
}

impl EncoderInput {
    fn width(self) -> usize {
        match self {
            EncoderInput::Radial => 1,
            EncoderInput::Principal => 4,
            EncoderInput::Coordinates => 3,
        }
    }

    fn features(self, points: &[Vec3]) -> Matrix {
        match self {
            EncoderInput::Coordinates => Matrix::from_fn(points.len(), 3, |r, c| points[r][c]),
            EncoderInput::Radial | EncoderInput::Principal => {
                let n = points.len() as f64;
                let c = points.iter().sum::<Vec3>() / n;
                let rms = (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / n).sqrt();
                let rms = if rms > 0.0 { rms } else { 1.0 };
                if self == EncoderInput::Radial {
                    return Matrix::from_fn(points.len(), 1, |r, _| (points[r] - c).norm() / rms);
                }
                let cov = points
                    .iter()
                    .map(|p| (p - c) * (p - c).transpose())
                    .sum::<Matrix3<f64>>()
                    / n;
                let eig = SymmetricEigen::new(cov);
                let mut order = [0, 1, 2];
                order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
                Matrix::from_fn(points.len(), 4, |r, k| {
                    let q = points[r] - c;
                    match k {
                        3 => q.norm() / rms,
                        _ => eig.eigenvectors.column(order[k]).dot(&q).abs() / rms,
                    }
                })
            }
        }
    }
}

/// Shared per-point MLP, self-attention over a voxel subset and average
/// pooling of the enhanced subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEncoder {
    pub input: EncoderInput,
    pub mlp: MlpParams,
    pub attn: AttentionParams,
    /// Voxel cell for the attention subset, as a fraction of the cloud diagonal.
    pub cell_fraction: f64,
}

impl PointEncoder {
    fn new(store: &mut ParamStore, prefix: &str, input: EncoderInput, dims: &DeformDims, rng: &mut ChaCha8Rng) -> Self {
        let (d, h) = (dims.dim, dims.hidden);
        PointEncoder {
            input,
            mlp: MlpParams::new(
                store,
                &format!("{prefix}.mlp"),
                &[input.width(), h, d],
                Init::Uniform,
                rng,
            ),
            attn: AttentionParams::new(store, &format!("{prefix}.attn"), d, h, Init::Uniform, rng),
            cell_fraction: dims.cell_fraction,
        }
    }

    fn subset(&self, pc: &PointCloud) -> Result<Vec<usize>> {
        let diag = pc.diagonal();
        let cell = if diag > 0.0 { diag * self.cell_fraction } else { 1.0 };
        Ok(voxel_downsample(pc, cell)?.1)
    }

    /// Global feature `1×d` from the enhanced voxel subset.
    fn global(&self, g: &mut Graph<'_>, pc: &PointCloud) -> Result<Var> {
        let idx = self.subset(pc)?;
        let all = self.input.features(pc.points());
        let x = g.input(all.select_rows(&idx));
        let f = self.mlp.forward(g, x, Activation::LeakyRelu);
        let e = self.attn.forward(g, f, f);
        Ok(g.mean_rows(e))
    }

    /// Per-point features `N×d` and global feature `1×d`.
    fn forward(&self, g: &mut Graph<'_>, pc: &PointCloud) -> Result<(Var, Var)> {
        let x = g.input(self.input.features(pc.points()));
        let f = self.mlp.forward(g, x, Activation::LeakyRelu);
        let idx = self.subset(pc)?;
        let sub = g.gather_rows(f, &idx);
        let e = self.attn.forward(g, sub, sub);
        Ok((f, g.mean_rows(e)))
    }
}

/// Network widths of the deformation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformDims {
    /// Feature width `d`.
    pub dim: usize,
    pub hidden: usize,
    pub head_hidden: usize,
    pub cell_fraction: f64,
    pub obs_input: EncoderInput,
}

impl Default for DeformDims {
    fn default() -> Self {
        DeformDims {
            dim: 96,
            hidden: 64,
            head_hidden: 64,
            cell_fraction: 1.0 / 8.0,
            obs_input: EncoderInput::Principal,
        }
    }
}

impl DeformDims {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Config("deformation widths must be positive".into()));
        }
        if !(self.cell_fraction > 0.0 && self.cell_fraction.is_finite()) {
            return Err(Error::Config("deformation cell fraction must be positive".into()));
        }
        Ok(())
    }
}

/// Observation and prior encoders plus the deformation head.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationModel {
    pub dims: DeformDims,
    pub store: ParamStore,
    pub obs_encoder: PointEncoder,
    pub prior_encoder: PointEncoder,
    /// `[F_p, G_o, G_p] → 3` offsets.
    pub head: MlpParams,
}

impl DeformationModel {
    /// Random encoders; the head's last layer starts at zero so the initial
    /// field is zero.
    pub fn new(dims: DeformDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let obs_encoder = PointEncoder::new(&mut store, "obs", dims.obs_input, &dims, &mut rng);
        let prior_encoder = PointEncoder::new(&mut store, "prior", EncoderInput::Coordinates, &dims, &mut rng);
        let head = MlpParams::new(
            &mut store,
            "head",
            &[3 * dims.dim, dims.head_hidden, dims.head_hidden, 3],
            Init::Uniform,
            &mut rng,
        );
        head.zero_output(&mut store);
        Ok(DeformationModel {
            dims,
            store,
            obs_encoder,
            prior_encoder,
            head,
        })
    }

    /// Same layout with every parameter zero.
    pub fn zeros(dims: DeformDims) -> Result<Self> {
        let mut m = Self::new(dims, 0)?;
        for v in m.store.values_mut() {
            v.fill(0.0);
        }
        Ok(m)
    }

    /// Builds the deformation field `N_p×3` on `g`.
    pub fn forward(&self, g: &mut Graph<'_>, prior: &CategoryPrior, completed: &PointCloud) -> Result<Var> {
        let g_o = self.obs_encoder.global(g, completed)?;
        let (f_p, g_p) = self.prior_encoder.forward(g, &prior.cloud)?;
        let n = prior.len();
        let g_o = g.repeat_rows(g_o, n);
        let g_p = g.repeat_rows(g_p, n);
        let cat = g.concat_cols(f_p, g_o);
        let cat = g.concat_cols(cat, g_p);
        Ok(self.head.forward(g, cat, Activation::LeakyRelu))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &ModelFile {
                kind: DEFORM_KIND.into(),
                dims: self.dims,
                params: self.store.to_checkpoint(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile<DeformDims> = read_json(path)?;
        if file.kind != DEFORM_KIND {
            return Err(Error::parse(
                path,
                format!("expected a {DEFORM_KIND} checkpoint, found `{}`", file.kind),
            ));
        }
        let mut m = Self::new(file.dims, 0)?;
        m.store.load_from(&ParamStore::from_checkpoint(&file.params)?)?;
        Ok(m)
    }
}

const DEFORM_KIND: &str = "deformation";

/// Network checkpoint: widths plus parameter tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ModelFile<D> {
    pub kind: String,
    pub dims: D,
    pub params: Checkpoint,
}

/// Per-point features and global feature of `pc` under one of the model's
/// encoders (`prior_side` selects the prior encoder).
pub fn encode(pc: &PointCloud, m: &DeformationModel, prior_side: bool) -> Result<(Matrix, Matrix)> {
    let enc = if prior_side { &m.prior_encoder } else { &m.obs_encoder };
    let mut g = Graph::with_params(&m.store);
    let (f, gl) = enc.forward(&mut g, pc)?;
    Ok((g.value(f).clone(), g.value(gl).clone()))
}

pub fn predict_deformation(
    prior: &CategoryPrior,
    completed: &PointCloud,
    m: &DeformationModel,
) -> Result<DeformationField> {
    let mut g = Graph::with_params(&m.store);
    let d = m.forward(&mut g, prior, completed)?;
    DeformationField::from_matrix(g.value(d))
}

/// Stage-one loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformLossWeights {
    /// Chamfer weight.
    pub cd: f64,
    /// Deformation magnitude weight.
    pub delta: f64,
}

impl Default for DeformLossWeights {
    fn default() -> Self {
        DeformLossWeights { cd: 5.0, delta: 0.01 }
    }
}

/// `w.cd · CD(P + D, P_gt) + w.delta · mean‖d_i‖` on the graph, with `prior`
/// and `gt` given as `N×3` nodes. Returns the loss and the Chamfer term.
pub fn loss_def_graph(g: &mut Graph<'_>, prior: Var, d: Var, gt: Var, w: &DeformLossWeights) -> (Var, Var) {
    let p_def = g.add(prior, d);
    let cd = g.chamfer_l2sq(p_def, gt);
    let norms = g.row_norms(d);
    let delta = g.mean(norms);
    let a = g.scale(cd, w.cd);
    let b = g.scale(delta, w.delta);
    (g.add(a, b), cd)
}

pub fn loss_def(p_def: &PointCloud, p_gt: &PointCloud, d: &DeformationField, w: &DeformLossWeights) -> f64 {
    let delta = d.offsets.iter().map(|o| o.norm()).sum::<f64>() / d.len().max(1) as f64;
    w.cd * chamfer_l2sq(p_def, p_gt).total + w.delta * delta
}

/// Stage-one training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for DeformTrainConfig {
    fn default() -> Self {
        DeformTrainConfig {
            epochs: 100,
            batch: 16,
            optimizer: OptimizerConfig::adam(1e-3),
            clip_norm: 1.0,
        }
    }
}

impl DeformTrainConfig {
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

/// One training example: prior, completed observation and canonical target.
#[derive(Debug, Clone)]
pub struct DeformSample<'a> {
    pub prior: &'a CategoryPrior,
    pub completed: PointCloud,
    pub target: &'a PointCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformEpoch {
    pub epoch: usize,
    /// Mean training loss over the epoch's instances, before each update.
    pub loss: f64,
    /// Mean `CD(P_def, P_gt)` over the epoch's instances.
    pub cd: f64,
}

fn sample_loss_and_grads(
    model: &DeformationModel,
    s: &DeformSample<'_>,
    w: &DeformLossWeights,
) -> Result<(f64, f64, ParamGrads)> {
    let mut g = Graph::with_params(&model.store);
    let d = model.forward(&mut g, s.prior, &s.completed)?;
    let prior = g.points(&s.prior.cloud);
    let gt = g.points(s.target);
    let (loss, cd) = loss_def_graph(&mut g, prior, d, gt, w);
    let grads = g.backward(loss).params(&g, &model.store);
    Ok((g.scalar(loss), g.scalar(cd), grads))
}

/// Mini-batch gradient descent on the deformation loss. Instance order is
/// reshuffled every epoch from `seed`; per-instance gradients are computed in
/// parallel and summed in batch order.
pub fn train_deformation(
    model: &mut DeformationModel,
    samples: &[DeformSample<'_>],
    weights: &DeformLossWeights,
    cfg: &DeformTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&DeformEpoch),
) -> Result<Vec<DeformEpoch>> {
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
        let (mut loss_sum, mut cd_sum) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let results: Vec<Result<(f64, f64, ParamGrads)>> = chunk
                .par_iter()
                .map(|&i| sample_loss_and_grads(model, &samples[i], weights))
                .collect();
            let mut total = ParamGrads::zeros_like(&model.store);
            for r in results {
                let (loss, cd, grads) = r?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                loss_sum += loss;
                cd_sum += cd;
                total.add_assign(&grads);
            }
            total.scale(1.0 / chunk.len() as f64);
            opt.step(&mut model.store, &total);
        }
        let stats = DeformEpoch {
            epoch,
            loss: loss_sum / samples.len() as f64,
            cd: cd_sum / samples.len() as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_rotation;
    use crate::nn::gradcheck::{check_gradients, GradCheckOptions};
    use crate::synth::{build_prior, sample_surface};

    fn small_dims() -> DeformDims {
        DeformDims {
            dim: 6,
            hidden: 5,
            head_hidden: 4,
            cell_fraction: 0.5,
            obs_input: EncoderInput::Radial,
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let r = random_rotation(seed);
        PointCloud::new(
            (0..n)
                .map(|i| {
                    let t = i as f64 * 0.7;
                    r.rotate(&Vec3::new(t.sin(), (1.3 * t).cos(), 0.1 * (i % 5) as f64))
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn deformation_is_pointwise_sum() {
        let prior = CategoryPrior::new(Category::Can, cloud(10, 1)).unwrap();
        assert_eq!(
            apply_deformation(&prior, &DeformationField::zeros(10)).unwrap(),
            prior.cloud
        );
        let shift = DeformationField::new(vec![Vec3::new(0.1, 0.0, 0.0); 10]).unwrap();
        let moved = apply_deformation(&prior, &shift).unwrap();
        for (a, b) in moved.iter().zip(prior.cloud.iter()) {
            assert_eq!(*a, b + Vec3::new(0.1, 0.0, 0.0));
        }
        let back: Vec<Vec3> = moved.iter().zip(shift.offsets()).map(|(p, o)| p - o).collect();
        for (a, b) in back.iter().zip(prior.cloud.iter()) {
            assert!((a - b).norm() < 1e-15);
        }
        assert!(apply_deformation(&prior, &DeformationField::zeros(9)).is_err());
    }

    #[test]
    fn deformation_composes_linearly() {
        let prior = CategoryPrior::new(Category::Can, cloud(8, 2)).unwrap();
        let d1 = DeformationField::new((0..8).map(|i| Vec3::new(0.01 * i as f64, 0.0, 0.02)).collect()).unwrap();
        let d2 = DeformationField::new((0..8).map(|i| Vec3::new(0.0, -0.03 * i as f64, 0.01)).collect()).unwrap();
        let sum = DeformationField::new(d1.offsets().iter().zip(d2.offsets()).map(|(a, b)| a + b).collect()).unwrap();
        let once = apply_deformation(&prior, &sum).unwrap();
        let mid = CategoryPrior::new(Category::Can, apply_deformation(&prior, &d1).unwrap()).unwrap();
        let twice = apply_deformation(&mid, &d2).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn noop_completion_is_identity() {
        let pc = cloud(17, 3);
        assert_eq!(NoopCompletion.complete(&pc).unwrap(), pc);
    }

    #[test]
    fn oracle_completion_layout_and_coverage() {
        let model = sample_surface(Category::Can, 1).unwrap().cloud;
        let pose = SimilarityTransform::new(random_rotation(4), Vec3::new(0.1, 0.0, 1.5), 0.3).unwrap();
        let posed = pose.apply(&model);
        let out = oracle_complete(&posed, &model, &pose, 5).unwrap();
        assert_eq!(out.len(), COMPLETION_POINTS + COMPLETION_INPUT_POINTS);
        assert_eq!(out, oracle_complete(&posed, &model, &pose, 5).unwrap());
        // Half-space culled input: completion covers the hidden half.
        let keep: Vec<usize> = (0..posed.len()).filter(|&i| posed.points()[i].x > 0.1).collect();
        let half = posed.select(&keep);
        let done = oracle_complete(&half, &model, &pose, 6).unwrap();
        let before = chamfer_l2sq(&posed, &half).forward;
        let after = chamfer_l2sq(&posed, &done).forward;
        assert!(after < before);
    }

    #[test]
    fn zero_model_gives_zero_features_and_field() {
        let m = DeformationModel::zeros(small_dims()).unwrap();
        let pc = cloud(30, 1);
        let (f, g) = encode(&pc, &m, false).unwrap();
        assert!(f.iter().all(|v| *v == 0.0) && g.iter().all(|v| *v == 0.0));
        let prior = CategoryPrior::new(Category::Mug, cloud(12, 2)).unwrap();
        let fresh = DeformationModel::new(small_dims(), 3).unwrap();
        let d = predict_deformation(&prior, &pc, &fresh).unwrap();
        assert_eq!(d.len(), 12);
        assert!(d.offsets().iter().all(|o| o.norm() == 0.0));
    }

    #[test]
    fn single_point_global_is_enhanced_row() {
        let m = DeformationModel::new(small_dims(), 4).unwrap();
        let pc = PointCloud::new(vec![Vec3::new(0.2, -0.1, 0.3)]).unwrap();
        let (_, g) = encode(&pc, &m, true).unwrap();
        let (f, _) = encode(&pc, &m, true).unwrap();
        let enhanced = crate::nn::attention(&f, &f, &m.prior_encoder.attn, &m.store).unwrap();
        assert_eq!(g, enhanced);
    }

    #[test]
    fn principal_features_ignore_similarity_transforms() {
        let pc = cloud(40, 6);
        let t = SimilarityTransform::new(random_rotation(9), Vec3::new(0.3, -1.0, 2.0), 0.4).unwrap();
        let a = EncoderInput::Principal.features(pc.points());
        let b = EncoderInput::Principal.features(t.apply(&pc).points());
        assert_eq!(a.ncols(), 4);
        assert!((a - b).abs().max() < 1e-9);
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let m = DeformationModel::new(small_dims(), 5).unwrap();
        let pc = cloud(40, 6);
        let perm: Vec<usize> = (0..40).map(|i| (i * 7 + 3) % 40).collect();
        let shuffled = pc.select(&perm);
        for prior_side in [false, true] {
            let (f, g) = encode(&pc, &m, prior_side).unwrap();
            let (fs, gs) = encode(&shuffled, &m, prior_side).unwrap();
            for (r, &p) in perm.iter().enumerate() {
                assert!((fs.row(r) - f.row(p)).abs().max() < 1e-12);
            }
            assert!((g - gs).abs().max() < 1e-12);
        }
    }

    #[test]
    fn loss_values() {
        let gt = cloud(20, 7);
        let prior = CategoryPrior::new(Category::Bowl, cloud(20, 8)).unwrap();
        let w = DeformLossWeights::default();
        assert_eq!(loss_def(&gt, &gt, &DeformationField::zeros(20), &w), 0.0);
        let zero = loss_def(&prior.cloud, &gt, &DeformationField::zeros(20), &w);
        assert!((zero - 5.0 * chamfer_l2sq(&prior.cloud, &gt).total).abs() < 1e-15);
        let unit = DeformationField::new(vec![Vec3::new(0.0, 0.6, 0.8); 20]).unwrap();
        assert!((loss_def(&gt, &gt, &unit, &w) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut m = DeformationModel::new(small_dims(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for l in &m.head.layers {
            for id in [l.weight, l.bias] {
                let v = m.store.get(id).map(|_| rand::Rng::random_range(&mut rng, -0.5..0.5));
                m.store.set(id, v);
            }
        }
        let prior = CategoryPrior::new(Category::Camera, cloud(15, 10)).unwrap();
        let obs = cloud(25, 11);
        let gt = cloud(18, 12);
        let ids: Vec<_> = m.store.ids().collect();
        let w = DeformLossWeights::default();
        let report = check_gradients(&m.store, &ids, GradCheckOptions::default(), |g| {
            let d = m.forward(g, &prior, &obs).unwrap();
            let p = g.points(&prior.cloud);
            let t = g.points(&gt);
            loss_def_graph(g, p, d, t, &w).0
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = DeformationModel::new(small_dims(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deform.json");
        m.save(&path).unwrap();
        assert_eq!(DeformationModel::load(&path).unwrap(), m);
    }

    #[test]
    fn training_reduces_chamfer_and_is_deterministic() {
        let models: Vec<PointCloud> = (0..4)
            .map(|s| sample_surface(Category::Bottle, s).unwrap().cloud)
            .collect();
        let refs: Vec<&PointCloud> = models.iter().collect();
        let prior = build_prior(Category::Bottle, &refs).unwrap();
        let prior = CategoryPrior::new(Category::Bottle, downsample(&prior.cloud, 128, 0).unwrap()).unwrap();
        let targets: Vec<PointCloud> = models.iter().map(|m| downsample(m, 256, 1).unwrap()).collect();
        let samples: Vec<DeformSample> = targets
            .iter()
            .map(|t| DeformSample {
                prior: &prior,
                completed: t.clone(),
                target: t,
            })
            .collect();
        let cfg = DeformTrainConfig {
            epochs: 15,
            batch: 2,
            ..Default::default()
        };
        let dims = DeformDims {
            dim: 12,
            hidden: 12,
            head_hidden: 12,
            ..Default::default()
        };
        let run = || {
            let mut m = DeformationModel::new(dims, 1).unwrap();
            train_deformation(&mut m, &samples, &DeformLossWeights::default(), &cfg, 3, |_| {}).unwrap()
        };
        let h = run();
        assert!(h.last().unwrap().cd < h[0].cd, "{h:?}");
        assert_eq!(h, run());
    }
}
