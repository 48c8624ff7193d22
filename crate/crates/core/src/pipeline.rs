//! Experiment configuration and the two-stage cascade with file handoff.
//!
//! Every stage reads its inputs from and writes its outputs under one run
//! directory. Stage two reads only the serialized stage-one outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::category::Category;
use crate::chamfer::chamfer_l2sq;
use crate::deform::{
    apply_deformation, oracle_complete, predict_deformation, train_deformation, CategoryPrior, DeformDims,
    DeformLossWeights, DeformSample, DeformTrainConfig, DeformationModel,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, trend_study, EvalOptions, GroundTruth, MetricReport, PoseBox, Prediction, Rates, SymmetrySpec,
    TrendInstance, TrendRow,
};
use crate::geom::io::{read_points, write_points};
use crate::geom::PointCloud;
use crate::regis::{
    canonicalize_symmetric, infer, make_sample, train_registration, RegisDims, RegisLossWeights, RegisSample,
    RegisTrainConfig, RegistrationModel,
};
use crate::seeds;
use crate::synth::{
    build_prior, gen_dataset, load_dataset, perturb_prior, read_json, write_dataset, write_json, DatasetConfig,
    InstanceRecord, NoiseSpec,
};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const LOG_FILE: &str = "log.txt";
pub const DATASET_DIR: &str = "dataset";
pub const STAGE1_INDEX: &str = "stage1/handoff.json";
pub const DEFORM_CHECKPOINT: &str = "stage1/deform_model.json";
pub const DEFORM_LOG: &str = "stage1/train_log.csv";
pub const DEFORM_REPORT: &str = "stage1/chamfer_report.csv";
pub const REGIS_CHECKPOINT: &str = "stage2/regis_model.json";
pub const REGIS_LOG: &str = "stage2/train_log.csv";
pub const PREDICTIONS: &str = "predictions.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const TREND_CSV: &str = "trend.csv";
pub const ABLATION_CSV: &str = "ablation_scaling.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformSection {
    #[serde(default)]
    pub dims: DeformDims,
    #[serde(default)]
    pub train: DeformTrainConfig,
    #[serde(default)]
    pub weights: DeformLossWeights,
}

impl Default for DeformSection {
    fn default() -> Self {
        DeformSection {
            dims: DeformDims::default(),
            train: DeformTrainConfig::default(),
            weights: DeformLossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisSection {
    #[serde(default)]
    pub dims: RegisDims,
    #[serde(default)]
    pub train: RegisTrainConfig,
    #[serde(default)]
    pub weights: RegisLossWeights,
    /// Held-in pose metrics are logged every this many epochs (0 disables).
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    /// Remove the unobservable yaw from the targets of symmetric categories.
    #[serde(default = "yes")]
    pub canonicalize_symmetric: bool,
}

fn default_val_every() -> usize {
    25
}

fn yes() -> bool {
    true
}

impl Default for RegisSection {
    fn default() -> Self {
        RegisSection {
            dims: RegisDims::default(),
            train: RegisTrainConfig::default(),
            weights: RegisLossWeights::default(),
            val_every: default_val_every(),
            canonicalize_symmetric: true,
        }
    }
}

/// Named seeds; each is combined with the command-line seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub data: u64,
    pub completion: u64,
    pub deform_init: u64,
    pub deform_train: u64,
    pub regis_init: u64,
    pub regis_train: u64,
    pub eval: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            data: 1,
            completion: 2,
            deform_init: 3,
            deform_train: 4,
            regis_init: 5,
            regis_train: 6,
            eval: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub symmetry: SymmetrySpec,
    #[serde(default = "default_iou_samples")]
    pub iou_samples: usize,
}

fn default_iou_samples() -> usize {
    100_000
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            symmetry: SymmetrySpec::default(),
            iou_samples: default_iou_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendSection {
    pub cd_targets: Vec<f64>,
    pub seeds: Vec<u64>,
    pub iou_samples: usize,
}

impl Default for TrendSection {
    fn default() -> Self {
        TrendSection {
            cd_targets: vec![0.0, 1e-3, 3e-3, 1e-2],
            seeds: vec![1, 2, 3, 4, 5],
            iou_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Chamfer perturbation applied to the stage-one priors for both arms.
    pub perturbation: f64,
    /// Perturbation seeds used for evaluation.
    pub seeds: Vec<u64>,
    /// Perturbation seed used for the training priors.
    pub train_seed: u64,
    pub iou_samples: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            perturbation: 3e-3,
            seeds: vec![1, 2, 3, 4, 5],
            train_seed: 99,
            iou_samples: 20_000,
        }
    }
}

fn default_dataset() -> DatasetConfig {
    DatasetConfig {
        categories: Category::ALL.to_vec(),
        count_per_category: 10,
        noise: NoiseSpec::default(),
    }
}

/// Completion is on for categories whose observations rarely show the whole
/// profile.
pub fn default_completion() -> BTreeMap<Category, bool> {
    Category::ALL
        .iter()
        .map(|c| (*c, !matches!(c, Category::Laptop | Category::Mug)))
        .collect()
}

/// Everything an experiment depends on besides the command-line seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_dataset")]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub deform: DeformSection,
    #[serde(default)]
    pub regis: RegisSection,
    #[serde(default = "default_completion")]
    pub completion: BTreeMap<Category, bool>,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub trend: TrendSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: default_dataset(),
            deform: DeformSection::default(),
            regis: RegisSection::default(),
            completion: default_completion(),
            seeds: SeedConfig::default(),
            eval: EvalSection::default(),
            trend: TrendSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Ok((Self::from_json(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.deform.dims.validate()?;
        self.deform.train.validate()?;
        self.regis.dims.validate()?;
        self.regis.train.validate()?;
        self.eval.symmetry.validate()?;
        if let Some(c) = Category::ALL.iter().find(|c| !self.completion.contains_key(c)) {
            return Err(Error::Config(format!("completion flag missing for {c}")));
        }
        let weights = [
            self.deform.weights.cd,
            self.deform.weights.delta,
            self.regis.weights.corr0,
            self.regis.weights.corr1,
            self.regis.weights.corr,
            self.regis.weights.entropy,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.eval.iou_samples == 0 || self.trend.iou_samples == 0 || self.ablation.iou_samples == 0 {
            return Err(Error::Config("IoU sample counts must be positive".into()));
        }
        if self.trend.cd_targets.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || self.trend.cd_targets.is_empty() {
            return Err(Error::Config(
                "trend targets must be a non-empty list of non-negative values".into(),
            ));
        }
        if self.trend.seeds.is_empty() || self.ablation.seeds.is_empty() {
            return Err(Error::Config("trend and ablation need at least one seed".into()));
        }
        if !(self.ablation.perturbation.is_finite() && self.ablation.perturbation >= 0.0) {
            return Err(Error::Config("ablation perturbation must be non-negative".into()));
        }
        Ok(())
    }
}

/// Output directory of a run, tracking every file written into it.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: BTreeSet<String>,
    log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub files: Vec<String>,
}

impl RunDir {
    /// Opens (creating if needed) a run directory, picking up an existing
    /// manifest.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let files = match read_json::<RunManifest>(&root.join(RUN_MANIFEST)) {
            Ok(m) => m.files.into_iter().collect(),
            Err(Error::MissingInput(_)) => BTreeSet::new(),
            Err(e) => return Err(e),
        };
        Ok(RunDir {
            root: root.to_path_buf(),
            files,
            log: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    fn prepare(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.files.insert(rel.to_string());
        Ok(path)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.prepare(rel)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let path = self.prepare(rel)?;
        write_json(&path, value)
    }

    pub fn write_points(&mut self, rel: &str, pc: &PointCloud) -> Result<()> {
        let path = self.prepare(rel)?;
        write_points(&path, pc)
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, rel: &str) {
        self.files.insert(rel.to_string());
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
    }

    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(String::as_str)
    }

    /// Appends the log and rewrites the manifest.
    pub fn finish(&mut self, seed: u64) -> Result<()> {
        use std::io::Write as _;
        let log_path = self.prepare(LOG_FILE)?;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        for line in self.log.drain(..) {
            writeln!(f, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        self.files.insert(RUN_MANIFEST.into());
        let manifest = RunManifest {
            seed,
            files: self.files.iter().cloned().collect(),
        };
        write_json(&self.path(RUN_MANIFEST), &manifest)
    }
}

/// Seeds fanned out from the command-line seed.
fn stage_seed(seed: u64, named: u64) -> u64 {
    seeds::derive(seed, &[named])
}

/// Stores the config text byte for byte.
pub fn snapshot_config(run: &mut RunDir, text: &str) -> Result<()> {
    run.write_text(CONFIG_SNAPSHOT, text)
}

pub fn synth_gen(cfg: &ExperimentConfig, seed: u64, run: &mut RunDir) -> Result<Vec<InstanceRecord>> {
    let records = gen_dataset(&cfg.dataset, stage_seed(seed, cfg.seeds.data))?;
    let written = write_dataset(
        &run.path(DATASET_DIR),
        &cfg.dataset,
        stage_seed(seed, cfg.seeds.data),
        &records,
    )?;
    for rel in written {
        run.record(&format!("{DATASET_DIR}/{rel}"));
    }
    run.log(format!("synth-gen: {} instances", records.len()));
    Ok(records)
}

fn require(run: &RunDir, rel: &str, what: &str, command: &str) -> Result<()> {
    if run.exists(rel) {
        Ok(())
    } else {
        Err(Error::StageOrder(format!(
            "{what} not found under {}; run `{command}` first",
            run.root().display()
        )))
    }
}

pub fn load_run_dataset(run: &RunDir) -> Result<Vec<InstanceRecord>> {
    require(run, &format!("{DATASET_DIR}/manifest.json"), "dataset", "synth-gen")?;
    Ok(load_dataset(&run.path(DATASET_DIR))?.1)
}

/// Stage-one output for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoffEntry {
    pub id: String,
    pub category: Category,
    /// Deformed prior, relative to the run directory.
    pub prior_def: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoffIndex {
    pub entries: Vec<HandoffEntry>,
}

/// Mean chamfer distances to the ground-truth model per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChamferRow {
    pub category: Category,
    pub count: usize,
    /// Mean `CD(P, P_gt)` for the undeformed prior.
    pub prior_cd: f64,
    /// Mean `CD(P_def, P_gt)`.
    pub deformed_cd: f64,
}

pub fn chamfer_csv(rows: &[ChamferRow]) -> String {
    let mut out = String::from("category,count,prior_cd,deformed_cd\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.8},{:.8}\n",
            r.category, r.count, r.prior_cd, r.deformed_cd
        ));
    }
    out
}

fn priors_for(records: &[InstanceRecord]) -> Result<BTreeMap<Category, CategoryPrior>> {
    let mut by_cat: BTreeMap<Category, Vec<&PointCloud>> = BTreeMap::new();
    for r in records {
        by_cat.entry(r.category).or_default().push(&r.model_nocs);
    }
    by_cat
        .into_iter()
        .map(|(c, models)| Ok((c, build_prior(c, &models)?)))
        .collect()
}

/// Builds priors, trains the deformation network, and writes the deformed
/// prior of every instance as the stage-one handoff.
pub fn train_deform(cfg: &ExperimentConfig, seed: u64, run: &mut RunDir) -> Result<Vec<ChamferRow>> {
    let records = load_run_dataset(run)?;
    let priors = priors_for(&records)?;
    for (c, p) in &priors {
        run.write_points(&format!("stage1/priors/{c}.xyz"), &p.cloud)?;
    }
    let completion_seed = stage_seed(seed, cfg.seeds.completion);
    let completed = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            if cfg.completion[&r.category] {
                oracle_complete(
                    &r.partial_obs,
                    &r.model_nocs,
                    &r.gt_pose,
                    seeds::derive(completion_seed, &[i as u64]),
                )
            } else {
                Ok(r.partial_obs.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<DeformSample<'_>> = records
        .iter()
        .zip(&completed)
        .map(|(r, c)| DeformSample {
            prior: &priors[&r.category],
            completed: c.clone(),
            target: &r.model_nocs,
        })
        .collect();
    let mut model = DeformationModel::new(cfg.deform.dims, stage_seed(seed, cfg.seeds.deform_init))?;
    let history = train_deformation(
        &mut model,
        &samples,
        &cfg.deform.weights,
        &cfg.deform.train,
        stage_seed(seed, cfg.seeds.deform_train),
        |_| {},
    )?;
    let mut log = String::from("epoch,loss,cd\n");
    for h in &history {
        log.push_str(&format!("{},{:.10},{:.10}\n", h.epoch, h.loss, h.cd));
    }
    run.write_text(DEFORM_LOG, &log)?;
    model.save(&run.prepare(DEFORM_CHECKPOINT)?)?;

    let deformed = records
        .par_iter()
        .zip(&completed)
        .map(|(r, c)| {
            let prior = &priors[&r.category];
            apply_deformation(prior, &predict_deformation(prior, c, &model)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(records.len());
    let mut sums: BTreeMap<Category, (usize, f64, f64)> = BTreeMap::new();
    for (r, p_def) in records.iter().zip(&deformed) {
        let rel = format!("stage1/prior_def/{}.xyz", r.id);
        run.write_points(&rel, p_def)?;
        entries.push(HandoffEntry {
            id: r.id.clone(),
            category: r.category,
            prior_def: rel,
        });
        let s = sums.entry(r.category).or_default();
        s.0 += 1;
        s.1 += chamfer_l2sq(&priors[&r.category].cloud, &r.model_nocs).total;
        s.2 += chamfer_l2sq(p_def, &r.model_nocs).total;
    }
    run.write_json(STAGE1_INDEX, &HandoffIndex { entries })?;
    let rows: Vec<ChamferRow> = sums
        .into_iter()
        .map(|(category, (n, a, b))| ChamferRow {
            category,
            count: n,
            prior_cd: a / n as f64,
            deformed_cd: b / n as f64,
        })
        .collect();
    run.write_text(DEFORM_REPORT, &chamfer_csv(&rows))?;
    let last = history.last().map_or(f64::NAN, |h| h.cd);
    run.log(format!(
        "train-deform: {} epochs, final training CD {last:.6}",
        history.len()
    ));
    Ok(rows)
}

/// Instances paired with their stage-one deformed priors.
pub fn load_handoff(run: &RunDir) -> Result<Vec<(InstanceRecord, PointCloud)>> {
    require(run, STAGE1_INDEX, "stage-one handoff", "train-deform")?;
    let index: HandoffIndex = read_json(&run.path(STAGE1_INDEX))?;
    let records = load_run_dataset(run)?;
    let mut by_id: BTreeMap<String, InstanceRecord> = records.into_iter().map(|r| (r.id.clone(), r)).collect();
    index
        .entries
        .iter()
        .map(|e| {
            let rec = by_id
                .remove(&e.id)
                .ok_or_else(|| Error::parse(&run.path(STAGE1_INDEX), format!("unknown instance `{}`", e.id)))?;
            Ok((rec, read_points(&run.path(&e.prior_def))?))
        })
        .collect()
}

fn regis_samples(
    cfg: &ExperimentConfig,
    pairs: &[(InstanceRecord, PointCloud)],
    dims: &RegisDims,
) -> Result<Vec<RegisSample>> {
    pairs
        .par_iter()
        .map(|(r, p_def)| {
            let target = if cfg.regis.canonicalize_symmetric && cfg.eval.symmetry.is_symmetric(r.category) {
                canonicalize_symmetric(&r.gt_nocs_of_obs, &r.gt_pose)?.0
            } else {
                r.gt_nocs_of_obs.clone()
            };
            make_sample(&r.partial_obs, p_def, &target, dims)
        })
        .collect()
}

fn eval_options(cfg: &ExperimentConfig, seed: u64, iou_samples: usize) -> EvalOptions {
    EvalOptions {
        iou_samples,
        seed: stage_seed(seed, cfg.seeds.eval),
    }
}

/// Runs the registration network on every instance.
pub fn predict_all(model: &RegistrationModel, pairs: &[(InstanceRecord, PointCloud)]) -> Result<Vec<Prediction>> {
    pairs
        .par_iter()
        .map(|(r, p_def)| {
            let res = infer(model, &r.partial_obs, p_def)?;
            Ok(Prediction {
                id: r.id.clone(),
                category: r.category,
                pose_box: PoseBox {
                    pose: res.pose,
                    bbox: res.bbox,
                },
            })
        })
        .collect()
}

fn ground_truths(pairs: &[(InstanceRecord, PointCloud)]) -> Vec<GroundTruth> {
    pairs.iter().map(|(r, _)| GroundTruth::from(r)).collect()
}

/// Trains a registration network on the given priors, logging held-in pose
/// rates every `val_every` epochs.
pub fn fit_registration(
    cfg: &ExperimentConfig,
    seed: u64,
    pairs: &[(InstanceRecord, PointCloud)],
    dims: RegisDims,
) -> Result<(RegistrationModel, String)> {
    let samples = regis_samples(cfg, pairs, &dims)?;
    let mut model = RegistrationModel::new(dims, stage_seed(seed, cfg.seeds.regis_init))?;
    let gts = ground_truths(pairs);
    let opts = eval_options(cfg, seed, 1_000);
    let mut log = String::from("epoch,loss,corr0,entropy,deg5_cm2,deg10_cm5\n");
    let mut failure = None;
    train_registration(
        &mut model,
        &samples,
        &cfg.regis.weights,
        &cfg.regis.train,
        stage_seed(seed, cfg.seeds.regis_train),
        |e, m| {
            let validate = cfg.regis.val_every > 0 && (e.epoch + 1) % cfg.regis.val_every == 0;
            let rates = if validate {
                match predict_all(m, pairs).and_then(|p| evaluate(&p, &gts, &cfg.eval.symmetry, &opts)) {
                    Ok(r) => format!("{:.6},{:.6}", r.mean.deg5_cm2, r.mean.deg10_cm5),
                    Err(err) => {
                        failure.get_or_insert(err);
                        ",".into()
                    }
                }
            } else {
                ",".into()
            };
            log.push_str(&format!(
                "{},{:.10},{:.10},{:.10},{rates}\n",
                e.epoch, e.loss, e.corr0, e.entropy
            ));
        },
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok((model, log)),
    }
}

pub fn train_regis(cfg: &ExperimentConfig, seed: u64, run: &mut RunDir) -> Result<RegistrationModel> {
    let pairs = load_handoff(run)?;
    let (model, log) = fit_registration(cfg, seed, &pairs, cfg.regis.dims)?;
    run.write_text(REGIS_LOG, &log)?;
    model.save(&run.prepare(REGIS_CHECKPOINT)?)?;
    run.log(format!(
        "train-regis: {} epochs on {} instances",
        cfg.regis.train.epochs,
        pairs.len()
    ));
    Ok(model)
}

fn load_regis(run: &RunDir) -> Result<RegistrationModel> {
    require(run, REGIS_CHECKPOINT, "registration checkpoint", "train-regis")?;
    RegistrationModel::load(&run.path(REGIS_CHECKPOINT))
}

pub fn infer_run(run: &mut RunDir) -> Result<Vec<Prediction>> {
    let model = load_regis(run)?;
    let pairs = load_handoff(run)?;
    let preds = predict_all(&model, &pairs)?;
    run.write_json(PREDICTIONS, &preds)?;
    run.log(format!("infer: {} predictions", preds.len()));
    Ok(preds)
}

pub fn eval_run(cfg: &ExperimentConfig, seed: u64, run: &mut RunDir) -> Result<MetricReport> {
    require(run, PREDICTIONS, "predictions", "infer")?;
    let preds: Vec<Prediction> = read_json(&run.path(PREDICTIONS))?;
    let records = load_run_dataset(run)?;
    let gts: Vec<GroundTruth> = records.iter().map(GroundTruth::from).collect();
    let report = evaluate(
        &preds,
        &gts,
        &cfg.eval.symmetry,
        &eval_options(cfg, seed, cfg.eval.iou_samples),
    )?;
    run.write_text(REPORT_CSV, &report.to_csv())?;
    run.write_text(REPORT_JSON, &report.to_json()?)?;
    run.log(format!(
        "eval: mean 5deg2cm {:.4}, 10deg5cm {:.4}, IoU50 {:.4}",
        report.mean.deg5_cm2, report.mean.deg10_cm5, report.mean.iou50
    ));
    Ok(report)
}

pub fn trend_run(cfg: &ExperimentConfig, seed: u64, run: &mut RunDir) -> Result<Vec<TrendRow>> {
    let model = load_regis(run)?;
    let pairs = load_handoff(run)?;
    let instances: Vec<TrendInstance<'_>> = pairs
        .iter()
        .map(|(r, p)| TrendInstance {
            record: r,
            prior_def: p,
        })
        .collect();
    let rows = trend_study(
        &instances,
        &cfg.trend.cd_targets,
        &model,
        &cfg.trend.seeds,
        &cfg.eval.symmetry,
        &eval_options(cfg, seed, cfg.trend.iou_samples),
    )?;
    run.write_text(TREND_CSV, &crate::eval::trend_csv(&rows))?;
    run.log(format!("trend: {} rows", rows.len()));
    Ok(rows)
}

/// Mean rates of one ablation arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scaling: bool,
    pub seed: Option<u64>,
    pub rates: Rates,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("scaling,seed,{}\n", Rates::COLUMNS.join(","));
    for r in rows {
        let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
        out.push_str(&format!("{},{seed}", if r.scaling { "apply" } else { "not" }));
        for v in r.rates.values() {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

fn perturbed(
    pairs: &[(InstanceRecord, PointCloud)],
    level: f64,
    seed: u64,
) -> Result<Vec<(InstanceRecord, PointCloud)>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, (r, p))| Ok((r.clone(), perturb_prior(p, level, seeds::derive(seed, &[i as u64]))?)))
        .collect()
}

/// Trains the registration network with and without scaling factors on
/// deliberately perturbed stage-one priors and evaluates both arms on fresh
/// perturbations.
pub fn ablate_scaling(cfg: &ExperimentConfig, seed: u64, run: &mut RunDir) -> Result<Vec<AblationRow>> {
    let pairs = load_handoff(run)?;
    let a = &cfg.ablation;
    let train_pairs = perturbed(&pairs, a.perturbation, stage_seed(seed, a.train_seed))?;
    let gts = ground_truths(&pairs);
    let mut rows = Vec::new();
    for scaling in [false, true] {
        let dims = RegisDims {
            scaling,
            ..cfg.regis.dims
        };
        let (model, _) = fit_registration(cfg, seed, &train_pairs, dims)?;
        let mut per_seed = Vec::new();
        for &s in &a.seeds {
            let test_pairs = perturbed(&pairs, a.perturbation, stage_seed(seed, s))?;
            let preds = predict_all(&model, &test_pairs)?;
            let report = evaluate(
                &preds,
                &gts,
                &cfg.eval.symmetry,
                &eval_options(cfg, seed, a.iou_samples),
            )?;
            per_seed.push(AblationRow {
                scaling,
                seed: Some(s),
                rates: report.mean,
            });
        }
        let mean = Rates::mean(&per_seed.iter().map(|r| r.rates).collect::<Vec<_>>());
        rows.extend(per_seed);
        rows.push(AblationRow {
            scaling,
            seed: None,
            rates: mean,
        });
    }
    run.write_text(ABLATION_CSV, &ablation_csv(&rows))?;
    run.log("ablate-scaling: done");
    Ok(rows)
}

/// Full cascade: data, stage one, stage two, inference and evaluation.
pub fn run_all(cfg: &ExperimentConfig, seed: u64, run: &mut RunDir) -> Result<MetricReport> {
    synth_gen(cfg, seed, run)?;
    train_deform(cfg, seed, run)?;
    train_regis(cfg, seed, run)?;
    infer_run(run)?;
    eval_run(cfg, seed, run)
}
