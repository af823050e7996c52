//! Experiment orchestration: one configuration file, one directory per
//! configuration hash, persisted artifacts tracked in a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    attack_batch, constraint_violations, robust_accuracy, AdversarialRecord, AttackConfig, AttackFamily, FmnConfig,
    TargetRule,
};
use crate::data::format::write_atomic;
use crate::data::report::{fmt_real, header, Report};
use crate::data::{
    emit_report, gen_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset, LabeledDataset, ReportFormat,
    SyntheticConfig,
};
use crate::distill::{build_feature_matched_dataset, build_pgd_dataset, DistilledDataset, FeatureMatchConfig, PgdRule};
use crate::error::{Error, Result};
use crate::metrics::{
    annotate_js_delta, composition_report, estimate_rho, invariance_table, loss_landscape, record_target,
    sharpness_proxies, welch_greater, CompositionConfig, CompositionTable, FmnReport, FmnRow, RhoMatrix, WelchTest,
};
use crate::models::{predict, ArchitectureSpec, Ensemble, EnsembleSpace, ModelParams, Recipe};
use crate::trainer::{evaluate, train, AugmentConfig, TrainConfig, TrainingLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSection {
    /// The generator seed is replaced by the global seed.
    Synthetic(SyntheticConfig),
    External { train: PathBuf, test: PathBuf },
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub sgd: TrainConfig,
    pub sam: TrainConfig,
    pub adv: TrainConfig,
    pub robust_dataset: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            sgd: TrainConfig::for_recipe(Recipe::Sgd),
            sam: TrainConfig::for_recipe(Recipe::Sam),
            adv: TrainConfig::for_recipe(Recipe::Adv),
            robust_dataset: TrainConfig::for_recipe(Recipe::RobustDataset),
        }
    }
}

impl TrainSection {
    pub fn get(&self, recipe: Recipe) -> &TrainConfig {
        match recipe {
            Recipe::Sgd => &self.sgd,
            Recipe::Sam => &self.sam,
            Recipe::Adv => &self.adv,
            Recipe::RobustDataset => &self.robust_dataset,
        }
    }
}

/// ε grids per recipe, in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grids {
    pub sgd: Vec<f64>,
    pub sam: Vec<f64>,
    pub adv: Vec<f64>,
    pub robust_dataset: Vec<f64>,
}

fn over255(v: &[f64]) -> Vec<f64> {
    v.iter().map(|e| e / 255.0).collect()
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            sgd: over255(&[1.0, 3.0, 5.0, 8.0]),
            sam: over255(&[1.0, 3.0, 5.0, 8.0]),
            adv: over255(&[5.0, 8.0, 16.0, 32.0]),
            robust_dataset: over255(&[3.0, 5.0, 8.0]),
        }
    }
}

impl Grids {
    pub fn get(&self, recipe: Recipe) -> &[f64] {
        match recipe {
            Recipe::Sgd => &self.sgd,
            Recipe::Sam => &self.sam,
            Recipe::Adv => &self.adv,
            Recipe::RobustDataset => &self.robust_dataset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    pub steps: usize,
    pub targets_per_source: usize,
    /// Sources are attacked block by block until this many label changes.
    pub min_successes: usize,
    pub block: usize,
    /// Source splits in the order they are drawn from.
    pub pools: Vec<String>,
    pub grids: Grids,
    pub invariance_epsilon: f64,
    pub ensemble_weight: f64,
    pub chunk: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            steps: 100,
            targets_per_source: 9,
            min_successes: 500,
            block: 500,
            pools: vec!["test".into(), "train".into()],
            grids: Grids::default(),
            invariance_epsilon: 32.0 / 255.0,
            ensemble_weight: 1.0,
            chunk: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSection {
    pub rho_pairs: usize,
    pub composition: CompositionConfig,
    pub invariance_trials: usize,
    pub augment: AugmentConfig,
    pub landscape_radius: f64,
    pub landscape_grid: usize,
    /// ℓ2 radius of the sharpness probe.
    pub sharpness_radius: f64,
    pub sharpness_dirs: usize,
    /// Records per JS_Δ group in the sharpness comparison.
    pub sharpness_records: usize,
    pub low_js: f64,
    pub high_js: f64,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            rho_pairs: 256,
            composition: CompositionConfig::default(),
            invariance_trials: 8,
            augment: AugmentConfig::default(),
            landscape_radius: 2.0 / 255.0,
            landscape_grid: 21,
            sharpness_radius: 1.0,
            sharpness_dirs: 16,
            sharpness_records: 500,
            low_js: 0.1,
            high_js: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FmnSection {
    pub schedule: FmnConfig,
    /// Leading test samples attacked per model.
    pub sources: usize,
}

impl Default for FmnSection {
    fn default() -> Self {
        Self {
            schedule: FmnConfig::default(),
            sources: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSection {
    pub feature_match: FeatureMatchConfig,
    pub pgd_epsilon: f64,
    pub pgd_steps: usize,
    /// Triplets drawn in each image grid.
    pub grid_samples: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            feature_match: FeatureMatchConfig::default(),
            pgd_epsilon: 32.0 / 255.0,
            pgd_steps: 100,
            grid_samples: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: String,
    pub ensemble_size: usize,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub metric: MetricSection,
    pub fmn: FmnSection,
    pub distill: DistillSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection::default(),
            model: "mlp-s".into(),
            ensemble_size: 4,
            train: TrainSection::default(),
            attack: AttackSection::default(),
            metric: MetricSection::default(),
            fmn: FmnSection::default(),
            distill: DistillSection::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks every field a command could trip over later.
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(config_err("ensemble_size must be at least 2"));
        }
        match &self.dataset {
            DatasetSection::Synthetic(c) => c.validate().map_err(|e| config_err(e.to_string()))?,
            DatasetSection::External { train, test } => {
                for p in [train, test] {
                    if !p.is_file() {
                        return Err(config_err(format!("dataset file {} does not exist", p.display())));
                    }
                }
            }
        }
        ArchitectureSpec::by_name(&self.model, [1, 16, 16], 10).map_err(|e| config_err(e.to_string()))?;
        for r in [Recipe::Sgd, Recipe::Sam, Recipe::Adv, Recipe::RobustDataset] {
            let t = self.train.get(r);
            t.validate().map_err(|e| config_err(format!("train.{}: {e}", r.as_str())))?;
            if t.recipe != r {
                return Err(config_err(format!("train.{} has recipe {}", r.as_str(), t.recipe.as_str())));
            }
            let grid = self.attack.grids.get(r);
            if grid.is_empty() || grid.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
                return Err(config_err(format!("attack.grids.{} must hold values in (0,1]", r.as_str())));
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(config_err(format!("attack.grids.{} must be strictly increasing", r.as_str())));
            }
        }
        let a = &self.attack;
        if a.steps == 0 || a.targets_per_source == 0 || a.block == 0 || a.chunk == 0 {
            return Err(config_err("attack counts must be positive"));
        }
        if a.pools.is_empty() || a.pools.iter().any(|p| p != "test" && p != "train") {
            return Err(config_err("attack.pools must list `test` and/or `train`"));
        }
        let m = &self.metric;
        if m.rho_pairs == 0 || m.invariance_trials == 0 || m.sharpness_dirs < 8 || m.landscape_grid % 2 == 0 {
            return Err(config_err("metric counts invalid (sharpness_dirs ≥ 8, odd landscape_grid)"));
        }
        m.augment.validate().map_err(|e| config_err(e.to_string()))?;
        if m.composition.bins == 0 || m.composition.betas.windows(2).any(|w| w[0] > w[1]) {
            return Err(config_err("composition bins must be positive and betas sorted"));
        }
        if self.fmn.sources == 0 || self.distill.pgd_steps == 0 {
            return Err(config_err("fmn.sources and distill.pgd_steps must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    pub fn synthetic(&self) -> Option<SyntheticConfig> {
        match &self.dataset {
            DatasetSection::Synthetic(c) => Some(SyntheticConfig {
                seed: self.seed,
                ..c.clone()
            }),
            DatasetSection::External { .. } => None,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the experiment directory.
    pub path: PathBuf,
    pub sha256: String,
    pub command: String,
    pub inputs: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Manifest {
    /// Names of inputs that are not themselves listed.
    pub fn dangling(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .artifacts
            .values()
            .flat_map(|a| a.inputs.iter())
            .filter(|i| !self.artifacts.contains_key(*i))
            .cloned()
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.artifacts.iter().map(|(k, v)| (k.clone(), v.sha256.clone())).collect()
    }
}

/// Exclusive writer lock, released on drop.
#[derive(Debug)]
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

const RECIPES: [Recipe; 3] = [Recipe::Sgd, Recipe::Sam, Recipe::Adv];
const ALL_RECIPES: [Recipe; 4] = [Recipe::Sgd, Recipe::Sam, Recipe::Adv, Recipe::RobustDataset];

/// An open experiment directory.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub force: bool,
    manifest: Manifest,
    _lock: Lock,
}

/// Attack outputs for one ε: label-changing records plus run totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSet {
    pub recipe: Recipe,
    pub family: AttackFamily,
    pub epsilon: f64,
    pub attempted: usize,
    pub sources: usize,
    pub violations: usize,
    pub robust_acc: Option<f64>,
    pub records: Vec<StoredRecord>,
}

/// An [`AdversarialRecord`] without its pixel arrays; `x_adv` lives in a
/// companion dataset file and `x_src` in the source split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub split: String,
    pub source_index: usize,
    pub y_src: usize,
    pub y_target: Option<usize>,
    pub success: bool,
    pub label_changed: bool,
    pub prediction: usize,
    pub l2: f64,
    pub linf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub radius: f64,
    pub low_js: f64,
    pub high_js: f64,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub welch: Option<WelchTest>,
}

impl Report for SharpnessReport {
    fn csv_header(&self) -> Vec<String> {
        header(&["group", "count", "mean_sharpness"])
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        vec![
            vec!["low".into(), self.low.len().to_string(), fmt_real(mean(&self.low))],
            vec!["high".into(), self.high.len().to_string(), fmt_real(mean(&self.high))],
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub dataset: String,
    pub clean_acc: f64,
    pub robust_acc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub epsilons: Vec<f64>,
    pub rows: Vec<ReplicationRow>,
}

impl ReplicationReport {
    pub fn row(&self, name: &str) -> Option<&ReplicationRow> {
        self.rows.iter().find(|r| r.dataset == name)
    }
}

impl Report for ReplicationReport {
    fn csv_header(&self) -> Vec<String> {
        let mut h = header(&["dataset", "clean_acc"]);
        h.extend(self.epsilons.iter().map(|e| format!("robust_acc_{}", fmt_real(*e))));
        h
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut row = vec![r.dataset.clone(), fmt_real(r.clean_acc)];
                row.extend(r.robust_acc.iter().map(|a| fmt_real(*a)));
                row
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub tags: Vec<String>,
    pub ratios: Vec<f64>,
    pub samples: usize,
}

impl RatioReport {
    pub fn get(&self, tag: &str) -> Option<f64> {
        self.tags.iter().position(|t| t == tag).map(|i| self.ratios[i])
    }
}

impl Report for RatioReport {
    fn csv_header(&self) -> Vec<String> {
        header(&["tag", "ratio"])
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.tags.iter().zip(&self.ratios).map(|(t, r)| vec![t.clone(), fmt_real(*r)]).collect()
    }
}

/// Per-ε JS_Δ values of a recipe's stored records, aligned with the record sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsValues {
    pub recipe: Recipe,
    pub epsilons: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

fn eps_tag(e: f64) -> String {
    format!("{:.0}", e * 255.0 * 1000.0)
}

impl Experiment {
    /// Validates the configuration and opens `<out>/<config hash>` for writing.
    pub fn open(config: ExperimentConfig, out: &Path, force: bool) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let dir = out.join(&hash[..16]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lock = Lock::acquire(&dir)?;
        let cfg_path = dir.join("config.json");
        write_atomic(&cfg_path, &serde_json::to_vec_pretty(&config)?)?;
        let mpath = dir.join("manifest.json");
        let manifest = if mpath.exists() {
            let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
            serde_json::from_slice(&bytes)?
        } else {
            Manifest {
                config_hash: hash,
                artifacts: BTreeMap::new(),
            }
        };
        Ok(Self {
            config,
            dir,
            force,
            manifest,
            _lock: lock,
        })
    }

    fn note(&self, msg: impl std::fmt::Display) {
        eprintln!("[{}] {msg}", &self.manifest.config_hash[..8]);
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        write_atomic(&self.path("manifest.json"), &serde_json::to_vec_pretty(&self.manifest)?)
    }

    fn record(&mut self, name: &str, rel: &str, command: &str, inputs: &[&str]) -> Result<()> {
        let sha256 = file_sha256(&self.path(rel))?;
        self.manifest.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                path: PathBuf::from(rel),
                sha256,
                command: command.to_string(),
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
            },
        );
        self.save_manifest()
    }

    /// Whether `name` is listed and its file still has the recorded digest.
    pub fn is_fresh(&self, name: &str) -> bool {
        if self.force {
            return false;
        }
        self.manifest
            .artifacts
            .get(name)
            .is_some_and(|a| file_sha256(&self.dir.join(&a.path)).is_ok_and(|h| h == a.sha256))
    }

    fn require(&self, name: &str, command: &str) -> Result<PathBuf> {
        match self.manifest.artifacts.get(name) {
            Some(a) if self.dir.join(&a.path).exists() => Ok(self.dir.join(&a.path)),
            _ => Err(Error::MissingPrerequisite {
                artifact: name.to_string(),
                command: command.to_string(),
            }),
        }
    }

    /// Deserializes a recorded JSON artifact.
    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, command: &str) -> Result<T> {
        let p = self.require(name, command)?;
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, rel: &str, value: &T, command: &str, inputs: &[&str]) -> Result<()> {
        write_atomic(&self.path(rel), &serde_json::to_vec_pretty(value)?)?;
        self.record(name, rel, command, inputs)
    }

    fn emit<R: Report>(&mut self, name: &str, report: &R, command: &str, inputs: &[&str], svg: bool) -> Result<()> {
        let mut formats = vec![ReportFormat::Json, ReportFormat::Csv];
        if svg && report.svg().is_some() {
            formats.push(ReportFormat::Svg);
        }
        for f in formats {
            let rel = format!("reports/{name}.{}", f.extension());
            emit_report(report, &self.path(&rel), f)?;
            self.record(&format!("reports/{name}.{}", f.extension()), &rel, command, inputs)?;
        }
        Ok(())
    }

    fn arch(&self, data: &LabeledDataset) -> Result<ArchitectureSpec> {
        ArchitectureSpec::by_name(&self.config.model, data.shape, data.classes)
    }

    // ---- gen-data ----

    pub fn gen_data(&mut self) -> Result<()> {
        if self.is_fresh("data/train") && self.is_fresh("data/test") {
            return Ok(());
        }
        self.note("gen-data");
        let (train_set, test_set) = match self.config.synthetic() {
            Some(c) => gen_synthetic(&c)?,
            None => {
                let DatasetSection::External { train, test } = &self.config.dataset else {
                    unreachable!()
                };
                (load_dataset(train)?, load_dataset(test)?)
            }
        };
        if train_set.shape != test_set.shape || train_set.classes != test_set.classes {
            return Err(config_err("train and test splits disagree in shape or classes"));
        }
        save_dataset(&train_set, &self.path("data/train.advd"))?;
        save_dataset(&test_set, &self.path("data/test.advd"))?;
        self.record("data/train", "data/train.advd", "gen-data", &[])?;
        self.record("data/test", "data/test.advd", "gen-data", &[])
    }

    pub fn split(&self, name: &str) -> Result<LabeledDataset> {
        load_dataset(&self.require(&format!("data/{name}"), "gen-data")?)
    }

    // ---- train ----

    fn model_name(recipe: Recipe, member: usize) -> String {
        if member == 0 {
            format!("models/{}/f0", recipe.as_str())
        } else {
            format!("models/{}/member-{member}", recipe.as_str())
        }
    }

    fn training_set(&self, recipe: Recipe) -> Result<LabeledDataset> {
        if recipe == Recipe::RobustDataset {
            Ok(DistilledDataset::load(&self.require("distill/R", "distill")?)?.data)
        } else {
            self.split("train")
        }
    }

    /// Trains `f0` and the ensemble for `recipe`. Skips when every
    /// checkpoint is already recorded.
    pub fn train(&mut self, recipe: Recipe) -> Result<()> {
        let n = self.config.ensemble_size;
        let names: Vec<String> = (0..=n).map(|i| Self::model_name(recipe, i)).collect();
        if names.iter().all(|m| self.is_fresh(m)) {
            return Ok(());
        }
        let train_set = self.training_set(recipe)?;
        let test_set = self.split("test")?;
        let arch = self.arch(&train_set)?;
        let cfg = self.config.train.get(recipe).clone();
        let input = if recipe == Recipe::RobustDataset { "distill/R" } else { "data/train" };
        let mut log = TrainingLog::default();
        for (i, name) in names.iter().enumerate() {
            let seed = self.config.seed + i as u64;
            self.note(format_args!("train {name}"));
            let c = TrainConfig { seed, ..cfg.clone() };
            let t = train(&arch, &train_set, &c, Some(&test_set)).map_err(|e| {
                if i == 0 {
                    e
                } else {
                    Error::MemberFailed {
                        seed,
                        source: Box::new(e),
                    }
                }
            })?;
            log.epochs.extend(t.log);
            let rel = format!("{name}.advm");
            save_checkpoint(&t.params, &self.path(&rel))?;
            self.record(name, &rel, "train", &[input])?;
        }
        let rel = format!("models/{}/log.csv", recipe.as_str());
        emit_report(&log, &self.path(&rel), ReportFormat::Csv)?;
        self.record(&format!("models/{}/log", recipe.as_str()), &rel, "train", &[input])
    }

    pub fn model(&self, recipe: Recipe, member: usize) -> Result<ModelParams> {
        load_checkpoint(&self.require(&Self::model_name(recipe, member), "train")?)
    }

    pub fn ensemble(&self, recipe: Recipe) -> Result<Ensemble> {
        let members = (1..=self.config.ensemble_size)
            .map(|i| self.model(recipe, i))
            .collect::<Result<Vec<_>>>()?;
        let e = Ensemble::new(members, EnsembleSpace::Prob)?;
        e.check_independent()?;
        Ok(e)
    }

    // ---- attack ----

    fn attack_cfg(&self, family: AttackFamily, epsilon: f64) -> AttackConfig {
        let a = &self.config.attack;
        AttackConfig {
            steps: a.steps,
            ensemble_weight: a.ensemble_weight,
            seed: self.config.seed,
            chunk: a.chunk,
            fmn: self.config.fmn.schedule.clone(),
            ..AttackConfig::pgd(family, epsilon)
        }
    }

    fn save_records(
        &mut self,
        name: &str,
        set: RecordSet,
        adv: Vec<f64>,
        shape: [usize; 3],
        classes: usize,
        inputs: &[&str],
    ) -> Result<()> {
        let labels: Vec<usize> = set.records.iter().map(|r| r.prediction).collect();
        let ds = LabeledDataset::new(shape, classes, adv, labels, "adversarial", name)?;
        let rel_x = format!("{name}.advd");
        save_dataset(&ds, &self.path(&rel_x))?;
        self.record(&format!("{name}/x_adv"), &rel_x, "attack", inputs)?;
        let rel = format!("{name}.json");
        let x_name = format!("{name}/x_adv");
        let mut all: Vec<&str> = inputs.to_vec();
        all.push(&x_name);
        self.write_json(name, &rel, &set, "attack", &all)
    }

    /// Stored records rebuilt into full [`AdversarialRecord`]s.
    pub fn load_records(&self, name: &str) -> Result<(RecordSet, Vec<AdversarialRecord>)> {
        let set: RecordSet = self.read_json(name, "attack")?;
        let adv = load_dataset(&self.require(&format!("{name}/x_adv"), "attack")?)?;
        let train_set = self.split("train")?;
        let test_set = self.split("test")?;
        let recs = set
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let src = if r.split == "train" { &train_set } else { &test_set };
                AdversarialRecord {
                    source_index: r.source_index,
                    x_src: src.sample(r.source_index).to_vec(),
                    y_src: r.y_src,
                    x_adv: adv.sample(i).to_vec(),
                    y_target: r.y_target,
                    success: r.success,
                    label_changed: r.label_changed,
                    prediction: r.prediction,
                    l2: r.l2,
                    linf: r.linf,
                    family: set.family,
                    epsilon: set.epsilon,
                    js_delta: None,
                }
            })
            .collect();
        Ok((set, recs))
    }

    pub fn composition_name(recipe: Recipe, epsilon: f64) -> String {
        format!("attacks/{}/eps-{}", recipe.as_str(), eps_tag(epsilon))
    }

    /// Targeted PGD over the recipe's ε grid plus untargeted robust accuracy.
    /// For the SGD model also the vanilla and ensemble-adjusted invariance sets.
    pub fn attack(&mut self, recipe: Recipe) -> Result<()> {
        let grid = self.config.attack.grids.get(recipe).to_vec();
        let f0_name = Self::model_name(recipe, 0);
        let f0 = self.model(recipe, 0)?;
        let test_set = self.split("test")?;
        let train_set = self.split("train")?;
        let pools: Vec<(String, LabeledDataset)> = self
            .config
            .attack
            .pools
            .iter()
            .map(|p| (p.clone(), if p == "train" { train_set.clone() } else { test_set.clone() }))
            .collect();
        for &eps in &grid {
            let name = Self::composition_name(recipe, eps);
            if self.is_fresh(&name) {
                continue;
            }
            self.note(format_args!("attack {} at {:.0}/255", recipe.as_str(), eps * 255.0));
            let mut ucfg = self.attack_cfg(AttackFamily::PgdUntargeted, eps);
            ucfg.target_rule = TargetRule::RandomNonsource;
            let all: Vec<usize> = (0..test_set.len()).collect();
            let untargeted = attack_batch(&f0, None, &test_set, &all, &ucfg)?;
            let mut violations = constraint_violations(&untargeted);
            let robust_acc = robust_accuracy(&untargeted);
            let mut cfg = self.attack_cfg(AttackFamily::PgdTargeted, eps);
            cfg.targets_per_source = self.config.attack.targets_per_source;
            let (mut attempted, mut sources) = (untargeted.len(), 0usize);
            let mut stored = Vec::new();
            let mut adv = Vec::new();
            'pools: for (split, data) in &pools {
                let preds = predict(&f0, &data.all()?)?;
                let ok: Vec<usize> = (0..data.len()).filter(|&i| preds[i] == data.labels[i]).collect();
                for block in ok.chunks(self.config.attack.block) {
                    let recs = attack_batch(&f0, None, data, block, &cfg)?;
                    attempted += recs.len();
                    sources += block.len();
                    violations += constraint_violations(&recs);
                    for r in recs.into_iter().filter(|r| r.label_changed) {
                        adv.extend_from_slice(&r.x_adv);
                        stored.push(StoredRecord {
                            split: split.clone(),
                            source_index: r.source_index,
                            y_src: r.y_src,
                            y_target: r.y_target,
                            success: r.success,
                            label_changed: r.label_changed,
                            prediction: r.prediction,
                            l2: r.l2,
                            linf: r.linf,
                        });
                    }
                    if stored.len() >= self.config.attack.min_successes {
                        break 'pools;
                    }
                }
            }
            let set = RecordSet {
                recipe,
                family: AttackFamily::PgdTargeted,
                epsilon: eps,
                attempted,
                sources,
                violations,
                robust_acc: Some(robust_acc),
                records: stored,
            };
            self.save_records(&name, set, adv, test_set.shape, test_set.classes, &[&f0_name, "data/test", "data/train"])?;
        }
        if recipe == Recipe::Sgd {
            self.invariance_attacks(&f0, &test_set)?;
        }
        Ok(())
    }

    fn invariance_attacks(&mut self, f0: &ModelParams, test_set: &LabeledDataset) -> Result<()> {
        let preds = predict(f0, &test_set.all()?)?;
        let ok: Vec<usize> = (0..test_set.len()).filter(|&i| preds[i] == test_set.labels[i]).collect();
        let eps = self.config.attack.invariance_epsilon;
        for (name, family) in [
            ("attacks/invariance/vanilla", AttackFamily::PgdTargeted),
            ("attacks/invariance/perp", AttackFamily::PgdEnsembleAdjusted),
        ] {
            if self.is_fresh(name) {
                continue;
            }
            self.note(format_args!("attack {name}"));
            let ens = self.ensemble(Recipe::Sgd)?;
            let cfg = self.attack_cfg(family, eps);
            let recs = attack_batch(f0, Some(&ens), test_set, &ok, &cfg)?;
            let violations = constraint_violations(&recs);
            let attempted = recs.len();
            let kept: Vec<AdversarialRecord> = recs.into_iter().filter(|r| r.success).collect();
            let adv: Vec<f64> = kept.iter().flat_map(|r| r.x_adv.iter().copied()).collect();
            let set = RecordSet {
                recipe: Recipe::Sgd,
                family,
                epsilon: eps,
                attempted,
                sources: ok.len(),
                violations,
                robust_acc: None,
                records: kept
                    .iter()
                    .map(|r| StoredRecord {
                        split: "test".into(),
                        source_index: r.source_index,
                        y_src: r.y_src,
                        y_target: r.y_target,
                        success: r.success,
                        label_changed: r.label_changed,
                        prediction: r.prediction,
                        l2: r.l2,
                        linf: r.linf,
                    })
                    .collect(),
            };
            self.save_records(name, set, adv, test_set.shape, test_set.classes, &["models/sgd/f0", "data/test"])?;
        }
        Ok(())
    }

    // ---- analyze ----

    /// ρ for a recipe's ensemble, cached under the ensemble hash.
    pub fn rho(&mut self, recipe: Recipe) -> Result<RhoMatrix> {
        let ens = self.ensemble(recipe)?;
        let name = format!("rho/{}", recipe.as_str());
        if self.is_fresh(&name) {
            let cached: RhoMatrix = self.read_json(&name, "analyze")?;
            if cached.ensemble_hash == ens.hash() {
                return Ok(cached);
            }
        }
        let test_set = self.split("test")?;
        let rho = estimate_rho(&ens, &test_set, self.config.metric.rho_pairs, self.config.seed)?;
        let rel = format!("rho/{}-{}.json", recipe.as_str(), &rho.ensemble_hash[..16]);
        let inputs: Vec<String> = (1..=self.config.ensemble_size).map(|i| Self::model_name(recipe, i)).collect();
        let mut refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        refs.push("data/test");
        self.write_json(&name, &rel, &rho, "analyze", &refs)?;
        Ok(rho)
    }

    /// JS_Δ for every stored record of a recipe, composition tables and, for
    /// the SGD model, the invariance table and the sharpness comparison.
    pub fn analyze(&mut self, recipe: Recipe) -> Result<()> {
        let grid = self.config.attack.grids.get(recipe).to_vec();
        for &eps in &grid {
            self.require(&Self::composition_name(recipe, eps), "attack")?;
        }
        self.note(format_args!("analyze {}", recipe.as_str()));
        let rho = self.rho(recipe)?;
        let ens = self.ensemble(recipe)?;
        let mut table = CompositionTable::default();
        let mut js = JsValues {
            recipe,
            epsilons: grid.clone(),
            values: Vec::new(),
        };
        let mut pooled: Vec<(AdversarialRecord, f64)> = Vec::new();
        let mut inputs = vec![format!("rho/{}", recipe.as_str())];
        for &eps in &grid {
            let name = Self::composition_name(recipe, eps);
            let (set, mut recs) = self.load_records(&name)?;
            annotate_js_delta(&ens, &rho, &mut recs)?;
            let values: Vec<f64> = recs.iter().map(|r| r.js_delta.unwrap_or(f64::NAN)).collect();
            let report = composition_report(
                &values,
                set.robust_acc.unwrap_or(f64::NAN),
                eps,
                recipe.as_str(),
                &self.config.metric.composition,
            )?;
            let hist = format!("hist-{}-{}", recipe.as_str(), eps_tag(eps));
            self.emit(&hist, &report, "analyze", &[&name], true)?;
            table.reports.push(report);
            pooled.extend(recs.into_iter().zip(values.iter().copied()));
            js.values.push(values);
            inputs.push(name);
        }
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        self.emit(&format!("composition-{}", recipe.as_str()), &table, "analyze", &refs, false)?;
        self.write_json(
            &format!("analysis/{}", recipe.as_str()),
            &format!("analysis/{}-js.json", recipe.as_str()),
            &js,
            "analyze",
            &refs,
        )?;
        if recipe == Recipe::Sgd {
            self.sharpness(&pooled)?;
            self.invariance()?;
        }
        Ok(())
    }

    fn sharpness(&mut self, pooled: &[(AdversarialRecord, f64)]) -> Result<()> {
        let m = self.config.metric.clone();
        let f0 = self.model(Recipe::Sgd, 0)?;
        let group = |pred: &dyn Fn(f64) -> bool| -> Result<Vec<f64>> {
            let chosen: Vec<&AdversarialRecord> =
                pooled.iter().filter(|(_, v)| pred(*v)).map(|(r, _)| r).take(m.sharpness_records).collect();
            let x: Vec<f64> = chosen.iter().flat_map(|r| r.x_adv.iter().copied()).collect();
            let y: Vec<usize> = chosen.iter().map(|r| record_target(r)).collect();
            if y.is_empty() {
                return Ok(Vec::new());
            }
            sharpness_proxies(&f0, &x, &y, m.sharpness_radius, m.sharpness_dirs, self.config.seed)
        };
        let low = group(&|v| v < m.low_js)?;
        let high = group(&|v| v > m.high_js)?;
        let welch = welch_greater(&low, &high).ok();
        let report = SharpnessReport {
            radius: m.sharpness_radius,
            low_js: m.low_js,
            high_js: m.high_js,
            low,
            high,
            welch,
        };
        self.emit("sharpness", &report, "analyze", &["analysis/sgd"], false)
    }

    fn invariance(&mut self) -> Result<()> {
        let f0 = self.model(Recipe::Sgd, 0)?;
        let (_, vanilla) = self.load_records("attacks/invariance/vanilla")?;
        let (_, perp) = self.load_records("attacks/invariance/perp")?;
        let m = &self.config.metric;
        let table = invariance_table(&f0, &vanilla, &perp, &m.augment, m.invariance_trials, self.config.seed)?;
        self.emit(
            "invariance",
            &table,
            "analyze",
            &["attacks/invariance/vanilla", "attacks/invariance/perp"],
            true,
        )
    }

    // ---- fmn ----

    /// Ensemble-guided minimum-norm attack for the SGD, SAM and adversarial models.
    pub fn fmn(&mut self) -> Result<()> {
        if self.is_fresh("reports/fmn.json") {
            return Ok(());
        }
        let test_set = self.split("test")?;
        let idx: Vec<usize> = (0..self.config.fmn.sources.min(test_set.len())).collect();
        let mut report = FmnReport::default();
        let mut inputs = Vec::new();
        for recipe in RECIPES {
            self.note(format_args!("fmn {}", recipe.as_str()));
            let f0 = self.model(recipe, 0)?;
            let ens = self.ensemble(recipe)?;
            let cfg = self.attack_cfg(AttackFamily::FmnEnsemble, 0.0);
            let recs = attack_batch(&f0, Some(&ens), &test_set, &idx, &cfg)?;
            report.rows.push(FmnRow::from_records(recipe.as_str(), &recs)?);
            inputs.push(Self::model_name(recipe, 0));
        }
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        self.emit("fmn", &report, "fmn", &refs, true)
    }

    // ---- distill ----

    fn distill_one(
        &mut self,
        tag: &str,
        inputs: &[&str],
        build: impl FnOnce(&Self) -> Result<DistilledDataset>,
    ) -> Result<()> {
        let name = format!("distill/{tag}");
        if self.is_fresh(&name) {
            return Ok(());
        }
        self.note(format_args!("distill {tag}"));
        let ds = build(self)?;
        let rel = format!("distill/{}.advd", tag.replace('\'', "p"));
        ds.save(&self.path(&rel))?;
        self.record(&name, &rel, "distill", inputs)?;
        let prov = format!("{rel}.provenance.json");
        self.record(&format!("{name}/provenance"), &prov, "distill", &[&name])?;
        let train_set = self.split("train")?;
        let grid = format!("distill/{}-grid.svg", tag.replace('\'', "p"));
        write_atomic(&self.path(&grid), ds.image_grid(&train_set, self.config.distill.grid_samples).as_bytes())?;
        self.record(&format!("{name}/grid"), &grid, "distill", &[&name])
    }

    pub fn distilled(&self, tag: &str) -> Result<DistilledDataset> {
        DistilledDataset::load(&self.require(&format!("distill/{tag}"), "distill")?)
    }

    /// Builds D_NR, D_R, D_rand, D_det and their ⊥ variants, trains the
    /// robust-dataset models on D_R and builds D_R′ from them.
    pub fn distill(&mut self) -> Result<()> {
        let fm = self.config.distill.feature_match.clone();
        let pairing = self.config.seed;
        let train_set = self.split("train")?;
        for (tag, recipe) in [("NR", Recipe::Sgd), ("R", Recipe::Adv)] {
            let model_name = Self::model_name(recipe, 0);
            let m = self.model(recipe, 0)?;
            self.distill_one(tag, &[&model_name, "data/train"], |_| {
                build_feature_matched_dataset(&m, &train_set, pairing, &fm)
            })?;
        }
        let f0 = self.model(Recipe::Sgd, 0)?;
        let ens = self.ensemble(Recipe::Sgd)?;
        let pgd = AttackConfig {
            steps: self.config.distill.pgd_steps,
            ..self.attack_cfg(AttackFamily::PgdTargeted, self.config.distill.pgd_epsilon)
        };
        for (tag, rule, with_ens) in [
            ("rand", PgdRule::Rand, false),
            ("det", PgdRule::Det, false),
            ("rand_perp", PgdRule::Rand, true),
            ("det_perp", PgdRule::Det, true),
        ] {
            let e = with_ens.then_some(&ens);
            self.distill_one(tag, &["models/sgd/f0", "data/train"], |_| {
                build_pgd_dataset(&f0, &train_set, rule, &pgd, e)
            })?;
        }
        self.train(Recipe::RobustDataset)?;
        let mr = self.model(Recipe::RobustDataset, 0)?;
        self.distill_one("R'", &["models/robust-dataset/f0", "data/train"], |_| {
            build_feature_matched_dataset(&mr, &train_set, pairing, &fm)
        })?;
        let mut report = RatioReport {
            tags: Vec::new(),
            ratios: Vec::new(),
            samples: train_set.len(),
        };
        for tag in ["NR", "R", "R'"] {
            report.tags.push(tag.to_string());
            report.ratios.push(self.distilled(tag)?.target_proximity_ratio(&train_set)?);
        }
        self.emit("distill-ratio", &report, "distill", &["distill/NR", "distill/R", "distill/R'"], false)
    }

    // ---- replicate ----

    fn robust_acc(&self, model: &ModelParams, data: &LabeledDataset, eps: f64) -> Result<f64> {
        let cfg = self.attack_cfg(AttackFamily::PgdUntargeted, eps);
        let idx: Vec<usize> = (0..data.len()).collect();
        Ok(robust_accuracy(&attack_batch(model, None, data, &idx, &cfg)?))
    }

    /// Retrains fresh models on every distilled set and reports clean and
    /// robust test accuracy next to the reference models.
    pub fn replicate(&mut self) -> Result<()> {
        self.distill()?;
        if self.is_fresh("reports/replicate.json") {
            return Ok(());
        }
        let test_set = self.split("test")?;
        let epsilons = self.config.attack.grids.robust_dataset.clone();
        let mut rows = Vec::new();
        let mut inputs = Vec::new();
        for recipe in [Recipe::Sgd, Recipe::Adv] {
            let m = self.model(recipe, 0)?;
            rows.push(self.replication_row(recipe.as_str(), &m, &test_set, &epsilons)?);
            inputs.push(Self::model_name(recipe, 0));
        }
        let tags = ["NR", "R", "R'", "rand", "det", "rand_perp", "det_perp"];
        for (i, tag) in tags.iter().enumerate() {
            self.note(format_args!("replicate {tag}"));
            let ds = self.distilled(tag)?;
            let arch = self.arch(&ds.data)?;
            let cfg = TrainConfig {
                seed: self.config.seed + 100 + i as u64,
                ..self.config.train.sgd.clone()
            };
            let m = train(&arch, &ds.data, &cfg, None)?.params;
            rows.push(self.replication_row(tag, &m, &test_set, &epsilons)?);
            inputs.push(format!("distill/{tag}"));
        }
        let report = ReplicationReport { epsilons, rows };
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        self.emit("replicate", &report, "replicate", &refs, false)
    }

    fn replication_row(&self, name: &str, m: &ModelParams, test_set: &LabeledDataset, eps: &[f64]) -> Result<ReplicationRow> {
        Ok(ReplicationRow {
            dataset: name.to_string(),
            clean_acc: evaluate(m, test_set)?,
            robust_acc: eps.iter().map(|&e| self.robust_acc(m, test_set, e)).collect::<Result<_>>()?,
        })
    }

    // ---- landscape ----

    /// Loss grids around a clean sample and the lowest, median and highest
    /// JS_Δ records of the SGD model's smallest ε.
    pub fn landscape(&mut self) -> Result<()> {
        self.note("landscape");
        let js: JsValues = self.read_json("analysis/sgd", "analyze")?;
        let eps = js.epsilons[0];
        let (_, recs) = self.load_records(&Self::composition_name(Recipe::Sgd, eps))?;
        let values = &js.values[0];
        if recs.is_empty() {
            return Err(Error::EmptyReport);
        }
        let mut order: Vec<usize> = (0..recs.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let picks = [
            ("low", order[0]),
            ("median", order[order.len() / 2]),
            ("high", order[order.len() - 1]),
        ];
        let f0 = self.model(Recipe::Sgd, 0)?;
        let m = self.config.metric.clone();
        let first = &recs[picks[0].1];
        let mut clean = loss_landscape(&f0, &first.x_src, first.y_src, m.landscape_radius, m.landscape_grid, self.config.seed)?;
        clean.label = Some(format!("clean sample, label {}", first.y_src));
        self.emit("landscape-clean", &clean, "landscape", &["analysis/sgd"], true)?;
        for (label, i) in picks {
            let r = &recs[i];
            let mut g = loss_landscape(&f0, &r.x_adv, record_target(r), m.landscape_radius, m.landscape_grid, self.config.seed)?;
            g.label = Some(format!("{label} JS_Δ = {:.3}", values[i]));
            self.emit(&format!("landscape-{label}"), &g, "landscape", &["analysis/sgd"], true)?;
        }
        Ok(())
    }

    // ---- report ----

    /// Collects every report into `reports/summary.json`.
    pub fn report(&mut self) -> Result<Summary> {
        let mut s = Summary::default();
        for r in ALL_RECIPES {
            let name = format!("reports/composition-{}.json", r.as_str());
            if self.manifest.artifacts.contains_key(&name) {
                s.composition.push(self.read_json(&name, "analyze")?);
            }
        }
        let opt = |e: &Self, name: &str| -> Result<Option<serde_json::Value>> {
            if e.manifest.artifacts.contains_key(name) {
                Ok(Some(e.read_json(name, "analyze")?))
            } else {
                Ok(None)
            }
        };
        s.invariance = opt(self, "reports/invariance.json")?;
        s.sharpness = opt(self, "reports/sharpness.json")?;
        s.fmn = opt(self, "reports/fmn.json")?;
        s.replicate = opt(self, "reports/replicate.json")?;
        s.distill_ratio = opt(self, "reports/distill-ratio.json")?;
        s.dangling = self.manifest.dangling();
        let inputs: Vec<String> = self.manifest.artifacts.keys().filter(|k| k.starts_with("reports/") && *k != "reports/summary").cloned().collect();
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        self.write_json("reports/summary", "reports/summary.json", &s, "report", &refs)?;
        Ok(s)
    }

    /// Every stage in dependency order.
    pub fn run_all(&mut self) -> Result<()> {
        self.gen_data()?;
        for r in RECIPES {
            self.train(r)?;
        }
        self.distill()?;
        for r in ALL_RECIPES {
            self.attack(r)?;
            self.analyze(r)?;
        }
        self.fmn()?;
        self.landscape()?;
        self.replicate()?;
        self.report()?;
        Ok(())
    }
}

/// Directory that [`Experiment::open`] uses for `config`.
pub fn experiment_dir(config: &ExperimentConfig, out: &Path) -> PathBuf {
    out.join(&config.hash()[..16])
}

/// Validates `config` and, when its experiment directory already has a
/// manifest, checks every artifact digest and dependency. Takes no lock.
pub fn validate(config: &ExperimentConfig, out: &Path) -> Result<usize> {
    config.validate()?;
    let mpath = experiment_dir(config, out).join("manifest.json");
    if !mpath.exists() {
        return Ok(0);
    }
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    let dangling = manifest.dangling();
    if !dangling.is_empty() {
        return Err(config_err(format!("manifest has dangling inputs: {}", dangling.join(", "))));
    }
    let dir = mpath.parent().expect("manifest has a parent");
    for (name, a) in &manifest.artifacts {
        let p = dir.join(&a.path);
        if !p.exists() {
            return Err(Error::MissingPrerequisite {
                artifact: name.clone(),
                command: a.command.clone(),
            });
        }
        let h = file_sha256(&p)?;
        if h != a.sha256 {
            return Err(Error::CorruptFile {
                path: p,
                detail: "digest differs from manifest".into(),
            });
        }
    }
    Ok(manifest.artifacts.len())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub composition: Vec<CompositionTable>,
    pub invariance: Option<serde_json::Value>,
    pub sharpness: Option<serde_json::Value>,
    pub fmn: Option<serde_json::Value>,
    pub replicate: Option<serde_json::Value>,
    pub distill_ratio: Option<serde_json::Value>,
    pub dangling: Vec<String>,
}

/// Small configuration that exercises every stage in seconds.
pub fn smoke_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset = DatasetSection::Synthetic(SyntheticConfig {
        samples_per_class: 12,
        test_per_class: 6,
        ..SyntheticConfig::default()
    });
    c.ensemble_size = 2;
    for t in [&mut c.train.sgd, &mut c.train.sam, &mut c.train.adv, &mut c.train.robust_dataset] {
        t.epochs = 6;
        t.adv_steps = 2;
        t.lr_decay = vec![(4, 0.1)];
    }
    c.attack.steps = 5;
    c.attack.targets_per_source = 2;
    c.attack.min_successes = 20;
    c.attack.block = 20;
    c.attack.grids.sgd = over255(&[8.0, 32.0]);
    c.attack.grids.sam = over255(&[8.0, 32.0]);
    c.attack.grids.adv = over255(&[16.0, 32.0]);
    c.attack.grids.robust_dataset = over255(&[8.0, 32.0]);
    c.metric.rho_pairs = 8;
    c.metric.invariance_trials = 2;
    c.metric.landscape_grid = 5;
    c.metric.sharpness_dirs = 8;
    c.metric.sharpness_records = 20;
    c.fmn.sources = 10;
    c.fmn.schedule.steps = 40;
    c.fmn.schedule.schedule_len = 40;
    c.fmn.schedule.alpha_max = 0.5;
    c.fmn.schedule.alpha_min = 0.01;
    c.distill.feature_match.steps = 5;
    c.distill.pgd_steps = 5;
    c.distill.grid_samples = 2;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.clone().with_seed(1).hash(), c.hash());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "attack": {"steps": 7}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.attack.steps, 7);
        assert_eq!(c.attack.targets_per_source, 9);
    }

    #[test]
    fn non_increasing_grid_is_rejected() {
        let mut c = ExperimentConfig::default();
        c.attack.grids.sgd = vec![3.0 / 255.0, 1.0 / 255.0];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::default();
        c.dataset = DatasetSection::External {
            train: "/nonexistent/train.advd".into(),
            test: "/nonexistent/test.advd".into(),
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn lock_blocks_a_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let a = Experiment::open(smoke_config(), dir.path(), false).unwrap();
        let b = Experiment::open(smoke_config(), dir.path(), false);
        assert!(matches!(b, Err(Error::Locked(_))));
        drop(a);
        Experiment::open(smoke_config(), dir.path(), false).unwrap();
    }

    #[test]
    fn analyze_before_attack_names_the_attack_command() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Experiment::open(smoke_config(), dir.path(), false).unwrap();
        match e.analyze(Recipe::Sgd) {
            Err(Error::MissingPrerequisite { command, .. }) => assert_eq!(command, "attack"),
            other => panic!("unexpected {other:?}"),
        }
        match e.train(Recipe::Sgd) {
            Err(Error::MissingPrerequisite { command, .. }) => assert_eq!(command, "gen-data"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eps_tags_are_distinct() {
        let g = Grids::default();
        let mut tags: Vec<String> = g.sgd.iter().chain(&g.adv).map(|e| eps_tag(*e)).collect();
        tags.sort();
        tags.dedup();
        assert_eq!(tags.len(), 6);
    }

    #[test]
    fn smoke_pipeline_runs_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Experiment::open(smoke_config(), dir.path(), false).unwrap();
        e.run_all().unwrap();
        let first = e.manifest().hashes();
        assert!(e.manifest().dangling().is_empty(), "{:?}", e.manifest().dangling());
        drop(e);
        let mut e = Experiment::open(smoke_config(), dir.path(), false).unwrap();
        e.run_all().unwrap();
        assert_eq!(e.manifest().hashes(), first);
        drop(e);
        assert_eq!(validate(&smoke_config(), dir.path()).unwrap(), first.len());
    }
}
