//! Dataset construction: representation-matched robust and non-robust sets
//! and PGD-built relabelled sets.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, batch_tensor, input_gradient, norms, AttackConfig, AttackFamily, TargetRule};
use crate::autograd::Tensor;
use crate::data::format::write_atomic;
use crate::data::report::svg_image_grid;
use crate::data::{load_dataset, save_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{forward_graph, penultimate, Ensemble, ModelParams, Recipe};
use crate::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorTag {
    #[serde(rename = "NR")]
    NonRobust,
    #[serde(rename = "R")]
    Robust,
    #[serde(rename = "R'")]
    SecondOrder,
    #[serde(rename = "rand")]
    Rand,
    #[serde(rename = "det")]
    Det,
    #[serde(rename = "rand_perp")]
    RandPerp,
    #[serde(rename = "det_perp")]
    DetPerp,
}

impl GeneratorTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NonRobust => "NR",
            Self::Robust => "R",
            Self::SecondOrder => "R'",
            Self::Rand => "rand",
            Self::Det => "det",
            Self::RandPerp => "rand_perp",
            Self::DetPerp => "det_perp",
        }
    }

    /// Feature-matched tag implied by the generating model's recipe.
    pub fn for_recipe(recipe: Recipe) -> Result<Self> {
        match recipe {
            Recipe::Sgd => Ok(Self::NonRobust),
            Recipe::Adv => Ok(Self::Robust),
            Recipe::RobustDataset => Ok(Self::SecondOrder),
            Recipe::Sam => Err(Error::Config("no feature-matched dataset is defined for sam models".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_index: usize,
    /// Paired train sample for feature matching; `None` for PGD sets.
    pub target_index: Option<usize>,
    pub target_label: usize,
    /// Final representation gap, or `None` for PGD sets.
    pub final_loss: Option<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledDataset {
    pub data: LabeledDataset,
    pub provenance: Vec<Provenance>,
    pub tag: GeneratorTag,
    pub model_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceFile {
    tag: GeneratorTag,
    model_hash: String,
    samples: Vec<Provenance>,
}

pub fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

impl DistilledDataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_dataset(&self.data, path)?;
        let side = ProvenanceFile {
            tag: self.tag,
            model_hash: self.model_hash.clone(),
            samples: self.provenance.clone(),
        };
        write_atomic(&provenance_path(path), &serde_json::to_vec(&side)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = load_dataset(path)?;
        let p = provenance_path(path);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let side: ProvenanceFile = serde_json::from_slice(&bytes)?;
        if side.samples.len() != data.len() {
            return Err(Error::CorruptFile {
                path: p,
                detail: "provenance does not cover every sample".into(),
            });
        }
        Ok(Self {
            data,
            provenance: side.samples,
            tag: side.tag,
            model_hash: side.model_hash,
        })
    }

    /// Mean of `‖x′ − x_target‖₂ / ‖x′ − x_src‖₂` over the set.
    pub fn target_proximity_ratio(&self, train: &LabeledDataset) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for (i, p) in self.provenance.iter().enumerate() {
            let t = p
                .target_index
                .ok_or_else(|| Error::Spec("target proximity needs paired targets".into()))?;
            let x = self.data.sample(i);
            let (to_target, _) = norms(x, train.sample(t));
            let (to_src, _) = norms(x, train.sample(p.source_index));
            if to_src > 0.0 {
                total += to_target / to_src;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyReport);
        }
        Ok(total / n as f64)
    }

    /// Source, target (when paired) and distilled image for the first `count`
    /// samples; first channel only.
    pub fn image_grid(&self, train: &LabeledDataset, count: usize) -> String {
        let [_, h, w] = self.data.shape;
        let plane = h * w;
        let mut imgs: Vec<&[f64]> = Vec::new();
        let mut cols = 2;
        for (i, p) in self.provenance.iter().enumerate().take(count) {
            imgs.push(&train.sample(p.source_index)[..plane]);
            if let Some(t) = p.target_index {
                imgs.push(&train.sample(t)[..plane]);
                cols = 3;
            }
            imgs.push(&self.data.sample(i)[..plane]);
        }
        svg_image_grid(&imgs, h, w, cols)
    }
}

/// Uniform permutation of `0..n` without fixed points, by rejection.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InsufficientData {
            class: 0,
            count: n,
            needed: 2,
        });
    }
    let mut rng = stream(seed, 0);
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(&mut rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(p);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureMatchConfig {
    pub steps: usize,
    pub lr: f64,
    pub chunk: usize,
}

impl Default for FeatureMatchConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.1,
            chunk: 256,
        }
    }
}

/// Result of matching one row.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    pub x: Vec<f64>,
    pub loss: f64,
    /// Accepted descent steps.
    pub iterations: usize,
    /// Loss after every step, starting with the initial loss.
    pub trace: Vec<f64>,
}

/// Per-row losses `‖g(x_i) − t_i‖²` and the gradient of their sum.
fn gap_and_grad(model: &ModelParams, x: &[f64], target: &Tensor, rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut per_row = Vec::new();
    let (_, g) = input_gradient(model.arch.input, x, rows, |tape, vx| {
        let f = forward_graph(tape, model, vx, false)?;
        let t = tape.constant(target.clone())?;
        let diff = tape.sub(f.penultimate, t)?;
        let w = tape.value(diff).row_len();
        per_row = tape.value(diff).data().chunks(w).map(|r| r.iter().map(|v| v * v).sum()).collect();
        let sq = tape.mul(diff, diff)?;
        tape.sum(sq)
    })?;
    Ok((per_row, g))
}

/// Gradient descent on `‖g(x_target) − g(x′)‖²` from `x_init`, clamped to
/// `[0,1]` after each step. Each row halves its own step size whenever a
/// step would raise its loss, so the recorded loss never increases.
pub fn feature_match_rows(
    model: &ModelParams,
    x_init: &[f64],
    x_target: &[f64],
    steps: usize,
    lr: f64,
) -> Result<Vec<MatchOutcome>> {
    let d = model.arch.input_len();
    if x_init.len() != x_target.len() || x_init.len() % d != 0 {
        return Err(Error::Shape("feature matching needs equal batches of model inputs".into()));
    }
    let rows = x_init.len() / d;
    let goal = penultimate(model, &batch_tensor(model.arch.input, x_target, rows)?)?;
    let mut x = x_init.to_vec();
    let (mut loss, mut grad) = gap_and_grad(model, &x, &goal, rows)?;
    check_finite(&loss, 0)?;
    let mut rate = vec![lr; rows];
    let mut accepted = vec![0usize; rows];
    let mut traces: Vec<Vec<f64>> = loss.iter().map(|&l| vec![l]).collect();
    for step in 1..=steps {
        let active: Vec<bool> = loss.iter().map(|&l| l > 0.0).collect();
        if !active.iter().any(|&a| a) {
            break;
        }
        let mut cand = x.clone();
        for r in 0..rows {
            if active[r] {
                for p in r * d..(r + 1) * d {
                    cand[p] = (x[p] - rate[r] * grad[p]).clamp(0.0, 1.0);
                }
            }
        }
        let (cl, cg) = gap_and_grad(model, &cand, &goal, rows)?;
        for r in 0..rows {
            if !active[r] {
                traces[r].push(loss[r]);
                continue;
            }
            if cl[r].is_finite() && cl[r] <= loss[r] {
                x[r * d..(r + 1) * d].copy_from_slice(&cand[r * d..(r + 1) * d]);
                grad[r * d..(r + 1) * d].copy_from_slice(&cg[r * d..(r + 1) * d]);
                loss[r] = cl[r];
                accepted[r] += 1;
            } else {
                rate[r] *= 0.5;
            }
            traces[r].push(loss[r]);
        }
        check_finite(&loss, step)?;
    }
    Ok((0..rows)
        .map(|r| MatchOutcome {
            x: x[r * d..(r + 1) * d].to_vec(),
            loss: loss[r],
            iterations: accepted[r],
            trace: std::mem::take(&mut traces[r]),
        })
        .collect())
}

fn check_finite(loss: &[f64], step: usize) -> Result<()> {
    match loss.iter().position(|l| !l.is_finite()) {
        Some(row) => Err(Error::Divergence {
            epoch: step,
            batch: row,
            detail: "non-finite representation gap".into(),
        }),
        None => Ok(()),
    }
}

pub fn feature_match(model: &ModelParams, x_init: &[f64], x_target: &[f64], steps: usize, lr: f64) -> Result<MatchOutcome> {
    Ok(feature_match_rows(model, x_init, x_target, steps, lr)?.remove(0))
}

/// Pairs every train sample with a distinct one and matches its representation
/// to the partner's, labelling the result with the partner's label.
pub fn build_feature_matched_dataset(
    model: &ModelParams,
    train: &LabeledDataset,
    pairing_seed: u64,
    cfg: &FeatureMatchConfig,
) -> Result<DistilledDataset> {
    let tag = GeneratorTag::for_recipe(model.recipe)?;
    let pairs = derangement(train.len(), pairing_seed)?;
    let d = train.dim();
    let mut inputs = Vec::with_capacity(train.inputs.len());
    let mut labels = Vec::with_capacity(train.len());
    let mut provenance = Vec::with_capacity(train.len());
    let idx: Vec<usize> = (0..train.len()).collect();
    for chunk in idx.chunks(cfg.chunk.max(1)) {
        let src: Vec<f64> = chunk.iter().flat_map(|&i| train.sample(i).iter().copied()).collect();
        let tgt: Vec<f64> = chunk.iter().flat_map(|&i| train.sample(pairs[i]).iter().copied()).collect();
        let out = feature_match_rows(model, &src, &tgt, cfg.steps, cfg.lr).map_err(|e| match e {
            Error::Divergence { epoch, batch, detail } => Error::Divergence {
                epoch,
                batch: chunk[batch],
                detail: format!("{detail} (source {}, target {})", chunk[batch], pairs[chunk[batch]]),
            },
            other => other,
        })?;
        for (&i, o) in chunk.iter().zip(out) {
            debug_assert_eq!(o.x.len(), d);
            inputs.extend_from_slice(&o.x);
            let y = train.labels[pairs[i]];
            labels.push(y);
            provenance.push(Provenance {
                source_index: i,
                target_index: Some(pairs[i]),
                target_label: y,
                final_loss: Some(o.loss),
                iterations: o.iterations,
            });
        }
    }
    let data = LabeledDataset::new(
        train.shape,
        train.classes,
        inputs,
        labels,
        format!("distilled-{}", tag.as_str()),
        model.hash(),
    )?;
    Ok(DistilledDataset {
        data,
        provenance,
        tag,
        model_hash: model.hash(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdRule {
    Rand,
    Det,
}

/// Targeted PGD towards a rule-chosen label for every train sample, keeping
/// every output labelled with its target. With an ensemble the attack holds
/// the ensemble at the source label.
pub fn build_pgd_dataset(
    f0: &ModelParams,
    train: &LabeledDataset,
    rule: PgdRule,
    attack: &AttackConfig,
    ensemble: Option<&Ensemble>,
) -> Result<DistilledDataset> {
    let family = if ensemble.is_some() {
        AttackFamily::PgdEnsembleAdjusted
    } else {
        AttackFamily::PgdTargeted
    };
    let cfg = AttackConfig {
        family,
        target_rule: match rule {
            PgdRule::Rand => TargetRule::RandomNonsource,
            PgdRule::Det => TargetRule::NextClass,
        },
        targets_per_source: 1,
        ..attack.clone()
    };
    let tag = match (rule, ensemble.is_some()) {
        (PgdRule::Rand, false) => GeneratorTag::Rand,
        (PgdRule::Det, false) => GeneratorTag::Det,
        (PgdRule::Rand, true) => GeneratorTag::RandPerp,
        (PgdRule::Det, true) => GeneratorTag::DetPerp,
    };
    let idx: Vec<usize> = (0..train.len()).collect();
    let records = attack_batch(f0, ensemble, train, &idx, &cfg)?;
    let mut inputs = Vec::with_capacity(train.inputs.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut provenance = Vec::with_capacity(records.len());
    for r in records {
        let y = r.y_target.expect("targeted attack");
        inputs.extend_from_slice(&r.x_adv);
        labels.push(y);
        provenance.push(Provenance {
            source_index: r.source_index,
            target_index: None,
            target_label: y,
            final_loss: None,
            iterations: cfg.steps,
        });
    }
    let mut model_hash = f0.hash();
    if let Some(e) = ensemble {
        model_hash.push('+');
        model_hash.push_str(&e.hash());
    }
    let data = LabeledDataset::new(
        train.shape,
        train.classes,
        inputs,
        labels,
        format!("distilled-{}", tag.as_str()),
        model_hash.clone(),
    )?;
    Ok(DistilledDataset {
        data,
        provenance,
        tag,
        model_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, ArchitectureSpec};

    fn identity_model() -> ModelParams {
        let arch = ArchitectureSpec::linear([1, 4, 4], 2);
        init_model(&arch, 0, Recipe::Sgd).unwrap()
    }

    fn data(n: usize) -> LabeledDataset {
        let inputs = (0..n * 16).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        LabeledDataset::new([1, 4, 4], 2, inputs, labels, "train", "").unwrap()
    }

    #[test]
    fn zero_steps_and_matched_inputs_are_fixed_points() {
        let m = identity_model();
        let ds = data(2);
        let o = feature_match(&m, ds.sample(0), ds.sample(1), 0, 0.1).unwrap();
        assert_eq!(o.x, ds.sample(0));
        let same = feature_match(&m, ds.sample(0), ds.sample(0), 50, 0.1).unwrap();
        assert_eq!(same.loss, 0.0);
        assert_eq!(same.x, ds.sample(0));
        assert_eq!(same.iterations, 0);
    }

    #[test]
    fn identity_representation_converges_to_target() {
        let m = identity_model();
        assert_eq!(m.arch.penultimate_width().unwrap(), 16);
        let ds = data(2);
        let o = feature_match(&m, ds.sample(0), ds.sample(1), 500, 0.1).unwrap();
        let (before, _) = norms(ds.sample(0), ds.sample(1));
        let (after, _) = norms(&o.x, ds.sample(1));
        assert!(after < 0.01 * before, "{after} vs {before}");
    }

    #[test]
    fn trace_is_monotone_and_inputs_stay_in_box() {
        let arch = ArchitectureSpec::mlp_s([1, 4, 4], 2);
        let m = init_model(&arch, 3, Recipe::Sgd).unwrap();
        let ds = data(6);
        let src: Vec<f64> = (0..3).flat_map(|i| ds.sample(i).to_vec()).collect();
        let tgt: Vec<f64> = (3..6).flat_map(|i| ds.sample(i).to_vec()).collect();
        for o in feature_match_rows(&m, &src, &tgt, 100, 5.0).unwrap() {
            assert!(o.trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(o.trace.last().unwrap() < &o.trace[0]);
            assert!(o.x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for seed in 0..20 {
            let p = derangement(7, seed).unwrap();
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..7).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
        assert_eq!(derangement(9, 4).unwrap(), derangement(9, 4).unwrap());
        assert!(derangement(1, 0).is_err());
    }

    #[test]
    fn feature_matched_labels_follow_targets() {
        let m = identity_model();
        let ds = data(10);
        let cfg = FeatureMatchConfig {
            steps: 5,
            lr: 0.1,
            chunk: 4,
        };
        let out = build_feature_matched_dataset(&m, &ds, 1, &cfg).unwrap();
        assert_eq!(out.data.len(), 10);
        assert_eq!(out.tag, GeneratorTag::NonRobust);
        for (i, p) in out.provenance.iter().enumerate() {
            assert_eq!(p.source_index, i);
            assert_eq!(out.data.labels[i], ds.labels[p.target_index.unwrap()]);
        }
        let ratio = out.target_proximity_ratio(&ds).unwrap();
        assert!(ratio.is_finite() && ratio > 0.0);
    }

    #[test]
    fn pgd_dataset_det_targets_and_determinism() {
        let arch = ArchitectureSpec::linear([1, 4, 4], 2);
        let f0 = init_model(&arch, 2, Recipe::Sgd).unwrap();
        let ds = data(8);
        let cfg = AttackConfig {
            steps: 5,
            ..AttackConfig::pgd(AttackFamily::PgdTargeted, 8.0 / 255.0)
        };
        let a = build_pgd_dataset(&f0, &ds, PgdRule::Det, &cfg, None).unwrap();
        let b = build_pgd_dataset(&f0, &ds, PgdRule::Det, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tag, GeneratorTag::Det);
        for (i, y) in a.data.labels.iter().enumerate() {
            assert_eq!(*y, (ds.labels[i] + 1) % 2);
        }
        let r = build_pgd_dataset(&f0, &ds, PgdRule::Rand, &cfg, None).unwrap();
        assert!(r.data.labels.iter().zip(&ds.labels).all(|(t, s)| t != s));
        assert!(a.data.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn next_class_targets_for_ten_classes() {
        let inputs = vec![0.5; 10 * 16];
        let ds = LabeledDataset::new([1, 4, 4], 10, inputs, (0..10).collect(), "train", "").unwrap();
        let f0 = init_model(&ArchitectureSpec::linear([1, 4, 4], 10), 0, Recipe::Sgd).unwrap();
        let cfg = AttackConfig {
            steps: 1,
            ..AttackConfig::pgd(AttackFamily::PgdTargeted, 1.0 / 255.0)
        };
        let out = build_pgd_dataset(&f0, &ds, PgdRule::Det, &cfg, None).unwrap();
        assert_eq!(out.data.labels, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 0]);
    }

    #[test]
    fn save_and_load_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let m = identity_model();
        let ds = data(4);
        let cfg = FeatureMatchConfig {
            steps: 2,
            ..Default::default()
        };
        let out = build_feature_matched_dataset(&m, &ds, 0, &cfg).unwrap();
        let path = dir.path().join("nr.advd");
        out.save(&path).unwrap();
        assert_eq!(DistilledDataset::load(&path).unwrap(), out);
        assert_eq!(out.image_grid(&ds, 2).matches("<rect").count(), 6 * 16);
    }

    #[test]
    fn sam_models_have_no_feature_matched_tag() {
        assert!(GeneratorTag::for_recipe(Recipe::Sam).is_err());
        assert_eq!(GeneratorTag::for_recipe(Recipe::RobustDataset).unwrap().as_str(), "R'");
    }
}
