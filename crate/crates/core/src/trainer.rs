//! Training recipes (SGD with momentum, SAM, adversarial training) and the
//! random augmentation pipeline.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_untargeted_batch, AttackConfig, AttackFamily};
use crate::autograd::{Tape, Tensor};
use crate::data::report::{fmt_real, header, Report};
use crate::data::{accuracy, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{forward_graph, init_model, predict, ArchitectureSpec, Ensemble, EnsembleSpace, ModelParams, Recipe};
use crate::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub crop_padding: usize,
    pub max_rotation_deg: f64,
    /// Additive brightness shift amplitude in pixel units.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_padding: 2,
            max_rotation_deg: 4.0,
            brightness: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            crop_padding: 0,
            max_rotation_deg: 0.0,
            brightness: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_prob <= 0.0 && self.crop_padding == 0 && self.max_rotation_deg <= 0.0 && self.brightness <= 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob) && self.max_rotation_deg >= 0.0 && self.brightness >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation {self:?}")))
        }
    }
}

/// Random flip, pad-and-crop, nearest-neighbour rotation and brightness
/// shift of one `c×h×w` image. Disabled stages draw no randomness.
pub fn augment(x: &[f64], shape: [usize; 3], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut img = x.to_vec();
    if cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob {
        for ch in 0..c {
            for r in 0..h {
                img[ch * h * w + r * w..ch * h * w + (r + 1) * w].reverse();
            }
        }
    }
    if cfg.crop_padding > 0 {
        let p = cfg.crop_padding as i64;
        let oy = (rng.random_range(0..=2 * p) - p) as isize;
        let ox = (rng.random_range(0..=2 * p) - p) as isize;
        let src = img.clone();
        for ch in 0..c {
            for r in 0..h as isize {
                for col in 0..w as isize {
                    let (sr, sc) = (r + oy, col + ox);
                    let inside = sr >= 0 && sc >= 0 && sr < h as isize && sc < w as isize;
                    img[ch * h * w + (r as usize) * w + col as usize] = if inside {
                        src[ch * h * w + sr as usize * w + sc as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    if cfg.max_rotation_deg > 0.0 {
        let angle = rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
        img = rotate_nearest(&img, shape, angle);
    }
    if cfg.brightness > 0.0 {
        let shift = rng.random_range(-1.0..=1.0) * cfg.brightness;
        img.iter_mut().for_each(|v| *v = (*v + shift).clamp(0.0, 1.0));
    }
    img
}

/// Rotation about the image centre; samples falling outside read zero.
pub fn rotate_nearest(x: &[f64], shape: [usize; 3], angle: f64) -> Vec<f64> {
    let [c, h, w] = shape;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, co) = angle.sin_cos();
    let mut out = vec![0.0; x.len()];
    for r in 0..h {
        for col in 0..w {
            let (dy, dx) = (r as f64 - cy, col as f64 - cx);
            // inverse map from output to source
            let sx = (co * dx + s * dy + cx).round();
            let sy = (-s * dx + co * dy + cy).round();
            if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
                for ch in 0..c {
                    out[ch * h * w + r * w + col] = x[ch * h * w + sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, factor)`: from `epoch` on the rate is multiplied by `factor`.
    pub lr_decay: Vec<(usize, f64)>,
    pub recipe: Recipe,
    pub sam_rho: f64,
    pub adv_eps: f64,
    pub adv_steps: usize,
    /// Defaults to `adv_eps / 5`.
    pub adv_step_size: Option<f64>,
    pub adv_random_start: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: vec![(15, 0.1), (25, 0.1)],
            recipe: Recipe::Sgd,
            sam_rho: 0.05,
            adv_eps: 8.0 / 255.0,
            adv_steps: 7,
            adv_step_size: None,
            adv_random_start: true,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk defaults for a recipe. Adversarial training runs without
    /// augmentation.
    pub fn for_recipe(recipe: Recipe) -> Self {
        let mut cfg = Self {
            recipe,
            ..Self::default()
        };
        if recipe == Recipe::Adv {
            cfg.augment = AugmentConfig::identity();
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        if self.sam_rho < 0.0 {
            return Err(Error::Config("sam_rho must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.adv_eps) || self.adv_steps == 0 {
            return Err(Error::Config("adv_eps must lie in [0,1] and adv_steps be positive".into()));
        }
        self.augment.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_decay
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }

    fn inner_attack(&self) -> AttackConfig {
        AttackConfig {
            steps: self.adv_steps,
            step_size: Some(self.adv_step_size.unwrap_or(self.adv_eps / 5.0)),
            random_start: self.adv_random_start,
            ..AttackConfig::pgd(AttackFamily::PgdUntargeted, self.adv_eps)
        }
    }
}

/// Flat weight buffers an optimizer can update in place.
pub trait Weights {
    fn slots(&mut self) -> Vec<&mut [f64]>;
}

impl Weights for ModelParams {
    fn slots(&mut self) -> Vec<&mut [f64]> {
        self.tensors.iter_mut().map(|t| t.data.as_mut_slice()).collect()
    }
}

impl Weights for Vec<Vec<f64>> {
    fn slots(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().map(|v| v.as_mut_slice()).collect()
    }
}

/// Heavy-ball SGD with coupled weight decay: `v ← μv + g + λw`, `w ← w − ηv`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<W: Weights + ?Sized>(&mut self, weights: &mut W, grads: &[Vec<f64>], lr: f64) {
        let slots = weights.slots();
        if self.velocity.is_empty() {
            self.velocity = slots.iter().map(|s| vec![0.0; s.len()]).collect();
        }
        for ((w, g), v) in slots.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// One two-pass SAM update. `loss_grad` evaluates the loss and its weight
/// gradient at the current weights. Returns the loss before the update.
pub fn sam_step<W, F>(weights: &mut W, opt: &mut Sgd, lr: f64, rho: f64, mut loss_grad: F) -> Result<f64>
where
    W: Weights + ?Sized,
    F: FnMut(&mut W) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (loss, g1) = loss_grad(weights)?;
    let norm = global_norm(&g1);
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let grads = if rho > 0.0 && norm >= 1e-12 {
        let saved: Vec<Vec<f64>> = weights.slots().iter().map(|s| s.to_vec()).collect();
        for (w, g) in weights.slots().into_iter().zip(&g1) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi += rho * gi / norm;
            }
        }
        let (_, g2) = loss_grad(weights)?;
        for (w, s) in weights.slots().into_iter().zip(&saved) {
            w.copy_from_slice(s);
        }
        g2
    } else {
        g1
    };
    opt.step(weights, &grads, lr);
    Ok(loss)
}

/// Mean cross-entropy over the batch, parameter gradients and the number of
/// correct predictions.
pub fn batch_loss_grad(params: &ModelParams, x: Tensor, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>, usize)> {
    let mut tape = Tape::new();
    let vx = tape.constant(x)?;
    let f = forward_graph(&mut tape, params, vx, true)?;
    let correct = tape
        .value(f.logits)
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let loss = tape.cross_entropy(f.logits, labels)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = f
        .params
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.data.len()]))
        .collect();
    Ok((value, grads, correct))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub member_seed: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Training log in the `epoch,member_seed,train_loss,train_acc,test_acc` layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl Report for TrainingLog {
    fn csv_header(&self) -> Vec<String> {
        header(&["epoch", "member_seed", "train_loss", "train_acc", "test_acc"])
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    e.member_seed.to_string(),
                    fmt_real(e.train_loss),
                    fmt_real(e.train_acc),
                    e.test_acc.map(fmt_real).unwrap_or_default(),
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

fn divergence(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(detail) => Error::Divergence { epoch, batch, detail },
        other => other,
    }
}

/// Trains a fresh model with the recipe in `cfg`.
pub fn train(
    arch: &ArchitectureSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    test: Option<&LabeledDataset>,
) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if data.shape != arch.input || data.classes != arch.classes {
        return Err(Error::Shape("dataset does not match architecture".into()));
    }
    let mut params = init_model(arch, cfg.seed, cfg.recipe)?;
    let mut rng = stream(cfg.seed, 10);
    let mut adv_rng = stream(cfg.seed, 11);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let inner = cfg.inner_attack();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let d = data.dim();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut batches) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut x = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                if cfg.augment.is_identity() {
                    x.extend_from_slice(data.sample(i));
                } else {
                    x.extend(augment(data.sample(i), data.shape, &cfg.augment, &mut rng));
                }
            }
            let labels = data.batch_labels(idx);
            if cfg.recipe == Recipe::Adv && cfg.adv_eps > 0.0 {
                x = pgd_untargeted_batch(&params, &x, &labels, &inner, &mut adv_rng)
                    .map_err(|e| divergence(epoch, b, e))?;
            }
            let mut shape = vec![idx.len()];
            shape.extend_from_slice(&data.shape);
            let xt = Tensor::new(shape, x)?;
            let rho = if cfg.recipe == Recipe::Sam { cfg.sam_rho } else { 0.0 };
            let mut hits = None;
            let loss = sam_step(&mut params, &mut opt, lr, rho, |p: &mut ModelParams| {
                let (l, g, c) = batch_loss_grad(p, xt.clone(), &labels)?;
                hits.get_or_insert(c);
                Ok((l, g))
            })
            .map_err(|e| divergence(epoch, b, e))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss}"),
                });
            }
            loss_sum += loss;
            correct += hits.unwrap_or(0);
            batches += 1;
        }
        if params.tensors.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                epoch,
                batch: batches,
                detail: "non-finite weights".into(),
            });
        }
        let test_acc = test.map(|t| evaluate(&params, t)).transpose()?;
        log.push(EpochLog {
            epoch,
            member_seed: cfg.seed,
            train_loss: loss_sum / batches as f64,
            train_acc: correct as f64 / data.len() as f64,
            test_acc,
        });
    }
    Ok(Trained { params, log })
}

pub fn sgd_train(arch: &ArchitectureSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Trained> {
    if cfg.recipe != Recipe::Sgd {
        return Err(Error::Config("sgd_train needs recipe sgd".into()));
    }
    train(arch, data, cfg, None)
}

pub fn adversarial_train(arch: &ArchitectureSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Trained> {
    if cfg.recipe != Recipe::Adv {
        return Err(Error::Config("adversarial_train needs recipe adv".into()));
    }
    train(arch, data, cfg, None)
}

/// Clean accuracy on a dataset.
pub fn evaluate(params: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(1024) {
        preds.extend(predict(params, &data.batch(chunk)?)?);
    }
    Ok(accuracy(&preds, &data.labels))
}

/// An attacked model and its independently seeded ensemble.
#[derive(Clone, Debug)]
pub struct TrainedEnsemble {
    pub f0: Trained,
    pub members: Vec<Trained>,
    pub ensemble: Ensemble,
}

/// Trains `f0` with `base_seed` and `n` members with seeds `base_seed+1..=base_seed+n`.
pub fn train_ensemble(
    arch: &ArchitectureSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    base_seed: u64,
    n: usize,
    test: Option<&LabeledDataset>,
) -> Result<TrainedEnsemble> {
    if n < 2 {
        return Err(Error::Spec("an ensemble needs at least two members".into()));
    }
    let run = |seed: u64| {
        let c = TrainConfig { seed, ..cfg.clone() };
        train(arch, data, &c, test).map_err(|e| Error::MemberFailed {
            seed,
            source: Box::new(e),
        })
    };
    let f0 = run(base_seed)?;
    let members = (1..=n as u64).map(|i| run(base_seed + i)).collect::<Result<Vec<_>>>()?;
    let ensemble = Ensemble::new(members.iter().map(|m| m.params.clone()).collect(), EnsembleSpace::Prob)?;
    Ok(TrainedEnsemble { f0, members, ensemble })
}
