//! PGD variants and the ensemble-guided minimum-norm attack.
//!
//! Attacks run batched: every sample in a chunk shares one tape per step,
//! and since per-sample losses are independent the input gradient of the
//! batch loss separates row by row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{forward_graph, predict, Ensemble, ModelParams};
use crate::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    PgdTargeted,
    PgdUntargeted,
    PgdEnsembleAdjusted,
    FmnEnsemble,
}

impl AttackFamily {
    pub fn is_targeted(self) -> bool {
        matches!(self, Self::PgdTargeted | Self::PgdEnsembleAdjusted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PgdTargeted => "pgd_targeted",
            Self::PgdUntargeted => "pgd_untargeted",
            Self::PgdEnsembleAdjusted => "pgd_ensemble_adjusted",
            Self::FmnEnsemble => "fmn_ensemble",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "targets")]
pub enum TargetRule {
    RandomNonsource,
    NextClass,
    /// One target per attacked sample, in order.
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// ℓ∞ budget in pixel units (`[0,1]` scale).
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `epsilon / 10` when absent.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub target_rule: TargetRule,
    /// Distinct targets drawn per source under `random_nonsource`.
    pub targets_per_source: usize,
    /// Weight of the ensemble term in the ensemble-adjusted loss.
    pub ensemble_weight: f64,
    pub seed: u64,
    /// Samples attacked together.
    pub chunk: usize,
    pub fmn: FmnConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            family: AttackFamily::PgdTargeted,
            epsilon: 8.0 / 255.0,
            steps: 100,
            step_size: None,
            random_start: false,
            target_rule: TargetRule::RandomNonsource,
            targets_per_source: 1,
            ensemble_weight: 1.0,
            seed: 0,
            chunk: 512,
            fmn: FmnConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn pgd(family: AttackFamily, epsilon: f64) -> Self {
        Self {
            family,
            epsilon,
            ..Default::default()
        }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0,1]", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.step() < 0.0 || (self.step() == 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("step size must be positive".into()));
        }
        if self.targets_per_source == 0 || self.chunk == 0 {
            return Err(Error::Config("targets_per_source and chunk must be positive".into()));
        }
        Ok(())
    }
}

/// Minimum-norm attack schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FmnConfig {
    pub steps: usize,
    pub alpha_max: f64,
    pub alpha_min: f64,
    /// Length of the cosine decay; later iterations stay at `alpha_min`.
    pub schedule_len: usize,
}

impl Default for FmnConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            alpha_max: 0.05,
            alpha_min: 0.001,
            schedule_len: 200,
        }
    }
}

impl FmnConfig {
    pub fn alpha(&self, t: usize) -> f64 {
        let t = t.min(self.schedule_len) as f64 / self.schedule_len.max(1) as f64;
        self.alpha_min + 0.5 * (self.alpha_max - self.alpha_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialRecord {
    pub source_index: usize,
    pub x_src: Vec<f64>,
    pub y_src: usize,
    pub x_adv: Vec<f64>,
    pub y_target: Option<usize>,
    /// Success under the family's own criterion.
    pub success: bool,
    /// Whether the attacked model's prediction differs from `y_src`.
    pub label_changed: bool,
    pub prediction: usize,
    pub l2: f64,
    pub linf: f64,
    pub family: AttackFamily,
    pub epsilon: f64,
    pub js_delta: Option<f64>,
}

impl AdversarialRecord {
    fn new(
        source_index: usize,
        x_src: Vec<f64>,
        y_src: usize,
        x_adv: Vec<f64>,
        y_target: Option<usize>,
        prediction: usize,
        cfg: &AttackConfig,
    ) -> Self {
        let (l2, linf) = norms(&x_src, &x_adv);
        let label_changed = prediction != y_src;
        let success = match y_target {
            Some(t) if cfg.family.is_targeted() => prediction == t,
            _ => label_changed,
        };
        Self {
            source_index,
            x_src,
            y_src,
            x_adv,
            y_target,
            success,
            label_changed,
            prediction,
            l2,
            linf,
            family: cfg.family,
            epsilon: cfg.epsilon,
            js_delta: None,
        }
    }
}

/// `(‖b − a‖₂, ‖b − a‖∞)`.
pub fn norms(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (sq, max) = a.iter().zip(b).fold((0.0, 0.0), |(s, m): (f64, f64), (p, q)| {
        let d = (q - p).abs();
        (s + d * d, m.max(d))
    });
    (sq.sqrt(), max)
}

pub(crate) fn batch_tensor(arch_input: [usize; 3], x: &[f64], rows: usize) -> Result<Tensor> {
    let mut shape = vec![rows];
    shape.extend_from_slice(&arch_input);
    Tensor::new(shape, x.to_vec())
}

/// Input gradient of `Σ_i loss_i` where the loss is built by `build` from
/// the input handle.
pub(crate) fn input_gradient(
    arch_input: [usize; 3],
    x: &[f64],
    rows: usize,
    build: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vx = tape.leaf(batch_tensor(arch_input, x, rows)?.with_requires_grad(true))?;
    let loss = build(&mut tape, vx)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let g = tape.grad(vx).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    Ok((value, g))
}

/// Input gradient of the summed cross-entropy of `params` towards `labels`.
pub fn cross_entropy_input_grad(
    params: &ModelParams,
    x: &[f64],
    labels: &[usize],
) -> Result<Vec<f64>> {
    let rows = labels.len();
    input_gradient(params.arch.input, x, rows, |tape, vx| {
        let f = forward_graph(tape, params, vx, false)?;
        let ce = tape.cross_entropy(f.logits, labels)?;
        tape.scale(ce, rows as f64)
    })
    .map(|(_, g)| g)
}

/// Gradient of `Σ_i [CE(f0(x_i), t_i) + w·CE(f̃(x_i), y_i)]`.
fn adjusted_input_grad(
    f0: &ModelParams,
    ens: &Ensemble,
    weight: f64,
    x: &[f64],
    targets: &[usize],
    sources: &[usize],
) -> Result<Vec<f64>> {
    let rows = targets.len();
    input_gradient(f0.arch.input, x, rows, |tape, vx| {
        let f = forward_graph(tape, f0, vx, false)?;
        let ce0 = tape.cross_entropy(f.logits, targets)?;
        let lp = ens.log_probs_graph(tape, vx)?;
        let picked = tape.pick(lp, sources)?;
        let nll = tape.mean(picked)?;
        let ens_term = tape.scale(nll, -weight)?;
        let total = tape.add(ce0, ens_term)?;
        tape.scale(total, rows as f64)
    })
    .map(|(_, g)| g)
}

/// Projected signed-gradient iterations shared by every PGD family.
///
/// `direction` is `-1` to descend the loss and `+1` to ascend it.
fn pgd_loop(
    x_src: &[f64],
    start: Vec<f64>,
    epsilon: f64,
    step: f64,
    steps: usize,
    direction: f64,
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut x = start;
    project(&mut x, x_src, epsilon);
    if epsilon == 0.0 {
        return Ok(x);
    }
    for _ in 0..steps {
        let g = grad(&x)?;
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += direction * step * sign(*gi);
        }
        project(&mut x, x_src, epsilon);
    }
    Ok(x)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clips into the ℓ∞ ball around `center`, then into the `[0,1]` box.
pub fn project(x: &mut [f64], center: &[f64], epsilon: f64) {
    for (xi, ci) in x.iter_mut().zip(center) {
        *xi = xi.clamp(ci - epsilon, ci + epsilon).clamp(0.0, 1.0);
    }
}

fn random_start(x_src: &[f64], epsilon: f64, rng: &mut impl Rng) -> Vec<f64> {
    x_src
        .iter()
        .map(|v| v + rng.random_range(-1.0..=1.0) * epsilon)
        .collect()
}

/// Batched untargeted PGD maximizing cross-entropy at the true labels.
pub fn pgd_untargeted_batch(
    f0: &ModelParams,
    x_src: &[f64],
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let start = if cfg.random_start && cfg.epsilon > 0.0 {
        random_start(x_src, cfg.epsilon, rng)
    } else {
        x_src.to_vec()
    };
    pgd_loop(x_src, start, cfg.epsilon, cfg.step(), cfg.steps, 1.0, |x| {
        cross_entropy_input_grad(f0, x, labels)
    })
}

/// Batched targeted PGD, optionally with the ensemble term that holds
/// `f̃` at the source labels.
pub fn pgd_targeted_batch(
    f0: &ModelParams,
    ensemble: Option<(&Ensemble, &[usize])>,
    x_src: &[f64],
    targets: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let start = if cfg.random_start && cfg.epsilon > 0.0 {
        random_start(x_src, cfg.epsilon, rng)
    } else {
        x_src.to_vec()
    };
    pgd_loop(x_src, start, cfg.epsilon, cfg.step(), cfg.steps, -1.0, |x| match ensemble {
        Some((ens, sources)) if cfg.ensemble_weight != 0.0 => {
            adjusted_input_grad(f0, ens, cfg.ensemble_weight, x, targets, sources)
        }
        _ => cross_entropy_input_grad(f0, x, targets),
    })
}

/// Single-sample targeted PGD.
pub fn pgd_targeted(
    f0: &ModelParams,
    x: &[f64],
    y_src: usize,
    y_target: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    check_target(f0, y_target)?;
    let mut rng = stream(cfg.seed, 0);
    let adv = pgd_targeted_batch(f0, None, x, &[y_target], cfg, &mut rng)?;
    finish_single(f0, x, y_src, adv, Some(y_target), cfg)
}

/// Single-sample ensemble-adjusted targeted PGD.
pub fn pgd_ensemble_adjusted(
    f0: &ModelParams,
    ensemble: &Ensemble,
    x: &[f64],
    y_src: usize,
    y_target: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    if ensemble.is_empty() {
        return Err(Error::Spec("empty ensemble".into()));
    }
    check_target(f0, y_target)?;
    let mut rng = stream(cfg.seed, 0);
    let adv = pgd_targeted_batch(f0, Some((ensemble, &[y_src])), x, &[y_target], cfg, &mut rng)?;
    finish_single(f0, x, y_src, adv, Some(y_target), cfg)
}

fn check_target(f0: &ModelParams, y: usize) -> Result<()> {
    if y >= f0.arch.classes {
        return Err(Error::Spec(format!("target {y} out of range")));
    }
    Ok(())
}

fn finish_single(
    f0: &ModelParams,
    x: &[f64],
    y_src: usize,
    adv: Vec<f64>,
    y_target: Option<usize>,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    let pred = predict(f0, &batch_tensor(f0.arch.input, &adv, 1)?)?[0];
    Ok(AdversarialRecord::new(0, x.to_vec(), y_src, adv, y_target, pred, cfg))
}

/// Targets for one source under `rule`, drawn from the source's own substream.
pub fn draw_targets(
    rule: &TargetRule,
    y_src: usize,
    classes: usize,
    count: usize,
    position: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    match rule {
        TargetRule::NextClass => Ok(vec![(y_src + 1) % classes]),
        TargetRule::Explicit(t) => {
            let y = *t
                .get(position)
                .ok_or_else(|| Error::Config(format!("no explicit target for sample {position}")))?;
            if y >= classes {
                return Err(Error::Config(format!("explicit target {y} out of range")));
            }
            Ok(vec![y])
        }
        TargetRule::RandomNonsource => {
            let count = count.min(classes - 1);
            let mut pool: Vec<usize> = (0..classes).filter(|&c| c != y_src).collect();
            // partial Fisher-Yates
            for i in 0..count {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            pool.truncate(count);
            Ok(pool)
        }
    }
}

fn target_stream(index: usize) -> u64 {
    (index as u64) << 16
}

fn job_stream(index: usize, target: Option<usize>) -> u64 {
    ((index as u64) << 16) | (1 + target.map_or(0xfffe, |t| t as u64 & 0x7fff))
}

/// Runs `cfg` on the listed samples of `data`.
///
/// Every source gets its own random substream keyed by its dataset index,
/// so records do not depend on chunking.
pub fn attack_batch(
    f0: &ModelParams,
    ensemble: Option<&Ensemble>,
    data: &LabeledDataset,
    indices: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AdversarialRecord>> {
    cfg.validate()?;
    if cfg.family == AttackFamily::FmnEnsemble {
        let ens = ensemble.ok_or_else(|| Error::Spec("fmn needs an ensemble".into()))?;
        return Ok(fmn_batch(f0, ens, data, indices, cfg)?.records);
    }
    if cfg.family == AttackFamily::PgdEnsembleAdjusted && ensemble.is_none_or(|e| e.is_empty()) {
        return Err(Error::Spec("ensemble-adjusted attack needs a nonempty ensemble".into()));
    }
    // (dataset index, target) jobs plus per-job random-start substreams
    let mut jobs: Vec<(usize, Option<usize>)> = Vec::new();
    for (pos, &i) in indices.iter().enumerate() {
        let y = data.labels[i];
        if cfg.family.is_targeted() {
            let mut rng = stream(cfg.seed, target_stream(i));
            let targets =
                draw_targets(&cfg.target_rule, y, data.classes, cfg.targets_per_source, pos, &mut rng)?;
            jobs.extend(targets.into_iter().map(|t| (i, Some(t))));
        } else {
            jobs.push((i, None));
        }
    }
    let d = data.dim();
    let mut records = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(cfg.chunk) {
        let mut x_src = Vec::with_capacity(chunk.len() * d);
        let mut start_rng = Vec::with_capacity(chunk.len());
        for &(i, t) in chunk {
            x_src.extend_from_slice(data.sample(i));
            start_rng.push(stream(cfg.seed, job_stream(i, t)));
        }
        let sources: Vec<usize> = chunk.iter().map(|&(i, _)| data.labels[i]).collect();
        let targets: Vec<usize> = chunk.iter().map(|&(i, t)| t.unwrap_or(data.labels[i])).collect();
        let start = if cfg.random_start && cfg.epsilon > 0.0 {
            let mut s = Vec::with_capacity(x_src.len());
            for (row, rng) in x_src.chunks(d).zip(start_rng.iter_mut()) {
                s.extend(random_start(row, cfg.epsilon, rng));
            }
            s
        } else {
            x_src.clone()
        };
        let adv = match cfg.family {
            AttackFamily::PgdUntargeted => {
                pgd_loop(&x_src, start, cfg.epsilon, cfg.step(), cfg.steps, 1.0, |x| {
                    cross_entropy_input_grad(f0, x, &sources)
                })?
            }
            AttackFamily::PgdTargeted => {
                pgd_loop(&x_src, start, cfg.epsilon, cfg.step(), cfg.steps, -1.0, |x| {
                    cross_entropy_input_grad(f0, x, &targets)
                })?
            }
            AttackFamily::PgdEnsembleAdjusted => {
                let ens = ensemble.expect("checked above");
                pgd_loop(&x_src, start, cfg.epsilon, cfg.step(), cfg.steps, -1.0, |x| {
                    if cfg.ensemble_weight == 0.0 {
                        cross_entropy_input_grad(f0, x, &targets)
                    } else {
                        adjusted_input_grad(f0, ens, cfg.ensemble_weight, x, &targets, &sources)
                    }
                })?
            }
            AttackFamily::FmnEnsemble => unreachable!(),
        };
        // independent re-check of every outcome
        let preds = predict(f0, &batch_tensor(f0.arch.input, &adv, chunk.len())?)?;
        for (j, &(i, t)) in chunk.iter().enumerate() {
            let rec = AdversarialRecord::new(
                i,
                x_src[j * d..(j + 1) * d].to_vec(),
                data.labels[i],
                adv[j * d..(j + 1) * d].to_vec(),
                t,
                preds[j],
                cfg,
            );
            debug_assert!(rec.linf <= cfg.epsilon + 1e-9);
            records.push(rec);
        }
    }
    Ok(records)
}

/// Fraction of records the attack failed on.
pub fn robust_accuracy(records: &[AdversarialRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| !r.success).count() as f64 / records.len() as f64
}

/// Checks the ℓ∞-ball and box contract; returns the number of violations.
pub fn constraint_violations(records: &[AdversarialRecord]) -> usize {
    records
        .iter()
        .filter(|r| r.family != AttackFamily::FmnEnsemble)
        .filter(|r| {
            r.x_adv.iter().any(|v| !(0.0..=1.0).contains(v))
                || norms(&r.x_src, &r.x_adv).1 > r.epsilon + 1e-9
        })
        .count()
}

/// Outcome of the minimum-norm attack on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FmnOutcome {
    pub success: bool,
    pub l2: Option<f64>,
    pub linf: Option<f64>,
    pub x_adv: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FmnBatch {
    pub records: Vec<AdversarialRecord>,
    /// Sources skipped because `f0` already misclassified them.
    pub skipped: usize,
}

/// Margin `log f̃_y − max_{j≠y} log f̃_j` per row, and its input gradient.
fn ensemble_margin_grad(ens: &Ensemble, input: [usize; 3], x: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    let rows = labels.len();
    input_gradient(input, x, rows, |tape, vx| {
        let lp = ens.log_probs_graph(tape, vx)?;
        let k = tape.value(lp).shape()[1];
        let data = tape.value(lp).data();
        let runner_up: Vec<usize> = (0..rows)
            .map(|r| {
                let row = &data[r * k..(r + 1) * k];
                (0..k)
                    .filter(|&j| j != labels[r])
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("at least two classes")
            })
            .collect();
        let own = tape.pick(lp, labels)?;
        let other = tape.pick(lp, &runner_up)?;
        let m = tape.sub(own, other)?;
        tape.sum(m)
    })
    .map(|(_, g)| g)
}

/// Per-row state of the minimum-norm search.
struct FmnState {
    delta: Vec<f64>,
    best: Option<(f64, Vec<f64>)>,
    /// Largest radius known to fail.
    lo: f64,
    radius: f64,
}

/// Ensemble-guided ℓ2 minimum-norm attack on a batch of correctly
/// classified rows. Gradients flow only through `ens`; success is judged on `f0`.
pub fn fmn_rows(
    f0: &ModelParams,
    ens: &Ensemble,
    x: &[f64],
    labels: &[usize],
    cfg: &FmnConfig,
) -> Result<Vec<FmnOutcome>> {
    if ens.is_empty() {
        return Err(Error::Spec("empty ensemble".into()));
    }
    let rows = labels.len();
    let d = x.len() / rows.max(1);
    let input = f0.arch.input;
    let mut state: Vec<FmnState> = (0..rows)
        .map(|_| FmnState {
            delta: vec![0.0; d],
            best: None,
            lo: 0.0,
            radius: f64::INFINITY,
        })
        .collect();
    let mut point = x.to_vec();
    for t in 0..=cfg.steps {
        let preds = predict(f0, &batch_tensor(input, &point, rows)?)?;
        for (r, s) in state.iter_mut().enumerate() {
            let n = l2(&s.delta);
            if preds[r] != labels[r] {
                if s.best.as_ref().is_none_or(|(b, _)| n < *b) {
                    s.best = Some((n, s.delta.clone()));
                }
            } else if s.best.as_ref().is_none_or(|(b, _)| n < *b) {
                s.lo = s.lo.max(n);
            }
            if let Some((b, _)) = &s.best {
                s.radius = 0.5 * (s.lo.min(*b) + b);
            }
        }
        if t == cfg.steps {
            break;
        }
        let g = ensemble_margin_grad(ens, input, &point, labels)?;
        let alpha = cfg.alpha(t);
        for (r, s) in state.iter_mut().enumerate() {
            let gr = &g[r * d..(r + 1) * d];
            let gn = l2(gr);
            if gn > 0.0 {
                for (di, gi) in s.delta.iter_mut().zip(gr) {
                    *di -= alpha * gi / gn;
                }
            }
            let n = l2(&s.delta);
            if n > s.radius {
                let f = s.radius / n;
                s.delta.iter_mut().for_each(|v| *v *= f);
            }
            let xr = &x[r * d..(r + 1) * d];
            for ((p, xi), di) in point[r * d..(r + 1) * d].iter_mut().zip(xr).zip(s.delta.iter_mut()) {
                *p = (xi + *di).clamp(0.0, 1.0);
                *di = *p - xi;
            }
        }
    }
    // re-verify each stored best perturbation on f0
    let mut out = Vec::with_capacity(rows);
    for (r, s) in state.into_iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        match s.best {
            Some((_, delta)) => {
                let adv: Vec<f64> = xr.iter().zip(&delta).map(|(a, b)| a + b).collect();
                let pred = predict(f0, &batch_tensor(input, &adv, 1)?)?[0];
                let (n2, ni) = norms(xr, &adv);
                let ok = pred != labels[r];
                out.push(FmnOutcome {
                    success: ok,
                    l2: ok.then_some(n2),
                    linf: ok.then_some(ni),
                    x_adv: adv,
                });
            }
            None => out.push(FmnOutcome {
                success: false,
                l2: None,
                linf: None,
                x_adv: xr.to_vec(),
            }),
        }
    }
    Ok(out)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Single-sample minimum-norm attack. A sample already misclassified by
/// `f0` returns zero norms.
pub fn fmn_ensemble(
    f0: &ModelParams,
    ens: &Ensemble,
    x: &[f64],
    y_src: usize,
    cfg: &FmnConfig,
) -> Result<FmnOutcome> {
    let pred = predict(f0, &batch_tensor(f0.arch.input, x, 1)?)?[0];
    if pred != y_src {
        return Ok(FmnOutcome {
            success: true,
            l2: Some(0.0),
            linf: Some(0.0),
            x_adv: x.to_vec(),
        });
    }
    Ok(fmn_rows(f0, ens, x, &[y_src], cfg)?.remove(0))
}

/// Minimum-norm attack over dataset rows, skipping misclassified sources.
pub fn fmn_batch(
    f0: &ModelParams,
    ens: &Ensemble,
    data: &LabeledDataset,
    indices: &[usize],
    cfg: &AttackConfig,
) -> Result<FmnBatch> {
    let all = data.batch(indices)?;
    let preds = predict(f0, &all)?;
    let kept: Vec<usize> = indices
        .iter()
        .zip(&preds)
        .filter(|(&i, &p)| p == data.labels[i])
        .map(|(&i, _)| i)
        .collect();
    let skipped = indices.len() - kept.len();
    let d = data.dim();
    let mut records = Vec::with_capacity(kept.len());
    for chunk in kept.chunks(cfg.chunk) {
        let x: Vec<f64> = chunk.iter().flat_map(|&i| data.sample(i).iter().copied()).collect();
        let labels = data.batch_labels(chunk);
        let outcomes = fmn_rows(f0, ens, &x, &labels, &cfg.fmn)?;
        for ((&i, o), xs) in chunk.iter().zip(outcomes).zip(x.chunks(d)) {
            let pred = predict(f0, &batch_tensor(f0.arch.input, &o.x_adv, 1)?)?[0];
            let mut rec = AdversarialRecord::new(i, xs.to_vec(), data.labels[i], o.x_adv, None, pred, cfg);
            rec.success = o.success;
            records.push(rec);
        }
    }
    Ok(FmnBatch { records, skipped })
}
