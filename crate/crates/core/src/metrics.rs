//! Jensen–Shannon machinery, the ρ normalization, composition statistics,
//! augmentation invariance, loss-landscape sampling and feature usefulness.

use std::f64::consts::E;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::attacks::{batch_tensor, input_gradient, project, AdversarialRecord, FmnOutcome};
use crate::autograd::log_sum_exp;
use crate::data::report::{fmt_real, header, svg_bar_chart, svg_heat_grid, Report};
use crate::data::{LabeledDataset, Watermarks};
use crate::error::{Error, Result};
use crate::models::{ensemble_predict, forward_graph, logits, predict, Ensemble, ModelParams};
use crate::stream;
use crate::trainer::{augment, AugmentConfig};

const CHUNK: usize = 512;

fn log_in(v: f64, base: f64) -> f64 {
    if base == E {
        v.ln()
    } else if base == 2.0 {
        v.log2()
    } else {
        v.ln() / base.ln()
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Distribution("entries must be finite and nonnegative".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Distribution(format!("sums to {s}")));
    }
    Ok(())
}

/// Jensen–Shannon distance with natural logarithms.
pub fn js_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    js_distance_base(p, q, E)
}

/// Jensen–Shannon distance with logarithms in `base`; bounded by `sqrt(log_base 2)`.
pub fn js_distance_base(p: &[f64], q: &[f64], base: f64) -> Result<f64> {
    check_distribution(p)?;
    check_distribution(q)?;
    if p.len() != q.len() {
        return Err(Error::Distribution(format!("lengths {} and {}", p.len(), q.len())));
    }
    let mut div = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            div += 0.5 * a * log_in(a / m, base);
        }
        if b > 0.0 {
            div += 0.5 * b * log_in(b / m, base);
        }
    }
    Ok(div.max(0.0).sqrt())
}

/// Expected clean-pair JS distance per `(source label, target label)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoMatrix {
    pub classes: usize,
    /// Row-major `classes × classes`.
    pub values: Vec<f64>,
    /// Standard error of each cell mean.
    pub std_err: Vec<f64>,
    pub counts: Vec<usize>,
    pub seed: u64,
    pub source_hash: String,
    pub ensemble_hash: String,
    pub log_base: f64,
}

impl RhoMatrix {
    pub fn get(&self, src: usize, target: usize) -> f64 {
        self.values[src * self.classes + target]
    }

    /// Positive, finite cell or a normalization error.
    pub fn cell(&self, src: usize, target: usize) -> Result<f64> {
        let value = self.get(src, target);
        if value > 0.0 && value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Normalization { src, target, value })
        }
    }

    pub fn check_positive(&self) -> Result<()> {
        for a in 0..self.classes {
            for b in 0..self.classes {
                self.cell(a, b)?;
            }
        }
        Ok(())
    }

    pub fn mean_diagonal(&self) -> f64 {
        (0..self.classes).map(|a| self.get(a, a)).sum::<f64>() / self.classes as f64
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let k = self.classes;
        let total: f64 = (0..k).flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b))).map(|(a, b)| self.get(a, b)).sum();
        total / (k * (k - 1)) as f64
    }
}

/// `f̃(x)` for every sample of `data`, row-major.
pub fn ensemble_probs(ens: &Ensemble, data: &LabeledDataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * data.classes);
    for chunk in idx.chunks(CHUNK) {
        out.extend_from_slice(ensemble_predict(ens, &data.batch(chunk)?)?.data());
    }
    Ok(out)
}

fn ensemble_probs_rows(ens: &Ensemble, x: &[f64], d: usize) -> Result<Vec<f64>> {
    let input = ens.members()[0].arch.input;
    let mut out = Vec::new();
    for chunk in x.chunks(CHUNK * d) {
        out.extend_from_slice(ensemble_predict(ens, &batch_tensor(input, chunk, chunk.len() / d)?)?.data());
    }
    Ok(out)
}

pub fn estimate_rho(ens: &Ensemble, data: &LabeledDataset, pairs_per_cell: usize, seed: u64) -> Result<RhoMatrix> {
    estimate_rho_base(ens, data, pairs_per_cell, seed, E)
}

/// Averages the JS distance of `pairs_per_cell` seeded clean pairs per label pair.
pub fn estimate_rho_base(
    ens: &Ensemble,
    data: &LabeledDataset,
    pairs_per_cell: usize,
    seed: u64,
    base: f64,
) -> Result<RhoMatrix> {
    let k = data.classes;
    let by_class: Vec<Vec<usize>> = (0..k).map(|c| data.class_indices(c)).collect();
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::InsufficientData {
                class,
                count: idx.len(),
                needed: 2,
            });
        }
    }
    if pairs_per_cell == 0 {
        return Err(Error::Config("pairs_per_cell must be positive".into()));
    }
    let probs = ensemble_probs(ens, data)?;
    let row = |i: usize| &probs[i * k..(i + 1) * k];
    let mut values = vec![0.0; k * k];
    let mut std_err = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let mut rng = stream(seed, (a * k + b) as u64);
            let mut samples = Vec::with_capacity(pairs_per_cell);
            while samples.len() < pairs_per_cell {
                let i = by_class[a][rng.random_range(0..by_class[a].len())];
                let j = by_class[b][rng.random_range(0..by_class[b].len())];
                if i == j {
                    continue;
                }
                samples.push(js_distance_base(row(i), row(j), base)?);
            }
            let (mean, se) = mean_and_se(&samples);
            values[a * k + b] = mean;
            std_err[a * k + b] = se;
        }
    }
    Ok(RhoMatrix {
        classes: k,
        values,
        std_err,
        counts: vec![pairs_per_cell; k * k],
        seed,
        source_hash: data.hash(),
        ensemble_hash: ens.hash(),
        log_base: base,
    })
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Label the record was pushed towards: the target, or the attained label for
/// untargeted records.
pub fn record_target(r: &AdversarialRecord) -> usize {
    r.y_target.unwrap_or(r.prediction)
}

pub fn js_delta_from_probs(p_src: &[f64], p_adv: &[f64], rho: &RhoMatrix, y_src: usize, y_target: usize) -> Result<f64> {
    let cell = rho.cell(y_src, y_target)?;
    Ok(js_distance_base(p_src, p_adv, rho.log_base)? / cell)
}

pub fn js_delta(ens: &Ensemble, rho: &RhoMatrix, record: &AdversarialRecord) -> Result<f64> {
    Ok(js_deltas(ens, rho, std::slice::from_ref(record))?[0])
}

/// JS_Δ of every record, evaluating the ensemble in batches.
pub fn js_deltas(ens: &Ensemble, rho: &RhoMatrix, records: &[AdversarialRecord]) -> Result<Vec<f64>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let d = first.x_src.len();
    let k = rho.classes;
    let src: Vec<f64> = records.iter().flat_map(|r| r.x_src.iter().copied()).collect();
    let adv: Vec<f64> = records.iter().flat_map(|r| r.x_adv.iter().copied()).collect();
    let ps = ensemble_probs_rows(ens, &src, d)?;
    let pa = ensemble_probs_rows(ens, &adv, d)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            js_delta_from_probs(&ps[i * k..(i + 1) * k], &pa[i * k..(i + 1) * k], rho, r.y_src, record_target(r))
        })
        .collect()
}

/// Fills `js_delta` on each record.
pub fn annotate_js_delta(ens: &Ensemble, rho: &RhoMatrix, records: &mut [AdversarialRecord]) -> Result<()> {
    let v = js_deltas(ens, rho, records)?;
    for (r, d) in records.iter_mut().zip(v) {
        r.js_delta = Some(d);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionConfig {
    pub betas: Vec<f64>,
    pub bins: usize,
    /// Upper histogram edge; larger values land in the last bin.
    pub upper: f64,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.01, 0.05, 0.10],
            bins: 40,
            upper: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub recipe: String,
    pub epsilon: f64,
    pub robust_acc: f64,
    pub values: Vec<f64>,
    pub betas: Vec<f64>,
    pub fractions: Vec<f64>,
    pub bin_edges: Vec<f64>,
    /// Bin counts divided by the number of values.
    pub histogram: Vec<f64>,
    pub clamped: usize,
}

impl CompositionReport {
    pub fn fraction_below(&self, beta: f64) -> f64 {
        fraction_below(&self.values, beta)
    }
}

fn fraction_below(values: &[f64], beta: f64) -> f64 {
    values.iter().filter(|v| **v < beta).count() as f64 / values.len() as f64
}

pub fn composition_report(
    values: &[f64],
    robust_acc: f64,
    epsilon: f64,
    recipe: &str,
    cfg: &CompositionConfig,
) -> Result<CompositionReport> {
    if values.is_empty() {
        return Err(Error::EmptyReport);
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric("JS_Δ values must be finite and nonnegative".into()));
    }
    if cfg.bins == 0 || cfg.upper <= 0.0 {
        return Err(Error::Config("histogram needs positive bins and upper edge".into()));
    }
    let width = cfg.upper / cfg.bins as f64;
    let mut counts = vec![0usize; cfg.bins];
    let mut clamped = 0;
    for &v in values {
        if v > cfg.upper {
            clamped += 1;
        }
        counts[((v / width) as usize).min(cfg.bins - 1)] += 1;
    }
    let n = values.len() as f64;
    Ok(CompositionReport {
        recipe: recipe.to_string(),
        epsilon,
        robust_acc,
        values: values.to_vec(),
        betas: cfg.betas.clone(),
        fractions: cfg.betas.iter().map(|&b| fraction_below(values, b)).collect(),
        bin_edges: (0..=cfg.bins).map(|i| i as f64 * width).collect(),
        histogram: counts.iter().map(|&c| c as f64 / n).collect(),
        clamped,
    })
}

fn composition_header(betas: &[f64]) -> Vec<String> {
    let mut h = header(&["epsilon", "robust_acc"]);
    h.extend(betas.iter().map(|b| format!("frac_lt_{b:.2}")));
    h
}

fn composition_row(r: &CompositionReport) -> Vec<String> {
    let mut row = vec![fmt_real(r.epsilon), fmt_real(r.robust_acc)];
    row.extend(r.fractions.iter().map(|&f| fmt_real(f)));
    row
}

impl Report for CompositionReport {
    fn csv_header(&self) -> Vec<String> {
        composition_header(&self.betas)
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        vec![composition_row(self)]
    }

    fn svg(&self) -> Option<String> {
        let bars: Vec<(String, f64)> = self
            .histogram
            .iter()
            .zip(&self.bin_edges)
            .map(|(h, e)| (format!("{e:.2}"), *h))
            .collect();
        Some(svg_bar_chart(
            &format!("JS_Δ, {} at ε = {:.4}", self.recipe, self.epsilon),
            &bars,
        ))
    }
}

/// One composition row per attack strength.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub reports: Vec<CompositionReport>,
}

impl Report for CompositionTable {
    fn csv_header(&self) -> Vec<String> {
        let betas = self.reports.first().map(|r| r.betas.clone()).unwrap_or_else(|| CompositionConfig::default().betas);
        composition_header(&betas)
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.reports.iter().map(composition_row).collect()
    }
}

/// Prediction tallies of one invariance row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRow {
    pub row: String,
    pub acc_target: f64,
    pub acc_src: f64,
    pub acc_other: f64,
    /// `[== target, == source, other]` per record.
    pub tallies: Vec<[usize; 3]>,
}

/// Predicts `f0` on `trials` augmented copies of every `x_adv` and tallies
/// the outcomes against the record's target and source labels.
pub fn invariance_eval(
    f0: &ModelParams,
    records: &[AdversarialRecord],
    aug: &AugmentConfig,
    trials: usize,
    seed: u64,
    row: &str,
) -> Result<InvarianceRow> {
    if records.is_empty() || trials == 0 {
        return Err(Error::EmptyReport);
    }
    let shape = f0.arch.input;
    let d = f0.arch.input_len();
    let mut xs = Vec::with_capacity(records.len() * trials * d);
    for (i, r) in records.iter().enumerate() {
        let mut rng = stream(seed, i as u64);
        for _ in 0..trials {
            xs.extend(augment(&r.x_adv, shape, aug, &mut rng));
        }
    }
    let preds = predict_rows(f0, &xs, d)?;
    let tallies: Vec<[usize; 3]> = records
        .iter()
        .zip(preds.chunks(trials))
        .map(|(r, p)| {
            let target = record_target(r);
            let mut t = [0usize; 3];
            for &y in p {
                let slot = if y == target {
                    0
                } else if y == r.y_src {
                    1
                } else {
                    2
                };
                t[slot] += 1;
            }
            t
        })
        .collect();
    let total = (records.len() * trials) as f64;
    let share = |slot: usize| tallies.iter().map(|t| t[slot]).sum::<usize>() as f64 / total;
    Ok(InvarianceRow {
        row: row.to_string(),
        acc_target: share(0),
        acc_src: share(1),
        acc_other: share(2),
        tallies,
    })
}

/// Fraction of augmented clean draws that keep the true label.
pub fn augmentation_retention(
    f0: &ModelParams,
    data: &LabeledDataset,
    aug: &AugmentConfig,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let d = data.dim();
    let mut xs = Vec::with_capacity(data.len() * trials * d);
    for i in 0..data.len() {
        let mut rng = stream(seed, i as u64);
        for _ in 0..trials {
            xs.extend(augment(data.sample(i), data.shape, aug, &mut rng));
        }
    }
    let preds = predict_rows(f0, &xs, d)?;
    let hits = preds.iter().enumerate().filter(|(j, p)| **p == data.labels[j / trials]).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn predict_rows(f0: &ModelParams, x: &[f64], d: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.len() / d);
    for chunk in x.chunks(CHUNK * d) {
        out.extend(predict(f0, &batch_tensor(f0.arch.input, chunk, chunk.len() / d)?)?);
    }
    Ok(out)
}

/// Four-row table: `X_adv`, `T(X_adv)`, `X⊥_adv`, `T(X⊥_adv)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvarianceTable {
    pub rows: Vec<InvarianceRow>,
}

pub fn invariance_table(
    f0: &ModelParams,
    vanilla: &[AdversarialRecord],
    perp: &[AdversarialRecord],
    aug: &AugmentConfig,
    trials: usize,
    seed: u64,
) -> Result<InvarianceTable> {
    let id = AugmentConfig::identity();
    Ok(InvarianceTable {
        rows: vec![
            invariance_eval(f0, vanilla, &id, 1, seed, "X_adv")?,
            invariance_eval(f0, vanilla, aug, trials, seed, "T(X_adv)")?,
            invariance_eval(f0, perp, &id, 1, seed, "X_perp_adv")?,
            invariance_eval(f0, perp, aug, trials, seed, "T(X_perp_adv)")?,
        ],
    })
}

impl Report for InvarianceTable {
    fn csv_header(&self) -> Vec<String> {
        header(&["row", "acc_target", "acc_src", "acc_other"])
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| vec![r.row.clone(), fmt_real(r.acc_target), fmt_real(r.acc_src), fmt_real(r.acc_other)])
            .collect()
    }

    fn svg(&self) -> Option<String> {
        let bars = self.rows.iter().map(|r| (r.row.clone(), r.acc_target)).collect::<Vec<_>>();
        Some(svg_bar_chart("share of draws keeping the target label", &bars))
    }
}

/// Per-sample cross-entropy of `params` on the rows of `x`.
pub fn per_sample_loss(params: &ModelParams, x: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    let d = params.arch.input_len();
    let k = params.arch.classes;
    let mut out = Vec::with_capacity(labels.len());
    for (chunk, ys) in x.chunks(CHUNK * d).zip(labels.chunks(CHUNK)) {
        let z = logits(params, &batch_tensor(params.arch.input, chunk, ys.len())?)?;
        for (row, &y) in z.data().chunks(k).zip(ys) {
            out.push(log_sum_exp(row) - row[y]);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub grid_n: usize,
    pub radius: f64,
    pub alphas: Vec<f64>,
    /// Row-major: row index follows `α₁`, column index `α₂`.
    pub losses: Vec<f64>,
    pub label: Option<String>,
}

impl LandscapeGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.grid_n + j]
    }

    pub fn center(&self) -> f64 {
        let c = self.grid_n / 2;
        self.at(c, c)
    }
}

impl Report for LandscapeGrid {
    fn csv_header(&self) -> Vec<String> {
        header(&["alpha1", "alpha2", "loss"])
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        let n = self.grid_n;
        (0..n * n)
            .map(|idx| {
                vec![
                    fmt_real(self.alphas[idx / n]),
                    fmt_real(self.alphas[idx % n]),
                    fmt_real(self.losses[idx]),
                ]
            })
            .collect()
    }

    fn svg(&self) -> Option<String> {
        let title = self.label.clone().unwrap_or_else(|| "loss landscape".into());
        Some(svg_heat_grid(&title, self.grid_n, &self.losses))
    }
}

/// Two orthogonal Gaussian directions of ℓ2 norm `radius·sqrt(d)`.
pub fn landscape_directions(d: usize, radius: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream(seed, 0);
    let mut e1: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut e2: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n1 = l2(&e1);
    e1.iter_mut().for_each(|v| *v /= n1);
    let dot: f64 = e1.iter().zip(&e2).map(|(a, b)| a * b).sum();
    e2.iter_mut().zip(&e1).for_each(|(b, a)| *b -= dot * a);
    let n2 = l2(&e2);
    let scale = radius * (d as f64).sqrt();
    e1.iter_mut().for_each(|v| *v *= scale);
    e2.iter_mut().for_each(|v| *v *= scale / n2);
    (e1, e2)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Evaluates `loss_rows` on `x + α₁ε₁ + α₂ε₂` for `α₁, α₂` on a `grid_n`-point grid over `[−1, 1]`.
pub fn landscape_grid(
    loss_rows: impl Fn(&[f64], usize) -> Result<Vec<f64>>,
    x: &[f64],
    radius: f64,
    grid_n: usize,
    seed: u64,
) -> Result<LandscapeGrid> {
    if grid_n % 2 == 0 {
        return Err(Error::Config(format!("grid_n must be odd, got {grid_n}")));
    }
    let d = x.len();
    let (e1, e2) = landscape_directions(d, radius, seed);
    let alphas: Vec<f64> = if grid_n == 1 {
        vec![0.0]
    } else {
        let half = (grid_n / 2) as f64;
        (0..grid_n).map(|i| (i as f64 - half) / half).collect()
    };
    let mut points = Vec::with_capacity(grid_n * grid_n * d);
    for &a1 in &alphas {
        for &a2 in &alphas {
            points.extend((0..d).map(|p| x[p] + a1 * e1[p] + a2 * e2[p]));
        }
    }
    let losses = loss_rows(&points, grid_n * grid_n)?;
    Ok(LandscapeGrid {
        grid_n,
        radius,
        alphas,
        losses,
        label: None,
    })
}

pub fn loss_landscape(f0: &ModelParams, x: &[f64], y_eval: usize, radius: f64, grid_n: usize, seed: u64) -> Result<LandscapeGrid> {
    landscape_grid(|pts, n| per_sample_loss(f0, pts, &vec![y_eval; n]), x, radius, grid_n, seed)
}

/// Mean loss increase over `n_dirs` random ℓ2 unit directions at distance `radius`, one value per row of `x`.
pub fn sharpness_proxies(f0: &ModelParams, x: &[f64], labels: &[usize], radius: f64, n_dirs: usize, seed: u64) -> Result<Vec<f64>> {
    if n_dirs < 8 {
        return Err(Error::Config(format!("sharpness needs at least 8 directions, got {n_dirs}")));
    }
    let d = f0.arch.input_len();
    let base = per_sample_loss(f0, x, labels)?;
    let mut out = Vec::with_capacity(labels.len());
    for (i, (row, &y)) in x.chunks(d).zip(labels).enumerate() {
        let mut rng = stream(seed, i as u64);
        let mut pts = Vec::with_capacity(n_dirs * d);
        for _ in 0..n_dirs {
            let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = l2(&u);
            pts.extend(row.iter().zip(&u).map(|(a, b)| a + radius * b / n));
        }
        let l = per_sample_loss(f0, &pts, &vec![y; n_dirs])?;
        out.push(l.iter().map(|v| v - base[i]).sum::<f64>() / n_dirs as f64);
    }
    Ok(out)
}

pub fn sharpness_proxy(f0: &ModelParams, x: &[f64], y_eval: usize, radius: f64, n_dirs: usize, seed: u64) -> Result<f64> {
    Ok(sharpness_proxies(f0, x, &[y_eval], radius, n_dirs, seed)?[0])
}

/// A map `φ: X → R^k` with gradients of `Σ_i φ(x_i)[y_i]`.
pub trait FeatureMap {
    fn dim(&self) -> usize;
    fn classes(&self) -> usize;
    /// Row-major `n × classes` values.
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn picked_grad(&self, x: &[f64], labels: &[usize]) -> Result<Vec<f64>>;
}

/// The logits of a model.
impl FeatureMap for ModelParams {
    fn dim(&self) -> usize {
        self.arch.input_len()
    }

    fn classes(&self) -> usize {
        self.arch.classes
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = Vec::new();
        for chunk in x.chunks(CHUNK * d) {
            out.extend_from_slice(logits(self, &batch_tensor(self.arch.input, chunk, chunk.len() / d)?)?.data());
        }
        Ok(out)
    }

    fn picked_grad(&self, x: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
        input_gradient(self.arch.input, x, labels.len(), |tape, vx| {
            let f = forward_graph(tape, self, vx, false)?;
            let p = tape.pick(f.logits, labels)?;
            tape.sum(p)
        })
        .map(|(_, g)| g)
    }
}

/// The watermark probe of each class.
impl FeatureMap for Watermarks {
    fn dim(&self) -> usize {
        self.score_gradient(0).len()
    }

    fn classes(&self) -> usize {
        Watermarks::classes(self)
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let k = Watermarks::classes(self);
        Ok(x.chunks(self.dim()).flat_map(|row| (0..k).map(move |c| self.score(row, c))).collect())
    }

    fn picked_grad(&self, _x: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
        Ok(labels.iter().flat_map(|&y| self.score_gradient(y)).collect())
    }
}

fn picked(phi: &dyn FeatureMap, x: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    let k = phi.classes();
    let v = phi.eval(x)?;
    Ok(labels.iter().enumerate().map(|(i, &y)| v[i * k + y]).collect())
}

/// Mean of `φ(x)[y]` over the dataset.
pub fn usefulness(phi: &dyn FeatureMap, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let v = picked(phi, &data.inputs, &data.labels)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean of the smallest `φ(x+δ)[y]` found by signed-gradient descent inside
/// the ℓ∞ ball of radius `epsilon` and the `[0,1]` box. The clean point is
/// always a candidate.
pub fn robust_usefulness(phi: &dyn FeatureMap, data: &LabeledDataset, epsilon: f64, steps: usize, step_size: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = data.dim();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(CHUNK) {
        let src: Vec<f64> = chunk.iter().flat_map(|&i| data.sample(i).iter().copied()).collect();
        let labels = data.batch_labels(chunk);
        let mut best = picked(phi, &src, &labels)?;
        if epsilon > 0.0 {
            let mut x = src.clone();
            for _ in 0..steps {
                let g = phi.picked_grad(&x, &labels)?;
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= step_size * gi.signum() * (*gi != 0.0) as u8 as f64;
                }
                project(&mut x, &src, epsilon);
                let v = picked(phi, &x, &labels)?;
                best.iter_mut().zip(v).for_each(|(b, v)| *b = b.min(v));
            }
        }
        debug_assert_eq!(best.len() * d, src.len());
        total += best.iter().sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// One-sided Welch test of `mean(a) > mean(b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

pub fn welch_greater(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData {
            class: if a.len() < 2 { 0 } else { 1 },
            count: a.len().min(b.len()),
            needed: 2,
        });
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    let se = (sa + sb).sqrt();
    if se == 0.0 {
        return Err(Error::Numeric("both samples are constant".into()));
    }
    let t = (ma - mb) / se;
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(WelchTest {
        mean_a: ma,
        mean_b: mb,
        n_a: a.len(),
        n_b: b.len(),
        t,
        df,
        p_value: 1.0 - dist.cdf(t),
    })
}

/// Mean and sample standard deviation of the successful perturbation norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmnRow {
    pub model_tag: String,
    pub mean_l2: f64,
    pub std_l2: f64,
    pub mean_linf: f64,
    pub std_linf: f64,
    pub count: usize,
}

impl FmnRow {
    pub fn from_norms(model_tag: &str, l2s: &[f64], linfs: &[f64]) -> Result<Self> {
        if l2s.is_empty() {
            return Err(Error::EmptyReport);
        }
        let sd = |v: &[f64]| {
            let (m, se) = mean_and_se(v);
            (m, se * (v.len() as f64).sqrt())
        };
        let (mean_l2, std_l2) = sd(l2s);
        let (mean_linf, std_linf) = sd(linfs);
        Ok(Self {
            model_tag: model_tag.to_string(),
            mean_l2,
            std_l2,
            mean_linf,
            std_linf,
            count: l2s.len(),
        })
    }

    pub fn from_records(model_tag: &str, records: &[AdversarialRecord]) -> Result<Self> {
        let ok: Vec<&AdversarialRecord> = records.iter().filter(|r| r.success).collect();
        let l2s: Vec<f64> = ok.iter().map(|r| r.l2).collect();
        let linfs: Vec<f64> = ok.iter().map(|r| r.linf).collect();
        Self::from_norms(model_tag, &l2s, &linfs)
    }

    pub fn from_outcomes(model_tag: &str, outcomes: &[FmnOutcome]) -> Result<Self> {
        let ok = outcomes.iter().filter(|o| o.success);
        let l2s: Vec<f64> = ok.clone().filter_map(|o| o.l2).collect();
        let linfs: Vec<f64> = ok.filter_map(|o| o.linf).collect();
        Self::from_norms(model_tag, &l2s, &linfs)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FmnReport {
    pub rows: Vec<FmnRow>,
}

impl Report for FmnReport {
    fn csv_header(&self) -> Vec<String> {
        header(&["model_tag", "mean_l2", "std_l2", "mean_linf", "std_linf"])
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.model_tag.clone(),
                    fmt_real(r.mean_l2),
                    fmt_real(r.std_l2),
                    fmt_real(r.mean_linf),
                    fmt_real(r.std_linf),
                ]
            })
            .collect()
    }

    fn svg(&self) -> Option<String> {
        let bars = self.rows.iter().map(|r| (r.model_tag.clone(), r.mean_l2)).collect::<Vec<_>>();
        Some(svg_bar_chart("mean minimum ℓ2 perturbation", &bars))
    }
}
