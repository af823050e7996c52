//! Acceptance suite. Runs the default experiment once (artifacts are cached
//! in the target directory), then checks every criterion and prints one
//! PASS/FAIL line each. Exits nonzero if any criterion fails.
//!
//! `cargo test --release -p bugscope --test acceptance`
//!
//! Environment:
//! - `BUGSCOPE_ACCEPTANCE_OUT`: experiment root (default: target tmp dir)
//! - `BUGSCOPE_ACCEPTANCE_ONLY`: comma-separated criterion numbers

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use bugscope::attacks::{fmn_ensemble, AdversarialRecord, FmnConfig};
use bugscope::autograd::{max_gradient_error, numeric_gradient, Tape, Tensor, Var};
use bugscope::data::LabeledDataset;
use bugscope::metrics::{
    ensemble_probs, estimate_rho_base, js_deltas, js_distance, FmnReport, InvarianceTable, RhoMatrix,
};
use bugscope::models::{
    forward_graph, init_model, ArchitectureSpec, Ensemble, EnsembleSpace, ModelParams, NamedTensor, Recipe,
};
use bugscope::pipeline::{
    Experiment, ExperimentConfig, JsValues, RatioReport, RecordSet, ReplicationReport, SharpnessReport,
};
use bugscope::trainer::{train, TrainConfig};
use bugscope::{stream, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

// ---- 1: gradients ----

#[derive(Clone, Debug)]
enum Step {
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    Bias(usize, usize),
}

#[derive(Clone, Debug)]
enum Reduce {
    Sum,
    Mean,
    L2,
    CrossEntropy(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Graph {
    leaves: Vec<Vec<usize>>,
    steps: Vec<Step>,
    reduce: Reduce,
}

fn random_graph(rng: &mut impl Rng) -> Graph {
    let r = rng.random_range(1..=4);
    let c = rng.random_range(2..=5);
    let m = rng.random_range(2..=5);
    let mut leaves = vec![vec![r, c], vec![c, m]];
    // node 0 is the product of the first two leaves
    let mut shapes = vec![vec![r, m]];
    let mut steps = vec![Step::Matmul(usize::MAX, 1)];
    for _ in 0..rng.random_range(3..=8) {
        let src = rng.random_range(0..shapes.len());
        let shape = shapes[src].clone();
        let partner = |rng: &mut dyn rand::RngCore| {
            let same: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i] == shape).collect();
            same[rng.random_range(0..same.len())]
        };
        let (step, out) = match rng.random_range(0..9) {
            0 => {
                let m2 = rng.random_range(2..=5);
                leaves.push(vec![shape[1], m2]);
                (Step::Matmul(src, leaves.len() - 1), vec![shape[0], m2])
            }
            1 => (Step::Add(src, partner(rng)), shape),
            2 => (Step::Sub(src, partner(rng)), shape),
            3 => (Step::Mul(src, partner(rng)), shape),
            4 => (Step::Relu(src), shape),
            5 => (Step::Scale(src, rng.random_range(-2.0..2.0)), shape),
            6 => (Step::Softmax(src), shape),
            7 => (Step::LogSoftmax(src), shape),
            _ => {
                leaves.push(vec![shape[1]]);
                (Step::Bias(src, leaves.len() - 1), shape)
            }
        };
        steps.push(step);
        shapes.push(out);
    }
    let last = shapes.last().unwrap().clone();
    let reduce = match rng.random_range(0..4) {
        0 => Reduce::Sum,
        1 => Reduce::Mean,
        2 => Reduce::L2,
        _ => Reduce::CrossEntropy((0..last[0]).map(|_| rng.random_range(0..last[1])).collect()),
    };
    Graph { leaves, steps, reduce }
}

fn build(g: &Graph, data: &[Vec<f64>]) -> Result<(Tape, Vec<Var>, Var)> {
    let mut t = Tape::new();
    let leaves = g
        .leaves
        .iter()
        .zip(data)
        .map(|(s, d)| t.param(Tensor::new(s.clone(), d.clone())?))
        .collect::<Result<Vec<_>>>()?;
    let mut nodes: Vec<Var> = Vec::new();
    for step in &g.steps {
        let v = match *step {
            Step::Matmul(usize::MAX, l) => t.matmul(leaves[0], leaves[l])?,
            Step::Matmul(a, l) => t.matmul(nodes[a], leaves[l])?,
            Step::Add(a, b) => t.add(nodes[a], nodes[b])?,
            Step::Sub(a, b) => t.sub(nodes[a], nodes[b])?,
            Step::Mul(a, b) => t.mul(nodes[a], nodes[b])?,
            Step::Relu(a) => t.relu(nodes[a])?,
            Step::Scale(a, f) => t.scale(nodes[a], f)?,
            Step::Softmax(a) => t.softmax(nodes[a])?,
            Step::LogSoftmax(a) => t.log_softmax(nodes[a])?,
            Step::Bias(a, l) => t.add_bias(nodes[a], leaves[l])?,
        };
        nodes.push(v);
    }
    let last = *nodes.last().unwrap();
    let loss = match &g.reduce {
        Reduce::Sum => t.sum(last)?,
        Reduce::Mean => t.mean(last)?,
        Reduce::L2 => t.l2norm(last)?,
        Reduce::CrossEntropy(labels) => t.cross_entropy(last, labels)?,
    };
    Ok((t, leaves, loss))
}

fn graph_error(g: &Graph, data: &[Vec<f64>]) -> Result<f64> {
    let (mut t, leaves, loss) = build(g, data)?;
    t.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (slot, v) in leaves.iter().enumerate() {
        let mut f = |p: &[f64]| {
            let mut d = data.to_vec();
            d[slot] = p.to_vec();
            let (t, _, l) = build(g, &d).expect("graph rebuilds");
            t.value(l).data()[0]
        };
        let num = numeric_gradient(&mut f, &data[slot], 1e-5);
        // leaves off the path to the loss have no gradient entry
        let zeros = vec![0.0; num.len()];
        let analytic = t.grad(*v).unwrap_or(&zeros);
        worst = worst.max(max_gradient_error(analytic, &num, 1e-6));
    }
    Ok(worst)
}

/// Loss gradient of `m` on a two-sample batch, checked on a sample of
/// coordinates of every parameter tensor and of the input.
fn model_error(m: &ModelParams, rng: &mut impl Rng, coords: usize) -> Result<f64> {
    let d = m.arch.input_len();
    let x: Vec<f64> = (0..2 * d).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels = [rng.random_range(0..m.arch.classes), rng.random_range(0..m.arch.classes)];
    let loss = |m: &ModelParams, x: &[f64]| -> Result<(Tape, Var, Vec<Var>, Var)> {
        let mut t = Tape::new();
        let vx = t.param(Tensor::matrix(2, d, x.to_vec())?)?;
        let fwd = forward_graph(&mut t, m, vx, true)?;
        let l = t.cross_entropy(fwd.logits, &labels)?;
        Ok((t, vx, fwd.params, l))
    };
    let (mut t, vx, vps, l) = loss(m, &x)?;
    t.backward(l)?;
    let eval = |m: &ModelParams, x: &[f64]| {
        let (t, _, _, l) = loss(m, x).expect("forward");
        t.value(l).data()[0]
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: &[f64], f: &mut dyn FnMut(usize, f64) -> f64, n: usize, rng: &mut dyn rand::RngCore| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(coords);
        let a: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        let num: Vec<f64> = idx.iter().map(|&i| (f(i, h) - f(i, -h)) / (2.0 * h)).collect();
        worst = worst.max(max_gradient_error(&a, &num, 1e-6));
    };
    for (k, v) in vps.iter().enumerate() {
        let n = m.tensors[k].data.len();
        let mut f = |i: usize, step: f64| {
            let mut p = m.clone();
            p.tensors[k].data[i] += step;
            eval(&p, &x)
        };
        check(t.grad(*v).unwrap(), &mut f, n, rng);
    }
    let mut f = |i: usize, step: f64| {
        let mut xp = x.clone();
        xp[i] += step;
        eval(m, &xp)
    };
    check(t.grad(vx).unwrap(), &mut f, 2 * d, rng);
    Ok(worst)
}

fn c1_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = stream(1, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let g = random_graph(&mut rng);
        let data: Vec<Vec<f64>> = g
            .leaves
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        worst = worst.max(graph_error(&g, &data)?);
    }
    let mut arch_err = Vec::new();
    for arch in [ArchitectureSpec::mlp_s([1, 16, 16], 10), ArchitectureSpec::cnn_s([1, 16, 16], 10)] {
        let m = init_model(&arch, 3, Recipe::Sgd)?;
        let e = model_error(&m, &mut rng, 40)?;
        arch_err.push(format!("{} {e:.2e}", arch.name));
        worst = worst.max(e);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("max rel err {worst:.2e} over 50 graphs + {} in {secs:.1}s", arch_err.join(", ")),
    )
}

// ---- 3: metric algebra ----

fn random_distribution(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(0.5, 1.0).unwrap();
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    // some exact zeros exercise the 0·log 0 convention
    if rng.random_bool(0.2) {
        let i = rng.random_range(0..k);
        let mass = p[i];
        p[i] = 0.0;
        p[(i + 1) % k] += mass;
    }
    p
}

fn c3_metric_algebra(exp: &Experiment, test: &LabeledDataset) -> Result<Outcome> {
    let mut rng = stream(3, 0);
    let bound = std::f64::consts::LN_2.sqrt();
    let (mut bounds, mut sym, mut ident, mut tri) = (0, 0, 0, 0);
    for _ in 0..10_000 {
        let k = rng.random_range(2..=10);
        let p = random_distribution(&mut rng, k);
        let q = random_distribution(&mut rng, k);
        let r = random_distribution(&mut rng, k);
        let pq = js_distance(&p, &q)?;
        let qr = js_distance(&q, &r)?;
        let pr = js_distance(&p, &r)?;
        bounds += usize::from(!(0.0..=bound + 1e-15).contains(&pq));
        sym += usize::from((pq - js_distance(&q, &p)?).abs() > 1e-15);
        ident += usize::from(js_distance(&p, &p)? != 0.0);
        tri += usize::from(pr > pq + qr + 1e-12);
    }
    let ens = exp.ensemble(Recipe::Sgd)?;
    let cfg = &exp.config;
    let rho_e = estimate_rho_base(&ens, test, cfg.metric.rho_pairs, cfg.seed, std::f64::consts::E)?;
    let rho_2 = estimate_rho_base(&ens, test, cfg.metric.rho_pairs, cfg.seed, 2.0)?;
    let eps = cfg.attack.grids.sgd[0];
    let (_, recs) = exp.load_records(&Experiment::composition_name(Recipe::Sgd, eps))?;
    let a = js_deltas(&ens, &rho_e, &recs)?;
    let b = js_deltas(&ens, &rho_2, &recs)?;
    let base_gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let same: Vec<AdversarialRecord> = recs
        .iter()
        .map(|r| AdversarialRecord {
            x_adv: r.x_src.clone(),
            ..r.clone()
        })
        .collect();
    let self_nonzero = js_deltas(&ens, &rho_e, &same)?.iter().filter(|v| **v != 0.0).count();
    outcome(
        bounds + sym + ident + tri == 0 && base_gap <= 1e-12 && self_nonzero == 0,
        format!(
            "10000 triples: {bounds} bound, {sym} symmetry, {ident} identity, {tri} triangle failures; \
             log-base gap {base_gap:.1e} over {} records; {self_nonzero} nonzero self distances",
            recs.len()
        ),
    )
}

// ---- 4: ρ consistency ----

fn c4_rho_consistency(ens: &Ensemble, rho: &RhoMatrix, test: &LabeledDataset, seed: u64) -> Result<Outcome> {
    let probs = ensemble_probs(ens, test)?;
    let k = test.classes;
    let by_class: Vec<Vec<usize>> = (0..k).map(|c| test.class_indices(c)).collect();
    let mut rng = stream(seed ^ 0x5eed_0004, 0);
    let pairs = 1000;
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..test.len());
        let a = test.labels[i];
        let mut b = rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        let j = by_class[b][rng.random_range(0..by_class[b].len())];
        let d = js_distance(&probs[i * k..(i + 1) * k], &probs[j * k..(j + 1) * k])?;
        total += d / rho.cell(a, b)?;
    }
    let mean = total / pairs as f64;
    outcome((0.8..=1.2).contains(&mean), format!("mean JS_Δ {mean:.3} over {pairs} clean pairs"))
}

// ---- 5: SAM degeneracy ----

fn c5_sam_degeneracy(train_set: &LabeledDataset) -> Result<Outcome> {
    let arch = ArchitectureSpec::mlp_s(train_set.shape, train_set.classes);
    let base = TrainConfig {
        epochs: 5,
        seed: 5,
        ..TrainConfig::for_recipe(Recipe::Sgd)
    };
    let sgd = train(&arch, train_set, &base, None)?;
    let sam = train(
        &arch,
        train_set,
        &TrainConfig {
            recipe: Recipe::Sam,
            sam_rho: 0.0,
            ..base.clone()
        },
        None,
    )?;
    let same_weights = sgd.params.tensors == sam.params.tensors;
    let same_log = sgd
        .log
        .iter()
        .zip(&sam.log)
        .all(|(a, b)| a.train_loss.to_bits() == b.train_loss.to_bits());
    outcome(
        same_weights && same_log,
        format!("weights identical: {same_weights}; per-epoch losses identical: {same_log}"),
    )
}

// ---- 6: FMN oracle ----

fn c6_fmn_oracle() -> Result<Outcome> {
    let d = 16;
    let mut rng = stream(6, 0);
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let center = vec![0.5; d];
    let b = -w.iter().zip(&center).map(|(a, c)| a * c).sum::<f64>();
    let spec = ArchitectureSpec::linear([1, 1, d], 2);
    let mut f0 = init_model(&spec, 0, Recipe::Sgd)?;
    // logits (0, w·x + b), weights stored [in × out]
    let mut data = vec![0.0; d * 2];
    for (i, v) in w.iter().enumerate() {
        data[i * 2 + 1] = *v;
    }
    f0.tensors[0] = NamedTensor {
        name: f0.tensors[0].name.clone(),
        shape: vec![d, 2],
        data,
    };
    f0.tensors[1].data = vec![0.0, b];
    let members = (1..=4).map(|s| ModelParams { seed: s, ..f0.clone() }).collect();
    let ens = Ensemble::new(members, EnsembleSpace::Prob)?;
    let cfg = FmnConfig::default();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < 100 {
        // points whose hyperplane projection stays inside the box
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..0.7)).collect();
        let s = w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b;
        let proj_ok = x.iter().zip(&w).all(|(xi, wi)| (0.0..=1.0).contains(&(xi - s * wi / (wn * wn))));
        if !proj_ok || s.abs() < 1e-3 {
            continue;
        }
        let dist = s.abs() / wn;
        let y = usize::from(s > 0.0);
        let got = fmn_ensemble(&f0, &ens, &x, y, &cfg)?.l2.unwrap_or(f64::INFINITY);
        worst = worst.max((got - dist).abs() / dist);
        n += 1;
    }
    outcome(worst <= 0.05, format!("max relative error {:.4}% on {n} points", 100.0 * worst))
}

// ---- pipeline-backed criteria ----

fn record_set(exp: &Experiment, recipe: Recipe, eps: f64) -> Result<RecordSet> {
    exp.read_json(&Experiment::composition_name(recipe, eps), "attack")
}

fn c2_constraints(exp: &Experiment) -> Result<Outcome> {
    let mut names = Vec::new();
    for r in [Recipe::Sgd, Recipe::Sam, Recipe::Adv, Recipe::RobustDataset] {
        for &e in exp.config.attack.grids.get(r) {
            names.push(Experiment::composition_name(r, e));
        }
    }
    names.push("attacks/invariance/vanilla".into());
    names.push("attacks/invariance/perp".into());
    let (mut generated, mut reported, mut rechecked, mut found) = (0, 0, 0, 0);
    for name in &names {
        let (set, recs) = exp.load_records(name)?;
        generated += set.attempted;
        reported += set.violations;
        for r in &recs {
            rechecked += 1;
            let bad = r.x_adv.iter().zip(&r.x_src).any(|(a, s)| {
                !(0.0..=1.0).contains(a) || (a - s).abs() > set.epsilon * (1.0 + 1e-12) + 1e-12
            });
            found += usize::from(bad);
        }
    }
    outcome(
        generated >= 5000 && reported == 0 && found == 0,
        format!(
            "{generated} records generated over {} sets: {reported} violations; \
             {rechecked} stored records rechecked: {found} violations",
            names.len()
        ),
    )
}

fn fractions(js: &JsValues, beta: f64) -> Vec<f64> {
    js.values
        .iter()
        .map(|v| v.iter().filter(|x| **x < beta).count() as f64 / v.len().max(1) as f64)
        .collect()
}

fn fmt_fracs(eps: &[f64], f: &[f64]) -> String {
    eps.iter()
        .zip(f)
        .map(|(e, v)| format!("{:.0}/255: {:.3}", e * 255.0, v))
        .collect::<Vec<_>>()
        .join(", ")
}

fn c7_composition(exp: &Experiment) -> Result<Outcome> {
    let js: JsValues = exp.read_json("analysis/sgd", "analyze")?;
    let f = fractions(&js, 0.10);
    let counts: Vec<usize> = js.values.iter().map(Vec::len).collect();
    let rises: Vec<f64> = f.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    let monotone = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.03);
    let drop = f[0] - f[f.len() - 1];
    outcome(
        monotone && drop >= 0.20 && counts.iter().all(|c| *c >= 500),
        format!("JS_Δ<0.10 fractions [{}], drop {:.3}, records {counts:?}", fmt_fracs(&js.epsilons, &f), drop),
    )
}

fn shared_eps(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().copied().filter(|x| b.iter().any(|y| (x - y).abs() < 1e-12)).collect()
}

fn frac_at(js: &JsValues, eps: f64, beta: f64) -> f64 {
    let i = js.epsilons.iter().position(|e| (e - eps).abs() < 1e-12).expect("ε in grid");
    fractions(js, beta)[i]
}

fn c8_adversarial_shift(exp: &Experiment) -> Result<Outcome> {
    let e8 = 8.0 / 255.0;
    let adv = record_set(exp, Recipe::Adv, e8)?.robust_acc.unwrap_or(f64::NAN);
    let sgd = record_set(exp, Recipe::Sgd, e8)?.robust_acc.unwrap_or(f64::NAN);
    let js_sgd: JsValues = exp.read_json("analysis/sgd", "analyze")?;
    let js_adv: JsValues = exp.read_json("analysis/adv", "analyze")?;
    let shared = shared_eps(&js_adv.epsilons, &js_sgd.epsilons);
    let small = shared[0];
    let (fa, fs) = (frac_at(&js_adv, small, 0.05), frac_at(&js_sgd, small, 0.05));
    outcome(
        adv - sgd >= 0.30 && fa < fs,
        format!(
            "robust acc at 8/255: adv {adv:.3} vs sgd {sgd:.3} (gap {:.3}); JS_Δ<0.05 at {:.0}/255: adv {fa:.3} vs sgd {fs:.3}",
            adv - sgd,
            small * 255.0
        ),
    )
}

fn c9_invariance(exp: &Experiment) -> Result<Outcome> {
    let t: InvarianceTable = exp.read_json("reports/invariance.json", "analyze")?;
    let row = |name: &str| t.rows.iter().find(|r| r.row == name).cloned();
    let (Some(v), Some(p)) = (row("T(X_adv)"), row("T(X_perp_adv)")) else {
        return outcome(false, "invariance rows missing");
    };
    outcome(
        v.acc_target >= 0.70 && p.acc_src >= 0.60,
        format!(
            "vanilla keeps y_target {:.3} ({} records); ⊥ reverts to y_src {:.3} ({} records)",
            v.acc_target,
            v.tallies.len(),
            p.acc_src,
            p.tallies.len()
        ),
    )
}

fn c10_sam(exp: &Experiment) -> Result<Outcome> {
    let js_sgd: JsValues = exp.read_json("analysis/sgd", "analyze")?;
    let js_sam: JsValues = exp.read_json("analysis/sam", "analyze")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for e in shared_eps(&js_sam.epsilons, &js_sgd.epsilons) {
        let (a, b) = (frac_at(&js_sam, e, 0.05), frac_at(&js_sgd, e, 0.05));
        ok &= a <= 0.5 * b;
        parts.push(format!("{:.0}/255 sam {a:.3} sgd {b:.3}", e * 255.0));
    }
    let fmn: FmnReport = exp.read_json("reports/fmn.json", "fmn")?;
    let l2 = |tag: &str| fmn.rows.iter().find(|r| r.model_tag == tag).map_or(f64::NAN, |r| r.mean_l2);
    let (sgd, sam, adv) = (l2("sgd"), l2("sam"), l2("adv"));
    let comparable = (sam - sgd).abs() <= 0.30 * sgd;
    let larger = adv >= 2.0 * sgd && adv >= 2.0 * sam;
    outcome(
        ok && comparable && larger,
        format!(
            "JS_Δ<0.05 [{}]; FMN mean ℓ2 sgd {sgd:.3} sam {sam:.3} adv {adv:.3}",
            parts.join(", ")
        ),
    )
}

fn c11_sharpness(exp: &Experiment) -> Result<Outcome> {
    let s: SharpnessReport = exp.read_json("reports/sharpness.json", "analyze")?;
    let Some(w) = s.welch.clone() else {
        return outcome(false, format!("no test: {} low, {} high records", s.low.len(), s.high.len()));
    };
    outcome(
        s.low.len() >= 100 && s.high.len() >= 100 && w.mean_a > w.mean_b && w.p_value < 0.01,
        format!(
            "radius {}: low-JS_Δ mean {:.4} (n {}), high-JS_Δ mean {:.4} (n {}), one-sided p {:.3}",
            s.radius, w.mean_a, w.n_a, w.mean_b, w.n_b, w.p_value
        ),
    )
}

fn c12_replication(exp: &Experiment, classes: usize) -> Result<Outcome> {
    let r: ReplicationReport = exp.read_json("reports/replicate.json", "replicate")?;
    let chance = 1.0 / classes as f64;
    let i3 = r.epsilons.iter().position(|e| (e - 3.0 / 255.0).abs() < 1e-12).expect("3/255 in grid");
    let get = |n: &str| r.row(n).cloned().expect("replication row");
    let (det, perp, dr, sgd, adv) = (get("det"), get("det_perp"), get("R"), get("sgd"), get("adv"));
    let a = det.clean_acc >= 1.5 * chance;
    let b = perp.clean_acc <= 1.2 * chance;
    let (lo, hi) = (sgd.robust_acc[i3], adv.robust_acc[i3]);
    let c = dr.robust_acc[i3] > lo.min(hi) && dr.robust_acc[i3] < lo.max(hi) && lo < hi;
    outcome(
        a && b && c,
        format!(
            "D_det clean {:.3} [{}], D⊥_det clean {:.3} [{}], D_R robust@3/255 {:.3} vs sgd {lo:.3} / adv {hi:.3} [{}]",
            det.clean_acc,
            if a { "ok" } else { "fail" },
            perp.clean_acc,
            if b { "ok" } else { "fail" },
            dr.robust_acc[i3],
            if c { "ok" } else { "fail" },
        ),
    )
}

fn c13_second_order(exp: &Experiment) -> Result<Outcome> {
    let r: RatioReport = exp.read_json("reports/distill-ratio.json", "distill")?;
    let (nr, dr, drp) = (
        r.get("NR").unwrap_or(f64::NAN),
        r.get("R").unwrap_or(f64::NAN),
        r.get("R'").unwrap_or(f64::NAN),
    );
    let a = dr < drp;
    let b = (drp - nr).abs() < (drp - dr).abs();
    outcome(
        a && b && r.samples >= 500,
        format!(
            "r(D_NR) {nr:.4}, r(D_R) {dr:.4}, r(D_R') {drp:.4} over {} triplets; r(D_R)<r(D_R') {a}, closer to D_NR {b}",
            r.samples
        ),
    )
}

fn c14_determinism(exp: &Experiment, root: &PathBuf) -> Result<Outcome> {
    let rerun_root = root.join("rerun");
    let mut again = Experiment::open(exp.config.clone(), &rerun_root, true)?;
    again.run_all()?;
    let a = exp.manifest().hashes();
    let b = again.manifest().hashes();
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let extra = b.keys().filter(|k| !a.contains_key(*k)).count();
    outcome(
        differing.is_empty() && extra == 0,
        format!(
            "{} artifacts compared, {} differ{}",
            a.len(),
            differing.len() + extra,
            differing.first().map(|d| format!(" (first: {d})")).unwrap_or_default()
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> = std::env::var("BUGSCOPE_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let root = std::env::var("BUGSCOPE_ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));

    let mut results: Vec<(usize, &str, Result<Outcome>)> = Vec::new();
    if wanted(1) {
        results.push((1, "gradient correctness", c1_gradients()));
    }
    if wanted(6) {
        results.push((6, "FMN oracle", c6_fmn_oracle()));
    }

    let needs_pipeline = (2..=14).filter(|n| *n != 6).any(wanted);
    if needs_pipeline {
        let start = Instant::now();
        let opened = Experiment::open(ExperimentConfig::default(), &root, false).and_then(|mut e| {
            e.run_all()?;
            Ok(e)
        });
        eprintln!("pipeline ready in {:.0}s", start.elapsed().as_secs_f64());
        match opened {
            Err(e) => {
                for n in (2..=14).filter(|n| *n != 6 && wanted(*n)) {
                    results.push((n, "pipeline", Err(bugscope::Error::Config(format!("pipeline failed: {e}")))));
                }
            }
            Ok(exp) => {
                let data = exp.split("test").and_then(|t| Ok((t, exp.split("train")?)));
                let (test, train_set) = data.expect("splits load");
                if wanted(2) {
                    results.push((2, "attack constraints", c2_constraints(&exp)));
                }
                if wanted(3) {
                    results.push((3, "metric algebra", c3_metric_algebra(&exp, &test)));
                }
                if wanted(4) {
                    let r = exp.ensemble(Recipe::Sgd).and_then(|ens| {
                        let rho: RhoMatrix = exp.read_json("rho/sgd", "analyze")?;
                        c4_rho_consistency(&ens, &rho, &test, exp.config.seed)
                    });
                    results.push((4, "rho consistency", r));
                }
                if wanted(5) {
                    results.push((5, "SAM degeneracy", c5_sam_degeneracy(&train_set)));
                }
                let checks: [(usize, &str, fn(&Experiment) -> Result<Outcome>); 6] = [
                    (7, "composition trend", c7_composition),
                    (8, "adversarial-training shift", c8_adversarial_shift),
                    (9, "invariance", c9_invariance),
                    (10, "SAM effect", c10_sam),
                    (11, "sharpness link", c11_sharpness),
                    (13, "second-order robust dataset", c13_second_order),
                ];
                for (n, name, f) in checks {
                    if wanted(n) {
                        results.push((n, name, f(&exp)));
                    }
                }
                if wanted(12) {
                    results.push((12, "distillation replication", c12_replication(&exp, test.classes)));
                }
                if wanted(14) {
                    results.push((14, "determinism", c14_determinism(&exp, &root)));
                }
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, r) in &results {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("criterion {n:>2} {:<4} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
