//! In-browser lab: a small synthetic dataset, a linear classifier `f0`, a
//! three-member ensemble, and targeted PGD with JS_Δ scoring.

use bugscope::attacks::{attack_batch, AttackConfig, AttackFamily, TargetRule};
use bugscope::autograd::Tensor;
use bugscope::data::report::svg_image_grid;
use bugscope::data::{gen_synthetic, LabeledDataset, SyntheticConfig};
use bugscope::metrics::{estimate_rho, js_delta, js_distance_base, RhoMatrix};
use bugscope::models::{forward_probs, ArchitectureSpec, Ensemble, EnsembleSpace, ModelParams, Recipe};
use bugscope::trainer::{evaluate, train, AugmentConfig, TrainConfig};
use bugscope::{Error, Result};
use serde_json::json;
use wasm_bindgen::prelude::*;

pub struct Lab {
    f0: ModelParams,
    ensemble: Ensemble,
    rho: RhoMatrix,
    test: LabeledDataset,
    accuracy: f64,
}

fn fit(arch: &ArchitectureSpec, data: &LabeledDataset, seed: u64) -> Result<ModelParams> {
    let cfg = TrainConfig {
        epochs: 12,
        lr: 0.1,
        lr_decay: vec![(8, 0.1)],
        augment: AugmentConfig::identity(),
        seed,
        ..TrainConfig::for_recipe(Recipe::Sgd)
    };
    Ok(train(arch, data, &cfg, None)?.params)
}

impl Lab {
    pub fn build(seed: u64) -> Result<Self> {
        let (train_set, test) = gen_synthetic(&SyntheticConfig {
            samples_per_class: 40,
            test_per_class: 8,
            seed,
            ..SyntheticConfig::default()
        })?;
        let arch = ArchitectureSpec::linear(train_set.shape, train_set.classes);
        let f0 = fit(&arch, &train_set, seed)?;
        let members = (1..=3).map(|i| fit(&arch, &train_set, seed + i)).collect::<Result<Vec<_>>>()?;
        let ensemble = Ensemble::new(members, EnsembleSpace::Prob)?;
        let rho = estimate_rho(&ensemble, &test, 16, seed)?;
        let accuracy = evaluate(&f0, &test)?;
        Ok(Self {
            f0,
            ensemble,
            rho,
            test,
            accuracy,
        })
    }

    pub fn summary_json(&self) -> String {
        json!({
            "classes": self.test.classes,
            "test_samples": self.test.len(),
            "accuracy": self.accuracy,
            "rho_diagonal": self.rho.mean_diagonal(),
            "rho_off_diagonal": self.rho.mean_off_diagonal(),
        })
        .to_string()
    }

    fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(forward_probs(&self.f0, &t)?.into_data())
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.test.len() {
            return Err(Error::Config(format!("index {index} out of range 0..{}", self.test.len())));
        }
        Ok(())
    }

    pub fn sample_json(&self, index: usize) -> Result<String> {
        self.check_index(index)?;
        let x = self.test.sample(index);
        let [_, h, w] = self.test.shape;
        Ok(json!({
            "label": self.test.labels[index],
            "probs": self.probs(x)?,
            "svg": svg_image_grid(&[x], h, w, 1),
        })
        .to_string())
    }

    /// Targeted PGD from test sample `index` toward `target` within an
    /// ℓ∞ ball of radius `epsilon`.
    pub fn attack_json(&self, index: usize, target: usize, epsilon: f64, steps: usize) -> Result<String> {
        self.check_index(index)?;
        let cfg = AttackConfig {
            steps,
            target_rule: TargetRule::Explicit(vec![target]),
            targets_per_source: 1,
            ..AttackConfig::pgd(AttackFamily::PgdTargeted, epsilon)
        };
        let rec = attack_batch(&self.f0, None, &self.test, &[index], &cfg)?.remove(0);
        let js = js_delta(&self.ensemble, &self.rho, &rec)?;
        let diff: Vec<f64> = rec
            .x_adv
            .iter()
            .zip(&rec.x_src)
            .map(|(a, s)| 0.5 + (a - s) / (2.0 * epsilon.max(1e-12)))
            .collect();
        let [_, h, w] = self.test.shape;
        Ok(json!({
            "source_label": rec.y_src,
            "target": target,
            "success": rec.success,
            "prediction": rec.prediction,
            "probs": self.probs(&rec.x_adv)?,
            "linf": rec.linf,
            "l2": rec.l2,
            "js_delta": js,
            "svg": svg_image_grid(&[&rec.x_src, &rec.x_adv, &diff], h, w, 3),
        })
        .to_string())
    }
}

/// Parses comma- or space-separated weights and normalizes them to sum 1.
pub fn parse_distribution(text: &str) -> Result<Vec<f64>> {
    let v = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("`{t}` is not a number"))))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = v.iter().sum();
    if v.is_empty() || v.iter().any(|x| *x < 0.0 || !x.is_finite()) || total <= 0.0 {
        return Err(Error::Config("weights must be nonnegative with a positive sum".into()));
    }
    Ok(v.into_iter().map(|x| x / total).collect())
}

pub fn js_json(p: &str, q: &str) -> Result<String> {
    let (p, q) = (parse_distribution(p)?, parse_distribution(q)?);
    Ok(json!({
        "p": p,
        "q": q,
        "nats": js_distance_base(&p, &q, std::f64::consts::E)?,
        "bits": js_distance_base(&p, &q, 2.0)?,
    })
    .to_string())
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = Lab)]
pub struct WebLab(Lab);

#[wasm_bindgen(js_class = Lab)]
impl WebLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<WebLab, JsError> {
        Lab::build(seed as u64).map(WebLab).map_err(js_err)
    }

    pub fn summary(&self) -> String {
        self.0.summary_json()
    }

    pub fn sample(&self, index: usize) -> std::result::Result<String, JsError> {
        self.0.sample_json(index).map_err(js_err)
    }

    pub fn attack(&self, index: usize, target: usize, eps_255: f64, steps: usize) -> std::result::Result<String, JsError> {
        self.0.attack_json(index, target, eps_255 / 255.0, steps).map_err(js_err)
    }
}

#[wasm_bindgen(js_name = jsDistance)]
pub fn js_distance(p: &str, q: &str) -> std::result::Result<String, JsError> {
    js_json(p, q).map_err(js_err)
}
