//! Architectures, seeded initialization, forward passes and seed ensembles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{softmax_into, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv { out_channels: usize, kernel: usize },
    AvgPool { size: usize },
    Flatten,
    Dense { units: usize },
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Sample shape `(channels, height, width)`.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub classes: usize,
    /// Index of the layer whose output is the penultimate representation.
    pub penultimate: usize,
}

impl ArchitectureSpec {
    /// flatten → dense 256 → relu → dense 128 → relu → dense k.
    pub fn mlp_s(input: [usize; 3], classes: usize) -> Self {
        Self {
            name: "mlp-s".into(),
            input,
            layers: vec![
                Layer::Flatten,
                Layer::Dense { units: 256 },
                Layer::Relu,
                Layer::Dense { units: 128 },
                Layer::Relu,
                Layer::Dense { units: classes },
            ],
            classes,
            penultimate: 4,
        }
    }

    /// conv 8@3×3 → relu → pool → conv 16@3×3 → relu → pool → dense 128 → relu → dense k.
    pub fn cnn_s(input: [usize; 3], classes: usize) -> Self {
        Self {
            name: "cnn-s".into(),
            input,
            layers: vec![
                Layer::Conv {
                    out_channels: 8,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::AvgPool { size: 2 },
                Layer::Conv {
                    out_channels: 16,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::AvgPool { size: 2 },
                Layer::Flatten,
                Layer::Dense { units: 128 },
                Layer::Relu,
                Layer::Dense { units: classes },
            ],
            classes,
            penultimate: 8,
        }
    }

    /// Softmax regression; the penultimate representation is the raw input.
    pub fn linear(input: [usize; 3], classes: usize) -> Self {
        Self {
            name: "linear".into(),
            input,
            layers: vec![Layer::Flatten, Layer::Dense { units: classes }],
            classes,
            penultimate: 0,
        }
    }

    pub fn by_name(name: &str, input: [usize; 3], classes: usize) -> Result<Self> {
        match name {
            "mlp-s" => Ok(Self::mlp_s(input, classes)),
            "cnn-s" => Ok(Self::cnn_s(input, classes)),
            "linear" => Ok(Self::linear(input, classes)),
            other => Err(Error::Spec(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Per-layer output shapes (excluding the batch axis).
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.classes < 2 {
            return Err(Error::Spec("need at least two classes".into()));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!("degenerate input shape {:?}", self.input)));
        }
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                } => {
                    if shape.len() != 3 || kernel % 2 == 0 || out_channels == 0 {
                        return Err(Error::Spec(format!("layer {i}: bad conv on {shape:?}")));
                    }
                    vec![out_channels, shape[1], shape[2]]
                }
                Layer::AvgPool { size } => {
                    if shape.len() != 3 || size == 0 || shape[1] % size != 0 || shape[2] % size != 0 {
                        return Err(Error::Spec(format!("layer {i}: bad pool on {shape:?}")));
                    }
                    vec![shape[0], shape[1] / size, shape[2] / size]
                }
                Layer::Flatten => vec![shape.iter().product()],
                Layer::Dense { units } => {
                    if shape.len() != 1 || units == 0 {
                        return Err(Error::Spec(format!("layer {i}: dense needs a flat input")));
                    }
                    vec![units]
                }
                Layer::Relu => shape,
            };
            out.push(shape.clone());
        }
        match self.layers.last() {
            Some(Layer::Dense { units }) if *units == self.classes => {}
            _ => {
                return Err(Error::Spec(format!(
                    "last layer must be dense with {} units",
                    self.classes
                )))
            }
        }
        if self.penultimate + 1 >= self.layers.len() {
            return Err(Error::Spec(format!(
                "penultimate index {} does not address a hidden layer",
                self.penultimate
            )));
        }
        if out[self.penultimate].len() != 1 {
            return Err(Error::Spec("penultimate representation must be flat".into()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.output_shapes().map(|_| ())
    }

    pub fn penultimate_width(&self) -> Result<usize> {
        Ok(self.output_shapes()?[self.penultimate][0])
    }

    /// Names and shapes of trainable tensors, in forward order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.output_shapes()?;
        let mut prev = self.input.to_vec();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                } => {
                    out.push((format!("layer{i}.weight"), vec![out_channels, prev[0], kernel, kernel]));
                    out.push((format!("layer{i}.bias"), vec![out_channels]));
                }
                Layer::Dense { units } => {
                    out.push((format!("layer{i}.weight"), vec![prev[0], units]));
                    out.push((format!("layer{i}.bias"), vec![units]));
                }
                _ => {}
            }
            prev = shapes[i].clone();
        }
        Ok(out)
    }

    /// Stable hex digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    Sgd,
    Sam,
    Adv,
    RobustDataset,
}

impl Recipe {
    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Sgd => "sgd",
            Recipe::Sam => "sam",
            Recipe::Adv => "adv",
            Recipe::RobustDataset => "robust-dataset",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Recipe::Sgd),
            "sam" => Ok(Recipe::Sam),
            "adv" => Ok(Recipe::Adv),
            "robust-dataset" => Ok(Recipe::RobustDataset),
            other => Err(Error::Config(format!("unknown recipe `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchitectureSpec,
    pub tensors: Vec<NamedTensor>,
    pub seed: u64,
    pub recipe: Recipe,
}

impl ModelParams {
    pub fn arch_hash(&self) -> String {
        self.arch.hash()
    }

    /// Digest over architecture, seed, recipe and every parameter bit.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch.hash().as_bytes());
        h.update(self.seed.to_le_bytes());
        h.update(self.recipe.as_str().as_bytes());
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let want = self.arch.param_shapes()?;
        if want.len() != self.tensors.len() {
            return Err(Error::Spec(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in want.iter().zip(&self.tensors) {
            if name != &t.name || shape != &t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Spec(format!("parameter {} has wrong shape", t.name)));
            }
        }
        Ok(())
    }

    /// Parameter blocks in forward order.
    pub fn weights(&self) -> Vec<&[f64]> {
        self.tensors.iter().map(|t| t.data.as_slice()).collect()
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.tensors.iter_mut().map(|t| &mut t.data).collect()
    }
}

/// Kaiming-normal weights (std `sqrt(2 / fan_in)`) and zero biases.
pub fn init_model(spec: &ArchitectureSpec, seed: u64, recipe: Recipe) -> Result<ModelParams> {
    let shapes = spec.param_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = shapes
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            NamedTensor { name, shape, data }
        })
        .collect();
    Ok(ModelParams {
        arch: spec.clone(),
        tensors,
        seed,
        recipe,
    })
}

/// Graph handles produced by [`forward_graph`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub penultimate: Var,
    /// One handle per parameter tensor, in `ModelParams::tensors` order.
    pub params: Vec<Var>,
}

fn batch_input(arch: &ArchitectureSpec, tape: &Tape, x: Var) -> Result<Vec<usize>> {
    let s = tape.value(x).shape();
    let per: usize = s[1..].iter().product();
    if s.len() < 2 || per != arch.input_len() {
        return Err(Error::Shape(format!(
            "input {s:?} does not match architecture input {:?}",
            arch.input
        )));
    }
    let mut shape = vec![s[0]];
    shape.extend_from_slice(&arch.input);
    Ok(shape)
}

/// Records the forward pass of `params` on the batch `x`.
///
/// With `track_params` the parameter leaves require gradients.
pub fn forward_graph(
    tape: &mut Tape,
    params: &ModelParams,
    x: Var,
    track_params: bool,
) -> Result<Forward> {
    let arch = &params.arch;
    let shape = batch_input(arch, tape, x)?;
    let mut h = if tape.value(x).shape() == shape.as_slice() {
        x
    } else {
        tape.reshape(x, shape)?
    };
    let mut pvars = Vec::with_capacity(params.tensors.len());
    let mut next = 0;
    let mut penultimate = None;
    let mut take = |tape: &mut Tape| -> Result<Var> {
        let t = &params.tensors[next];
        next += 1;
        let tensor = Tensor::new(t.shape.clone(), t.data.clone())?;
        let v = tape.leaf(tensor.with_requires_grad(track_params))?;
        pvars.push(v);
        Ok(v)
    };
    for (i, layer) in arch.layers.iter().enumerate() {
        h = match layer {
            Layer::Conv { .. } => {
                let w = take(tape)?;
                let b = take(tape)?;
                let c = tape.conv2d(h, w)?;
                tape.add_bias(c, b)?
            }
            Layer::Dense { .. } => {
                let w = take(tape)?;
                let b = take(tape)?;
                let z = tape.matmul(h, w)?;
                tape.add_bias(z, b)?
            }
            Layer::AvgPool { size } => tape.avgpool(h, *size)?,
            Layer::Flatten => tape.flatten(h)?,
            Layer::Relu => tape.relu(h)?,
        };
        if i == arch.penultimate {
            penultimate = Some(h);
        }
    }
    let penultimate =
        penultimate.ok_or_else(|| Error::Spec("penultimate index out of range".into()))?;
    Ok(Forward {
        logits: h,
        penultimate,
        params: pvars,
    })
}

fn constant_input(tape: &mut Tape, x: &Tensor) -> Result<Var> {
    tape.constant(Tensor::new(x.shape().to_vec(), x.data().to_vec())?)
}

pub fn logits(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vx = constant_input(&mut tape, x)?;
    let f = forward_graph(&mut tape, params, vx, false)?;
    Ok(tape.value(f.logits).clone())
}

fn softmax_rows(z: &Tensor) -> Result<Tensor> {
    let k = z.shape()[1];
    let mut out = vec![0.0; z.len()];
    for (src, dst) in z.data().chunks(k).zip(out.chunks_mut(k)) {
        softmax_into(src, dst);
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Class probabilities `softmax(f(x))`, one row per sample.
pub fn forward_probs(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    softmax_rows(&logits(params, x)?)
}

pub fn predict(params: &ModelParams, x: &Tensor) -> Result<Vec<usize>> {
    Ok(logits(params, x)?.argmax_rows())
}

/// Activations at the architecture's penultimate layer.
pub fn penultimate(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    params.arch.validate()?;
    let mut tape = Tape::new();
    let vx = constant_input(&mut tape, x)?;
    let f = forward_graph(&mut tape, params, vx, false)?;
    Ok(tape.value(f.penultimate).clone())
}

/// Whether an ensemble averages member probabilities or member logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleSpace {
    #[default]
    Prob,
    Logit,
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<ModelParams>,
    space: EnsembleSpace,
}

impl Ensemble {
    /// Members must be nonempty and share one architecture.
    pub fn new(members: Vec<ModelParams>, space: EnsembleSpace) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Spec("ensemble needs at least one member".into()))?;
        let h = first.arch_hash();
        if members.iter().any(|m| m.arch_hash() != h) {
            return Err(Error::Spec("ensemble members differ in architecture".into()));
        }
        Ok(Self { members, space })
    }

    /// Checks the seed-ensemble contract: at least two members, distinct
    /// seeds, one training recipe.
    pub fn check_independent(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(Error::Spec("ensemble needs at least two members".into()));
        }
        let mut seeds: Vec<u64> = self.members.iter().map(|m| m.seed).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Spec("ensemble member seeds must be distinct".into()));
        }
        let r = self.members[0].recipe;
        if self.members.iter().any(|m| m.recipe != r) {
            return Err(Error::Spec("ensemble members use different recipes".into()));
        }
        Ok(())
    }

    pub fn members(&self) -> &[ModelParams] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn space(&self) -> EnsembleSpace {
        self.space
    }

    pub fn with_space(mut self, space: EnsembleSpace) -> Self {
        self.space = space;
        self
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.seed).collect()
    }

    pub fn hash(&self) -> String {
        let mut joined = String::new();
        for m in &self.members {
            joined.push_str(&m.hash());
        }
        joined.push_str(match self.space {
            EnsembleSpace::Prob => "prob",
            EnsembleSpace::Logit => "logit",
        });
        hex_digest(joined.as_bytes())
    }

    /// Records `log f̃(x)` on the tape for an input handle `x`.
    pub fn log_probs_graph(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut member_logits = Vec::with_capacity(self.members.len());
        for m in &self.members {
            member_logits.push(forward_graph(tape, m, x, false)?.logits);
        }
        match self.space {
            EnsembleSpace::Prob => tape.mixture_log_probs(&member_logits),
            EnsembleSpace::Logit => {
                let mut acc = member_logits[0];
                for &z in &member_logits[1..] {
                    acc = tape.add(acc, z)?;
                }
                let mean = tape.scale(acc, 1.0 / member_logits.len() as f64)?;
                tape.log_softmax(mean)
            }
        }
    }
}

/// `f̃(x)`: the ensemble's averaged class distribution for each row of `x`.
pub fn ensemble_predict(ens: &Ensemble, x: &Tensor) -> Result<Tensor> {
    if ens.members.is_empty() {
        return Err(Error::Spec("empty ensemble".into()));
    }
    let n = ens.members.len() as f64;
    match ens.space {
        EnsembleSpace::Prob => {
            let mut acc = vec![0.0; x.rows() * ens.members[0].arch.classes];
            for m in &ens.members {
                let p = forward_probs(m, x)?;
                acc.iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
            }
            acc.iter_mut().for_each(|a| *a /= n);
            // Renormalize away accumulated rounding so rows sum to one.
            let k = ens.members[0].arch.classes;
            for row in acc.chunks_mut(k) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::matrix(x.rows(), k, acc)
        }
        EnsembleSpace::Logit => {
            let mut acc: Option<Vec<f64>> = None;
            for m in &ens.members {
                let z = logits(m, x)?;
                match &mut acc {
                    Some(a) => a.iter_mut().zip(z.data()).for_each(|(a, b)| *a += b),
                    None => acc = Some(z.into_data()),
                }
            }
            let mean: Vec<f64> = acc.unwrap().into_iter().map(|v| v / n).collect();
            softmax_rows(&Tensor::matrix(x.rows(), ens.members[0].arch.classes, mean)?)
        }
    }
}
