use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Operation kinds reachable through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Relu,
    Conv2d,
    AvgPool(usize),
    Flatten,
    Softmax,
    Log,
    Sum,
    Mean,
    L2Norm,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
        out_channels: usize,
    },
    AvgPool(Var, usize),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    Pick(Var, Vec<usize>),
    MixtureLogProbs(Vec<Var>, Vec<Vec<f64>>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass and replays it in reverse for gradients.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it. A tape supports a single [`Tape::backward`] call; use
/// [`Tape::reset`] to start a new graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated into a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor; gradients are tracked if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        if !tensor.all_finite() {
            return Err(Error::Numeric("non-finite leaf value".into()));
        }
        let rg = tensor.requires_grad();
        Ok(self.record(tensor, Op::Leaf, rg))
    }

    /// Adds a constant (never differentiated) input.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Adds a differentiable input.
    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    fn record(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        // Operations whose inputs are all constant are stored without their
        // backward rule.
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        Ok(self.record(value, op, rg))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Dispatches by kind; `Conv2d` expects `[input, weight]`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::Conv2d => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Shape(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::Conv2d => self.conv2d(inputs[0], inputs[1]),
            OpKind::AvgPool(s) => self.avgpool(inputs[0], s),
            OpKind::Flatten => self.flatten(inputs[0]),
            OpKind::Softmax => self.softmax(inputs[0]),
            OpKind::Log => self.log(inputs[0]),
            OpKind::Sum => self.sum(inputs[0]),
            OpKind::Mean => self.mean(inputs[0]),
            OpKind::L2Norm => self.l2norm(inputs[0]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{name} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    /// Adds a per-feature bias along axis 1, broadcast over the batch axis
    /// and any trailing spatial axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias);
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape(format!("add_bias {sx:?} + {sb:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let bd = self.data(bias);
        let mut out = self.data(x).to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bd[(i / inner) % c];
        }
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", Tensor::new(sx, out)?, Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = Tensor::new(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|v| v * factor).collect(),
        )?;
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::new(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|&v| v.max(0.0)).collect(),
        )?;
        let rg = self.rg(&[x]);
        self.push("relu", t, Op::Relu(x), rg)
    }

    /// Stride-1 convolution with zero "same" padding and an odd square kernel.
    /// `x` is `B×C×H×W`, `weight` is `O×C×K×K`.
    pub fn conv2d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0
        {
            return Err(Error::Shape(format!("conv2d input {sx:?} weight {sw:?}")));
        }
        let geom = ConvGeom {
            batch: sx[0],
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
        };
        let o = sw[0];
        let cols = im2col(self.data(x), geom);
        let p = geom.positions();
        let mut out_mat = vec![0.0; p * o];
        gemm(p, geom.patch_len(), o, &cols, false, self.data(weight), true, &mut out_mat, false);
        let hw = geom.height * geom.width;
        let mut out = vec![0.0; p * o];
        for b in 0..geom.batch {
            for s in 0..hw {
                let row = (b * hw + s) * o;
                for ch in 0..o {
                    out[(b * o + ch) * hw + s] = out_mat[row + ch];
                }
            }
        }
        let rg = self.rg(&[x, weight]);
        let cols = if rg { cols } else { Vec::new() };
        let t = Tensor::new(vec![geom.batch, o, geom.height, geom.width], out)?;
        self.push(
            "conv2d",
            t,
            Op::Conv2d {
                input: x,
                weight,
                cols,
                geom,
                out_channels: o,
            },
            rg,
        )
    }

    /// Non-overlapping average pooling over `size×size` windows of a 4-D input.
    pub fn avgpool(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] % size != 0 || s[3] % size != 0 {
            return Err(Error::Shape(format!("avgpool {size} on {s:?}")));
        }
        let (oh, ow) = (s[2] / size, s[3] / size);
        let xd = self.data(x);
        let norm = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        for plane in 0..s[0] * s[1] {
            let src = &xd[plane * s[2] * s[3]..(plane + 1) * s[2] * s[3]];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for di in 0..size {
                        for dj in 0..size {
                            acc += src[(i * size + di) * s[3] + j * size + dj];
                        }
                    }
                    out[(plane * oh + i) * ow + j] = acc * norm;
                }
            }
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push("avgpool", t, Op::AvgPool(x, size), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(shape)?;
        let t = Tensor::new(t.shape().to_vec(), t.into_data())?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// Collapses all non-batch axes.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let rows = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![rows, rest])
    }

    fn last_axis(&self, x: Var) -> (usize, usize) {
        let s = self.shape(x);
        let k = *s.last().unwrap();
        (self.data(x).len() / k, k)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.last_axis(x);
        let xd = self.data(x);
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            softmax_into(&xd[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k]);
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.last_axis(x);
        let xd = self.data(x);
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            let row = &xd[r * k..(r + 1) * k];
            let lse = log_sum_exp(row);
            for (o, v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(&[x]);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("log_softmax", t, Op::LogSoftmax(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::new(
            self.shape(x).to_vec(),
            self.data(x).iter().map(|v| v.ln()).collect(),
        )?;
        let rg = self.rg(&[x]);
        self.push("log", t, Op::Log(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(&[x]);
        self.push("l2norm", Tensor::scalar(s), Op::L2Norm(x), rg)
    }

    /// Selects `x[b, index[b]]` from a 2-D input, giving a length-B vector.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != index.len() {
            return Err(Error::Shape(format!(
                "pick {} indices from {s:?}",
                index.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(Error::Shape(format!("index {bad} out of range for {k} columns")));
        }
        let xd = self.data(x);
        let out: Vec<f64> = index.iter().enumerate().map(|(b, &i)| xd[b * k + i]).collect();
        let rg = self.rg(&[x]);
        self.push("pick", Tensor::vector(out), Op::Pick(x, index.to_vec()), rg)
    }

    /// `log((1/N) Σ_i softmax(z_i))` for N equally shaped logit matrices,
    /// computed without leaving log space.
    pub fn mixture_log_probs(&mut self, members: &[Var]) -> Result<Var> {
        let first = *members.first().ok_or(Error::EmptyBatch)?;
        let shape = self.shape(first).to_vec();
        if shape.len() != 2 || members.iter().any(|&m| self.shape(m) != shape.as_slice()) {
            return Err(Error::Shape("mixture members must share a 2-D shape".into()));
        }
        let (rows, k) = (shape[0], shape[1]);
        let n = members.len();
        let ln_n = (n as f64).ln();
        let mut log_sm: Vec<Vec<f64>> = Vec::with_capacity(n);
        for &m in members {
            let zd = self.data(m);
            let mut ls = vec![0.0; rows * k];
            for r in 0..rows {
                let row = &zd[r * k..(r + 1) * k];
                let lse = log_sum_exp(row);
                for (o, v) in ls[r * k..(r + 1) * k].iter_mut().zip(row) {
                    *o = v - lse;
                }
            }
            log_sm.push(ls);
        }
        let mut out = vec![0.0; rows * k];
        let mut col = vec![0.0; n];
        for (idx, o) in out.iter_mut().enumerate() {
            for (c, ls) in col.iter_mut().zip(&log_sm) {
                *c = ls[idx];
            }
            *o = log_sum_exp(&col) - ln_n;
        }
        let probs = log_sm
            .into_iter()
            .map(|ls| ls.into_iter().map(f64::exp).collect())
            .collect();
        let rg = self.rg(members);
        let t = Tensor::matrix(rows, k, out)?;
        self.push(
            "mixture_log_probs",
            t,
            Op::MixtureLogProbs(members.to_vec(), probs),
            rg,
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_labels(logits, labels)?;
        let lsm = self.log_softmax(logits)?;
        self.nll(lsm, labels)
    }

    /// Cross-entropy of a probability-averaged ensemble given member logits.
    pub fn mixture_cross_entropy(&mut self, members: &[Var], labels: &[usize]) -> Result<Var> {
        let first = *members.first().ok_or(Error::EmptyBatch)?;
        self.check_labels(first, labels)?;
        let lp = self.mixture_log_probs(members)?;
        self.nll(lp, labels)
    }

    fn check_labels(&self, logits: Var, labels: &[usize]) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for logits of shape {s:?}",
                labels.len()
            )));
        }
        Ok(())
    }

    fn nll(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let picked = self.pick(log_probs, labels)?;
        let m = self.mean(picked)?;
        self.scale(m, -1.0)
    }

    /// Reverse-mode sweep from a scalar `loss`; leaf gradients accumulate
    /// and are read with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Shape("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut leaf_grads);
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let nodes = &self.nodes;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => leaf_grads.push((i, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, val(*b), true, &mut da, false);
                    send(*a, da);
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, &g, false, &mut db, false);
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.iter().map(|v| -v).collect());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                send(*a, da);
                send(*b, db);
            }
            Op::AddBias(x, bias) => {
                let s = nodes[x.0].value.shape();
                let inner: usize = s[2..].iter().product();
                let c = s[1];
                let mut db = vec![0.0; c];
                for (idx, v) in g.iter().enumerate() {
                    db[(idx / inner) % c] += v;
                }
                send(*bias, db);
                send(*x, g);
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::Conv2d {
                input,
                weight,
                cols,
                geom,
                out_channels,
            } => {
                let o = *out_channels;
                let p = geom.positions();
                let plen = geom.patch_len();
                let hw = geom.height * geom.width;
                let mut gm = vec![0.0; p * o];
                for b in 0..geom.batch {
                    for s in 0..hw {
                        for ch in 0..o {
                            gm[(b * hw + s) * o + ch] = g[(b * o + ch) * hw + s];
                        }
                    }
                }
                if nodes[weight.0].requires_grad {
                    let mut dw = vec![0.0; o * plen];
                    gemm(o, p, plen, &gm, true, cols, false, &mut dw, false);
                    send(*weight, dw);
                }
                if nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; p * plen];
                    gemm(p, o, plen, &gm, false, val(*weight), false, &mut dcols, false);
                    send(*input, col2im(&dcols, *geom));
                }
            }
            Op::AvgPool(x, size) => {
                let s = nodes[x.0].value.shape();
                let (oh, ow) = (s[2] / size, s[3] / size);
                let norm = 1.0 / (size * size) as f64;
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for plane in 0..s[0] * s[1] {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g[(plane * oh + i) * ow + j] * norm;
                            for di in 0..*size {
                                for dj in 0..*size {
                                    dx[plane * s[2] * s[3] + (i * size + di) * s[3] + j * size + dj] =
                                        gv;
                                }
                            }
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g),
            Op::Softmax(x) => {
                let p = nodes[i].value.data();
                let k = *nodes[i].value.shape().last().unwrap();
                let mut dx = vec![0.0; p.len()];
                for r in 0..p.len() / k {
                    let (pr, gr) = (&p[r * k..(r + 1) * k], &g[r * k..(r + 1) * k]);
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dx[r * k + j] = pr[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let out = nodes[i].value.data();
                let k = *nodes[i].value.shape().last().unwrap();
                let mut dx = vec![0.0; out.len()];
                for r in 0..out.len() / k {
                    let gr = &g[r * k..(r + 1) * k];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..k {
                        dx[r * k + j] = gr[j] - out[r * k + j].exp() * gs;
                    }
                }
                send(*x, dx);
            }
            Op::Log(x) => send(*x, g.iter().zip(val(*x)).map(|(a, b)| a / b).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; nodes[x.0].value.len()]),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::L2Norm(x) => {
                let norm = nodes[i].value.data()[0];
                let dx = if norm > 0.0 {
                    val(*x).iter().map(|v| g[0] * v / norm).collect()
                } else {
                    vec![0.0; nodes[x.0].value.len()]
                };
                send(*x, dx);
            }
            Op::Pick(x, index) => {
                let k = nodes[x.0].value.shape()[1];
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for (b, &j) in index.iter().enumerate() {
                    dx[b * k + j] += g[b];
                }
                send(*x, dx);
            }
            Op::MixtureLogProbs(members, probs) => {
                let out = nodes[i].value.data();
                let k = nodes[i].value.shape()[1];
                let inv_n = 1.0 / members.len() as f64;
                // w_j = g_j / P_j, where P = exp(out) is the mixture.
                let w: Vec<f64> = g.iter().zip(out).map(|(gv, lo)| gv * (-lo).exp()).collect();
                for (&m, p) in members.iter().zip(probs) {
                    let mut dz = vec![0.0; p.len()];
                    for r in 0..p.len() / k {
                        let pr = &p[r * k..(r + 1) * k];
                        let wr = &w[r * k..(r + 1) * k];
                        let dot: f64 = pr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        for l in 0..k {
                            dz[r * k + l] = inv_n * pr[l] * (wr[l] - dot);
                        }
                    }
                    send(m, dz);
                }
            }
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}
