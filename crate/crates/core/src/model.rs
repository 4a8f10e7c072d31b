//! Multilayer perceptron with hand-written backpropagation and the local
//! client optimizers (SGD, SGD with weight decay, Adam, FedProx term).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::math::{self, gemm, Layout, LayoutEntry, MatRef, ParamVec};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// Layer widths and hidden nonlinearity of an MLP.
///
/// Parameters are packed per layer as the `[out, in]` row-major weight
/// matrix followed by the `[out]` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpArch {
    dims: Vec<usize>,
    activation: Activation,
    layout: Layout,
}

impl MlpArch {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(
                "an MLP needs at least input and output dimensions",
            ));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        let mut entries = Vec::with_capacity(2 * (dims.len() - 1));
        for (l, w) in dims.windows(2).enumerate() {
            entries.push(LayoutEntry::new(format!("fc{l}.weight"), vec![w[1], w[0]]));
            entries.push(LayoutEntry::new(format!("fc{l}.bias"), vec![w[1]]));
        }
        Ok(MlpArch {
            dims,
            activation: Activation::Relu,
            layout: Layout::new(entries),
        })
    }

    /// 784–128–64–10 ReLU network used for MNIST.
    pub fn mnist() -> Self {
        MlpArch::new(vec![784, 128, 64, 10]).expect("static dims are valid")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.numel()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, stream: &mut RngStream) -> ParamVec {
        let mut params = ParamVec::zeros(self.layout.clone());
        let values = params.values_mut();
        let mut at = 0;
        for w in self.dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            for v in &mut values[at..at + fan_in * fan_out] {
                *v = stream.uniform_range(-bound, bound);
            }
            at += fan_in * fan_out + fan_out;
        }
        params
    }

    fn check_params(&self, params: &ParamVec) -> Result<()> {
        if params.layout() != &self.layout {
            return Err(Error::invalid(
                "parameter layout does not match the architecture",
            ));
        }
        Ok(())
    }

    /// Slices of the weight matrix and bias of layer `l`.
    fn layer<'a>(&self, params: &'a [f64], l: usize) -> (&'a [f64], &'a [f64]) {
        let mut at = 0;
        for w in self.dims.windows(2).take(l) {
            at += w[0] * w[1] + w[1];
        }
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let weight = &params[at..at + n_in * n_out];
        let bias = &params[at + n_in * n_out..at + n_in * n_out + n_out];
        (weight, bias)
    }

    /// Forward pass keeping pre-activations of every layer.
    fn forward(&self, params: &[f64], inputs: &[f64], rows: usize) -> Result<Vec<Vec<f64>>> {
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (weight, bias) = self.layer(params, l);
            let mut z = Vec::with_capacity(rows * n_out);
            for _ in 0..rows {
                z.extend_from_slice(bias);
            }
            {
                let input: &[f64] = if l == 0 { inputs } else { pre.last().unwrap() };
                let activated;
                let a = if l == 0 {
                    input
                } else {
                    activated = input.iter().map(|&x| relu(x)).collect::<Vec<_>>();
                    &activated[..]
                };
                gemm(
                    1.0,
                    MatRef::row_major(a, rows, n_in),
                    MatRef::row_major(weight, n_out, n_in).t(),
                    1.0,
                    &mut z,
                );
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::overflow(format!("layer {l} pre-activations")));
            }
            pre.push(z);
        }
        Ok(pre)
    }

    pub(crate) fn pre_activations(
        &self,
        params: &ParamVec,
        inputs: &[f64],
        rows: usize,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_params(params)?;
        self.forward(params.values(), inputs, rows)
    }

    /// Class scores for `rows` inputs stored row-major in `inputs`.
    pub fn logits(&self, params: &ParamVec, inputs: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let mut pre = self.forward(params.values(), inputs, rows)?;
        Ok(pre.pop().unwrap())
    }

    /// Mean softmax cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, params: &ParamVec, batch: &Batch<'_>) -> Result<(f64, ParamVec)> {
        self.check_params(params)?;
        if batch.input_dim != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has input dimension {} but the model expects {}",
                batch.input_dim,
                self.input_dim()
            )));
        }
        let classes = self.num_classes();
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let rows = batch.len();
        let p = params.values();
        let pre = self.forward(p, batch.inputs, rows)?;

        let logits = pre.last().unwrap();
        let inv_rows = 1.0 / rows as f64;
        let mut loss = 0.0;
        let mut delta = vec![0.0; rows * classes];
        for r in 0..rows {
            let z = &logits[r * classes..(r + 1) * classes];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &v in z {
                total += math::exp(v - max);
            }
            let log_norm = max + math::ln(total);
            let y = batch.labels[r];
            loss += log_norm - z[y];
            let d = &mut delta[r * classes..(r + 1) * classes];
            for (dv, &v) in d.iter_mut().zip(z) {
                *dv = math::exp(v - log_norm) * inv_rows;
            }
            d[y] -= inv_rows;
        }
        loss *= inv_rows;
        if !loss.is_finite() {
            return Err(Error::overflow("output layer loss"));
        }

        let mut grad = ParamVec::zeros(self.layout.clone());
        let g = grad.values_mut();
        let offsets = self.layout.offsets();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w_at = offsets[2 * l];
            let b_at = offsets[2 * l + 1];
            let activated;
            let a: &[f64] = if l == 0 {
                batch.inputs
            } else {
                activated = pre[l - 1].iter().map(|&x| relu(x)).collect::<Vec<_>>();
                &activated
            };
            // dW = deltaᵀ · a
            gemm(
                1.0,
                MatRef::row_major(&delta, rows, n_out).t(),
                MatRef::row_major(a, rows, n_in),
                0.0,
                &mut g[w_at..w_at + n_out * n_in],
            );
            let gb = &mut g[b_at..b_at + n_out];
            for r in 0..rows {
                for (b, d) in gb.iter_mut().zip(&delta[r * n_out..(r + 1) * n_out]) {
                    *b += d;
                }
            }
            if l > 0 {
                let (weight, _) = self.layer(p, l);
                let mut back = vec![0.0; rows * n_in];
                gemm(
                    1.0,
                    MatRef::row_major(&delta, rows, n_out),
                    MatRef::row_major(weight, n_out, n_in),
                    0.0,
                    &mut back,
                );
                for (b, &z) in back.iter_mut().zip(&pre[l - 1]) {
                    if z <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        grad.check_finite("gradient")?;
        Ok((loss, grad))
    }

    /// Mean cross-entropy of `params` over a whole dataset.
    pub fn dataset_loss(&self, params: &ParamVec, data: &Dataset) -> Result<f64> {
        let (loss, _) = self.loss_and_grad(params, &data.as_batch()?)?;
        Ok(loss)
    }

    /// Fraction of argmax-correct predictions; ties go to the lowest class.
    pub fn evaluate(&self, params: &ParamVec, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        if data.input_dim() != self.input_dim() {
            return Err(Error::invalid(
                "dataset input dimension does not match the model",
            ));
        }
        const CHUNK: usize = 500;
        let classes = self.num_classes();
        let mut correct = 0usize;
        let mut start = 0;
        while start < data.len() {
            let end = (start + CHUNK).min(data.len());
            let rows = end - start;
            let logits = self.logits(params, data.input_rows(start, end), rows)?;
            for r in 0..rows {
                if argmax(&logits[r * classes..(r + 1) * classes]) == data.label(start + r) {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// An MLP architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub arch: MlpArch,
    pub params: ParamVec,
}

impl MlpModel {
    pub fn new(arch: MlpArch, params: ParamVec) -> Result<Self> {
        arch.check_params(&params)?;
        Ok(MlpModel { arch, params })
    }

    pub fn loss_and_grad(&self, batch: &Batch<'_>) -> Result<(f64, ParamVec)> {
        self.arch.loss_and_grad(&self.params, batch)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        self.arch.evaluate(&self.params, data)
    }
}

/// Borrowed minibatch: row-major inputs and their labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    inputs: &'a [f64],
    labels: &'a [usize],
    input_dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [f64], labels: &'a [usize], input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::invalid(format!(
                "{} inputs do not form {} rows of width {input_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &'a [f64] {
        self.inputs
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    SgdWd,
    Adam,
}

/// Local optimizer `g(·)` with its learning rate and the FedProx strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub eta: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Proximal coefficient μ; zero disables the FedProx term.
    pub prox_mu: f64,
}

impl OptimizerSpec {
    pub fn sgd(eta: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            eta,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            prox_mu: 0.0,
        }
    }

    pub fn sgd_wd(eta: f64, weight_decay: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::SgdWd,
            weight_decay,
            ..OptimizerSpec::sgd(eta)
        }
    }

    pub fn adam(eta: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            ..OptimizerSpec::sgd(eta)
        }
    }

    pub fn with_prox(self, mu: f64) -> Self {
        OptimizerSpec {
            prox_mu: mu,
            ..self
        }
    }

    /// `eta = 0` is accepted here (it freezes the client); configuration
    /// layers that divide by `eta` reject it themselves.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("optimizer: {what}")));
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad("eta must be a finite non-negative number");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be non-negative");
        }
        if self.kind == OptimizerKind::Sgd && self.weight_decay != 0.0 {
            return bad("plain sgd takes no weight_decay; use sgd_wd");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.prox_mu >= 0.0) || !self.prox_mu.is_finite() {
            return bad("prox_mu must be non-negative");
        }
        Ok(())
    }
}

/// Local training of one client, starting from the distributed global model.
///
/// Runs `epochs` passes over the shard in minibatches, reshuffling each
/// epoch from `stream`. Optimizer state starts fresh on every call.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    arch: &MlpArch,
    w_global: &ParamVec,
    data: &Dataset,
    shard: &ClientShard,
    opt: &OptimizerSpec,
    epochs: usize,
    batch_size: usize,
    mut stream: RngStream,
) -> Result<ParamVec> {
    if batch_size < 1 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if shard.is_empty() {
        return Err(Error::invalid(format!(
            "client {} has an empty shard",
            shard.client_id
        )));
    }
    opt.validate()?;
    arch.check_params(w_global)?;

    let dim = data.input_dim();
    let mut w = w_global.clone();
    let mut adam = match opt.kind {
        OptimizerKind::Adam => Some(AdamState::new(w.len())),
        _ => None,
    };
    let mut order = shard.indices.clone();
    let mut inputs = Vec::with_capacity(batch_size * dim);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        stream.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            inputs.clear();
            labels.clear();
            for &i in chunk {
                inputs.extend_from_slice(data.input(i));
                labels.push(data.label(i));
            }
            let batch = Batch::new(&inputs, &labels, dim)?;
            let (_, mut grad) = arch.loss_and_grad(&w, &batch)?;
            augment_gradient(&mut grad, &w, w_global, opt);
            match adam.as_mut() {
                Some(state) => state.step(&mut w, &grad, opt),
                None => sgd_step(&mut w, &grad, opt.eta),
            }
        }
        w.check_finite(&format!("client {} parameters", shard.client_id))?;
    }
    Ok(w)
}

/// Adds the L2 weight-decay and FedProx proximal terms to a loss gradient.
pub fn augment_gradient(grad: &mut ParamVec, w: &ParamVec, anchor: &ParamVec, opt: &OptimizerSpec) {
    let wd = if opt.kind == OptimizerKind::Sgd {
        0.0
    } else {
        opt.weight_decay
    };
    let g = grad.values_mut();
    if wd != 0.0 {
        for (gi, &wi) in g.iter_mut().zip(w.values()) {
            *gi += wd * wi;
        }
    }
    if opt.prox_mu != 0.0 {
        for ((gi, &wi), &ai) in g.iter_mut().zip(w.values()).zip(anchor.values()) {
            *gi += opt.prox_mu * (wi - ai);
        }
    }
}

fn sgd_step(w: &mut ParamVec, grad: &ParamVec, eta: f64) {
    for (wi, &gi) in w.values_mut().iter_mut().zip(grad.values()) {
        *wi -= eta * gi;
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, w: &mut ParamVec, grad: &ParamVec, opt: &OptimizerSpec) {
        self.t += 1;
        let (b1, b2) = (opt.adam_beta1, opt.adam_beta2);
        let c1 = 1.0 - libm::pow(b1, self.t as f64);
        let c2 = 1.0 - libm::pow(b2, self.t as f64);
        for (((wi, &gi), m), v) in w
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *wi -= opt.eta * m_hat / (math::sqrt(v_hat) + opt.adam_eps);
        }
    }
}
