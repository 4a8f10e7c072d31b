//! Central finite-difference checks of every analytic derivative in the crate.
//!
//! Each check compares analytic values against `(f(x+h) − f(x−h)) / 2h` with
//! `h = 1e-5` and reports the largest coordinate-wise relative error.

use alloc::vec;
use alloc::vec::Vec;

use crate::aggregation::{fedlaw_loss_and_grad, haw_aggregate};
use crate::data::Dataset;
use crate::error::Result;
use crate::math::{self, softmax, ParamVec};
use crate::model::{augment_gradient, Batch, MlpArch, OptimizerSpec};
use crate::rng::RngStream;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Added to every analytic derivative; a negative control for the suite.
    pub perturb: f64,
}

impl GradcheckOptions {
    pub fn new(seed: u64) -> Self {
        GradcheckOptions { seed, perturb: 0.0 }
    }
}

#[derive(Default)]
struct Tally {
    worst: f64,
    count: usize,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.worst = self.worst.max(rel_err(analytic, numeric));
        self.count += 1;
    }

    fn finish(self, name: &'static str) -> CheckResult {
        CheckResult {
            name,
            max_rel_err: self.worst,
            coordinates: self.count,
        }
    }
}

fn central<F: FnMut(f64) -> Result<Vec<f64>>>(x: f64, mut f: F) -> Result<Vec<f64>> {
    let plus = f(x + FD_STEP)?;
    let minus = f(x - FD_STEP)?;
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * FD_STEP))
        .collect())
}

fn random_vec(stream: &mut RngStream, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * stream.normal()).collect()
}

fn random_models(stream: &mut RngStream, k: usize, len: usize) -> Result<Vec<ParamVec>> {
    (0..k)
        .map(|_| ParamVec::from_slice(&random_vec(stream, len, 1.0)))
        .collect()
}

/// Random parameters and batch whose hidden pre-activations all stay at
/// least `margin` away from the ReLU kink.
fn smooth_fixture(
    arch: &MlpArch,
    stream: &mut RngStream,
    rows: usize,
) -> Result<(ParamVec, Vec<f64>, Vec<usize>)> {
    const MARGIN: f64 = 1e-3;
    loop {
        let mut params = arch.init_params(stream);
        for v in params.values_mut() {
            *v += 0.1 * stream.normal();
        }
        let inputs = random_vec(stream, rows * arch.input_dim(), 1.0);
        let labels: Vec<usize> = (0..rows)
            .map(|_| stream.below(arch.num_classes() as u64) as usize)
            .collect();
        let pre = arch.pre_activations(&params, &inputs, rows)?;
        let hidden = &pre[..pre.len() - 1];
        if hidden.iter().flatten().all(|z| z.abs() >= MARGIN) {
            return Ok((params, inputs, labels));
        }
    }
}

/// Backpropagated MLP gradients against differences of the batch loss.
pub fn check_mlp_backprop(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut stream = RngStream::new(opts.seed, 0x006D_6C70);
    let mut tally = Tally::default();
    for dims in [vec![3, 3, 2], vec![4, 6, 5, 3], vec![5, 8, 4], vec![6, 10]] {
        let arch = MlpArch::new(dims)?;
        let (params, inputs, labels) = smooth_fixture(&arch, &mut stream, 5)?;
        let batch = Batch::new(&inputs, &labels, arch.input_dim())?;
        let (_, grad) = arch.loss_and_grad(&params, &batch)?;
        for i in 0..params.len() {
            let numeric = central(params.values()[i], |x| {
                let mut p = params.clone();
                p.values_mut()[i] = x;
                Ok(vec![arch.loss_and_grad(&p, &batch)?.0])
            })?[0];
            tally.add(grad.values()[i] + opts.perturb, numeric);
        }
    }
    Ok(tally.finish("mlp_backprop"))
}

/// `∂/∂γ [e^γ Σ σ_k(λ) w_k] = e^γ Σ σ_k(λ) w_k`.
pub fn check_eq15_gamma(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut stream = RngStream::new(opts.seed, 0x6571_3135);
    let mut tally = Tally::default();
    for k in [1, 3, 6] {
        let models = random_models(&mut stream, k, 16)?;
        let lambda = random_vec(&mut stream, k, 1.0);
        let gamma = stream.uniform_range(-0.5, 0.5);
        let analytic = haw_aggregate(&models, gamma, &lambda)?;
        let numeric = central(gamma, |g| {
            Ok(haw_aggregate(&models, g, &lambda)?.into_values())
        })?;
        for (a, n) in analytic.values().iter().zip(&numeric) {
            tally.add(a + opts.perturb, *n);
        }
    }
    Ok(tally.finish("eq15_gamma"))
}

/// Diagonal term: `∂/∂λ_k [e^γ σ_k(λ) w_k] = e^γ σ_k (1 − σ_k) w_k` with the
/// other logits held fixed.
pub fn check_eq16_lambda(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut stream = RngStream::new(opts.seed, 0x6571_3136);
    let mut tally = Tally::default();
    for k in [2, 4, 7] {
        let models = random_models(&mut stream, k, 12)?;
        let lambda = random_vec(&mut stream, k, 1.0);
        let gamma = stream.uniform_range(-0.5, 0.5);
        let scale = math::exp(gamma);
        let sigma = softmax(&lambda)?;
        for (j, model) in models.iter().enumerate() {
            let numeric = central(lambda[j], |x| {
                let mut l = lambda.clone();
                l[j] = x;
                let s = softmax(&l)?[j];
                Ok(model.values().iter().map(|w| scale * s * w).collect())
            })?;
            let coef = scale * sigma[j] * (1.0 - sigma[j]);
            for (w, n) in model.values().iter().zip(&numeric) {
                tally.add(coef * w + opts.perturb, *n);
            }
        }
    }
    Ok(tally.finish("eq16_lambda"))
}

/// Full Jacobian of the aggregate in `λ_k`:
/// `e^γ σ_k (w_k − Σ_j σ_j w_j)`, i.e. the diagonal term plus cross terms.
pub fn check_haw_lambda_jacobian(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut stream = RngStream::new(opts.seed, 0x006A_6163);
    let mut tally = Tally::default();
    for k in [2, 5] {
        let models = random_models(&mut stream, k, 10)?;
        let lambda = random_vec(&mut stream, k, 1.0);
        let gamma = stream.uniform_range(-0.5, 0.5);
        let scale = math::exp(gamma);
        let sigma = softmax(&lambda)?;
        let mixed = haw_aggregate(&models, 0.0, &lambda)?;
        for j in 0..k {
            let numeric = central(lambda[j], |x| {
                let mut l = lambda.clone();
                l[j] = x;
                Ok(haw_aggregate(&models, gamma, &l)?.into_values())
            })?;
            for ((w, m), n) in models[j].values().iter().zip(mixed.values()).zip(&numeric) {
                tally.add(scale * sigma[j] * (w - m) + opts.perturb, *n);
            }
        }
    }
    Ok(tally.finish("haw_lambda_jacobian"))
}

/// FedLAW proxy-loss gradients in the log-scale `g` and the logits `λ`.
pub fn check_fedlaw_hypergrad(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut stream = RngStream::new(opts.seed, 0x006C_6177);
    let arch = MlpArch::new(vec![3, 5, 3])?;
    let mut tally = Tally::default();
    let k = 3;
    let (models, proxy) = loop {
        let models: Vec<ParamVec> = (0..k)
            .map(|_| {
                let mut p = arch.init_params(&mut stream);
                for v in p.values_mut() {
                    *v += 0.1 * stream.normal();
                }
                p
            })
            .collect();
        let inputs = random_vec(&mut stream, 8 * 3, 1.0);
        let labels: Vec<usize> = (0..8).map(|_| stream.below(3) as usize).collect();
        let proxy = Dataset::new(inputs, labels, 3, 3)?;
        // keep the aggregate away from ReLU kinks for every perturbation
        let lambda = [0.2, -0.1, 0.4];
        let w = haw_aggregate(&models, 0.1, &lambda)?;
        let pre = arch.pre_activations(&w, proxy.inputs(), proxy.len())?;
        if pre[0].iter().all(|z| z.abs() >= 1e-2) {
            break (models, proxy);
        }
    };
    let gamma = 0.1;
    let lambda = vec![0.2, -0.1, 0.4];
    let (_, dg, dl) = fedlaw_loss_and_grad(&models, gamma, &lambda, &proxy, &arch)?;
    let loss_at =
        |g: f64, l: &[f64]| fedlaw_loss_and_grad(&models, g, l, &proxy, &arch).map(|r| r.0);
    let ng = central(gamma, |g| Ok(vec![loss_at(g, &lambda)?]))?[0];
    tally.add(dg + opts.perturb, ng);
    for j in 0..k {
        let nl = central(lambda[j], |x| {
            let mut l = lambda.clone();
            l[j] = x;
            Ok(vec![loss_at(gamma, &l)?])
        })?[0];
        tally.add(dl[j] + opts.perturb, nl);
    }
    Ok(tally.finish("fedlaw_hypergrad"))
}

/// Client objective `loss + (d/2)‖w‖² + (μ/2)‖w − anchor‖²` against the
/// augmented gradient used by the local optimizers.
pub fn check_client_objective(opts: &GradcheckOptions) -> Result<CheckResult> {
    let mut stream = RngStream::new(opts.seed, 0x7072_6F78);
    let arch = MlpArch::new(vec![4, 5, 3])?;
    let (params, inputs, labels) = smooth_fixture(&arch, &mut stream, 6)?;
    let anchor = ParamVec::new(
        params
            .values()
            .iter()
            .map(|v| v + 0.05 * stream.normal())
            .collect(),
        arch.layout().clone(),
    )?;
    let opt = OptimizerSpec::sgd_wd(0.1, 0.03).with_prox(0.2);
    let batch = Batch::new(&inputs, &labels, 4)?;
    let objective = |p: &ParamVec| -> Result<f64> {
        let (loss, _) = arch.loss_and_grad(p, &batch)?;
        let mut reg = 0.0;
        for (w, a) in p.values().iter().zip(anchor.values()) {
            reg += 0.5 * opt.weight_decay * w * w + 0.5 * opt.prox_mu * (w - a) * (w - a);
        }
        Ok(loss + reg)
    };
    let (_, mut grad) = arch.loss_and_grad(&params, &batch)?;
    augment_gradient(&mut grad, &params, &anchor, &opt);
    let mut tally = Tally::default();
    for i in 0..params.len() {
        let numeric = central(params.values()[i], |x| {
            let mut p = params.clone();
            p.values_mut()[i] = x;
            Ok(vec![objective(&p)?])
        })?[0];
        tally.add(grad.values()[i] + opts.perturb, numeric);
    }
    Ok(tally.finish("client_objective"))
}

/// Every check, in a fixed order.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_mlp_backprop(opts)?,
        check_eq15_gamma(opts)?,
        check_eq16_lambda(opts)?,
        check_haw_lambda_jacobian(opts)?,
        check_fedlaw_hypergrad(opts)?,
        check_client_objective(opts)?,
    ])
}
