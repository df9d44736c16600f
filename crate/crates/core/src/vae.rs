//! MLP variational auto-encoder with hand-written backpropagation.
//!
//! The encoder maps `x` through the hidden layers to a mean head and a
//! log-variance head; the decoder mirrors the hidden widths back to the input
//! width. The KL part of the loss pulls each posterior `N(μᵢ, σᵢ²)` towards the
//! DPMM clusters, weighted by the cluster probabilities of the sampled `z`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView, ArrayView1, ArrayView2, Axis, Dimension, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dpmm::{cluster_moments, local_step, DpmmModel};
use crate::error::{domain, Error, Result};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    LeakyRelu,
    Relu,
}

impl HiddenActivation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::LeakyRelu if v < 0.0 => LEAKY_SLOPE * v,
            Self::Relu if v < 0.0 => 0.0,
            _ => v,
        }
    }

    fn slope(self, pre: f64) -> f64 {
        match self {
            Self::LeakyRelu if pre < 0.0 => LEAKY_SLOPE,
            Self::Relu if pre < 0.0 => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub output_activation: OutputActivation,
    pub hidden_activation: HiddenActivation,
    pub kld_weight: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 784,
            hidden_dims: vec![256, 64],
            latent_dim: 16,
            output_activation: OutputActivation::Tanh,
            hidden_activation: HiddenActivation::LeakyRelu,
            kld_weight: 1e-3,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("input_dim and latent_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.kld_weight > 0.0) {
            return Err(Error::Config(format!(
                "kld_weight must be positive, got {}",
                self.kld_weight
            )));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Fully connected layer `y = x Wᵀ + b`, `W` of shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn kaiming(fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
        Self {
            weight: Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(rng)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Dense>,
    pub v: Vec<Dense>,
    pub step: u64,
}

/// Encoder and decoder weights plus optimizer state. Layers are enumerated
/// in the fixed order encoder, mean head, log-variance head, decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub encoder: Vec<Dense>,
    pub mu_head: Dense,
    pub logvar_head: Dense,
    pub decoder: Vec<Dense>,
    pub adam: AdamState,
}

impl VaeParams {
    pub fn init(cfg: &VaeConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.latent_dim == 0 || cfg.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![cfg.input_dim];
        widths.extend(&cfg.hidden_dims);
        let encoder: Vec<Dense> = widths
            .windows(2)
            .map(|w| Dense::kaiming(w[0], w[1], 2.0, &mut rng))
            .collect();
        let top = *widths.last().expect("input width");
        let mu_head = Dense::kaiming(top, cfg.latent_dim, 1.0, &mut rng);
        let logvar_head = Dense::kaiming(top, cfg.latent_dim, 1.0, &mut rng);
        let mut dec_widths = vec![cfg.latent_dim];
        dec_widths.extend(cfg.hidden_dims.iter().rev());
        dec_widths.push(cfg.input_dim);
        let last = dec_widths.len() - 2;
        let decoder = dec_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::kaiming(w[0], w[1], if i == last { 1.0 } else { 2.0 }, &mut rng))
            .collect();
        Ok(Self::with_layers(encoder, mu_head, logvar_head, decoder))
    }

    /// Parameters with every weight and bias zero.
    pub fn zeros(cfg: &VaeConfig) -> Self {
        let mut widths = vec![cfg.input_dim];
        widths.extend(&cfg.hidden_dims);
        let encoder = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let top = *widths.last().expect("input width");
        let mut dec_widths = vec![cfg.latent_dim];
        dec_widths.extend(cfg.hidden_dims.iter().rev());
        dec_widths.push(cfg.input_dim);
        let decoder = dec_widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self::with_layers(
            encoder,
            Dense::zeros(top, cfg.latent_dim),
            Dense::zeros(top, cfg.latent_dim),
            decoder,
        )
    }

    fn with_layers(encoder: Vec<Dense>, mu_head: Dense, logvar_head: Dense, decoder: Vec<Dense>) -> Self {
        let mut out = Self {
            encoder,
            mu_head,
            logvar_head,
            decoder,
            adam: AdamState {
                m: Vec::new(),
                v: Vec::new(),
                step: 0,
            },
        };
        out.adam.m = out.zero_like();
        out.adam.v = out.zero_like();
        out
    }

    pub fn layers(&self) -> Vec<&Dense> {
        self.encoder
            .iter()
            .chain([&self.mu_head, &self.logvar_head])
            .chain(&self.decoder)
            .collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Dense> {
        self.encoder
            .iter_mut()
            .chain([&mut self.mu_head, &mut self.logvar_head])
            .chain(&mut self.decoder)
            .collect()
    }

    fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.encoder.len()).map(|i| format!("encoder.{i}")).collect();
        names.push("mu_head".into());
        names.push("logvar_head".into());
        names.extend((0..self.decoder.len()).map(|i| format!("decoder.{i}")));
        names
    }

    /// Zero tensors shaped like every layer, in layer order.
    pub fn zero_like(&self) -> Vec<Dense> {
        self.layers()
            .into_iter()
            .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.first().unwrap_or(&self.mu_head).fan_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.fan_out()
    }

    /// Every value, including optimizer state, is finite and layer widths
    /// chain from the input to the latent space and back.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim();
        for l in &self.encoder {
            if l.fan_in() != width {
                return Err(Error::Shape(format!("encoder layer expects {} inputs, previous width {width}", l.fan_in())));
            }
            width = l.fan_out();
        }
        if self.mu_head.fan_in() != width || self.logvar_head.fan_in() != width
            || self.logvar_head.fan_out() != self.latent_dim()
        {
            return Err(Error::Shape("latent heads do not match encoder output".into()));
        }
        width = self.latent_dim();
        for l in &self.decoder {
            if l.fan_in() != width {
                return Err(Error::Shape(format!("decoder layer expects {} inputs, previous width {width}", l.fan_in())));
            }
            width = l.fan_out();
        }
        if width != self.input_dim() {
            return Err(Error::Shape(format!(
                "decoder emits {width} values for {} inputs",
                self.input_dim()
            )));
        }
        let all = self.layers().into_iter().chain(&self.adam.m).chain(&self.adam.v);
        for l in all {
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite parameter".into()));
            }
        }
        Ok(())
    }
}

fn check_width(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what} has width {got}, expected {want}")));
    }
    Ok(())
}

fn finite_or(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite {what}")));
    }
    Ok(())
}

struct EncoderPass {
    /// Input of every encoder layer, then the input of the heads.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    mu: Array2<f64>,
    logvar: Array2<f64>,
}

fn encoder_pass(x: ArrayView2<f64>, params: &VaeParams, act: HiddenActivation) -> Result<EncoderPass> {
    check_width(x.ncols(), params.input_dim(), "input")?;
    let mut inputs = vec![x.to_owned()];
    let mut pre = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let a = layer.forward(inputs.last().expect("input").view());
        inputs.push(a.mapv(|v| act.apply(v)));
        pre.push(a);
    }
    let top = inputs.last().expect("input").view();
    let mu = params.mu_head.forward(top);
    let logvar = params.logvar_head.forward(top);
    finite_or(&mu, "encoder mean")?;
    finite_or(&logvar, "encoder log-variance")?;
    Ok(EncoderPass {
        inputs,
        pre,
        mu,
        logvar,
    })
}

struct DecoderPass {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

fn decoder_pass(z: ArrayView2<f64>, params: &VaeParams, cfg: &VaeConfig) -> Result<DecoderPass> {
    check_width(z.ncols(), params.latent_dim(), "latent")?;
    let mut inputs = vec![z.to_owned()];
    let mut pre = Vec::with_capacity(params.decoder.len());
    let last = params.decoder.len() - 1;
    for (i, layer) in params.decoder.iter().enumerate() {
        let a = layer.forward(inputs.last().expect("input").view());
        let h = if i == last {
            match cfg.output_activation {
                OutputActivation::Tanh => a.mapv(f64::tanh),
                OutputActivation::Linear => a.clone(),
            }
        } else {
            a.mapv(|v| cfg.hidden_activation.apply(v))
        };
        inputs.push(h);
        pre.push(a);
    }
    let output = inputs.pop().expect("decoder output");
    finite_or(&output, "reconstruction")?;
    Ok(DecoderPass { inputs, pre, output })
}

/// Encoder mean and log-variance for every row of `x`.
pub fn encode_batch(x: ArrayView2<f64>, params: &VaeParams, cfg: &VaeConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    let pass = encoder_pass(x, params, cfg.hidden_activation)?;
    Ok((pass.mu, pass.logvar))
}

pub fn encode(x: &[f64], params: &VaeParams, cfg: &VaeConfig) -> Result<(Array1<f64>, Array1<f64>)> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let (mu, logvar) = encode_batch(view, params, cfg)?;
    Ok((mu.row(0).to_owned(), logvar.row(0).to_owned()))
}

/// `z = μ + exp(logvar / 2) ⊙ noise`, elementwise over equal shapes.
pub fn sample_latent_batch(
    mu: ArrayView2<f64>,
    logvar: ArrayView2<f64>,
    noise: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if mu.dim() != logvar.dim() || mu.dim() != noise.dim() {
        return Err(Error::Shape(format!(
            "mu {:?}, logvar {:?} and noise {:?} differ in shape",
            mu.dim(),
            logvar.dim(),
            noise.dim()
        )));
    }
    let mut z = mu.to_owned();
    Zip::from(&mut z)
        .and(logvar)
        .and(noise)
        .for_each(|z, &lv, &e| *z += (0.5 * lv).exp() * e);
    Ok(z)
}

pub fn sample_latent(mu: ArrayView1<f64>, logvar: ArrayView1<f64>, noise: ArrayView1<f64>) -> Result<Array1<f64>> {
    let z = sample_latent_batch(mu.insert_axis(Axis(0)), logvar.insert_axis(Axis(0)), noise.insert_axis(Axis(0)))?;
    Ok(z.row(0).to_owned())
}

pub fn decode_batch(z: ArrayView2<f64>, params: &VaeParams, cfg: &VaeConfig) -> Result<Array2<f64>> {
    Ok(decoder_pass(z, params, cfg)?.output)
}

pub fn decode(z: &[f64], params: &VaeParams, cfg: &VaeConfig) -> Result<Array1<f64>> {
    let view = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
    Ok(decode_batch(view, params, cfg)?.row(0).to_owned())
}

/// Mean squared error over all elements.
pub fn recon_loss<D: Dimension>(x: ArrayView<f64, D>, x_star: ArrayView<f64, D>) -> Result<f64> {
    if x.shape() != x_star.shape() {
        return Err(Error::Shape(format!(
            "reconstruction shape {:?} differs from input {:?}",
            x_star.shape(),
            x.shape()
        )));
    }
    if x.is_empty() {
        return Err(Error::Contract("reconstruction loss of an empty array".into()));
    }
    let sum: f64 = x.iter().zip(x_star.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// KL(N(μᵢ, diag varᵢ) ‖ N(μ_k, diag var_k)).
pub fn kl_hard(
    mu_i: ArrayView1<f64>,
    var_i: ArrayView1<f64>,
    cluster_mean: ArrayView1<f64>,
    cluster_var: ArrayView1<f64>,
) -> Result<f64> {
    let d = mu_i.len();
    if var_i.len() != d || cluster_mean.len() != d || cluster_var.len() != d {
        return Err(Error::Shape("KL arguments differ in dimension".into()));
    }
    let mut total = 0.0;
    for j in 0..d {
        let (vi, vk) = (var_i[j], cluster_var[j]);
        if !(vi > 0.0) || !(vk > 0.0) {
            return Err(domain("kl_hard", format!("variances must be positive, got {vi} and {vk}")));
        }
        let diff = cluster_mean[j] - mu_i[j];
        total += vk.ln() - vi.ln() - 1.0 + vi / vk + diff * diff / vk;
    }
    Ok(0.5 * total)
}

fn check_probs(probs: &[f64]) -> Result<()> {
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-8 || probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Contract(format!("cluster probabilities sum to {s}")));
    }
    Ok(())
}

/// `Σ_k p_k · kl_hard(i, k)` using the posterior moments of every cluster.
pub fn kl_soft(mu_i: ArrayView1<f64>, var_i: ArrayView1<f64>, model: &DpmmModel, probs: &[f64]) -> Result<f64> {
    if probs.len() != model.k() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} clusters",
            probs.len(),
            model.k()
        )));
    }
    check_probs(probs)?;
    let mut total = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        let (mean, var) = cluster_moments(model, k)?;
        total += p * kl_hard(mu_i, var_i, mean.view(), var.view())?;
    }
    Ok(total)
}

/// Constants of the KL term for one batch: probabilities `p_ik` and the
/// cluster moments. Gradients do not flow into any of them.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTarget {
    pub probs: Array2<f64>,
    pub means: Array2<f64>,
    pub vars: Array2<f64>,
}

impl KlTarget {
    /// Probabilities from the DPMM local step on the sampled latents `z`.
    pub fn from_model(z: ArrayView2<f64>, model: &DpmmModel) -> Result<Self> {
        let probs = local_step(z, model)?.r;
        let mut means = Array2::zeros((model.k(), model.dim()));
        let mut vars = Array2::zeros((model.k(), model.dim()));
        for k in 0..model.k() {
            let (m, v) = cluster_moments(model, k)?;
            means.row_mut(k).assign(&m);
            vars.row_mut(k).assign(&v);
        }
        Ok(Self { probs, means, vars })
    }

    fn check(&self, rows: usize, dim: usize) -> Result<()> {
        let k = self.means.nrows();
        if self.probs.dim() != (rows, k) || self.means.dim() != (k, dim) || self.vars.dim() != (k, dim) {
            return Err(Error::Shape(format!(
                "KL target with probs {:?}, means {:?}, vars {:?} for a batch of {rows} × {dim}",
                self.probs.dim(),
                self.means.dim(),
                self.vars.dim()
            )));
        }
        if self.vars.iter().any(|&v| !(v > 0.0)) {
            return Err(domain("kl_soft", "cluster variances must be positive"));
        }
        for row in self.probs.rows() {
            check_probs(row.as_slice().unwrap_or(&row.to_vec()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    /// Batch mean of the soft KL, before `kld_weight`.
    pub kl: f64,
}

pub struct Evaluation {
    pub loss: LossParts,
    /// Gradients in layer order.
    pub grads: Vec<Dense>,
    pub z: Array2<f64>,
}

fn backprop_dense(layer: &Dense, input: ArrayView2<f64>, d_pre: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
    grad.weight += &d_pre.t().dot(&input);
    grad.bias += &d_pre.sum_axis(Axis(0));
    d_pre.dot(&layer.weight)
}

/// Loss and its gradient for `batch` with fixed reparameterization noise.
pub fn loss_and_grad(
    params: &VaeParams,
    cfg: &VaeConfig,
    batch: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    target: &KlTarget,
) -> Result<Evaluation> {
    let b = batch.nrows();
    if b == 0 {
        return Err(Error::Contract("training step on an empty batch".into()));
    }
    let d = params.latent_dim();
    target.check(b, d)?;
    let enc = encoder_pass(batch, params, cfg.hidden_activation)?;
    let z = sample_latent_batch(enc.mu.view(), enc.logvar.view(), noise)?;
    let dec = decoder_pass(z.view(), params, cfg)?;

    let recon = recon_loss(batch, dec.output.view())?;
    let mut kl_sum = 0.0;
    let mut d_mu = Array2::zeros((b, d));
    let mut d_logvar = Array2::zeros((b, d));
    let scale = cfg.kld_weight / b as f64;
    let k = target.means.nrows();
    for i in 0..b {
        for j in 0..d {
            let mu = enc.mu[(i, j)];
            let lv = enc.logvar[(i, j)];
            let var = lv.exp();
            let (mut g_mu, mut g_lv) = (0.0, 0.0);
            for c in 0..k {
                let p = target.probs[(i, c)];
                if p == 0.0 {
                    continue;
                }
                let vk = target.vars[(c, j)];
                let diff = mu - target.means[(c, j)];
                kl_sum += p * 0.5 * (vk.ln() - lv - 1.0 + var / vk + diff * diff / vk);
                g_mu += p * diff / vk;
                g_lv += p * 0.5 * (var / vk - 1.0);
            }
            d_mu[(i, j)] = scale * g_mu;
            d_logvar[(i, j)] = scale * g_lv;
        }
    }
    let kl = kl_sum / b as f64;
    let total = recon + cfg.kld_weight * kl;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {total}")));
    }

    let mut grads = params.zero_like();
    let n_enc = params.encoder.len();
    let (enc_grads, rest) = grads.split_at_mut(n_enc);
    let (head_grads, dec_grads) = rest.split_at_mut(2);

    // decoder
    let numel = (b * params.input_dim()) as f64;
    let mut delta = (&dec.output - &batch) * (2.0 / numel);
    if cfg.output_activation == OutputActivation::Tanh {
        Zip::from(&mut delta).and(&dec.output).for_each(|g, &y| *g *= 1.0 - y * y);
    }
    for li in (0..params.decoder.len()).rev() {
        let upstream = backprop_dense(&params.decoder[li], dec.inputs[li].view(), &delta, &mut dec_grads[li]);
        delta = upstream;
        if li > 0 {
            Zip::from(&mut delta)
                .and(&dec.pre[li - 1])
                .for_each(|g, &a| *g *= cfg.hidden_activation.slope(a));
        }
    }
    let d_z = delta;

    // reparameterization
    d_mu += &d_z;
    Zip::from(&mut d_logvar)
        .and(&d_z)
        .and(noise)
        .and(&enc.logvar)
        .for_each(|g, &dz, &e, &lv| *g += dz * e * 0.5 * (0.5 * lv).exp());

    // heads and encoder
    let top = enc.inputs.last().expect("head input").view();
    let mut delta = backprop_dense(&params.mu_head, top, &d_mu, &mut head_grads[0]);
    delta += &backprop_dense(&params.logvar_head, top, &d_logvar, &mut head_grads[1]);
    for li in (0..n_enc).rev() {
        Zip::from(&mut delta)
            .and(&enc.pre[li])
            .for_each(|g, &a| *g *= cfg.hidden_activation.slope(a));
        delta = backprop_dense(&params.encoder[li], enc.inputs[li].view(), &delta, &mut enc_grads[li]);
    }

    Ok(Evaluation {
        loss: LossParts { total, recon, kl },
        grads,
        z,
    })
}

/// Adam step with decoupled weight decay on weights (biases are not decayed).
pub fn adam_update(params: &mut VaeParams, grads: &[Dense], cfg: &VaeConfig) -> Result<()> {
    let AdamState { m, v, step } = &mut params.adam;
    *step += 1;
    let t = *step as i32;
    let c1 = 1.0 - cfg.adam_beta1.powi(t);
    let c2 = 1.0 - cfg.adam_beta2.powi(t);
    let (b1, b2, lr, eps, wd) = (cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate, cfg.adam_eps, cfg.weight_decay);
    let mut layers = Vec::new();
    layers.extend(params.encoder.iter_mut());
    layers.push(&mut params.mu_head);
    layers.push(&mut params.logvar_head);
    layers.extend(params.decoder.iter_mut());
    if grads.len() != layers.len() {
        return Err(Error::Shape(format!("{} gradients for {} layers", grads.len(), layers.len())));
    }
    for (((layer, g), m), v) in layers.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        Zip::from(&mut layer.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * wd * *p;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        Zip::from(&mut layer.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
    for l in params.layers() {
        if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("optimizer step produced a non-finite parameter".into()));
        }
    }
    Ok(())
}

pub struct StepOutput {
    pub loss: LossParts,
    pub z: Array2<f64>,
}

/// One optimizer step on `batch`. Cluster probabilities come from the DPMM
/// local step on the sampled latents and are held constant.
pub fn train_step(
    params: &mut VaeParams,
    cfg: &VaeConfig,
    batch: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    model: &DpmmModel,
) -> Result<StepOutput> {
    let (mu, logvar) = encode_batch(batch, params, cfg)?;
    let z = sample_latent_batch(mu.view(), logvar.view(), noise)?;
    let target = KlTarget::from_model(z.view(), model)?;
    let eval = loss_and_grad(params, cfg, batch, noise, &target)?;
    adam_update(params, &eval.grads, cfg)?;
    Ok(StepOutput {
        loss: eval.loss,
        z: eval.z,
    })
}

const VAE_FORMAT: &str = "diva-vae";
const VAE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeManifest {
    pub format: String,
    pub version: u32,
    pub config: VaeConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

fn tensor_list(params: &VaeParams) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let names = params.layer_names();
    let groups = [
        ("", params.layers()),
        ("adam_m.", params.adam.m.iter().collect()),
        ("adam_v.", params.adam.v.iter().collect()),
    ];
    let mut out = Vec::new();
    for (prefix, layers) in groups {
        for (name, l) in names.iter().zip(layers) {
            out.push((
                format!("{prefix}{name}.weight"),
                l.weight.shape().to_vec(),
                l.weight.iter().copied().collect(),
            ));
            out.push((format!("{prefix}{name}.bias"), l.bias.shape().to_vec(), l.bias.to_vec()));
        }
    }
    out
}

/// Write `<stem>.json` (manifest) and `<stem>.bin` (little-endian f64 payload).
pub fn save_vae(params: &VaeParams, cfg: &VaeConfig, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let tensors = tensor_list(params);
    let manifest = VaeManifest {
        format: VAE_FORMAT.into(),
        version: VAE_VERSION,
        config: cfg.clone(),
        step: params.adam.step,
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    let mut blob = fs::File::create(blob_path)?;
    let mut buf = Vec::new();
    for (_, _, data) in &tensors {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    blob.write_all(&buf)?;
    Ok(())
}

pub fn load_vae(manifest_path: &Path, blob_path: &Path) -> Result<(VaeParams, VaeConfig)> {
    let manifest: VaeManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != VAE_FORMAT || manifest.version != VAE_VERSION {
        return Err(Error::Parse(format!(
            "unsupported VAE checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let cfg = manifest.config;
    cfg.validate()?;
    let mut params = VaeParams::zeros(&cfg);
    let expected = tensor_list(&params);
    if expected.len() != manifest.tensors.len()
        || expected
            .iter()
            .zip(&manifest.tensors)
            .any(|((name, shape, _), t)| *name != t.name || *shape != t.shape)
    {
        return Err(Error::Parse("tensor manifest does not match the configured architecture".into()));
    }
    let mut bytes = Vec::new();
    fs::File::open(blob_path)?.read_to_end(&mut bytes)?;
    let total: usize = expected.iter().map(|(_, _, d)| d.len()).sum();
    if bytes.len() != total * 8 {
        return Err(Error::Parse(format!(
            "blob holds {} bytes, manifest needs {}",
            bytes.len(),
            total * 8
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut fill = |a: &mut dyn Iterator<Item = &mut f64>| {
        for v in a {
            *v = values.next().expect("length checked");
        }
    };
    let n_layers = params.layers().len();
    for i in 0..n_layers {
        let l = &mut params.layers_mut()[i];
        fill(&mut l.weight.iter_mut());
        fill(&mut l.bias.iter_mut());
    }
    for l in params.adam.m.iter_mut() {
        fill(&mut l.weight.iter_mut());
        fill(&mut l.bias.iter_mut());
    }
    for l in params.adam.v.iter_mut() {
        fill(&mut l.weight.iter_mut());
        fill(&mut l.bias.iter_mut());
    }
    params.adam.step = manifest.step;
    params.validate()?;
    Ok((params, cfg))
}
