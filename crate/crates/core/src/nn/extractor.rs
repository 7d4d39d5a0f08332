//! MLP feature extractor.
//!
//! Hidden layers are `Linear → FeatureNorm → ReLU`; the output layer is
//! `Linear → ReLU` (or plain `Linear` when `final_relu` is off). Backward
//! passes are written by hand against the cached forward values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor2D};

/// Added to the variance inside the normalization denominator.
pub const NORM_DENOM_EPS: f64 = 1e-5;
/// Lower bound on running variance.
pub const VAR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics, nothing mutated.
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub norm_momentum: f64,
    pub final_relu: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![128],
            feature_dim: 64,
            norm_momentum: 0.1,
            final_relu: true,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("extractor dimensions must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config("norm_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// Shape `(out, in)`.
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor2D::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// He-normal weights, zero bias.
    pub fn he(input: usize, output: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let data = (0..input * output).map(|_| std * rng.normal()).collect();
        Self {
            weight: Tensor2D::from_vec(output, input, data).expect("sized buffer"),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let mut out = x.matmul_transposed(&self.weight)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// Per-feature normalization with exponential-moving-average running
/// statistics, the stand-in for batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl FeatureNorm {
    pub fn new(dim: usize, momentum: f64) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    fn forward(&mut self, a: &Tensor2D, mode: Mode) -> (Tensor2D, NormCache) {
        let (n, dim) = (a.rows(), a.cols());
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; dim];
                for row in a.iter_rows() {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; dim];
                for row in a.iter_rows() {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased = if n > 1 { (n - 1) as f64 } else { 1.0 };
                let m = self.momentum;
                for j in 0..dim {
                    let ss = var[j];
                    var[j] = ss / n as f64;
                    self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
                    self.running_var[j] =
                        ((1.0 - m) * self.running_var[j] + m * ss / unbiased).max(VAR_FLOOR);
                }
                let inv_std: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v + NORM_DENOM_EPS).sqrt())
                    .collect();
                (mean, inv_std)
            }
            Mode::Inference => (
                self.running_mean.clone(),
                self.running_var
                    .iter()
                    .map(|v| 1.0 / (v + NORM_DENOM_EPS).sqrt())
                    .collect(),
            ),
        };
        let mut xhat = a.clone();
        let mut out = a.clone();
        for r in 0..n {
            let xr = xhat.row_mut(r);
            for j in 0..dim {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let or = out.row_mut(r);
            for j in 0..dim {
                or[j] = self.gamma[j] * xr[j] + self.beta[j];
            }
        }
        (
            out,
            NormCache {
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        )
    }

    fn infer(&self, a: &Tensor2D) -> Tensor2D {
        let mut out = a.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                let xhat =
                    (*v - self.running_mean[j]) / (self.running_var[j] + NORM_DENOM_EPS).sqrt();
                *v = self.gamma[j] * xhat + self.beta[j];
            }
        }
        out
    }

    fn backward(&self, cache: &NormCache, dy: &Tensor2D) -> (Tensor2D, NormGrad) {
        let (n, dim) = (dy.rows(), dy.cols());
        let mut dgamma = vec![0.0; dim];
        let mut dbeta = vec![0.0; dim];
        for r in 0..n {
            for j in 0..dim {
                dgamma[j] += dy.get(r, j) * cache.xhat.get(r, j);
                dbeta[j] += dy.get(r, j);
            }
        }
        let mut da = Tensor2D::zeros(n, dim);
        if cache.batch_stats {
            // dxhat = dy·γ; da = invstd/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let nf = n as f64;
            for j in 0..dim {
                let g = self.gamma[j];
                let sum_dxhat = dbeta[j] * g;
                let sum_dxhat_xhat = dgamma[j] * g;
                for r in 0..n {
                    let dxhat = dy.get(r, j) * g;
                    let v = cache.inv_std[j] / nf
                        * (nf * dxhat - sum_dxhat - cache.xhat.get(r, j) * sum_dxhat_xhat);
                    da.set(r, j, v);
                }
            }
        } else {
            for r in 0..n {
                for j in 0..dim {
                    da.set(r, j, dy.get(r, j) * self.gamma[j] * cache.inv_std[j]);
                }
            }
        }
        (
            da,
            NormGrad {
                gamma: dgamma,
                beta: dbeta,
            },
        )
    }
}

#[derive(Debug)]
struct NormCache {
    xhat: Tensor2D,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

#[derive(Debug)]
struct LayerCache {
    input: Tensor2D,
    norm: Option<NormCache>,
    /// Value fed to the ReLU (or the layer output when no ReLU follows).
    pre_act: Tensor2D,
    relu: bool,
}

/// Forward values retained for [`Extractor::backward`].
#[derive(Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrad {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorGrads {
    pub layers: Vec<LinearGrad>,
    pub norms: Vec<NormGrad>,
}

impl ExtractorGrads {
    /// Same order as [`Extractor::param_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
            if let Some(n) = self.norms.get(i) {
                out.push(n.gamma.as_slice());
                out.push(n.beta.as_slice());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    layers: Vec<Linear>,
    /// One per hidden layer, i.e. `layers.len() - 1`.
    norms: Vec<FeatureNorm>,
    final_relu: bool,
}

impl Extractor {
    pub fn new(cfg: &ExtractorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.feature_dim);
        let layers = dims
            .windows(2)
            .map(|w| Linear::he(w[0], w[1], rng))
            .collect();
        let norms = cfg
            .hidden
            .iter()
            .map(|&h| FeatureNorm::new(h, cfg.norm_momentum))
            .collect();
        Ok(Self {
            layers,
            norms,
            final_relu: cfg.final_relu,
        })
    }

    /// Assembles an extractor from explicit layers. `norms` must hold one
    /// entry per hidden layer, or be empty to run without normalization.
    pub fn from_parts(
        layers: Vec<Linear>,
        norms: Vec<FeatureNorm>,
        final_relu: bool,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::shape(
                    "Extractor::from_parts",
                    format!("layer widths {} -> {}", w[0].output_dim(), w[1].input_dim()),
                ));
            }
        }
        if !norms.is_empty() {
            if norms.len() != layers.len() - 1 {
                return Err(Error::Config(format!(
                    "{} norms for {} hidden layers",
                    norms.len(),
                    layers.len() - 1
                )));
            }
            for (n, l) in norms.iter().zip(&layers) {
                if n.dim() != l.output_dim() {
                    return Err(Error::shape("Extractor::from_parts", "norm width"));
                }
            }
        }
        Ok(Self {
            layers,
            norms,
            final_relu,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn norms(&self) -> &[FeatureNorm] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [FeatureNorm] {
        &mut self.norms
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "Extractor::forward",
                format!(
                    "input has {} columns, expected {}",
                    x.cols(),
                    self.input_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass. `Mode::Train` normalizes with batch statistics and
    /// updates the running statistics; `Mode::Inference` leaves `self`
    /// untouched.
    pub fn forward(&mut self, x: &Tensor2D, mode: Mode) -> Result<Tensor2D> {
        match mode {
            Mode::Inference => self.infer(x),
            Mode::Train => self.forward_cached(x, mode).map(|(out, _)| out),
        }
    }

    pub fn infer(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                if let Some(norm) = self.norms.get(i) {
                    h = norm.infer(&h);
                }
            }
            if i < last || self.final_relu {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&mut self, x: &Tensor2D, mode: Mode) -> Result<(Tensor2D, ForwardCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            let input = h;
            let mut a = self.layers[i].forward(&input)?;
            let mut norm_cache = None;
            if i < last {
                if let Some(norm) = self.norms.get_mut(i) {
                    let (y, c) = norm.forward(&a, mode);
                    a = y;
                    norm_cache = Some(c);
                }
            }
            let relu = i < last || self.final_relu;
            let pre_act = a.clone();
            if relu {
                relu_in_place(&mut a);
            }
            caches.push(LayerCache {
                input,
                norm: norm_cache,
                pre_act,
                relu,
            });
            h = a;
        }
        Ok((h, ForwardCache { layers: caches }))
    }

    /// Gradients of all extractor parameters given `d_out = ∂L/∂features`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Tensor2D) -> Result<ExtractorGrads> {
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let mut norm_grads = Vec::with_capacity(self.norms.len());
        let mut grad = d_out.clone();
        for (i, lc) in cache.layers.iter().enumerate().rev() {
            if grad.rows() != lc.pre_act.rows() || grad.cols() != lc.pre_act.cols() {
                return Err(Error::shape("Extractor::backward", "gradient shape"));
            }
            if lc.relu {
                for (g, &z) in grad.as_mut_slice().iter_mut().zip(lc.pre_act.as_slice()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            if let Some(nc) = &lc.norm {
                let (da, ng) = self.norms[i].backward(nc, &grad);
                grad = da;
                norm_grads.push(ng);
            }
            let layer = &self.layers[i];
            // dW = gradᵀ · input, db = Σ_rows grad, dx = grad · W
            let weight = crate::numcore::matmul(&grad.transpose(), &lc.input)?;
            let mut bias = vec![0.0; layer.output_dim()];
            for row in grad.iter_rows() {
                bias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
            }
            let dx = crate::numcore::matmul(&grad, &layer.weight)?;
            layer_grads.push(LinearGrad { weight, bias });
            grad = dx;
        }
        layer_grads.reverse();
        norm_grads.reverse();
        Ok(ExtractorGrads {
            layers: layer_grads,
            norms: norm_grads,
        })
    }

    /// Trainable parameters in a fixed order: for each layer its weight and
    /// bias, followed by the layer's norm scale and shift if present.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
            if let Some(n) = self.norms.get(i) {
                out.push(n.gamma.as_slice());
                out.push(n.beta.as_slice());
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for l in self.layers.iter_mut() {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
            if let Some(n) = norms.next() {
                out.push(n.gamma.as_mut_slice());
                out.push(n.beta.as_mut_slice());
            }
        }
        out
    }

    /// Running means and variances of every norm layer.
    pub fn stat_slices(&self) -> Vec<&[f64]> {
        self.norms
            .iter()
            .flat_map(|n| [n.running_mean.as_slice(), n.running_var.as_slice()])
            .collect()
    }
}

fn relu_in_place(t: &mut Tensor2D) {
    t.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}
