//! The trainable text-side projection: an MLP of `num_layers` linear layers
//! with `Linear → BatchNorm → ReLU → Dropout` between consecutive layers and
//! a bare linear output layer. Forward and backward are written out by hand.

pub mod layers;

use ndarray::{Array1, Array2, ArrayView2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_rng, stream};
use crate::Float;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub num_layers: usize,
    pub dropout_p: f64,
    pub seed: u64,
    /// BatchNorm between layers. Only switched off by linear-only test rigs.
    pub batch_norm: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            input_dim: 4096,
            hidden_dim: 4096,
            output_dim: 768,
            num_layers: 4,
            dropout_p: 0.2,
            seed: 0,
            batch_norm: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ProjectionConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, num_layers: usize) -> Self {
        Self { input_dim, hidden_dim, output_dim, num_layers, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_owned()));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return bad("projection widths must be positive");
        }
        if self.num_layers < 2 {
            return bad("num_layers must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if !(self.bn_eps > 0.0) {
            return bad("bn_eps must be positive");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        Ok(())
    }

    /// `(in, out)` widths of each linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|i| {
                let fan_in = if i == 0 { self.input_dim } else { self.hidden_dim };
                let fan_out = if i + 1 == self.num_layers { self.output_dim } else { self.hidden_dim };
                (fan_in, fan_out)
            })
            .collect()
    }

    /// Trainable scalars: weights, biases and BatchNorm scale/shift.
    pub fn param_count(&self) -> u64 {
        let linear: u64 = self.layer_shapes().iter().map(|&(i, o)| (i * o + o) as u64).sum();
        let norm = if self.batch_norm { 2 * self.hidden_dim as u64 * (self.num_layers as u64 - 1) } else { 0 };
        linear + norm
    }
}

pub fn param_count(config: &ProjectionConfig) -> u64 {
    config.param_count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `in × out`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

/// Which optimizer treatment a parameter tensor gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
}

#[derive(Debug, Clone)]
struct HiddenCache<F> {
    input: Array2<F>,
    xhat: Option<Array2<F>>,
    inv_std: Option<Array1<F>>,
    /// Input to the ReLU.
    pre_relu: Array2<F>,
    mask: Option<Array2<F>>,
}

/// Everything a train-mode forward pass keeps for backprop.
#[derive(Debug, Clone)]
pub struct LayerCache<F> {
    generation: u64,
    batch: usize,
    hidden: Vec<HiddenCache<F>>,
    last_input: Array2<F>,
}

impl<F> LayerCache<F> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<F> {
    pub linears: Vec<Linear<F>>,
    /// `(dγ, dβ)` per BatchNorm.
    pub norms: Vec<(Array1<F>, Array1<F>)>,
}

impl<F: Float> ParamGrads<F> {
    /// Gradient tensors in canonical parameter order.
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for (i, lin) in self.linears.iter().enumerate() {
            out.push(lin.weight.as_slice().unwrap());
            out.push(lin.bias.as_slice().unwrap());
            if let Some((g, b)) = self.norms.get(i) {
                out.push(g.as_slice().unwrap());
                out.push(b.as_slice().unwrap());
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut norms = self.norms.iter_mut();
        let mut out = Vec::new();
        for lin in self.linears.iter_mut() {
            out.push(lin.weight.as_slice_mut().unwrap());
            out.push(lin.bias.as_slice_mut().unwrap());
            if let Some((g, b)) = norms.next() {
                out.push(g.as_slice_mut().unwrap());
                out.push(b.as_slice_mut().unwrap());
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionNet<F> {
    config: ProjectionConfig,
    linears: Vec<Linear<F>>,
    norms: Vec<BatchNorm<F>>,
    /// Train-mode forward passes so far; indexes the dropout stream.
    passes: u64,
    /// Bumped whenever parameters may have changed or a new cache is issued.
    generation: u64,
}

/// Equal when configuration, parameters, running statistics and the pass
/// counter agree; the cache generation is bookkeeping and not compared.
impl<F: PartialEq> PartialEq for ProjectionNet<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.linears == other.linears
            && self.norms == other.norms
            && self.passes == other.passes
    }
}

impl<F: Float> ProjectionNet<F> {
    /// He-normal weights (std `sqrt(2/fan_in)`), zero biases, identity
    /// BatchNorm. Deterministic in `config.seed`.
    pub fn init(config: ProjectionConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let linears = shapes
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let mut rng = derive_rng(config.seed, stream::INIT, i as u64);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                Linear {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                        F::from(normal.sample(&mut rng)).unwrap()
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        let norms = if config.batch_norm {
            (1..config.num_layers)
                .map(|_| BatchNorm {
                    gamma: Array1::ones(config.hidden_dim),
                    beta: Array1::zeros(config.hidden_dim),
                    running_mean: Array1::zeros(config.hidden_dim),
                    running_var: Array1::ones(config.hidden_dim),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { config, linears, norms, passes: 0, generation: 0 })
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.config
    }

    pub fn linears(&self) -> &[Linear<F>] {
        &self.linears
    }

    pub fn norms(&self) -> &[BatchNorm<F>] {
        &self.norms
    }

    pub fn passes(&self) -> u64 {
        self.passes
    }

    pub fn set_passes(&mut self, passes: u64) {
        self.passes = passes;
        self.generation += 1;
    }

    pub fn param_count(&self) -> u64 {
        self.param_slices().iter().map(|s| s.len() as u64).sum()
    }

    fn check_width(&self, x: &ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::WidthMismatch { expected: self.config.input_dim, got: x.ncols() });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: ArrayView2<F>, mode: Mode) -> Result<(Array2<F>, Option<LayerCache<F>>)> {
        match mode {
            Mode::Eval => Ok((self.forward_eval(x)?, None)),
            Mode::Train => self.forward_train(x).map(|(y, c)| (y, Some(c))),
        }
    }

    /// Running statistics, no dropout. Pure in `(parameters, input)`.
    pub fn forward_eval(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_width(&x)?;
        let eps = F::from(self.config.bn_eps).unwrap();
        let last = self.linears.len() - 1;
        let mut h = x.to_owned();
        for (i, lin) in self.linears[..last].iter().enumerate() {
            let mut z = layers::linear_forward(h.view(), lin.weight.view(), lin.bias.view());
            if let Some(bn) = self.norms.get(i) {
                z = layers::batchnorm_eval(
                    z.view(),
                    bn.gamma.view(),
                    bn.beta.view(),
                    bn.running_mean.view(),
                    bn.running_var.view(),
                    eps,
                );
            }
            layers::relu(&mut z);
            h = z;
        }
        Ok(layers::linear_forward(h.view(), self.linears[last].weight.view(), self.linears[last].bias.view()))
    }

    /// Batch statistics, fresh dropout masks, running-stat update.
    pub fn forward_train(&mut self, x: ArrayView2<F>) -> Result<(Array2<F>, LayerCache<F>)> {
        self.check_width(&x)?;
        if x.nrows() < 2 {
            return Err(Error::BatchTooSmall(x.nrows()));
        }
        let eps = F::from(self.config.bn_eps).unwrap();
        let momentum = F::from(self.config.bn_momentum).unwrap();
        let p = self.config.dropout_p;
        let batch = x.nrows();
        let unbias = F::from(batch as f64 / (batch as f64 - 1.0)).unwrap();
        let mut rng = derive_rng(self.config.seed, stream::DROPOUT, self.passes);
        self.passes += 1;
        self.generation += 1;

        let last = self.linears.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for i in 0..last {
            let lin = &self.linears[i];
            let z = layers::linear_forward(h.view(), lin.weight.view(), lin.bias.view());
            let (pre_relu, xhat, inv_std) = match self.norms.get_mut(i) {
                Some(bn) => {
                    let (xhat, y, stats) = layers::batchnorm_train(z.view(), bn.gamma.view(), bn.beta.view(), eps);
                    let one = F::one();
                    bn.running_mean.zip_mut_with(&stats.mean, |r, &m| *r = (one - momentum) * *r + momentum * m);
                    bn.running_var
                        .zip_mut_with(&stats.var, |r, &v| *r = (one - momentum) * *r + momentum * v * unbias);
                    (y, Some(xhat), Some(stats.inv_std))
                }
                None => (z, None, None),
            };
            let mut a = pre_relu.clone();
            layers::relu(&mut a);
            let mask = (p > 0.0).then(|| layers::dropout_mask::<F, _>(a.dim(), p, &mut rng));
            if let Some(m) = &mask {
                a *= m;
            }
            hidden.push(HiddenCache { input: h, xhat, inv_std, pre_relu, mask });
            h = a;
        }
        let out = layers::linear_forward(h.view(), self.linears[last].weight.view(), self.linears[last].bias.view());
        Ok((out, LayerCache { generation: self.generation, batch, hidden, last_input: h }))
    }

    pub fn backward(&self, cache: &LayerCache<F>, upstream: ArrayView2<F>) -> Result<ParamGrads<F>> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "cache from generation {}, net is at {}",
                cache.generation, self.generation
            )));
        }
        if upstream.dim() != (cache.batch, self.config.output_dim) {
            return Err(Error::StaleCache(format!(
                "upstream gradient is {:?}, cache expects ({}, {})",
                upstream.dim(),
                cache.batch,
                self.config.output_dim
            )));
        }
        let last = self.linears.len() - 1;
        let mut linears = Vec::with_capacity(self.linears.len());
        let mut norms = Vec::with_capacity(self.norms.len());

        let (dw, db, dx) =
            layers::linear_backward(cache.last_input.view(), self.linears[last].weight.view(), upstream, true);
        linears.push(Linear { weight: dw, bias: db });
        let mut grad = dx.unwrap();

        for i in (0..last).rev() {
            let hc = &cache.hidden[i];
            if let Some(mask) = &hc.mask {
                grad *= mask;
            }
            layers::relu_backward(&mut grad, hc.pre_relu.view());
            if let (Some(bn), Some(xhat), Some(inv_std)) = (self.norms.get(i), &hc.xhat, &hc.inv_std) {
                let (dx, dgamma, dbeta) =
                    layers::batchnorm_backward(grad.view(), xhat.view(), bn.gamma.view(), inv_std.view());
                norms.push((dgamma, dbeta));
                grad = dx;
            }
            let (dw, db, dx) = layers::linear_backward(hc.input.view(), self.linears[i].weight.view(), grad.view(), i > 0);
            linears.push(Linear { weight: dw, bias: db });
            if let Some(dx) = dx {
                grad = dx;
            }
        }
        linears.reverse();
        norms.reverse();
        Ok(ParamGrads { linears, norms })
    }

    /// Parameter tensors in canonical order: per layer `W, b` followed by
    /// `γ, β` of the BatchNorm after it (if any).
    pub fn param_slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for (i, lin) in self.linears.iter().enumerate() {
            out.push(lin.weight.as_slice().unwrap());
            out.push(lin.bias.as_slice().unwrap());
            if let Some(bn) = self.norms.get(i) {
                out.push(bn.gamma.as_slice().unwrap());
                out.push(bn.beta.as_slice().unwrap());
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        self.generation += 1;
        let mut norms = self.norms.iter_mut();
        let mut out = Vec::new();
        for lin in self.linears.iter_mut() {
            out.push(lin.weight.as_slice_mut().unwrap());
            out.push(lin.bias.as_slice_mut().unwrap());
            if let Some(bn) = norms.next() {
                out.push(bn.gamma.as_slice_mut().unwrap());
                out.push(bn.beta.as_slice_mut().unwrap());
            }
        }
        out
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = Vec::new();
        for i in 0..self.linears.len() {
            out.extend([ParamKind::Weight, ParamKind::Bias]);
            if i < self.norms.len() {
                out.extend([ParamKind::Scale, ParamKind::Shift]);
            }
        }
        out
    }

    /// Running means and variances, interleaved per BatchNorm.
    pub fn buffer_slices(&self) -> Vec<&[F]> {
        self.norms
            .iter()
            .flat_map(|bn| [bn.running_mean.as_slice().unwrap(), bn.running_var.as_slice().unwrap()])
            .collect()
    }

    pub fn buffer_slices_mut(&mut self) -> Vec<&mut [F]> {
        self.generation += 1;
        self.norms
            .iter_mut()
            .flat_map(|bn| [bn.running_mean.as_slice_mut().unwrap(), bn.running_var.as_slice_mut().unwrap()])
            .collect()
    }
}
