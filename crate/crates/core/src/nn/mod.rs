//! Feed-forward networks with batch-normalization layers.
//!
//! Forward passes run in one of three statistics modes (training-time,
//! test-time, smoothed blend); manual backward passes produce exact
//! gradients for inputs and for the BN affine parameters, including the
//! cross-sample coupling introduced by test-time statistics.

pub mod checkpoint;
pub(crate) mod engine;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use engine::ThetaA;

use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};
use engine::Num;

/// Fully-connected layer; weight is stored in_dim x out_dim row-major.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, dout) = weight.dims2()?;
        if bias.shape() != [dout] {
            return Err(Error::Shape {
                op: "LinearLayer::new",
                detail: format!("bias {:?} for weight {:?}", bias.shape(), weight.shape()),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Batch-norm layer: affine parameters (theta_A) plus the frozen
/// training-time statistics (the source copy of theta_B).
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mu_s: Tensor,
    pub sigma2_s: Tensor,
    pub eps: f64,
    /// Ordinal among the BN layers of the owning network, counted from the
    /// input side. Assigned by `Network::new`.
    pub layer_index: usize,
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;

impl BatchNormLayer {
    /// Identity-initialized layer: gamma 1, beta 0, mu_s 0, sigma2_s 1.
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: Tensor::from_parts(vec![channels], vec![1.0; channels]),
            beta: Tensor::zeros(&[channels]),
            mu_s: Tensor::zeros(&[channels]),
            sigma2_s: Tensor::from_parts(vec![channels], vec![1.0; channels]),
            eps,
            layer_index: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.mu_s.len() != c || self.sigma2_s.len() != c {
            return Err(Error::Shape {
                op: "BatchNormLayer",
                detail: format!(
                    "parameter lengths disagree: gamma {}, beta {}, mu_s {}, sigma2_s {}",
                    c,
                    self.beta.len(),
                    self.mu_s.len(),
                    self.sigma2_s.len()
                ),
            });
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("bn eps must be positive, got {}", self.eps)));
        }
        if self.sigma2_s.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::Config("bn sigma2_s has negative entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(LinearLayer),
    Relu,
    BatchNorm(BatchNormLayer),
}

/// Which statistics a BN layer normalizes with.
///
/// `Smoothed { tau: 0.0, n_tr: 0 }` behaves bit-identically to `TestStats`
/// and `Smoothed { tau: 1.0, .. }` to `TrainStats`. The last `n_tr` BN
/// layers of the network are pinned to training statistics (tau 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode {
    TrainStats,
    TestStats,
    Smoothed { tau: f64, n_tr: usize },
}

/// Per-layer batch statistics recorded during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub layer_index: usize,
    pub mu_t: Vec<f64>,
    pub sigma2_t: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BnSnapshot {
    pub layers: Vec<BnStats>,
}

/// Ordered sequence of layers. Parameters partition into theta_A (BN affine),
/// theta_B (BN source statistics) and theta_F (everything else).
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

impl Network {
    pub fn new(input_dim: usize, mut layers: Vec<Layer>) -> Result<Self> {
        let mut width = input_dim;
        let mut bn_index = 0usize;
        for (k, layer) in layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear(lin) => {
                    if lin.in_dim() != width {
                        return Err(Error::Shape {
                            op: "Network::new",
                            detail: format!(
                                "layer {}: linear expects width {}, got {}",
                                k,
                                lin.in_dim(),
                                width
                            ),
                        });
                    }
                    width = lin.out_dim();
                }
                Layer::Relu => {}
                Layer::BatchNorm(bn) => {
                    bn.validate()?;
                    if bn.channels() != width {
                        return Err(Error::Shape {
                            op: "Network::new",
                            detail: format!(
                                "layer {}: batchnorm has {} channels, width is {}",
                                k,
                                bn.channels(),
                                width
                            ),
                        });
                    }
                    bn.layer_index = bn_index;
                    bn_index += 1;
                }
            }
        }
        Ok(Self { layers, input_dim, output_dim: width })
    }

    /// MLP with a Linear -> BN -> ReLU block per hidden width and a final
    /// linear classifier. He-initialized weights, identity BN.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, rng: &mut Rng) -> Network {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Linear(he_linear(width, h, rng)));
            layers.push(Layer::BatchNorm(BatchNormLayer::identity(h, DEFAULT_BN_EPS)));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Linear(he_linear(width, classes, rng)));
        Network::new(input_dim, layers).expect("mlp construction is dimensionally consistent")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_bn(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::BatchNorm(_)))
            .count()
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Clone of the BN affine parameters, per BN layer.
    pub fn theta_a(&self) -> ThetaA {
        self.bn_layers()
            .map(|bn| (bn.gamma.as_slice().to_vec(), bn.beta.as_slice().to_vec()))
            .collect()
    }

    /// Replace the BN affine parameters.
    pub fn set_theta_a(&mut self, theta: &ThetaA) -> Result<()> {
        let mut idx = 0usize;
        for layer in self.layers.iter_mut() {
            if let Layer::BatchNorm(bn) = layer {
                let (g, b) = theta.get(idx).ok_or_else(|| Error::Shape {
                    op: "set_theta_a",
                    detail: format!("missing entry for bn layer {}", idx),
                })?;
                if g.len() != bn.channels() || b.len() != bn.channels() {
                    return Err(Error::Shape {
                        op: "set_theta_a",
                        detail: format!("bn layer {} expects {} channels", idx, bn.channels()),
                    });
                }
                bn.gamma = Tensor::from_parts(vec![g.len()], g.clone());
                bn.beta = Tensor::from_parts(vec![b.len()], b.clone());
                idx += 1;
            }
        }
        if idx != theta.len() {
            return Err(Error::Shape {
                op: "set_theta_a",
                detail: format!("{} entries for {} bn layers", theta.len(), idx),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (n, d) = x.dims2()?;
        if d != self.input_dim {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("input width {} does not match network input {}", d, self.input_dim),
            });
        }
        Ok(n)
    }

    /// Composition of all layers; records per-BN batch statistics.
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, BnSnapshot)> {
        let n = self.check_input(x)?;
        let lifted = engine::lift_f64(self, mode);
        let cache = engine::forward(&lifted, x.as_slice(), n)?;
        let logits = Tensor::from_parts(vec![n, self.output_dim], cache.logits().to_vec());
        Ok((logits, snapshot_of(&cache)))
    }

    /// Exact gradient of <upstream, logits> with respect to every input
    /// entry. Under test-time or smoothed statistics this includes the
    /// cross-sample terms: perturbing row i moves the gradient of row j.
    pub fn backward_input(&self, x: &Tensor, mode: BnMode, upstream: &Tensor) -> Result<Tensor> {
        let n = self.check_input(x)?;
        self.check_upstream(upstream, n)?;
        let lifted = engine::lift_f64(self, mode);
        let cache = engine::forward(&lifted, x.as_slice(), n)?;
        let grads = engine::backward(&lifted, &cache, upstream.as_slice());
        Ok(Tensor::from_parts(vec![n, self.input_dim], grads.dx))
    }

    /// Gradient of <upstream, logits> restricted to the BN affine
    /// parameters (gamma, beta), per BN layer.
    pub fn backward_theta_a(&self, x: &Tensor, mode: BnMode, upstream: &Tensor) -> Result<ThetaA> {
        let n = self.check_input(x)?;
        self.check_upstream(upstream, n)?;
        let lifted = engine::lift_f64(self, mode);
        let cache = engine::forward(&lifted, x.as_slice(), n)?;
        let grads = engine::backward(&lifted, &cache, upstream.as_slice());
        Ok(grads.bn)
    }

    fn check_upstream(&self, upstream: &Tensor, n: usize) -> Result<()> {
        let (un, uk) = upstream.dims2()?;
        if un != n || uk != self.output_dim {
            return Err(Error::Shape {
                op: "backward",
                detail: format!(
                    "upstream {}x{} does not match logits {}x{}",
                    un, uk, n, self.output_dim
                ),
            });
        }
        Ok(())
    }
}

fn he_linear(din: usize, dout: usize, rng: &mut Rng) -> LinearLayer {
    let std = (2.0 / din as f64).sqrt();
    let w: Vec<f64> = (0..din * dout).map(|_| rng.next_normal() * std).collect();
    LinearLayer {
        weight: Tensor::from_parts(vec![din, dout], w),
        bias: Tensor::zeros(&[dout]),
    }
}

pub(crate) fn snapshot_of<S: Num>(cache: &engine::Cache<S>) -> BnSnapshot {
    let layers = cache
        .bn
        .iter()
        .enumerate()
        .map(|(idx, bc)| BnStats {
            layer_index: idx,
            mu_t: bc.mu_t.iter().map(|v| v.re()).collect(),
            sigma2_t: bc.var_t.iter().map(|v| v.re()).collect(),
        })
        .collect();
    BnSnapshot { layers }
}

/// Position of a BN layer among its network's BN layers, needed to resolve
/// the `n_tr` pinning of `BnMode::Smoothed`.
#[derive(Debug, Clone, Copy)]
pub struct BnPos {
    pub index: usize,
    pub total: usize,
}

impl BnPos {
    /// A layer considered in isolation (it is its network's last BN layer).
    pub fn solo() -> Self {
        Self { index: 0, total: 1 }
    }
}

/// Single-layer batch normalization in the given mode, returning the output
/// and the recorded batch statistics.
pub fn bn_forward(
    layer: &BatchNormLayer,
    z: &Tensor,
    mode: BnMode,
    pos: BnPos,
) -> Result<(Tensor, BnStats)> {
    let (n, c) = z.dims2()?;
    if c != layer.channels() {
        return Err(Error::Shape {
            op: "bn_forward",
            detail: format!("{} channels for layer with {}", c, layer.channels()),
        });
    }
    let params: engine::BnParams<f64> = engine::bn_params(layer, mode, pos.index, pos.total);
    let (out, cache) = engine::bn_layer_forward(&params, z.as_slice(), n)?;
    let stats = BnStats {
        layer_index: layer.layer_index,
        mu_t: cache.mu_t,
        sigma2_t: cache.var_t,
    };
    Ok((Tensor::from_parts(vec![n, c], out), stats))
}
