//! Forward/backward passes generic over the scalar type.
//!
//! Everything here runs on flat `Vec<S>` buffers where `S` is `f64` for
//! ordinary gradients or [`Dual`] to carry a directional derivative through
//! the same code path. Running the *backward* pass in dual numbers with the
//! tangent seeded on (gamma, beta) yields the exact mixed second derivative
//! d/dx <dL/dtheta_A, u>, which is what the bilevel attack needs.
//!
//! Batch-norm backward includes the cross-sample coupling through the
//! test-time statistics: with effective tau < 1, perturbing one row moves
//! every other row's gradient.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, BnMode, Layer, Network};

pub(crate) trait Num:
    Copy
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn from_f64(v: f64) -> Self;
    /// Primal part.
    fn re(self) -> f64;
    /// Multiply by a constant (no tangent of its own).
    fn scale(self, k: f64) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

impl Num for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Forward-mode dual number. Comparisons look at the primal part only, so
/// branch decisions (ReLU masks, argmax, max-subtraction) match the f64 run.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }
    pub fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }
}

impl PartialEq for Dual {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl PartialOrd for Dual {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.du * o.re + self.re * o.du)
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Self::new(self.re / o.re, (self.du * o.re - self.re * o.du) / (o.re * o.re))
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.re, -self.du)
    }
}

impl Num for Dual {
    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn from_f64(v: f64) -> Self {
        Self::constant(v)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn scale(self, k: f64) -> Self {
        Self::new(self.re * k, self.du * k)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Self::new(s, self.du / (2.0 * s))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Self::new(e, self.du * e)
    }
    fn ln(self) -> Self {
        Self::new(self.re.ln(), self.du / self.re)
    }
}

// ---------------------------------------------------------------------------
// Lifted network
// ---------------------------------------------------------------------------

pub(crate) struct BnParams<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub mu_s: Vec<f64>,
    pub var_s: Vec<f64>,
    pub eps: f64,
    /// Effective smoothing factor for this layer after n_tr pinning.
    pub tau: f64,
}

pub(crate) enum ELayer<S> {
    Linear { w: Vec<S>, b: Vec<S>, din: usize, dout: usize },
    Relu,
    Bn(BnParams<S>),
}

pub(crate) struct ENet<S> {
    pub layers: Vec<ELayer<S>>,
    pub input_dim: usize,
}

/// Per-BN-layer (gamma, beta) value pairs: the theta_A slice of a network.
pub type ThetaA = Vec<(Vec<f64>, Vec<f64>)>;

fn effective_tau(mode: BnMode, bn_index: usize, bn_total: usize) -> f64 {
    match mode {
        BnMode::TrainStats => 1.0,
        BnMode::TestStats => 0.0,
        BnMode::Smoothed { tau, n_tr } => {
            let pinned = n_tr.min(bn_total);
            if bn_index + pinned >= bn_total {
                1.0
            } else {
                tau
            }
        }
    }
}

pub(crate) fn bn_params<S: Num>(
    layer: &BatchNormLayer,
    mode: BnMode,
    bn_index: usize,
    bn_total: usize,
) -> BnParams<S> {
    BnParams {
        gamma: layer.gamma.as_slice().iter().map(|&v| S::from_f64(v)).collect(),
        beta: layer.beta.as_slice().iter().map(|&v| S::from_f64(v)).collect(),
        mu_s: layer.mu_s.as_slice().to_vec(),
        var_s: layer.sigma2_s.as_slice().to_vec(),
        eps: layer.eps,
        tau: effective_tau(mode, bn_index, bn_total),
    }
}

/// Lift a network into `S`-valued parameters. `tangent`, when given, seeds
/// the dual part of (gamma, beta); all other parameters carry tangent zero.
pub(crate) fn lift(net: &Network, mode: BnMode, tangent: Option<&ThetaA>) -> ENet<Dual> {
    let bn_total = net.num_bn();
    let mut bn_index = 0usize;
    let layers = net
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::Linear(lin) => ELayer::Linear {
                w: lin.weight.as_slice().iter().map(|&v| Dual::constant(v)).collect(),
                b: lin.bias.as_slice().iter().map(|&v| Dual::constant(v)).collect(),
                din: lin.in_dim(),
                dout: lin.out_dim(),
            },
            Layer::Relu => ELayer::Relu,
            Layer::BatchNorm(bn) => {
                let mut p: BnParams<Dual> = bn_params(bn, mode, bn_index, bn_total);
                if let Some(t) = tangent {
                    let (ug, ub) = &t[bn_index];
                    for (g, &u) in p.gamma.iter_mut().zip(ug) {
                        g.du = u;
                    }
                    for (b, &u) in p.beta.iter_mut().zip(ub) {
                        b.du = u;
                    }
                }
                bn_index += 1;
                ELayer::Bn(p)
            }
        })
        .collect();
    ENet { layers, input_dim: net.input_dim() }
}

pub(crate) fn lift_f64(net: &Network, mode: BnMode) -> ENet<f64> {
    let bn_total = net.num_bn();
    let mut bn_index = 0usize;
    let layers = net
        .layers()
        .iter()
        .map(|layer| match layer {
            Layer::Linear(lin) => ELayer::Linear {
                w: lin.weight.as_slice().to_vec(),
                b: lin.bias.as_slice().to_vec(),
                din: lin.in_dim(),
                dout: lin.out_dim(),
            },
            Layer::Relu => ELayer::Relu,
            Layer::BatchNorm(bn) => {
                let p = bn_params(bn, mode, bn_index, bn_total);
                bn_index += 1;
                ELayer::Bn(p)
            }
        })
        .collect();
    ENet { layers, input_dim: net.input_dim() }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

pub(crate) struct BnCache<S> {
    pub mu_t: Vec<S>,
    pub var_t: Vec<S>,
    /// 1/sqrt(blended var + eps), per channel.
    pub r: Vec<S>,
    /// z - blended mean, n x C.
    pub zc: Vec<S>,
    /// z - test-time mean, n x C (the variance path in backward).
    pub zmu_t: Vec<S>,
    /// Normalized activations, n x C.
    pub xhat: Vec<S>,
}

pub(crate) struct Cache<S> {
    pub n: usize,
    /// acts[k] is the input to layer k; acts[L] holds the logits.
    pub acts: Vec<Vec<S>>,
    pub bn: Vec<BnCache<S>>,
}

impl<S: Num> Cache<S> {
    pub fn logits(&self) -> &[S] {
        self.acts.last().unwrap()
    }
}

pub(crate) fn bn_layer_forward<S: Num>(
    p: &BnParams<S>,
    z: &[S],
    n: usize,
) -> Result<(Vec<S>, BnCache<S>)> {
    let c = p.gamma.len();
    debug_assert_eq!(z.len(), n * c);
    if p.tau < 1.0 && n < 2 {
        return Err(Error::BatchTooSmall { n });
    }
    // Batch statistics (biased variance, divisor n). Recorded even when the
    // mode does not consume them so snapshots always reflect the test batch.
    let inv_n = 1.0 / n as f64;
    let mut mu_t = vec![S::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            mu_t[ch] = mu_t[ch] + z[i * c + ch];
        }
    }
    for m in mu_t.iter_mut() {
        *m = m.scale(inv_n);
    }
    let mut var_t = vec![S::zero(); c];
    let mut zmu_t = vec![S::zero(); n * c];
    for i in 0..n {
        for ch in 0..c {
            let d = z[i * c + ch] - mu_t[ch];
            zmu_t[i * c + ch] = d;
            var_t[ch] = var_t[ch] + d * d;
        }
    }
    for v in var_t.iter_mut() {
        *v = v.scale(inv_n);
    }

    // Blend exactly: tau 0 and tau 1 reuse the endpoint values bit-for-bit.
    let mut mu_bar = vec![S::zero(); c];
    let mut r = vec![S::zero(); c];
    for ch in 0..c {
        let (m, v) = if p.tau == 0.0 {
            (mu_t[ch], var_t[ch])
        } else if p.tau == 1.0 {
            (S::from_f64(p.mu_s[ch]), S::from_f64(p.var_s[ch]))
        } else {
            (
                mu_t[ch].scale(1.0 - p.tau) + S::from_f64(p.tau * p.mu_s[ch]),
                var_t[ch].scale(1.0 - p.tau) + S::from_f64(p.tau * p.var_s[ch]),
            )
        };
        mu_bar[ch] = m;
        r[ch] = S::from_f64(1.0) / (v + S::from_f64(p.eps)).sqrt();
    }

    let mut zc = vec![S::zero(); n * c];
    let mut xhat = vec![S::zero(); n * c];
    let mut out = vec![S::zero(); n * c];
    for i in 0..n {
        for ch in 0..c {
            let d = z[i * c + ch] - mu_bar[ch];
            zc[i * c + ch] = d;
            let h = d * r[ch];
            xhat[i * c + ch] = h;
            out[i * c + ch] = p.gamma[ch] * h + p.beta[ch];
        }
    }
    Ok((out, BnCache { mu_t, var_t, r, zc, zmu_t, xhat }))
}

pub(crate) fn forward<S: Num>(net: &ENet<S>, x: &[S], n: usize) -> Result<Cache<S>> {
    debug_assert_eq!(x.len(), n * net.input_dim);
    let mut acts: Vec<Vec<S>> = vec![x.to_vec()];
    let mut bn_caches = Vec::new();
    for layer in &net.layers {
        let cur = acts.last().unwrap();
        let next = match layer {
            ELayer::Linear { w, b, din, dout } => {
                let mut out = vec![S::zero(); n * dout];
                for i in 0..n {
                    let row = &cur[i * din..(i + 1) * din];
                    let orow = &mut out[i * dout..(i + 1) * dout];
                    orow.copy_from_slice(b);
                    for (a, &av) in row.iter().enumerate() {
                        let wrow = &w[a * dout..(a + 1) * dout];
                        for (ov, &wv) in orow.iter_mut().zip(wrow) {
                            *ov = *ov + av * wv;
                        }
                    }
                }
                out
            }
            ELayer::Relu => cur
                .iter()
                .map(|&v| if v > S::zero() { v } else { S::zero() })
                .collect(),
            ELayer::Bn(p) => {
                let (out, cache) = bn_layer_forward(p, cur, n)?;
                bn_caches.push(cache);
                out
            }
        };
        acts.push(next);
    }
    Ok(Cache { n, acts, bn: bn_caches })
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

pub(crate) struct Grads<S> {
    /// n x input_dim gradient with respect to the batch entries.
    pub dx: Vec<S>,
    /// Per linear layer (dW, db), in layer order.
    pub linear: Vec<(Vec<S>, Vec<S>)>,
    /// Per BN layer (dgamma, dbeta), in layer order.
    pub bn: Vec<(Vec<S>, Vec<S>)>,
}

/// Reverse pass for the scalar <upstream, logits>. Includes the BN coupling
/// terms through the batch statistics whenever effective tau < 1.
pub(crate) fn backward<S: Num>(net: &ENet<S>, cache: &Cache<S>, dlogits: &[S]) -> Grads<S> {
    let n = cache.n;
    let mut grad = dlogits.to_vec();
    let mut linear_grads: Vec<(Vec<S>, Vec<S>)> = Vec::new();
    let mut bn_grads: Vec<(Vec<S>, Vec<S>)> = Vec::new();
    let mut bn_index = cache.bn.len();

    for (k, layer) in net.layers.iter().enumerate().rev() {
        let input = &cache.acts[k];
        match layer {
            ELayer::Linear { w, din, dout, .. } => {
                let mut dw = vec![S::zero(); din * dout];
                let mut db = vec![S::zero(); *dout];
                let mut dx = vec![S::zero(); n * din];
                for i in 0..n {
                    let grow = &grad[i * dout..(i + 1) * dout];
                    let xrow = &input[i * din..(i + 1) * din];
                    for o in 0..*dout {
                        db[o] = db[o] + grow[o];
                    }
                    for a in 0..*din {
                        let wrow = &w[a * dout..(a + 1) * dout];
                        let mut acc = S::zero();
                        for o in 0..*dout {
                            acc = acc + grow[o] * wrow[o];
                            dw[a * dout + o] = dw[a * dout + o] + xrow[a] * grow[o];
                        }
                        dx[i * din + a] = acc;
                    }
                }
                linear_grads.push((dw, db));
                grad = dx;
            }
            ELayer::Relu => {
                // The mask must match the forward branch exactly.
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                for (g, &v) in grad.iter_mut().zip(input.iter()) {
                    if !(v > S::zero()) {
                        *g = S::zero();
                    }
                }
            }
            ELayer::Bn(p) => {
                bn_index -= 1;
                let bc = &cache.bn[bn_index];
                let c = p.gamma.len();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut s1 = vec![S::zero(); c];
                let mut s2 = vec![S::zero(); c];
                // D = dL/dxhat stored in place of grad rows.
                let mut d = vec![S::zero(); n * c];
                for i in 0..n {
                    for ch in 0..c {
                        let idx = i * c + ch;
                        let g = grad[idx];
                        dgamma[ch] = dgamma[ch] + g * bc.xhat[idx];
                        dbeta[ch] = dbeta[ch] + g;
                        let di = g * p.gamma[ch];
                        d[idx] = di;
                        s1[ch] = s1[ch] + di;
                        s2[ch] = s2[ch] + di * bc.zc[idx];
                    }
                }
                let mut dz = vec![S::zero(); n * c];
                if p.tau == 1.0 {
                    // Source statistics are constants: no batch coupling.
                    for i in 0..n {
                        for ch in 0..c {
                            let idx = i * c + ch;
                            dz[idx] = d[idx] * bc.r[ch];
                        }
                    }
                } else {
                    let w = (1.0 - p.tau) / n as f64;
                    for i in 0..n {
                        for ch in 0..c {
                            let idx = i * c + ch;
                            let r = bc.r[ch];
                            let r3 = r * r * r;
                            dz[idx] = r * d[idx]
                                - (r * s1[ch]).scale(w)
                                - (r3 * bc.zmu_t[idx] * s2[ch]).scale(w);
                        }
                    }
                }
                bn_grads.push((dgamma, dbeta));
                grad = dz;
            }
        }
    }
    linear_grads.reverse();
    bn_grads.reverse();
    Grads { dx: grad, linear: linear_grads, bn: bn_grads }
}
