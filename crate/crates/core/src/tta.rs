//! The six test-time adaptation rules.
//!
//! TeBN replaces BN statistics and touches no parameters; the self-learning
//! rules (TENT and the pseudo-label family) take gradient steps on an
//! unsupervised loss over the BN affine parameters theta_A. Pseudo-label
//! teachers are the pre-update network evaluated with the current batch's
//! statistics and are treated as constants by the update.

use crate::error::{Error, Result};
use crate::nn::engine::{self, Num};
use crate::nn::{snapshot_of, BnMode, BnSnapshot, Network};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtaMethod {
    TeBn,
    Tent,
    HardPl,
    SoftPl,
    RobustPl,
    ConjugatePl,
}

impl TtaMethod {
    pub const ALL: [TtaMethod; 6] = [
        TtaMethod::TeBn,
        TtaMethod::Tent,
        TtaMethod::HardPl,
        TtaMethod::SoftPl,
        TtaMethod::RobustPl,
        TtaMethod::ConjugatePl,
    ];

    /// Pseudo-label methods need teacher logits.
    pub fn uses_teacher(self) -> bool {
        matches!(self, TtaMethod::HardPl | TtaMethod::SoftPl | TtaMethod::RobustPl)
    }
}

impl std::str::FromStr for TtaMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tebn" => Ok(TtaMethod::TeBn),
            "tent" => Ok(TtaMethod::Tent),
            "hard-pl" | "hardpl" => Ok(TtaMethod::HardPl),
            "soft-pl" | "softpl" => Ok(TtaMethod::SoftPl),
            "robust-pl" | "robustpl" => Ok(TtaMethod::RobustPl),
            "conjugate-pl" | "conjugatepl" => Ok(TtaMethod::ConjugatePl),
            other => Err(Error::Config(format!("tta.method: unknown method {:?}", other))),
        }
    }
}

impl std::fmt::Display for TtaMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            TtaMethod::TeBn => "tebn",
            TtaMethod::Tent => "tent",
            TtaMethod::HardPl => "hard-pl",
            TtaMethod::SoftPl => "soft-pl",
            TtaMethod::RobustPl => "robust-pl",
            TtaMethod::ConjugatePl => "conjugate-pl",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone)]
pub struct TtaConfig {
    pub method: TtaMethod,
    /// Learning rate for the theta_A update.
    pub eta: f64,
    /// Number of plain gradient-descent steps per batch.
    pub steps: usize,
    /// Generalized cross-entropy shape, in (0, 1].
    pub q: f64,
    /// Conjugate pseudo-label temperature, positive.
    pub temperature: f64,
    pub bn_mode: BnMode,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            method: TtaMethod::Tent,
            eta: 0.001,
            steps: 1,
            q: 0.8,
            temperature: 1.0,
            bn_mode: BnMode::TestStats,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        validate_shape_params(self.q, self.temperature)?;
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(Error::Config(format!("tta.eta must be >= 0, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::Config("tta.steps must be positive".into()));
        }
        Ok(())
    }
}

fn validate_shape_params(q: f64, t: f64) -> Result<()> {
    if q.is_nan() || q <= 0.0 || q > 1.0 {
        return Err(Error::Config(format!("tta.q must lie in (0, 1], got {}", q)));
    }
    if t.is_nan() || t <= 0.0 {
        return Err(Error::Config(format!("tta.temperature must be positive, got {}", t)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Row softmax with max-subtraction; fills probabilities and log-probs.
/// log p is computed from shifted logits so saturated rows stay finite.
pub(crate) fn softmax_row<S: Num>(row: &[S], p: &mut [S], lnp: &mut [S]) {
    let mut m = row[0];
    for &v in &row[1..] {
        if v > m {
            m = v;
        }
    }
    let mut sum = S::zero();
    for (j, &v) in row.iter().enumerate() {
        let e = (v - m).exp();
        p[j] = e;
        sum = sum + e;
    }
    let lse = sum.ln();
    for j in 0..row.len() {
        p[j] = p[j] / sum;
        lnp[j] = (row[j] - m) - lse;
    }
}

pub(crate) fn argmax_row<S: Num>(row: &[S]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub(crate) struct LossGrad<S> {
    pub loss: S,
    /// d(loss)/d(student logits), n x K.
    pub dstudent: Vec<S>,
    /// d(loss)/d(teacher logits), n x K; present only for soft pseudo-labels.
    pub dteacher: Option<Vec<S>>,
}

/// Mean-over-batch TTA loss with its logit gradients, generic over the
/// scalar so the same code path serves plain and dual-number passes.
pub(crate) fn loss_grad<S: Num>(
    method: TtaMethod,
    student: &[S],
    teacher: &[S],
    n: usize,
    k: usize,
    q: f64,
    temperature: f64,
) -> LossGrad<S> {
    let inv_n = 1.0 / n as f64;
    let mut loss = S::zero();
    let mut dstudent = vec![S::zero(); n * k];
    let mut dteacher: Option<Vec<S>> = matches!(method, TtaMethod::SoftPl).then(|| vec![S::zero(); n * k]);

    let mut p = vec![S::zero(); k];
    let mut lnp = vec![S::zero(); k];
    let mut pt = vec![S::zero(); k];
    let mut lnpt = vec![S::zero(); k];

    for i in 0..n {
        let srow = &student[i * k..(i + 1) * k];
        let drow = &mut dstudent[i * k..(i + 1) * k];
        match method {
            TtaMethod::TeBn => {}
            TtaMethod::Tent => {
                softmax_row(srow, &mut p, &mut lnp);
                let h = entropy(&p, &lnp);
                loss = loss + h;
                for j in 0..k {
                    drow[j] = (-p[j] * (lnp[j] + h)).scale(inv_n);
                }
            }
            TtaMethod::ConjugatePl => {
                let scaled: Vec<S> = srow.iter().map(|&v| v.scale(1.0 / temperature)).collect();
                softmax_row(&scaled, &mut p, &mut lnp);
                let h = entropy(&p, &lnp);
                loss = loss + h;
                for j in 0..k {
                    drow[j] = (-p[j] * (lnp[j] + h)).scale(inv_n / temperature);
                }
            }
            TtaMethod::HardPl => {
                let trow = &teacher[i * k..(i + 1) * k];
                let label = argmax_row(trow);
                softmax_row(srow, &mut p, &mut lnp);
                loss = loss - lnp[label];
                for j in 0..k {
                    let tgt = if j == label { S::from_f64(1.0) } else { S::zero() };
                    drow[j] = (p[j] - tgt).scale(inv_n);
                }
            }
            TtaMethod::SoftPl => {
                let trow = &teacher[i * k..(i + 1) * k];
                softmax_row(trow, &mut pt, &mut lnpt);
                softmax_row(srow, &mut p, &mut lnp);
                // Accumulated exactly like the entropy above so the
                // self-teacher case is bit-identical to TENT.
                let mut cross = S::zero();
                for j in 0..k {
                    cross = cross - pt[j] * lnp[j];
                }
                loss = loss + cross;
                for j in 0..k {
                    drow[j] = (p[j] - pt[j]).scale(inv_n);
                }
                let dt = dteacher.as_mut().unwrap();
                let dtrow = &mut dt[i * k..(i + 1) * k];
                let mut dot = S::zero();
                for j in 0..k {
                    dot = dot + pt[j] * lnp[j];
                }
                for j in 0..k {
                    dtrow[j] = (pt[j] * (dot - lnp[j])).scale(inv_n);
                }
            }
            TtaMethod::RobustPl => {
                let trow = &teacher[i * k..(i + 1) * k];
                let label = argmax_row(trow);
                softmax_row(srow, &mut p, &mut lnp);
                // p^q as exp(q ln p): stays differentiable when p underflows.
                let pq = lnp[label].scale(q).exp();
                loss = loss + (S::from_f64(1.0) - pq).scale(1.0 / q);
                for j in 0..k {
                    let tgt = if j == label { S::from_f64(1.0) } else { S::zero() };
                    drow[j] = (-pq * (tgt - p[j])).scale(inv_n);
                }
            }
        }
    }
    LossGrad { loss: loss.scale(inv_n), dstudent, dteacher }
}

fn entropy<S: Num>(p: &[S], lnp: &[S]) -> S {
    let mut h = S::zero();
    for j in 0..p.len() {
        h = h - p[j] * lnp[j];
    }
    h
}

/// Mean TTA loss of a batch of logits. Teacher logits are those of the
/// pre-adapted model on the same batch. TeBN performs no loss and returns 0.
pub fn tta_loss(
    method: TtaMethod,
    logits: &Tensor,
    teacher_logits: &Tensor,
    q: f64,
    temperature: f64,
) -> Result<f64> {
    validate_shape_params(q, temperature)?;
    let (n, k) = logits.dims2()?;
    let (tn, tk) = teacher_logits.dims2()?;
    if (tn, tk) != (n, k) {
        return Err(Error::Shape {
            op: "tta_loss",
            detail: format!("teacher {}x{} vs student {}x{}", tn, tk, n, k),
        });
    }
    Ok(loss_grad(method, logits.as_slice(), teacher_logits.as_slice(), n, k, q, temperature).loss)
}

// ---------------------------------------------------------------------------
// Update and prediction
// ---------------------------------------------------------------------------

/// One TTA application to a batch: re-estimate BN statistics per the mode
/// and, for self-learning methods, take `steps` plain gradient-descent steps
/// of size eta on theta_A. theta_F and the BN source statistics stay fixed.
pub fn tta_update(net: &Network, batch: &Tensor, config: &TtaConfig) -> Result<(Network, BnSnapshot)> {
    config.validate()?;
    let (n, _) = batch.dims2()?;
    if n < 2 {
        return Err(Error::BatchTooSmall { n });
    }

    let lifted = engine::lift_f64(net, config.bn_mode);
    let cache = engine::forward(&lifted, batch.as_slice(), n)?;
    let snapshot = snapshot_of(&cache);
    if config.method == TtaMethod::TeBn {
        return Ok((net.clone(), snapshot));
    }

    let k = net.output_dim();
    let teacher: Vec<f64> = cache.logits().to_vec();
    let mut adapted = net.clone();
    let mut theta = adapted.theta_a();
    let mut cache = cache;
    let mut lifted = lifted;
    for step in 0..config.steps {
        if step > 0 {
            lifted = engine::lift_f64(&adapted, config.bn_mode);
            cache = engine::forward(&lifted, batch.as_slice(), n)?;
        }
        let lg = loss_grad(
            config.method,
            cache.logits(),
            &teacher,
            n,
            k,
            config.q,
            config.temperature,
        );
        let grads = engine::backward(&lifted, &cache, &lg.dstudent);
        for (slot, (dg, db)) in theta.iter_mut().zip(&grads.bn) {
            for (v, d) in slot.0.iter_mut().zip(dg) {
                *v -= config.eta * d;
            }
            for (v, d) in slot.1.iter_mut().zip(db) {
                *v -= config.eta * d;
            }
        }
        adapted.set_theta_a(&theta)?;
    }
    Ok((adapted, snapshot))
}

/// Argmax class per row; ties break toward the lowest class index.
pub fn predict(net: &Network, batch: &Tensor, mode: BnMode) -> Result<Vec<usize>> {
    let (logits, _) = net.forward(batch, mode)?;
    let (n, k) = logits.dims2()?;
    Ok((0..n).map(|i| argmax_row(&logits.as_slice()[i * k..(i + 1) * k])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use crate::numeric::Rng;

    fn random_logits(rng: &mut Rng, n: usize, k: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_parts(vec![n, k], (0..n * k).map(|_| rng.range_f64(lo, hi)).collect())
    }

    #[test]
    fn tent_on_uniform_logits_is_log_k() {
        let z = Tensor::zeros(&[2, 3]);
        let l = tta_loss(TtaMethod::Tent, &z, &z, 0.8, 1.0).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn robust_pl_at_q_one_is_one_minus_p() {
        let mut rng = Rng::new(31);
        let z = random_logits(&mut rng, 3, 4, -2.0, 2.0);
        let l = tta_loss(TtaMethod::RobustPl, &z, &z, 1.0, 1.0).unwrap();
        let p = crate::numeric::softmax(&z);
        let expect: f64 = (0..3)
            .map(|i| {
                let row: Vec<f64> = (0..4).map(|j| p.get(i, j)).collect();
                1.0 - row.iter().cloned().fold(f64::MIN, f64::max)
            })
            .sum::<f64>()
            / 3.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn robust_pl_approaches_hard_pl_as_q_vanishes() {
        let mut rng = Rng::new(32);
        // Keep argmax probabilities in [0.01, 1] as the limit statement assumes.
        let z = random_logits(&mut rng, 8, 3, -1.5, 1.5);
        let hard = tta_loss(TtaMethod::HardPl, &z, &z, 0.8, 1.0).unwrap();
        let robust = tta_loss(TtaMethod::RobustPl, &z, &z, 1e-4, 1.0).unwrap();
        assert!((hard - robust).abs() < 1e-3, "{} vs {}", hard, robust);
    }

    #[test]
    fn conjugate_pl_at_unit_temperature_equals_tent() {
        let mut rng = Rng::new(33);
        let z = random_logits(&mut rng, 5, 6, -3.0, 3.0);
        let tent = tta_loss(TtaMethod::Tent, &z, &z, 0.8, 1.0).unwrap();
        let conj = tta_loss(TtaMethod::ConjugatePl, &z, &z, 0.8, 1.0).unwrap();
        assert!((tent - conj).abs() < 1e-9);
    }

    #[test]
    fn soft_pl_with_self_teacher_equals_tent_exactly() {
        let mut rng = Rng::new(34);
        let z = random_logits(&mut rng, 4, 5, -4.0, 4.0);
        let tent = tta_loss(TtaMethod::Tent, &z, &z, 0.8, 1.0).unwrap();
        let soft = tta_loss(TtaMethod::SoftPl, &z, &z, 0.8, 1.0).unwrap();
        assert_eq!(tent, soft);
    }

    #[test]
    fn invalid_shape_parameters_are_config_errors() {
        let z = Tensor::zeros(&[2, 2]);
        assert!(tta_loss(TtaMethod::RobustPl, &z, &z, 0.0, 1.0).is_err());
        assert!(tta_loss(TtaMethod::RobustPl, &z, &z, 1.5, 1.0).is_err());
        assert!(tta_loss(TtaMethod::ConjugatePl, &z, &z, 0.8, 0.0).is_err());
    }

    fn toy_net(seed: u64) -> Network {
        let mut rng = Rng::new(seed);
        Network::mlp(3, &[4], 2, &mut rng)
    }

    fn toy_batch(seed: u64, n: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_parts(vec![n, 3], (0..n * 3).map(|_| rng.next_f64()).collect())
    }

    #[test]
    fn tebn_changes_no_parameters() {
        let net = toy_net(40);
        let batch = toy_batch(41, 6);
        let cfg = TtaConfig { method: TtaMethod::TeBn, ..TtaConfig::default() };
        let (adapted, _) = tta_update(&net, &batch, &cfg).unwrap();
        assert_eq!(net.theta_a(), adapted.theta_a());
    }

    #[test]
    fn zero_eta_changes_no_parameters_for_any_method() {
        let net = toy_net(42);
        let batch = toy_batch(43, 6);
        for method in TtaMethod::ALL {
            let cfg = TtaConfig { method, eta: 0.0, ..TtaConfig::default() };
            let (adapted, _) = tta_update(&net, &batch, &cfg).unwrap();
            assert_eq!(net.theta_a(), adapted.theta_a(), "method {}", method);
        }
    }

    #[test]
    fn tent_step_descends_the_entropy() {
        let net = toy_net(44);
        let batch = toy_batch(45, 8);
        let cfg = TtaConfig { method: TtaMethod::Tent, eta: 1e-4, ..TtaConfig::default() };
        let (before, _) = net.forward(&batch, cfg.bn_mode).unwrap();
        let e_before = tta_loss(TtaMethod::Tent, &before, &before, 0.8, 1.0).unwrap();
        let (adapted, _) = tta_update(&net, &batch, &cfg).unwrap();
        let (after, _) = adapted.forward(&batch, cfg.bn_mode).unwrap();
        let e_after = tta_loss(TtaMethod::Tent, &after, &after, 0.8, 1.0).unwrap();
        assert!(e_after <= e_before, "{} vs {}", e_after, e_before);
    }

    #[test]
    fn tebn_is_pure_statistics_replacement() {
        let net = toy_net(46);
        let batch = toy_batch(47, 6);
        let cfg = TtaConfig { method: TtaMethod::TeBn, ..TtaConfig::default() };
        let (adapted, _) = tta_update(&net, &batch, &cfg).unwrap();
        let a = predict(&adapted, &batch, cfg.bn_mode).unwrap();
        let b = predict(&net, &batch, BnMode::TestStats).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let net = toy_net(48);
        let batch = toy_batch(49, 1);
        let cfg = TtaConfig::default();
        assert!(matches!(tta_update(&net, &batch, &cfg), Err(Error::BatchTooSmall { n: 1 })));
    }

    #[test]
    fn predict_examples() {
        let mut rng = Rng::new(50);
        let mut net = Network::mlp(2, &[], 2, &mut rng);
        // Identity-ish single linear layer so logits == inputs.
        if let Layer::Linear(lin) = &mut net.layers_mut()[0] {
            lin.weight = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
            lin.bias = Tensor::zeros(&[2]);
        }
        let batch = Tensor::matrix(2, 2, vec![2.0, 1.0, 0.0, 3.0]).unwrap();
        assert_eq!(predict(&net, &batch, BnMode::TrainStats).unwrap(), vec![0, 1]);
        let tie = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(predict(&net, &tie, BnMode::TrainStats).unwrap(), vec![0, 0]);
    }
}
