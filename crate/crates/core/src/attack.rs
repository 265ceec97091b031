//! Distribution Invading Attack.
//!
//! Crafts an l-inf-bounded (or pixel-bounded) perturbation on a malicious
//! subset of the test batch so that the TTA-updated model mispredicts other,
//! unperturbed rows of the same batch. Sign projected gradient descent over
//! the composite objective; the single-level variant differentiates only
//! through the BN statistics re-estimation, the bilevel variant additionally
//! differentiates through one inner theta_A update, exactly, via a
//! dual-number backward pass.

use crate::error::{Error, Result};
use crate::nn::engine::{self, Dual, ThetaA};
use crate::nn::{BnMode, Network};
use crate::numeric::{Rng, Tensor};
use crate::tta::{loss_grad, softmax_row, TtaConfig, TtaMethod};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackObjective {
    /// Flip one chosen benign sample to a chosen wrong label.
    Targeted { tgt_index: usize, tgt_label: usize },
    /// Degrade every benign sample in the batch.
    Indiscriminate,
    /// Flip the target while preserving accuracy on the remaining benign
    /// rows, weighted by omega.
    StealthyTargeted { tgt_index: usize, tgt_label: usize, omega: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Bounded(f64),
    /// No l-inf ball; only the pixel bounds constrain the perturbation.
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub objective: AttackObjective,
    /// Batch row indices the adversary controls, sorted and distinct.
    pub mal_indices: Vec<usize>,
    pub epsilon: Epsilon,
    /// Sign-step size.
    pub alpha: f64,
    /// Number of PGD steps.
    pub n_steps: usize,
    /// Differentiate through the one-step inner TTA update.
    pub bilevel: bool,
    /// Random restarts; the first start is always the zero perturbation.
    pub restarts: usize,
    pub pixel_bounds: (f64, f64),
}

impl AttackSpec {
    pub fn new(objective: AttackObjective, mal_indices: Vec<usize>) -> Self {
        Self {
            objective,
            mal_indices,
            epsilon: Epsilon::Unbounded,
            alpha: 1.0 / 255.0,
            n_steps: 500,
            bilevel: false,
            restarts: 1,
            pixel_bounds: (0.0, 1.0),
        }
    }

    fn validate(&self, n: usize, labels: Option<&[usize]>) -> Result<()> {
        if self.mal_indices.is_empty() {
            return Err(Error::Config("attack.mal_indices must not be empty".into()));
        }
        if self.mal_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("attack.mal_indices must be sorted and distinct".into()));
        }
        if *self.mal_indices.last().unwrap() >= n {
            return Err(Error::Config(format!(
                "attack.mal_indices: index {} out of range for batch of {}",
                self.mal_indices.last().unwrap(),
                n
            )));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::Config(format!("attack.alpha must be positive, got {}", self.alpha)));
        }
        if let Epsilon::Bounded(e) = self.epsilon {
            if e < 0.0 {
                return Err(Error::Config(format!("attack.epsilon must be >= 0, got {}", e)));
            }
        }
        if self.pixel_bounds.0 >= self.pixel_bounds.1 {
            return Err(Error::Config("attack.pixel_bounds must be a nonempty interval".into()));
        }
        match self.objective {
            AttackObjective::Targeted { tgt_index, .. } => {
                self.check_target(tgt_index, n)?;
            }
            AttackObjective::StealthyTargeted { tgt_index, omega, .. } => {
                self.check_target(tgt_index, n)?;
                if omega < 0.0 {
                    return Err(Error::Config(format!("attack.omega must be >= 0, got {}", omega)));
                }
                if labels.is_none() {
                    return Err(Error::Config(
                        "attack: stealthy objective needs ground-truth labels".into(),
                    ));
                }
            }
            AttackObjective::Indiscriminate => {
                if labels.is_none() {
                    return Err(Error::Config(
                        "attack: indiscriminate objective needs ground-truth labels".into(),
                    ));
                }
                if self.mal_indices.len() == n {
                    return Err(Error::Config("attack: no benign rows left in the batch".into()));
                }
            }
        }
        Ok(())
    }

    fn check_target(&self, tgt: usize, n: usize) -> Result<()> {
        if tgt >= n {
            return Err(Error::Config(format!("attack.tgt_index {} out of range", tgt)));
        }
        if self.mal_indices.binary_search(&tgt).is_ok() {
            return Err(Error::Config(
                "attack.tgt_index must not be a malicious row: the targeted sample stays unperturbed"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Perturbation for the malicious rows, N_m x d, in mal_indices order.
    pub perturbation: Tensor,
    /// Loss of the best iterate visited.
    pub final_loss: f64,
    /// Index into loss_trace at which the best iterate was seen.
    pub best_step: usize,
    /// Loss at every evaluated iterate, in evaluation order.
    pub loss_trace: Vec<f64>,
}

/// Rebuild the batch with the perturbation added to the malicious rows.
/// Rows outside mal_indices are bit-identical to the input.
pub fn apply_perturbation(batch: &Tensor, mal_indices: &[usize], delta: &Tensor) -> Result<Tensor> {
    let (_, d) = batch.dims2()?;
    let (m, dd) = delta.dims2()?;
    if m != mal_indices.len() || dd != d {
        return Err(Error::Shape {
            op: "apply_perturbation",
            detail: format!("delta {}x{} for {} malicious rows of width {}", m, dd, mal_indices.len(), d),
        });
    }
    let mut data = batch.as_slice().to_vec();
    for (r, &row) in mal_indices.iter().enumerate() {
        for j in 0..d {
            data[row * d + j] += delta.get(r, j);
        }
    }
    Ok(Tensor::from_parts(vec![batch.shape()[0], d], data))
}

// ---------------------------------------------------------------------------
// Adversarial losses
// ---------------------------------------------------------------------------

/// Loss and logit gradient for the chosen objective. Row sets: benign rows
/// are everything outside mal_indices; the stealthy rest set additionally
/// excludes the target.
fn objective_loss_grad(
    objective: &AttackObjective,
    mal_indices: &[usize],
    logits: &[f64],
    n: usize,
    k: usize,
    labels: Option<&[usize]>,
) -> Result<(f64, Vec<f64>)> {
    let mut dlogits = vec![0.0; n * k];
    let mut p = vec![0.0; k];
    let mut lnp = vec![0.0; k];
    let mut ce_row = |row: usize, label: usize, weight: f64, dl: &mut [f64]| -> f64 {
        softmax_row(&logits[row * k..(row + 1) * k], &mut p, &mut lnp);
        for j in 0..k {
            let tgt = if j == label { 1.0 } else { 0.0 };
            dl[row * k + j] += weight * (p[j] - tgt);
        }
        -weight * lnp[label]
    };
    let loss = match *objective {
        AttackObjective::Targeted { tgt_index, tgt_label } => {
            ce_row(tgt_index, tgt_label, 1.0, &mut dlogits)
        }
        AttackObjective::Indiscriminate => {
            let labels = labels.expect("validated");
            let benign: Vec<usize> =
                (0..n).filter(|i| mal_indices.binary_search(i).is_err()).collect();
            let w = -1.0 / benign.len() as f64;
            let mut loss = 0.0;
            for &i in &benign {
                loss += ce_row(i, labels[i], w, &mut dlogits);
            }
            loss
        }
        AttackObjective::StealthyTargeted { tgt_index, tgt_label, omega } => {
            let labels = labels.expect("validated");
            let mut loss = ce_row(tgt_index, tgt_label, 1.0, &mut dlogits);
            let rest: Vec<usize> = (0..n)
                .filter(|&i| i != tgt_index && mal_indices.binary_search(&i).is_err())
                .collect();
            if !rest.is_empty() && omega != 0.0 {
                let w = omega / rest.len() as f64;
                for &i in &rest {
                    loss += ce_row(i, labels[i], w, &mut dlogits);
                }
            }
            loss
        }
    };
    Ok((loss, dlogits))
}

/// Adversarial loss of a finished (post-adaptation) network on a batch.
pub fn adversarial_loss(
    spec: &AttackSpec,
    net_star: &Network,
    batch: &Tensor,
    labels: Option<&[usize]>,
    mode: BnMode,
) -> Result<f64> {
    let (n, _) = batch.dims2()?;
    spec.validate(n, labels)?;
    check_labels(labels, n, net_star.output_dim())?;
    let (logits, _) = net_star.forward(batch, mode)?;
    let (loss, _) = objective_loss_grad(
        &spec.objective,
        &spec.mal_indices,
        logits.as_slice(),
        n,
        net_star.output_dim(),
        labels,
    )?;
    Ok(loss)
}

fn check_labels(labels: Option<&[usize]>, n: usize, k: usize) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Config(format!("labels: {} entries for batch of {}", l.len(), n)));
        }
        if l.iter().any(|&y| y >= k) {
            return Err(Error::Config("labels: class index out of range".into()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Composite gradient
// ---------------------------------------------------------------------------

/// Loss of the composite objective at the given perturbation, plus its
/// gradient restricted to the malicious rows.
pub(crate) fn composite_loss_and_grad(
    net_pre: &Network,
    batch: &Tensor,
    labels: Option<&[usize]>,
    tta: &TtaConfig,
    spec: &AttackSpec,
    delta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (n, d) = batch.dims2()?;
    let k = net_pre.output_dim();
    let mode = tta.bn_mode;

    let mut x = batch.as_slice().to_vec();
    for (r, &row) in spec.mal_indices.iter().enumerate() {
        for j in 0..d {
            x[row * d + j] += delta[r * d + j];
        }
    }

    // Inner one-step update, when the attack models it.
    let inner_active = spec.bilevel && tta.method != TtaMethod::TeBn && tta.eta != 0.0;
    let (net_star, inner_applied) = if inner_active {
        let lifted = engine::lift_f64(net_pre, mode);
        let cache = engine::forward(&lifted, &x, n)?;
        let teacher: Vec<f64> = cache.logits().to_vec();
        let lg = loss_grad(tta.method, cache.logits(), &teacher, n, k, tta.q, tta.temperature);
        let grads = engine::backward(&lifted, &cache, &lg.dstudent);
        let mut theta = net_pre.theta_a();
        for (slot, (dg, db)) in theta.iter_mut().zip(&grads.bn) {
            for (v, g) in slot.0.iter_mut().zip(dg) {
                *v -= tta.eta * g;
            }
            for (v, g) in slot.1.iter_mut().zip(db) {
                *v -= tta.eta * g;
            }
        }
        let mut updated = net_pre.clone();
        updated.set_theta_a(&theta)?;
        (updated, true)
    } else {
        (net_pre.clone(), false)
    };

    // Direct term: gradient through the prediction forward (BN statistics
    // of the perturbed batch included), theta_A* held fixed.
    let lifted_star = engine::lift_f64(&net_star, mode);
    let cache_star = engine::forward(&lifted_star, &x, n)?;
    let (loss, dlogits) =
        objective_loss_grad(&spec.objective, &spec.mal_indices, cache_star.logits(), n, k, labels)?;
    let grads_star = engine::backward(&lifted_star, &cache_star, &dlogits);
    let mut dx = grads_star.dx;

    // Mixed term: d theta_A'/dx contracted with dL_adv/d theta_A', computed
    // exactly by replaying the inner gradient in dual numbers.
    if inner_applied {
        let mixed = grad_of_inner_dot(net_pre, &x, n, k, tta, &grads_star.bn)?;
        for (a, m) in dx.iter_mut().zip(mixed) {
            *a -= tta.eta * m;
        }
    }

    let mut grad_mal = Vec::with_capacity(spec.mal_indices.len() * d);
    for &row in &spec.mal_indices {
        grad_mal.extend_from_slice(&dx[row * d..(row + 1) * d]);
    }
    Ok((loss, grad_mal))
}

/// Gradient with respect to the batch of <d L_TTA / d theta_A, u>, the
/// directional derivative of the inner TTA gradient along u. The backward
/// pass runs in dual numbers with the tangent seeded on theta_A; equality of
/// mixed partials makes the dual part of dL/dx exactly the wanted gradient.
/// Teachers are tangent-free: the inner update treats them as constants.
fn grad_of_inner_dot(
    net_pre: &Network,
    x: &[f64],
    n: usize,
    k: usize,
    tta: &TtaConfig,
    u: &ThetaA,
) -> Result<Vec<f64>> {
    let xd: Vec<Dual> = x.iter().map(|&v| Dual::constant(v)).collect();
    let student = engine::lift(net_pre, tta.bn_mode, Some(u));
    let cache_s = engine::forward(&student, &xd, n)?;

    let teacher_pass = tta.method == TtaMethod::SoftPl;
    let (teacher_logits, teacher_ctx) = if teacher_pass {
        let teacher = engine::lift(net_pre, tta.bn_mode, None);
        let cache_t = engine::forward(&teacher, &xd, n)?;
        (cache_t.logits().to_vec(), Some((teacher, cache_t)))
    } else {
        // Hard-label teachers only feed an argmax; the student's primal
        // logits are identical, so reuse them.
        (cache_s.logits().to_vec(), None)
    };

    let lg = loss_grad(tta.method, cache_s.logits(), &teacher_logits, n, k, tta.q, tta.temperature);
    let grads_s = engine::backward(&student, &cache_s, &lg.dstudent);
    let mut out: Vec<f64> = grads_s.dx.iter().map(|d| d.du).collect();
    if let (Some(dteacher), Some((teacher, cache_t))) = (lg.dteacher, teacher_ctx) {
        let grads_t = engine::backward(&teacher, &cache_t, &dteacher);
        for (o, g) in out.iter_mut().zip(grads_t.dx) {
            *o += g.du;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PGD
// ---------------------------------------------------------------------------

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign_step_flat(
    delta: &mut [f64],
    grad: &[f64],
    alpha: f64,
    epsilon: Epsilon,
    base: &[f64],
    bounds: (f64, f64),
) {
    for ((dv, &gv), &bv) in delta.iter_mut().zip(grad).zip(base) {
        let mut v = *dv - alpha * sign(gv);
        if let Epsilon::Bounded(e) = epsilon {
            v = v.clamp(-e, e);
        }
        v = v.clamp(bounds.0 - bv, bounds.1 - bv);
        *dv = v;
    }
}

/// One projected sign step: delta - alpha * sign(grad), clipped to the
/// l-inf ball and so that base + delta stays within the pixel bounds.
pub fn sign_gradient_step(
    delta: &Tensor,
    grad: &Tensor,
    alpha: f64,
    epsilon: Epsilon,
    base_rows: &Tensor,
    pixel_bounds: (f64, f64),
) -> Result<Tensor> {
    if delta.shape() != grad.shape() || delta.shape() != base_rows.shape() {
        return Err(Error::Shape {
            op: "sign_gradient_step",
            detail: format!(
                "delta {:?}, grad {:?}, base {:?}",
                delta.shape(),
                grad.shape(),
                base_rows.shape()
            ),
        });
    }
    let mut out = delta.as_slice().to_vec();
    sign_step_flat(&mut out, grad.as_slice(), alpha, epsilon, base_rows.as_slice(), pixel_bounds);
    Ok(Tensor::from_parts(delta.shape().to_vec(), out))
}

/// Craft the perturbation (Algorithm: iterate batch rebuild, BN
/// re-estimation, optional inner update, projected sign step). Returns the
/// best-loss iterate visited; the zero perturbation is always a candidate.
pub fn dia_attack(
    net_pre: &Network,
    batch: &Tensor,
    labels: Option<&[usize]>,
    tta: &TtaConfig,
    spec: &AttackSpec,
    rng: &mut Rng,
) -> Result<AttackResult> {
    let (n, d) = batch.dims2()?;
    if n < 2 {
        return Err(Error::BatchTooSmall { n });
    }
    tta.validate()?;
    spec.validate(n, labels)?;
    check_labels(labels, n, net_pre.output_dim())?;

    let m = spec.mal_indices.len();
    let mut base = Vec::with_capacity(m * d);
    for &row in &spec.mal_indices {
        base.extend_from_slice(batch.row(row));
    }
    let (lo, hi) = spec.pixel_bounds;
    if base.iter().any(|&v| v < lo || v > hi) {
        return Err(Error::Config("attack: malicious rows start outside pixel_bounds".into()));
    }

    let mut best_loss = f64::INFINITY;
    let mut best_delta = vec![0.0; m * d];
    let mut best_step = 0usize;
    let mut trace = Vec::new();

    for restart in 0..spec.restarts.max(1) {
        let mut delta = vec![0.0; m * d];
        if restart > 0 {
            for (dv, &bv) in delta.iter_mut().zip(&base) {
                let r = match spec.epsilon {
                    Epsilon::Bounded(e) => rng.range_f64(-e, e),
                    Epsilon::Unbounded => rng.range_f64(lo - bv, hi - bv),
                };
                *dv = r.clamp(lo - bv, hi - bv);
            }
        }
        for step in 0..=spec.n_steps {
            let (loss, grad) = composite_loss_and_grad(net_pre, batch, labels, tta, spec, &delta)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "dia_attack loss", step });
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "dia_attack gradient", step });
            }
            trace.push(loss);
            if loss < best_loss {
                best_loss = loss;
                best_delta.copy_from_slice(&delta);
                best_step = trace.len() - 1;
            }
            if step < spec.n_steps {
                sign_step_flat(&mut delta, &grad, spec.alpha, spec.epsilon, &base, spec.pixel_bounds);
            }
        }
    }

    Ok(AttackResult {
        perturbation: Tensor::from_parts(vec![m, d], best_delta),
        final_loss: best_loss,
        best_step,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn toy_net(seed: u64) -> Network {
        let mut rng = Rng::new(seed);
        let mut net = Network::mlp(3, &[4], 2, &mut rng);
        for layer in net.layers_mut() {
            if let Layer::BatchNorm(bn) = layer {
                let c = bn.channels();
                bn.mu_s = Tensor::from_parts(vec![c], (0..c).map(|_| rng.range_f64(-0.2, 0.2)).collect());
                bn.sigma2_s =
                    Tensor::from_parts(vec![c], (0..c).map(|_| rng.range_f64(0.5, 1.5)).collect());
            }
        }
        net
    }

    fn toy_batch(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_parts(vec![n, d], (0..n * d).map(|_| rng.next_f64()).collect())
    }

    fn targeted_spec(n_steps: usize) -> AttackSpec {
        AttackSpec {
            n_steps,
            ..AttackSpec::new(
                AttackObjective::Targeted { tgt_index: 0, tgt_label: 1 },
                vec![2, 3],
            )
        }
    }

    #[test]
    fn stealthy_with_zero_omega_equals_targeted() {
        let net = toy_net(60);
        let batch = toy_batch(61, 5, 3);
        let labels = vec![0usize, 1, 0, 1, 0];
        let t = AttackSpec::new(AttackObjective::Targeted { tgt_index: 0, tgt_label: 1 }, vec![2]);
        let s = AttackSpec::new(
            AttackObjective::StealthyTargeted { tgt_index: 0, tgt_label: 1, omega: 0.0 },
            vec![2],
        );
        let lt = adversarial_loss(&t, &net, &batch, Some(&labels), BnMode::TestStats).unwrap();
        let ls = adversarial_loss(&s, &net, &batch, Some(&labels), BnMode::TestStats).unwrap();
        assert_eq!(lt, ls);
    }

    #[test]
    fn targeted_loss_is_zero_at_full_confidence() {
        // A network whose logits are huge in class 1 for every row.
        let mut net = toy_net(62);
        for layer in net.layers_mut() {
            if let Layer::Linear(lin) = layer {
                if lin.out_dim() == 2 {
                    lin.weight = Tensor::zeros(lin.weight.shape());
                    lin.bias = Tensor::vector(vec![-500.0, 500.0]).unwrap();
                }
            }
        }
        let batch = toy_batch(63, 4, 3);
        let spec = AttackSpec::new(AttackObjective::Targeted { tgt_index: 0, tgt_label: 1 }, vec![2]);
        let l = adversarial_loss(&spec, &net, &batch, None, BnMode::TestStats).unwrap();
        assert!(l.abs() < 1e-12, "loss {}", l);
    }

    #[test]
    fn indiscriminate_loss_matches_direct_ce_oracle() {
        let net = toy_net(64);
        let batch = toy_batch(65, 6, 3);
        let labels = vec![0usize, 1, 0, 1, 0, 1];
        let spec = AttackSpec::new(AttackObjective::Indiscriminate, vec![1, 4]);
        let got = adversarial_loss(&spec, &net, &batch, Some(&labels), BnMode::TestStats).unwrap();
        let (logits, _) = net.forward(&batch, BnMode::TestStats).unwrap();
        let p = crate::numeric::softmax(&logits);
        let benign = [0usize, 2, 3, 5];
        let mean_ce: f64 =
            benign.iter().map(|&i| -p.get(i, labels[i]).ln()).sum::<f64>() / benign.len() as f64;
        assert!((got + mean_ce).abs() < 1e-12);
    }

    #[test]
    fn sign_step_examples() {
        let base = Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        let delta = Tensor::zeros(&[1, 3]);
        let grad = Tensor::matrix(1, 3, vec![0.0, 2.0, -3.0]).unwrap();
        let zero_grad = Tensor::zeros(&[1, 3]);
        let stay = sign_gradient_step(&delta, &zero_grad, 0.1, Epsilon::Bounded(0.2), &base, (0.0, 1.0))
            .unwrap();
        assert_eq!(stay.as_slice(), delta.as_slice());
        let a = 1.0 / 255.0;
        let stepped =
            sign_gradient_step(&delta, &grad, a, Epsilon::Bounded(0.2), &base, (0.0, 1.0)).unwrap();
        assert_eq!(stepped.as_slice(), &[0.0, -a, a]);
    }

    proptest::proptest! {
        /// Projection soundness after every step, for arbitrary gradients,
        /// step sizes and budgets.
        #[test]
        fn projection_survives_random_step_fuzzing(
            eps in 0.0..0.4f64,
            base in proptest::collection::vec(0.0..1.0f64, 8),
            steps in proptest::collection::vec(
                (proptest::collection::vec(-1.0..1.0f64, 8), 1e-4..0.3f64),
                1..40,
            ),
        ) {
            let mut delta = vec![0.0; 8];
            for (grad, alpha) in &steps {
                sign_step_flat(&mut delta, grad, *alpha, Epsilon::Bounded(eps), &base, (0.0, 1.0));
                for (dv, bv) in delta.iter().zip(&base) {
                    proptest::prop_assert!(dv.abs() <= eps + 1e-15);
                    let v = bv + dv;
                    proptest::prop_assert!((-1e-15..=1.0 + 1e-15).contains(&v));
                }
            }
        }
    }

    #[test]
    fn zero_epsilon_leaves_the_batch_alone() {
        let net = toy_net(67);
        let batch = toy_batch(68, 5, 3);
        let mut spec = targeted_spec(40);
        spec.epsilon = Epsilon::Bounded(0.0);
        let mut rng = Rng::new(1);
        let tta = TtaConfig { method: TtaMethod::TeBn, ..TtaConfig::default() };
        let res = dia_attack(&net, &batch, None, &tta, &spec, &mut rng).unwrap();
        assert!(res.perturbation.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(res.final_loss, res.loss_trace[0]);
    }

    #[test]
    fn benign_rows_stay_bit_identical() {
        let net = toy_net(69);
        let batch = toy_batch(70, 5, 3);
        let spec = targeted_spec(25);
        let mut rng = Rng::new(2);
        let tta = TtaConfig { method: TtaMethod::TeBn, ..TtaConfig::default() };
        let res = dia_attack(&net, &batch, None, &tta, &spec, &mut rng).unwrap();
        let perturbed = apply_perturbation(&batch, &spec.mal_indices, &res.perturbation).unwrap();
        for i in [0usize, 1, 4] {
            assert_eq!(perturbed.row(i), batch.row(i));
        }
    }

    #[test]
    fn bilevel_with_zero_eta_is_bit_identical_to_single_level() {
        let net = toy_net(71);
        let batch = toy_batch(72, 6, 3);
        let labels = vec![0usize, 1, 0, 1, 0, 1];
        for method in [TtaMethod::Tent, TtaMethod::HardPl, TtaMethod::SoftPl] {
            let tta = TtaConfig { method, eta: 0.0, ..TtaConfig::default() };
            let mut single = targeted_spec(30);
            single.bilevel = false;
            let mut bi = targeted_spec(30);
            bi.bilevel = true;
            let mut rng1 = Rng::new(3);
            let mut rng2 = Rng::new(3);
            let a = dia_attack(&net, &batch, Some(&labels), &tta, &single, &mut rng1).unwrap();
            let b = dia_attack(&net, &batch, Some(&labels), &tta, &bi, &mut rng2).unwrap();
            assert_eq!(a.perturbation.as_slice(), b.perturbation.as_slice());
            assert_eq!(a.final_loss, b.final_loss);
            assert_eq!(a.loss_trace, b.loss_trace);
        }
    }

    #[test]
    fn best_iterate_never_beats_step_zero_contract() {
        let net = toy_net(73);
        let batch = toy_batch(74, 5, 3);
        let spec = targeted_spec(60);
        let tta = TtaConfig { method: TtaMethod::Tent, ..TtaConfig::default() };
        let mut rng = Rng::new(4);
        let res = dia_attack(&net, &batch, None, &tta, &spec, &mut rng).unwrap();
        assert!(res.final_loss <= res.loss_trace[0]);
        assert!((res.final_loss - res.loss_trace[res.best_step]).abs() < 1e-15);
    }

    /// The composite gradient (including the exact bilevel mixed term) must
    /// match finite differences of the composite loss.
    #[test]
    fn composite_gradient_matches_finite_differences() {
        let net = toy_net(75);
        let batch = toy_batch(76, 5, 3);
        let labels = vec![0usize, 1, 0, 1, 1];
        for method in [
            TtaMethod::Tent,
            TtaMethod::HardPl,
            TtaMethod::SoftPl,
            TtaMethod::RobustPl,
            TtaMethod::ConjugatePl,
        ] {
            let tta = TtaConfig { method, eta: 0.05, ..TtaConfig::default() };
            let mut spec = targeted_spec(1);
            spec.bilevel = true;
            let delta = vec![0.01, -0.02, 0.005, 0.0, 0.03, -0.01];
            let (_, grad) =
                composite_loss_and_grad(&net, &batch, Some(&labels), &tta, &spec, &delta).unwrap();
            let h = 1e-6;
            let mut max_rel: f64 = 0.0;
            let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
            for idx in 0..delta.len() {
                let mut dp = delta.clone();
                dp[idx] += h;
                let mut dm = delta.clone();
                dm[idx] -= h;
                let (lp, _) =
                    composite_loss_and_grad(&net, &batch, Some(&labels), &tta, &spec, &dp).unwrap();
                let (lm, _) =
                    composite_loss_and_grad(&net, &batch, Some(&labels), &tta, &spec, &dm).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                max_rel = max_rel.max((grad[idx] - fd).abs() / scale);
            }
            assert!(max_rel < 1e-4, "method {}: max rel {}", method, max_rel);
        }
    }

    #[test]
    fn attack_loss_invariant_under_malicious_row_relabeling() {
        let net = toy_net(77);
        let batch = toy_batch(78, 6, 3);
        // Move the malicious payload to different rows; swap rows 2 and 5 so
        // batch content is permuted consistently.
        let spec_a = AttackSpec::new(AttackObjective::Targeted { tgt_index: 0, tgt_label: 1 }, vec![2]);
        let spec_b = AttackSpec::new(AttackObjective::Targeted { tgt_index: 0, tgt_label: 1 }, vec![5]);
        let perm = [0usize, 1, 5, 3, 4, 2];
        let permuted = batch.select_rows(&perm).unwrap();
        let tta = TtaConfig { method: TtaMethod::TeBn, ..TtaConfig::default() };
        let delta = vec![0.05, -0.02, 0.01];
        let (la, _) = composite_loss_and_grad(&net, &batch, None, &tta, &spec_a, &delta).unwrap();
        let (lb, _) = composite_loss_and_grad(&net, &permuted, None, &tta, &spec_b, &delta).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn spec_validation_rejects_bad_targets() {
        let net = toy_net(79);
        let batch = toy_batch(80, 4, 3);
        let tta = TtaConfig::default();
        let mut rng = Rng::new(5);
        // Target inside the malicious set.
        let spec = AttackSpec::new(AttackObjective::Targeted { tgt_index: 2, tgt_label: 1 }, vec![2]);
        assert!(dia_attack(&net, &batch, None, &tta, &spec, &mut rng).is_err());
        // Indiscriminate without labels.
        let spec = AttackSpec::new(AttackObjective::Indiscriminate, vec![1]);
        assert!(dia_attack(&net, &batch, None, &tta, &spec, &mut rng).is_err());
        // Empty malicious set.
        let spec = AttackSpec::new(AttackObjective::Targeted { tgt_index: 0, tgt_label: 1 }, vec![]);
        assert!(dia_attack(&net, &batch, None, &tta, &spec, &mut rng).is_err());
    }
}
