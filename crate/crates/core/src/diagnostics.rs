//! BN-drift forensics and gradient oracles.
//!
//! The drift report measures, per BN layer, how far an attack moved the
//! batch statistics: a normalized 1-Wasserstein distance between the
//! channel-wise histograms of benign and attacked runs. The closed-form
//! single-layer BN gradient is an independent implementation of the same
//! math as the network backward pass; the two must agree.

use std::io::Write;

use crate::error::{Error, Result};
use crate::nn::{BnMode, BnSnapshot, Network};
use crate::numeric::{wasserstein1_normalized, Histogram, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DriftEntry {
    pub layer_index: usize,
    pub mean_drift: f64,
    pub var_drift: f64,
}

impl DriftEntry {
    pub fn max(&self) -> f64 {
        self.mean_drift.max(self.var_drift)
    }
}

/// Per-layer normalized Wasserstein distances between benign and attacked
/// BN statistics. The benign snapshot is the normalization reference.
pub fn bn_drift_report(benign: &BnSnapshot, attacked: &BnSnapshot) -> Result<Vec<DriftEntry>> {
    if benign.layers.len() != attacked.layers.len() {
        return Err(Error::Topology(format!(
            "{} BN layers vs {}",
            benign.layers.len(),
            attacked.layers.len()
        )));
    }
    benign
        .layers
        .iter()
        .zip(&attacked.layers)
        .map(|(b, a)| {
            if b.mu_t.len() != a.mu_t.len() {
                return Err(Error::Topology(format!(
                    "layer {}: {} channels vs {}",
                    b.layer_index,
                    b.mu_t.len(),
                    a.mu_t.len()
                )));
            }
            let mean_drift = wasserstein1_normalized(
                &Histogram::new(b.mu_t.clone())?,
                &Histogram::new(a.mu_t.clone())?,
            )?;
            let var_drift = wasserstein1_normalized(
                &Histogram::new(b.sigma2_t.clone())?,
                &Histogram::new(a.sigma2_t.clone())?,
            )?;
            Ok(DriftEntry { layer_index: b.layer_index, mean_drift, var_drift })
        })
        .collect()
}

pub fn max_drift(entries: &[DriftEntry]) -> f64 {
    entries.iter().fold(0.0, |m, e| m.max(e.max()))
}

pub fn write_drift_csv(entries: &[DriftEntry], mut w: impl Write) -> Result<()> {
    writeln!(w, "layer_index,mean_drift,var_drift")?;
    for e in entries {
        writeln!(w, "{},{},{}", e.layer_index, e.mean_drift, e.var_drift)?;
    }
    Ok(())
}

/// Plain-text summary naming the top-3 drift layers.
pub fn drift_summary(entries: &[DriftEntry]) -> String {
    let mut ranked: Vec<&DriftEntry> = entries.iter().collect();
    ranked.sort_by(|a, b| b.max().partial_cmp(&a.max()).unwrap().then(a.layer_index.cmp(&b.layer_index)));
    let mut out = String::from("top drift layers:\n");
    for e in ranked.iter().take(3) {
        out.push_str(&format!(
            "  bn layer {}: mean_drift {:.6}, var_drift {:.6}\n",
            e.layer_index, e.mean_drift, e.var_drift
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Closed-form single-layer BN gradient
// ---------------------------------------------------------------------------

/// Derivative of f(x_tgt) = sum_j w_j * (x_tgt_j - mu_bar_j) / sigma_tilde_j
/// with respect to batch entry (i, j), where the statistics blend the batch
/// with the frozen source values at factor tau. x_tgt is held constant, so
/// row i must be a different batch row than the target's.
///
/// tau = 0 recovers the pure test-statistics gradient; tau = 1 is exactly 0
/// because the statistics no longer depend on the batch.
#[allow(clippy::too_many_arguments)]
pub fn analytic_bn_input_gradient(
    x_tgt: &Tensor,
    batch: &Tensor,
    w: &Tensor,
    i: usize,
    j: usize,
    tau: f64,
    mu_s: &Tensor,
    sigma2_s: &Tensor,
) -> Result<f64> {
    let (n, d) = batch.dims2()?;
    if n < 2 {
        return Err(Error::BatchTooSmall { n });
    }
    if x_tgt.len() != d || w.len() != d || mu_s.len() != d || sigma2_s.len() != d {
        return Err(Error::Shape {
            op: "analytic_bn_input_gradient",
            detail: format!("vector lengths must equal batch width {}", d),
        });
    }
    if i >= n || j >= d {
        return Err(Error::Shape {
            op: "analytic_bn_input_gradient",
            detail: format!("entry ({}, {}) outside {}x{}", i, j, n, d),
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0, 1], got {}", tau)));
    }
    if tau == 1.0 {
        return Ok(0.0);
    }

    let mut mu_t = 0.0;
    for r in 0..n {
        mu_t += batch.get(r, j);
    }
    mu_t /= n as f64;
    let mut var_t = 0.0;
    for r in 0..n {
        var_t += (batch.get(r, j) - mu_t).powi(2);
    }
    var_t /= n as f64;

    let var_blend = (1.0 - tau) * var_t + tau * sigma2_s.as_slice()[j];
    if var_blend <= 0.0 {
        return Err(Error::SingularVariance);
    }
    let sigma = var_blend.sqrt();
    let mu_bar = (1.0 - tau) * mu_t + tau * mu_s.as_slice()[j];
    let centered_tgt = x_tgt.as_slice()[j] - mu_bar;
    let centered_i = batch.get(i, j) - mu_t;

    Ok(-(1.0 - tau) / n as f64
        * w.as_slice()[j]
        * (var_blend + centered_tgt * centered_i)
        / (sigma * var_blend))
}

// ---------------------------------------------------------------------------
// Finite-difference oracle suite
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, rel: f64, tol: f64, what: impl Fn() -> String) {
        self.instances += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
        }
        if rel.is_nan() || rel > tol {
            self.failures.push(format!("{}: rel err {:.3e} > {:.0e}", what(), rel, tol));
        }
    }
}

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

/// Draw a random 2-BN-layer instance, rejecting draws that put a ReLU
/// pre-activation inside the finite-difference window (under the mode the
/// check will run in) or collapse a batch variance; central differences are
/// only trustworthy away from kinks.
fn random_instance(rng: &mut Rng, n: usize, mode: BnMode) -> (Network, Tensor, Tensor) {
    use crate::nn::Layer;
    loop {
        let d = 3 + rng.next_usize(3);
        let k = 2 + rng.next_usize(2);
        let h1 = 3 + rng.next_usize(3);
        let h2 = 3 + rng.next_usize(3);
        let mut net = Network::mlp(d, &[h1, h2], k, rng);
        for layer in net.layers_mut() {
            if let Layer::BatchNorm(bn) = layer {
                let c = bn.channels();
                bn.mu_s =
                    Tensor::from_parts(vec![c], (0..c).map(|_| rng.range_f64(-0.5, 0.5)).collect());
                bn.sigma2_s =
                    Tensor::from_parts(vec![c], (0..c).map(|_| rng.range_f64(0.4, 2.0)).collect());
                bn.gamma =
                    Tensor::from_parts(vec![c], (0..c).map(|_| rng.range_f64(0.5, 1.5)).collect());
                bn.beta =
                    Tensor::from_parts(vec![c], (0..c).map(|_| rng.range_f64(-0.3, 0.3)).collect());
                // A two-row batch normalizes itself almost away: input
                // gradients under test statistics scale with eps. The tiny
                // production default would sit below what h=1e-5 central
                // differences resolve, so oracle instances draw a larger
                // variance floor; the formulas under test are unchanged.
                bn.eps = rng.range_f64(1e-3, 1e-2);
            }
        }
        let x = Tensor::from_parts(vec![n, d], (0..n * d).map(|_| rng.next_f64()).collect());
        if !well_conditioned(&net, &x, n, mode) {
            continue;
        }
        let upstream =
            Tensor::from_parts(vec![n, k], (0..n * k).map(|_| rng.range_f64(-1.0, 1.0)).collect());
        return (net, x, upstream);
    }
}

fn well_conditioned(net: &Network, x: &Tensor, n: usize, mode: BnMode) -> bool {
    use crate::nn::engine;
    let lifted = engine::lift_f64(net, mode);
    let Ok(cache) = engine::forward(&lifted, x.as_slice(), n) else {
        return false;
    };
    let relu_ok = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, crate::nn::Layer::Relu))
        .all(|(idx, _)| cache.acts[idx].iter().all(|v| v.abs() >= 1e-3));
    let var_ok = cache.bn.iter().all(|bc| bc.var_t.iter().all(|&v| v >= 0.02));
    relu_ok && var_ok
}

fn weighted_logit_sum(net: &Network, x: &Tensor, mode: BnMode, upstream: &Tensor) -> f64 {
    let (l, _) = net.forward(x, mode).expect("gradcheck forward");
    l.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum()
}

/// Run every finite-difference oracle: input gradients, theta_A gradients,
/// the closed-form single-layer BN gradient, and the composite (bilevel)
/// attack gradient. Any relative disagreement above 1e-5 is a failure.
pub fn run_gradcheck(seed: u64) -> GradCheckReport {
    let mut rng = Rng::new(seed);
    let mut report = GradCheckReport::default();
    let modes = [
        BnMode::TestStats,
        BnMode::TrainStats,
        BnMode::Smoothed { tau: 0.3, n_tr: 0 },
        BnMode::Smoothed { tau: 0.7, n_tr: 1 },
    ];

    // backward_input across batch sizes and modes.
    for &n in &[2usize, 4, 8] {
        for &mode in &modes {
            for rep in 0..3 {
                let (net, x, upstream) = random_instance(&mut rng, n, mode);
                let analytic = net.backward_input(&x, mode, &upstream).unwrap();
                // Central differences cannot resolve gradients below the
                // rounding floor of the difference quotient, which scales
                // with the absolute weighted-logit sum, not the (partially
                // cancelled) objective value. A 2-row test-stats batch
                // normalizes itself away, leaving O(bn_eps) true gradients
                // under an O(1) objective; measure against what FD can see.
                let (l0, _) = net.forward(&x, mode).unwrap();
                let f_abs: f64 = l0
                    .as_slice()
                    .iter()
                    .zip(upstream.as_slice())
                    .map(|(a, b)| (a * b).abs())
                    .sum();
                let fd_noise = f_abs * f64::EPSILON / (2.0 * FD_H);
                let scale = analytic.max_abs().max(1e-6).max(4.0 * fd_noise / FD_TOL);
                let mut max_rel: f64 = 0.0;
                for idx in 0..x.len() {
                    let mut plus = x.as_slice().to_vec();
                    plus[idx] += FD_H;
                    let mut minus = x.as_slice().to_vec();
                    minus[idx] -= FD_H;
                    let fp = weighted_logit_sum(
                        &net,
                        &Tensor::from_parts(x.shape().to_vec(), plus),
                        mode,
                        &upstream,
                    );
                    let fm = weighted_logit_sum(
                        &net,
                        &Tensor::from_parts(x.shape().to_vec(), minus),
                        mode,
                        &upstream,
                    );
                    let fd = (fp - fm) / (2.0 * FD_H);
                    max_rel = max_rel.max((analytic.as_slice()[idx] - fd).abs() / scale);
                }
                report.record(max_rel, FD_TOL, || {
                    format!("backward_input n={} mode={:?} rep={}", n, mode, rep)
                });
            }
        }
    }

    // backward_theta_a across batch sizes and modes.
    for &n in &[2usize, 4, 8] {
        for &mode in &modes {
            for rep in 0..2 {
                let (net, x, upstream) = random_instance(&mut rng, n, mode);
                let analytic = net.backward_theta_a(&x, mode, &upstream).unwrap();
                let flat: Vec<f64> = analytic
                    .iter()
                    .flat_map(|(g, b)| g.iter().chain(b.iter()).copied())
                    .collect();
                let scale = flat.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
                let mut max_rel: f64 = 0.0;
                let mut slot = 0usize;
                for bn_idx in 0..analytic.len() {
                    for param in 0..2 {
                        let len = analytic[bn_idx].0.len();
                        for ch in 0..len {
                            let mut tp = net.theta_a();
                            let mut tm = net.theta_a();
                            let sp = if param == 0 { &mut tp[bn_idx].0 } else { &mut tp[bn_idx].1 };
                            sp[ch] += FD_H;
                            let sm = if param == 0 { &mut tm[bn_idx].0 } else { &mut tm[bn_idx].1 };
                            sm[ch] -= FD_H;
                            let mut np = net.clone();
                            np.set_theta_a(&tp).unwrap();
                            let mut nm = net.clone();
                            nm.set_theta_a(&tm).unwrap();
                            let fd = (weighted_logit_sum(&np, &x, mode, &upstream)
                                - weighted_logit_sum(&nm, &x, mode, &upstream))
                                / (2.0 * FD_H);
                            max_rel = max_rel.max((flat[slot] - fd).abs() / scale);
                            slot += 1;
                        }
                    }
                }
                report.record(max_rel, FD_TOL, || {
                    format!("backward_theta_a n={} mode={:?} rep={}", n, mode, rep)
                });
            }
        }
    }

    // Closed-form single-layer gradient at tau in {0, 0.3, 0.7}; pure
    // formula against a direct finite difference (tolerance 1e-7).
    for &tau in &[0.0, 0.3, 0.7] {
        for &n in &[2usize, 4, 8] {
            for rep in 0..4 {
                let d = 2 + rng.next_usize(3);
                let x_tgt =
                    Tensor::from_parts(vec![d], (0..d).map(|_| rng.next_f64()).collect());
                // Keep every channel's batch variance away from zero so the
                // h^2 truncation term of the central difference stays below
                // the 1e-7 gate (1/sigma^3 curvature otherwise explodes).
                let batch = loop {
                    let cand = Tensor::from_parts(
                        vec![n, d],
                        (0..n * d).map(|_| rng.next_f64()).collect(),
                    );
                    let spread_ok = (0..d).all(|j| {
                        let mu: f64 = (0..n).map(|r| cand.get(r, j)).sum::<f64>() / n as f64;
                        let var: f64 =
                            (0..n).map(|r| (cand.get(r, j) - mu).powi(2)).sum::<f64>() / n as f64;
                        var >= 0.02
                    });
                    if spread_ok {
                        break cand;
                    }
                };
                let w =
                    Tensor::from_parts(vec![d], (0..d).map(|_| rng.range_f64(-1.0, 1.0)).collect());
                let mu_s =
                    Tensor::from_parts(vec![d], (0..d).map(|_| rng.range_f64(-0.5, 0.5)).collect());
                let sigma2_s =
                    Tensor::from_parts(vec![d], (0..d).map(|_| rng.range_f64(0.4, 2.0)).collect());
                let i = rng.next_usize(n);
                let j = rng.next_usize(d);
                let analytic =
                    analytic_bn_input_gradient(&x_tgt, &batch, &w, i, j, tau, &mu_s, &sigma2_s)
                        .unwrap();
                let f = |b: &Tensor| -> f64 {
                    let (n, d) = b.dims2().unwrap();
                    (0..d)
                        .map(|c| {
                            let mu_t: f64 = (0..n).map(|r| b.get(r, c)).sum::<f64>() / n as f64;
                            let var_t: f64 = (0..n)
                                .map(|r| (b.get(r, c) - mu_t).powi(2))
                                .sum::<f64>()
                                / n as f64;
                            let vb = (1.0 - tau) * var_t + tau * sigma2_s.as_slice()[c];
                            let mb = (1.0 - tau) * mu_t + tau * mu_s.as_slice()[c];
                            w.as_slice()[c] * (x_tgt.as_slice()[c] - mb) / vb.sqrt()
                        })
                        .sum()
                };
                let mut plus = batch.as_slice().to_vec();
                plus[i * d + j] += FD_H;
                let mut minus = batch.as_slice().to_vec();
                minus[i * d + j] -= FD_H;
                let fd = (f(&Tensor::from_parts(vec![n, d], plus))
                    - f(&Tensor::from_parts(vec![n, d], minus)))
                    / (2.0 * FD_H);
                let rel = (analytic - fd).abs() / fd.abs().max(1e-3);
                report.record(rel, 1e-7, || {
                    format!("analytic_bn_input_gradient tau={} n={} rep={}", tau, n, rep)
                });
            }
        }
    }

    // Composite attack gradient with the exact bilevel term.
    for &method in &[
        crate::tta::TtaMethod::Tent,
        crate::tta::TtaMethod::HardPl,
        crate::tta::TtaMethod::SoftPl,
        crate::tta::TtaMethod::RobustPl,
        crate::tta::TtaMethod::ConjugatePl,
    ] {
        let (net, x, _) = random_instance(&mut rng, 4, BnMode::TestStats);
        let labels: Vec<usize> = (0..4).map(|_| rng.next_usize(net.output_dim())).collect();
        let tta = crate::tta::TtaConfig {
            method,
            eta: 0.05,
            q: 0.7,
            temperature: 1.3,
            ..Default::default()
        };
        let spec = crate::attack::AttackSpec {
            bilevel: true,
            n_steps: 1,
            ..crate::attack::AttackSpec::new(
                crate::attack::AttackObjective::Targeted { tgt_index: 0, tgt_label: 1 },
                vec![2, 3],
            )
        };
        let d = net.input_dim();
        let delta: Vec<f64> = (0..2 * d).map(|_| rng.range_f64(-0.02, 0.02)).collect();
        let (_, grad) =
            crate::attack::composite_loss_and_grad(&net, &x, Some(&labels), &tta, &spec, &delta)
                .unwrap();
        let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        let mut max_rel: f64 = 0.0;
        for idx in 0..delta.len() {
            let mut dp = delta.clone();
            dp[idx] += FD_H;
            let mut dm = delta.clone();
            dm[idx] -= FD_H;
            let (lp, _) =
                crate::attack::composite_loss_and_grad(&net, &x, Some(&labels), &tta, &spec, &dp)
                    .unwrap();
            let (lm, _) =
                crate::attack::composite_loss_and_grad(&net, &x, Some(&labels), &tta, &spec, &dm)
                    .unwrap();
            let fd = (lp - lm) / (2.0 * FD_H);
            max_rel = max_rel.max((grad[idx] - fd).abs() / scale);
        }
        report.record(max_rel, FD_TOL, || format!("composite bilevel gradient method={}", method));
    }

    report
}
