//! End-to-end experiment harness.
//!
//! Synthetic distribution-shift benchmark, source-model training, and the
//! trial protocol: every test batch is one attacking trial; self-learning
//! methods carry theta_A from trial to trial, TeBN trials are independent
//! (and run in parallel). The whole pipeline is a pure function of the
//! config and master seed: trial k's RNG derives from hash(seed, k), so
//! serial and parallel execution agree bit-for-bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::attack::{apply_perturbation, AttackObjective, AttackSpec, Epsilon};
use crate::defense::DefenseSpec;
use crate::diagnostics::{bn_drift_report, max_drift};
use crate::error::{Error, Result};
use crate::nn::engine;
use crate::nn::{BnMode, Layer, Network};
use crate::numeric::{Rng, Tensor};
use crate::tta::{predict, softmax_row, tta_update, TtaConfig, TtaMethod};

// ---------------------------------------------------------------------------
// Benchmark generation
// ---------------------------------------------------------------------------

/// Per-coordinate affine distribution shift plus Gaussian noise; plays the
/// role of corruption severity.
#[derive(Debug, Clone)]
pub struct ShiftSpec {
    pub bias: Tensor,
    pub scale: Tensor,
    pub noise_std: f64,
}

impl ShiftSpec {
    pub fn uniform(dim: usize, bias: f64, scale: f64, noise_std: f64) -> Self {
        Self {
            bias: Tensor::from_parts(vec![dim], vec![bias; dim]),
            scale: Tensor::from_parts(vec![dim], vec![scale; dim]),
            noise_std,
        }
    }

    pub fn none(dim: usize) -> Self {
        Self::uniform(dim, 0.0, 1.0, 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub batch_size: usize,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "benchmark.n_classes must be >= 2, got {}",
                self.n_classes
            )));
        }
        if self.dim < 1 {
            return Err(Error::Config("benchmark.dim must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "benchmark.batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.test_size == 0 || !self.test_size.is_multiple_of(self.batch_size) {
            return Err(Error::Config(format!(
                "benchmark.test_size ({}) must be a positive multiple of batch_size ({})",
                self.test_size, self.batch_size
            )));
        }
        if self.train_size == 0 {
            return Err(Error::Config("benchmark.train_size must be positive".into()));
        }
        if self.shift.bias.len() != self.dim || self.shift.scale.len() != self.dim {
            return Err(Error::Config("benchmark.shift vectors must have length dim".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn batch(&self, start: usize, len: usize) -> (Tensor, &[usize]) {
        let rows: Vec<usize> = (start..start + len).collect();
        (self.x.select_rows(&rows).expect("batch in range"), &self.y[start..start + len])
    }
}

const CLUSTER_STD: f64 = 0.08;
const CENTER_LO: f64 = 0.25;
const CENTER_HI: f64 = 0.75;

/// Gaussian class clusters in [0,1]^dim (clipped). The shifted test set
/// draws fresh samples and pushes them through the affine shift, inducing
/// the train/test BN statistics mismatch that makes TTA worthwhile.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let k = spec.n_classes;
    let d = spec.dim;
    let centers: Vec<f64> = (0..k * d).map(|_| rng.range_f64(CENTER_LO, CENTER_HI)).collect();

    let draw = |rng: &mut Rng, count: usize, shift: Option<&ShiftSpec>| -> Dataset {
        let mut x = Vec::with_capacity(count * d);
        let mut y = Vec::with_capacity(count);
        for _ in 0..count {
            let class = rng.next_usize(k);
            y.push(class);
            for j in 0..d {
                let mut v = centers[class * d + j] + CLUSTER_STD * rng.next_normal();
                if let Some(s) = shift {
                    v = s.scale.as_slice()[j] * v
                        + s.bias.as_slice()[j]
                        + s.noise_std * rng.next_normal();
                }
                x.push(v.clamp(0.0, 1.0));
            }
        }
        Dataset { x: Tensor::from_parts(vec![count, d], x), y }
    };

    let train = draw(&mut rng, spec.train_size, None);
    let clean_test = draw(&mut rng, spec.test_size, None);
    let shifted_test = draw(&mut rng, spec.test_size, Some(&spec.shift));
    Ok((train, clean_test, shifted_test))
}

// ---------------------------------------------------------------------------
// Source training
// ---------------------------------------------------------------------------

/// Minibatch cross-entropy SGD over an MLP with BN layers (batch statistics
/// during training), then one full-data pass to freeze the BN source
/// statistics. Deterministic given the seed.
pub fn train_source(
    train: &Dataset,
    hidden: &[usize],
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<Network> {
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if batch < 2 {
        return Err(Error::Config("train.batch must be >= 2".into()));
    }
    let (_, d) = train.x.dims2()?;
    let k = *train.y.iter().max().unwrap() + 1;
    let mut rng = Rng::new(seed);
    let mut net = Network::mlp(d, hidden, k.max(2), &mut rng);
    let n = train.len();

    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..epochs {
        for i in 0..n {
            let j = i + rng.next_usize(n - i);
            order.swap(i, j);
        }
        let mut start = 0;
        while start + 2 <= n {
            let len = batch.min(n - start);
            if len < 2 {
                break;
            }
            let rows = &order[start..start + len];
            let xb = train.x.select_rows(rows)?;
            let yb: Vec<usize> = rows.iter().map(|&r| train.y[r]).collect();
            let loss = sgd_step(&mut net, &xb, &yb, lr)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss became {}", loss)));
            }
            start += len;
        }
    }

    // Source statistics come from one pass over the full training data, not
    // from the last minibatch.
    let full = engine::forward(&engine::lift_f64(&net, BnMode::TestStats), train.x.as_slice(), n)?;
    let stats = crate::nn::snapshot_of(&full);
    let mut bn_idx = 0;
    for layer in net.layers_mut() {
        if let Layer::BatchNorm(bn) = layer {
            let s = &stats.layers[bn_idx];
            bn.mu_s = Tensor::from_parts(vec![s.mu_t.len()], s.mu_t.clone());
            bn.sigma2_s = Tensor::from_parts(vec![s.sigma2_t.len()], s.sigma2_t.clone());
            bn_idx += 1;
        }
    }
    Ok(net)
}

/// One SGD step on all parameters; returns the batch cross-entropy.
fn sgd_step(net: &mut Network, xb: &Tensor, yb: &[usize], lr: f64) -> Result<f64> {
    let (n, _) = xb.dims2()?;
    let k = net.output_dim();
    let lifted = engine::lift_f64(net, BnMode::TestStats);
    let cache = engine::forward(&lifted, xb.as_slice(), n)?;
    let logits = cache.logits();
    let mut dlogits = vec![0.0; n * k];
    let mut p = vec![0.0; k];
    let mut lnp = vec![0.0; k];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        softmax_row(&logits[i * k..(i + 1) * k], &mut p, &mut lnp);
        loss -= lnp[yb[i]] * inv_n;
        for j in 0..k {
            let tgt = if j == yb[i] { 1.0 } else { 0.0 };
            dlogits[i * k + j] = (p[j] - tgt) * inv_n;
        }
    }
    let grads = engine::backward(&lifted, &cache, &dlogits);

    let mut lin_idx = 0;
    let mut bn_idx = 0;
    for layer in net.layers_mut() {
        match layer {
            Layer::Linear(lin) => {
                let (dw, db) = &grads.linear[lin_idx];
                let w: Vec<f64> =
                    lin.weight.as_slice().iter().zip(dw).map(|(v, g)| v - lr * g).collect();
                let b: Vec<f64> =
                    lin.bias.as_slice().iter().zip(db).map(|(v, g)| v - lr * g).collect();
                lin.weight = Tensor::from_parts(lin.weight.shape().to_vec(), w);
                lin.bias = Tensor::from_parts(lin.bias.shape().to_vec(), b);
                lin_idx += 1;
            }
            Layer::BatchNorm(bn) => {
                let (dg, db) = &grads.bn[bn_idx];
                let g: Vec<f64> =
                    bn.gamma.as_slice().iter().zip(dg).map(|(v, gr)| v - lr * gr).collect();
                let b: Vec<f64> =
                    bn.beta.as_slice().iter().zip(db).map(|(v, gr)| v - lr * gr).collect();
                bn.gamma = Tensor::from_parts(vec![g.len()], g);
                bn.beta = Tensor::from_parts(vec![b.len()], b);
                bn_idx += 1;
            }
            Layer::Relu => {}
        }
    }
    Ok(loss)
}

/// Batched accuracy; statistics-bearing modes see one batch at a time.
pub fn accuracy(net: &Network, ds: &Dataset, mode: BnMode, batch_size: usize) -> Result<f64> {
    let n = ds.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let len = batch_size.min(n - start);
        let (xb, yb) = ds.batch(start, len);
        let preds = predict(net, &xb, mode)?;
        correct += preds.iter().zip(yb).filter(|(p, y)| p == y).count();
        start += len;
    }
    Ok(correct as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Trial protocol
// ---------------------------------------------------------------------------

/// What the attacker wants, before per-trial targets are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveKind {
    Targeted,
    Indiscriminate,
    Stealthy { omega: f64 },
}

/// Attack template instantiated per trial: which rows are malicious and
/// which sample/label is targeted are drawn from the trial RNG.
#[derive(Debug, Clone)]
pub struct AttackPlan {
    pub kind: ObjectiveKind,
    pub n_malicious: usize,
    pub epsilon: Epsilon,
    pub alpha: f64,
    pub n_steps: usize,
    pub bilevel: bool,
}

impl AttackPlan {
    pub fn new(kind: ObjectiveKind, n_malicious: usize) -> Self {
        Self {
            kind,
            n_malicious,
            epsilon: Epsilon::Unbounded,
            alpha: 1.0 / 255.0,
            n_steps: 500,
            bilevel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub method: String,
    /// Targeted/stealthy: did the target get the attacker's label. Absent
    /// for indiscriminate and attack-free runs.
    pub success: Option<bool>,
    /// Error rate on unperturbed rows (everything outside the malicious set).
    pub benign_error_rate: f64,
    /// Accuracy(no attack) - accuracy(attack) on rows outside target+malicious.
    pub degradation: f64,
    /// Largest per-layer normalized BN drift between the benign and attacked
    /// runs of this trial.
    pub bn_drift_max: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub asr: f64,
    pub corruption_error_rate: f64,
    pub corruption_accuracy_degradation: f64,
    pub records: Vec<TrialRecord>,
}

/// Arithmetic means over the records; ASR averages only the trials where a
/// targeted success was evaluated.
pub fn summarize(records: Vec<TrialRecord>) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(Error::Config("summarize: empty record set".into()));
    }
    let n = records.len() as f64;
    let evaluated: Vec<bool> = records.iter().filter_map(|r| r.success).collect();
    let asr = if evaluated.is_empty() {
        0.0
    } else {
        evaluated.iter().filter(|&&s| s).count() as f64 / evaluated.len() as f64
    };
    let err = records.iter().map(|r| r.benign_error_rate).sum::<f64>() / n;
    let deg = records.iter().map(|r| r.degradation).sum::<f64>() / n;
    Ok(RunSummary {
        asr,
        corruption_error_rate: err,
        corruption_accuracy_degradation: deg,
        records,
    })
}

/// Run the full trial protocol over the shifted test set.
///
/// Each batch is one trial: optionally craft DIA perturbations against the
/// current pre-adapted model (the attacker is white-box and defense-aware),
/// apply the TTA update, predict, and score. Self-learning methods send the
/// updated theta_A to the next trial.
pub fn run_trials(
    net: &Network,
    shifted_test: &Dataset,
    batch_size: usize,
    tta: &TtaConfig,
    attack: Option<&AttackPlan>,
    defense: Option<&DefenseSpec>,
    seed: u64,
) -> Result<RunSummary> {
    let n = shifted_test.len();
    if batch_size < 2 || n == 0 || !n.is_multiple_of(batch_size) {
        return Err(Error::Config(format!(
            "run_trials: test size {} must be a positive multiple of batch_size {}",
            n, batch_size
        )));
    }
    if let Some(p) = attack {
        if p.n_malicious >= batch_size {
            return Err(Error::Config(format!(
                "attack.n_malicious ({}) must leave at least one benign row in a batch of {}",
                p.n_malicious, batch_size
            )));
        }
    }
    let mut tta_eff = tta.clone();
    if let Some(d) = defense {
        tta_eff.bn_mode = crate::defense::make_bn_mode(d, net.num_bn())?;
    }
    tta_eff.validate()?;
    let n_trials = n / batch_size;

    let records = if tta_eff.method == TtaMethod::TeBn {
        // Independent trials; order-insensitive, safe to parallelize.
        let results: Vec<Result<(TrialRecord, Network)>> = (0..n_trials)
            .into_par_iter()
            .map(|t| run_one_trial(net, shifted_test, batch_size, &tta_eff, attack, seed, t))
            .collect();
        let mut records = Vec::with_capacity(n_trials);
        for r in results {
            records.push(r?.0);
        }
        records
    } else {
        let mut records = Vec::with_capacity(n_trials);
        let mut current = net.clone();
        for t in 0..n_trials {
            let (record, chained) =
                run_one_trial(&current, shifted_test, batch_size, &tta_eff, attack, seed, t)?;
            records.push(record);
            current = chained;
        }
        records
    };
    summarize(records)
}

fn run_one_trial(
    net_in: &Network,
    shifted_test: &Dataset,
    batch_size: usize,
    tta: &TtaConfig,
    attack: Option<&AttackPlan>,
    master_seed: u64,
    trial: usize,
) -> Result<(TrialRecord, Network)> {
    let (batch, labels) = shifted_test.batch(trial * batch_size, batch_size);
    let trial_seed = Rng::derive(master_seed, trial as u64);
    let mut rng = Rng::new(trial_seed);
    let k = net_in.output_dim();

    // Draw the trial's cast: malicious rows, then target, then wrong label.
    // The objective is drawn even when n_malicious is 0, so an attack-free
    // "attack" still scores the chance rate of the targeted label.
    let mal: Vec<usize> = match attack {
        Some(p) => rng.choose_distinct(batch_size, p.n_malicious),
        None => Vec::new(),
    };
    let objective = attack.map(|p| match p.kind {
        ObjectiveKind::Indiscriminate => AttackObjective::Indiscriminate,
        ObjectiveKind::Targeted | ObjectiveKind::Stealthy { .. } => {
            let benign: Vec<usize> =
                (0..batch_size).filter(|i| mal.binary_search(i).is_err()).collect();
            let tgt_index = benign[rng.next_usize(benign.len())];
            let offset = 1 + rng.next_usize(k - 1);
            let tgt_label = (labels[tgt_index] + offset) % k;
            match p.kind {
                ObjectiveKind::Targeted => AttackObjective::Targeted { tgt_index, tgt_label },
                ObjectiveKind::Stealthy { omega } => {
                    AttackObjective::StealthyTargeted { tgt_index, tgt_label, omega }
                }
                ObjectiveKind::Indiscriminate => unreachable!(),
            }
        }
    });
    let spec = match (attack, objective) {
        (Some(p), Some(objective)) if !mal.is_empty() => Some(AttackSpec {
            objective,
            mal_indices: mal.clone(),
            epsilon: p.epsilon,
            alpha: p.alpha,
            n_steps: p.n_steps,
            bilevel: p.bilevel,
            restarts: 1,
            pixel_bounds: (0.0, 1.0),
        }),
        _ => None,
    };

    // Benign reference run on the pristine batch with the same incoming
    // theta_A state.
    let (net_benign, snap_benign) = tta_update(net_in, &batch, tta)?;
    let preds_benign = predict(&net_benign, &batch, tta.bn_mode)?;

    let (net_out, snap_attacked, preds_attacked) = match &spec {
        Some(spec) => {
            let result = crate::attack::dia_attack(net_in, &batch, Some(labels), tta, spec, &mut rng)?;
            let x_att = apply_perturbation(&batch, &spec.mal_indices, &result.perturbation)?;
            let (net_a, snap_a) = tta_update(net_in, &x_att, tta)?;
            let preds_a = predict(&net_a, &x_att, tta.bn_mode)?;
            (net_a, snap_a, preds_a)
        }
        None => (net_benign.clone(), snap_benign.clone(), preds_benign.clone()),
    };

    let is_benign = |i: &usize| mal.binary_search(i).is_err();
    let benign_rows: Vec<usize> = (0..batch_size).filter(is_benign).collect();
    let benign_errors =
        benign_rows.iter().filter(|&&i| preds_attacked[i] != labels[i]).count();
    let benign_error_rate = benign_errors as f64 / benign_rows.len().max(1) as f64;

    let (success, rest_rows): (Option<bool>, Vec<usize>) = match objective {
        Some(
            AttackObjective::Targeted { tgt_index, tgt_label }
            | AttackObjective::StealthyTargeted { tgt_index, tgt_label, .. },
        ) => (
            Some(preds_attacked[tgt_index] == tgt_label),
            benign_rows.iter().copied().filter(|&i| i != tgt_index).collect(),
        ),
        Some(AttackObjective::Indiscriminate) | None => (None, benign_rows.clone()),
    };
    let degradation = if rest_rows.is_empty() {
        0.0
    } else {
        let acc = |preds: &[usize]| {
            rest_rows.iter().filter(|&&i| preds[i] == labels[i]).count() as f64
                / rest_rows.len() as f64
        };
        acc(&preds_benign) - acc(&preds_attacked)
    };
    let bn_drift_max = max_drift(&bn_drift_report(&snap_benign, &snap_attacked)?);

    let record = TrialRecord {
        trial_index: trial,
        method: tta.method.to_string(),
        success,
        benign_error_rate,
        degradation,
        bn_drift_max,
        seed: trial_seed,
    };
    Ok((record, net_out))
}

// ---------------------------------------------------------------------------
// Output documents
// ---------------------------------------------------------------------------

/// One JSON document per line, in trial order.
pub fn write_jsonl(records: &[TrialRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("serialize trial record: {}", e)))?;
        writeln!(w, "{}", line)?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("trials.jsonl line {}: {}", ln + 1, e)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_summary_csv(summary: &RunSummary, method: TtaMethod, mut w: impl Write) -> Result<()> {
    writeln!(w, "method,trials,asr,corruption_error_rate,corruption_accuracy_degradation")?;
    writeln!(
        w,
        "{},{},{},{},{}",
        method,
        summary.records.len(),
        summary.asr,
        summary.corruption_error_rate,
        summary.corruption_accuracy_degradation
    )?;
    Ok(())
}
