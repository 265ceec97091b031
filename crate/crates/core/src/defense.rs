//! Robust BN estimation defenses.
//!
//! Two knobs: a smoothing factor tau blending training-time statistics into
//! the test-time estimate, and n_tr, the count of final BN layers pinned
//! entirely to training statistics. The sweep evaluates an adaptive
//! attacker: the attack gradient is computed through the smoothed
//! statistics, not against an unaware defender.

use rayon::prelude::*;
use std::io::Write;

use crate::bench::{run_trials, AttackPlan, Dataset, RunSummary};
use crate::error::{Error, Result};
use crate::nn::{BnMode, Network};
use crate::tta::TtaConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefenseSpec {
    /// Weight of the training-time statistics, in [0, 1].
    pub tau: f64,
    /// Number of final BN layers pinned to training statistics.
    pub n_tr: usize,
}

/// BnMode for a defense against a network with `bn_total` BN layers.
/// (0, 0) is TestStats-equivalent, tau = 1 is TrainStats-equivalent.
pub fn make_bn_mode(spec: &DefenseSpec, bn_total: usize) -> Result<BnMode> {
    if !(0.0..=1.0).contains(&spec.tau) {
        return Err(Error::Config(format!("defense.tau must lie in [0, 1], got {}", spec.tau)));
    }
    if spec.n_tr > bn_total {
        return Err(Error::Config(format!(
            "defense.n_tr ({}) exceeds the network's {} BN layers",
            spec.n_tr, bn_total
        )));
    }
    Ok(BnMode::Smoothed { tau: spec.tau, n_tr: spec.n_tr })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub tau: f64,
    pub n_tr: usize,
    pub asr: f64,
    pub corruption_accuracy: f64,
    pub corruption_accuracy_degradation: f64,
}

/// Run the full trial protocol for every (tau, n_tr) cell. Cells are
/// independent and run in parallel; each derives its trial seeds from the
/// same master seed, so the (0, 0) cell reproduces the undefended run
/// bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn defense_sweep(
    net: &Network,
    shifted_test: &Dataset,
    batch_size: usize,
    tta: &TtaConfig,
    attack: &AttackPlan,
    taus: &[f64],
    n_trs: &[usize],
    seed: u64,
) -> Result<Vec<SweepCell>> {
    let cells: Vec<DefenseSpec> = taus
        .iter()
        .flat_map(|&tau| n_trs.iter().map(move |&n_tr| DefenseSpec { tau, n_tr }))
        .collect();
    for c in &cells {
        make_bn_mode(c, net.num_bn())?;
    }
    let results: Vec<Result<(DefenseSpec, RunSummary)>> = cells
        .into_par_iter()
        .map(|spec| {
            let summary =
                run_trials(net, shifted_test, batch_size, tta, Some(attack), Some(&spec), seed)?;
            Ok((spec, summary))
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        let (spec, summary) = r?;
        out.push(SweepCell {
            tau: spec.tau,
            n_tr: spec.n_tr,
            asr: summary.asr,
            corruption_accuracy: 1.0 - summary.corruption_error_rate,
            corruption_accuracy_degradation: summary.corruption_accuracy_degradation,
        });
    }
    Ok(out)
}

pub fn write_sweep_csv(cells: &[SweepCell], mut w: impl Write) -> Result<()> {
    writeln!(w, "tau,n_tr,asr,corruption_accuracy,corruption_accuracy_degradation")?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.tau, c.n_tr, c.asr, c.corruption_accuracy, c.corruption_accuracy_degradation
        )?;
    }
    Ok(())
}
