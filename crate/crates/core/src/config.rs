//! Harness configuration document.
//!
//! A single TOML file with nested sections covering the benchmark, source
//! training, the TTA method, the attack plan, and the defense. CLI flags
//! override document keys; unknown keys are rejected with their name.

use serde::Deserialize;
use std::path::Path;

use crate::attack::Epsilon;
use crate::bench::{AttackPlan, BenchmarkSpec, ObjectiveKind, ShiftSpec};
use crate::defense::DefenseSpec;
use crate::error::{Error, Result};
use crate::nn::BnMode;
use crate::tta::TtaConfig;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    pub seed: Option<u64>,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub tta: TtaSection,
    pub attack: Option<AttackSection>,
    pub defense: Option<DefenseSection>,
    #[serde(default)]
    pub defend: DefendSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    #[serde(default = "d_n_classes")]
    pub n_classes: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_train_size")]
    pub train_size: usize,
    #[serde(default = "d_test_size")]
    pub test_size: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_shift_bias")]
    pub shift_bias: f64,
    #[serde(default = "d_shift_scale")]
    pub shift_scale: f64,
    #[serde(default = "d_shift_noise_std")]
    pub shift_noise_std: f64,
}

fn d_n_classes() -> usize {
    10
}
fn d_dim() -> usize {
    32
}
fn d_train_size() -> usize {
    4000
}
fn d_test_size() -> usize {
    10_000
}
fn d_batch_size() -> usize {
    200
}
fn d_shift_bias() -> f64 {
    0.4
}
fn d_shift_scale() -> f64 {
    0.45
}
fn d_shift_noise_std() -> f64 {
    0.08
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            n_classes: d_n_classes(),
            dim: d_dim(),
            train_size: d_train_size(),
            test_size: d_test_size(),
            batch_size: d_batch_size(),
            shift_bias: d_shift_bias(),
            shift_scale: d_shift_scale(),
            shift_noise_std: d_shift_noise_std(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_train_batch")]
    pub batch: usize,
}

fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn d_epochs() -> usize {
    30
}
fn d_lr() -> f64 {
    0.05
}
fn d_train_batch() -> usize {
    64
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { hidden: d_hidden(), epochs: d_epochs(), lr: d_lr(), batch: d_train_batch() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaSection {
    #[serde(default = "d_method")]
    pub method: String,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_q")]
    pub q: f64,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    /// Inner optimizer for the theta_A update. Only "gd" (plain gradient
    /// descent) is implemented; "adam" is reserved.
    #[serde(default = "d_optimizer")]
    pub optimizer: String,
}

fn d_method() -> String {
    "tent".into()
}
fn d_optimizer() -> String {
    "gd".into()
}
fn d_eta() -> f64 {
    0.001
}
fn d_steps() -> usize {
    1
}
fn d_q() -> f64 {
    0.8
}
fn d_temperature() -> f64 {
    1.0
}

impl Default for TtaSection {
    fn default() -> Self {
        Self {
            method: d_method(),
            eta: d_eta(),
            steps: d_steps(),
            q: d_q(),
            temperature: d_temperature(),
            optimizer: d_optimizer(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "d_objective")]
    pub objective: String,
    #[serde(default = "d_n_malicious")]
    pub n_malicious: usize,
    /// l-inf budget; omit for an attack constrained only by pixel bounds.
    pub epsilon: Option<f64>,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_attack_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub bilevel: bool,
    #[serde(default = "d_omega")]
    pub omega: f64,
}

fn d_objective() -> String {
    "targeted".into()
}
fn d_n_malicious() -> usize {
    10
}
fn d_alpha() -> f64 {
    1.0 / 255.0
}
fn d_attack_steps() -> usize {
    500
}
fn d_omega() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    pub tau: f64,
    #[serde(default)]
    pub n_tr: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefendSection {
    #[serde(default = "d_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "d_n_trs")]
    pub n_trs: Vec<usize>,
}

fn d_taus() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
}
fn d_n_trs() -> Vec<usize> {
    vec![0]
}

impl Default for DefendSection {
    fn default() -> Self {
        Self { taus: d_taus(), n_trs: d_n_trs() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "d_sweep_nm")]
    pub n_malicious: Vec<usize>,
}

fn d_sweep_nm() -> Vec<usize> {
    vec![2, 10, 40]
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { n_malicious: d_sweep_nm() }
    }
}

impl ConfigDoc {
    pub fn load(path: &Path) -> Result<ConfigDoc> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ConfigDoc> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e)))
    }

    /// Master seed: CLI flag wins over the document key, which defaults to 0.
    pub fn master_seed(&self, cli_seed: Option<u64>) -> u64 {
        cli_seed.or(self.seed).unwrap_or(0)
    }

    pub fn benchmark_spec(&self, master_seed: u64) -> Result<BenchmarkSpec> {
        let b = &self.benchmark;
        let spec = BenchmarkSpec {
            n_classes: b.n_classes,
            dim: b.dim,
            train_size: b.train_size,
            test_size: b.test_size,
            batch_size: b.batch_size,
            shift: ShiftSpec::uniform(b.dim, b.shift_bias, b.shift_scale, b.shift_noise_std),
            seed: crate::numeric::Rng::derive(master_seed, 1),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_seed(&self, master_seed: u64) -> u64 {
        crate::numeric::Rng::derive(master_seed, 2)
    }

    pub fn trials_seed(&self, master_seed: u64) -> u64 {
        crate::numeric::Rng::derive(master_seed, 3)
    }

    pub fn tta_config(&self) -> Result<TtaConfig> {
        match self.tta.optimizer.as_str() {
            "gd" => {}
            "adam" => {
                return Err(Error::Config(
                    "tta.optimizer: adam is reserved but not implemented; use \"gd\"".into(),
                ))
            }
            other => {
                return Err(Error::Config(format!("tta.optimizer: unknown value {:?}", other)))
            }
        }
        let cfg = TtaConfig {
            method: self.tta.method.parse()?,
            eta: self.tta.eta,
            steps: self.tta.steps,
            q: self.tta.q,
            temperature: self.tta.temperature,
            bn_mode: BnMode::TestStats,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn attack_plan(&self) -> Result<Option<AttackPlan>> {
        let Some(a) = &self.attack else {
            return Ok(None);
        };
        let kind = match a.objective.to_ascii_lowercase().as_str() {
            "targeted" => ObjectiveKind::Targeted,
            "indiscriminate" => ObjectiveKind::Indiscriminate,
            "stealthy" | "stealthy-targeted" => ObjectiveKind::Stealthy { omega: a.omega },
            other => {
                return Err(Error::Config(format!("attack.objective: unknown value {:?}", other)))
            }
        };
        let epsilon = match a.epsilon {
            Some(e) if e >= 0.0 => Epsilon::Bounded(e),
            Some(e) => return Err(Error::Config(format!("attack.epsilon must be >= 0, got {}", e))),
            None => Epsilon::Unbounded,
        };
        Ok(Some(AttackPlan {
            kind,
            n_malicious: a.n_malicious,
            epsilon,
            alpha: a.alpha,
            n_steps: a.n_steps,
            bilevel: a.bilevel,
        }))
    }

    pub fn defense_spec(&self) -> Option<DefenseSpec> {
        self.defense.as_ref().map(|d| DefenseSpec { tau: d.tau, n_tr: d.n_tr })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_out_a_minimal_document() {
        let doc = ConfigDoc::parse("seed = 9\n").unwrap();
        assert_eq!(doc.master_seed(None), 9);
        assert_eq!(doc.master_seed(Some(4)), 4);
        let bench = doc.benchmark_spec(9).unwrap();
        assert_eq!(bench.n_classes, 10);
        assert_eq!(bench.batch_size, 200);
        let tta = doc.tta_config().unwrap();
        assert_eq!(tta.eta, 0.001);
        assert!(doc.attack_plan().unwrap().is_none());
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let err = ConfigDoc::parse("[tta]\nmethod = \"tent\"\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{}", msg);
    }

    #[test]
    fn attack_section_parses_objectives_and_epsilon() {
        let doc = ConfigDoc::parse(
            "[attack]\nobjective = \"stealthy\"\nn_malicious = 4\nepsilon = 0.1\nomega = 0.2\n",
        )
        .unwrap();
        let plan = doc.attack_plan().unwrap().unwrap();
        assert_eq!(plan.kind, ObjectiveKind::Stealthy { omega: 0.2 });
        assert_eq!(plan.epsilon, Epsilon::Bounded(0.1));
        let doc = ConfigDoc::parse("[attack]\nobjective = \"flip-everything\"\n").unwrap();
        assert!(doc.attack_plan().is_err());
    }

    #[test]
    fn bad_method_is_a_config_error() {
        let doc = ConfigDoc::parse("[tta]\nmethod = \"magic\"\n").unwrap();
        assert!(doc.tta_config().is_err());
    }

    #[test]
    fn adam_optimizer_is_reserved() {
        let doc = ConfigDoc::parse("[tta]\noptimizer = \"adam\"\n").unwrap();
        let err = doc.tta_config().unwrap_err().to_string();
        assert!(err.contains("not implemented"), "{}", err);
        assert!(ConfigDoc::parse("[tta]\noptimizer = \"gd\"\n").unwrap().tta_config().is_ok());
    }
}
