//! Command-line front door.
//!
//! Subcommands: train-source, attack, defend, sweep, gradcheck, drift,
//! report. Exit codes: 0 success, 1 config/parse error, 2 numeric failure,
//! 3 gradcheck failure. No subcommand writes outside its --out directory.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::bench::{
    accuracy, generate_benchmark, run_trials, write_jsonl, write_summary_csv, Dataset, TrialRecord,
};
use crate::config::ConfigDoc;
use crate::defense::{defense_sweep, write_sweep_csv};
use crate::diagnostics::{bn_drift_report, drift_summary, run_gradcheck, write_drift_csv};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, BnMode, Network};
use crate::numeric::Rng;
use crate::tta::tta_update;

#[derive(Parser, Debug)]
#[command(name = "ttalab", version, about = "Batch-level adversarial risk lab for test-time adaptation")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Config document (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config document's `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Worker thread cap; defaults to the available cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Load the source model from a checkpoint instead of retraining.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train the source model on the benchmark and write a checkpoint.
    TrainSource(CommonArgs),
    /// Run the trial protocol with the configured attack.
    Attack(CommonArgs),
    /// Sweep the (tau, n_tr) defense grid under an adaptive attacker.
    Defend(CommonArgs),
    /// Sweep the number of malicious samples.
    Sweep(CommonArgs),
    /// Run every finite-difference gradient oracle.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit the per-layer BN drift report for one attacked batch.
    Drift(CommonArgs),
    /// Render a summary table from a trials JSONL file.
    Report {
        /// Path to trials.jsonl.
        #[arg(long)]
        input: PathBuf,
    },
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own usage text; normalize every parse problem
            // (including --help, which is not an error) to the right code.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::TrainSource(args) => with_pool(args.jobs, || cmd_train_source(&args)),
        Cmd::Attack(args) => with_pool(args.jobs, || cmd_attack(&args)),
        Cmd::Defend(args) => with_pool(args.jobs, || cmd_defend(&args)),
        Cmd::Sweep(args) => with_pool(args.jobs, || cmd_sweep(&args)),
        Cmd::Drift(args) => with_pool(args.jobs, || cmd_drift(&args)),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
        Cmd::Report { input } => cmd_report(&input),
    }
}

fn with_pool<T>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    let threads = jobs.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("jobs: {}", e)))?;
    pool.install(f)
}

struct Prepared {
    doc: ConfigDoc,
    master_seed: u64,
    net: Network,
    shifted_test: Dataset,
    clean_test: Dataset,
    batch_size: usize,
}

fn prepare(args: &CommonArgs) -> Result<Prepared> {
    let doc = ConfigDoc::load(&args.config)?;
    let master_seed = doc.master_seed(args.seed);
    let bench = doc.benchmark_spec(master_seed)?;
    let (train, clean_test, shifted_test) = generate_benchmark(&bench)?;
    let net = match &args.checkpoint {
        Some(path) => checkpoint::load_from_path(path)?,
        None => crate::bench::train_source(
            &train,
            &doc.train.hidden,
            doc.train.epochs,
            doc.train.lr,
            doc.train.batch,
            doc.train_seed(master_seed),
        )?,
    };
    Ok(Prepared { doc, master_seed, net, shifted_test, clean_test, batch_size: bench.batch_size })
}

fn out_file(out: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn cmd_train_source(args: &CommonArgs) -> Result<i32> {
    let p = prepare(args)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("model.ckpt");
    checkpoint::save_to_path(&p.net, &path)?;
    let clean = accuracy(&p.net, &p.clean_test, BnMode::TrainStats, p.batch_size)?;
    let shifted = accuracy(&p.net, &p.shifted_test, BnMode::TrainStats, p.batch_size)?;
    let adapted = accuracy(&p.net, &p.shifted_test, BnMode::TestStats, p.batch_size)?;
    println!("checkpoint written to {}", path.display());
    println!("clean accuracy (source stats):   {:.4}", clean);
    println!("shifted accuracy (source stats): {:.4}", shifted);
    println!("shifted accuracy (batch stats):  {:.4}", adapted);
    Ok(0)
}

fn cmd_attack(args: &CommonArgs) -> Result<i32> {
    let p = prepare(args)?;
    let tta = p.doc.tta_config()?;
    let plan = p.doc.attack_plan()?;
    let defense = p.doc.defense_spec();
    let summary = run_trials(
        &p.net,
        &p.shifted_test,
        p.batch_size,
        &tta,
        plan.as_ref(),
        defense.as_ref(),
        p.doc.trials_seed(p.master_seed),
    )?;
    write_jsonl(&summary.records, out_file(&args.out, "trials.jsonl")?)?;
    write_summary_csv(&summary, tta.method, out_file(&args.out, "summary.csv")?)?;
    println!(
        "{} trials | asr {:.4} | corruption error {:.4} | degradation {:.4}",
        summary.records.len(),
        summary.asr,
        summary.corruption_error_rate,
        summary.corruption_accuracy_degradation
    );
    Ok(0)
}

fn cmd_defend(args: &CommonArgs) -> Result<i32> {
    let p = prepare(args)?;
    let tta = p.doc.tta_config()?;
    let plan = p
        .doc
        .attack_plan()?
        .ok_or_else(|| Error::Config("defend: config needs an [attack] section".into()))?;
    let cells = defense_sweep(
        &p.net,
        &p.shifted_test,
        p.batch_size,
        &tta,
        &plan,
        &p.doc.defend.taus,
        &p.doc.defend.n_trs,
        p.doc.trials_seed(p.master_seed),
    )?;
    write_sweep_csv(&cells, out_file(&args.out, "defense_sweep.csv")?)?;
    for c in &cells {
        println!(
            "tau {:>4} n_tr {:>2} | asr {:.4} | corruption accuracy {:.4}",
            c.tau, c.n_tr, c.asr, c.corruption_accuracy
        );
    }
    Ok(0)
}

fn cmd_sweep(args: &CommonArgs) -> Result<i32> {
    let p = prepare(args)?;
    let tta = p.doc.tta_config()?;
    let base = p
        .doc
        .attack_plan()?
        .ok_or_else(|| Error::Config("sweep: config needs an [attack] section".into()))?;
    let defense = p.doc.defense_spec();
    let mut w = out_file(&args.out, "nm_sweep.csv")?;
    writeln!(w, "n_malicious,asr,corruption_error_rate,corruption_accuracy_degradation")?;
    for &n_m in &p.doc.sweep.n_malicious {
        let mut plan = base.clone();
        plan.n_malicious = n_m;
        let summary = run_trials(
            &p.net,
            &p.shifted_test,
            p.batch_size,
            &tta,
            Some(&plan),
            defense.as_ref(),
            p.doc.trials_seed(p.master_seed),
        )?;
        writeln!(
            w,
            "{},{},{},{}",
            n_m, summary.asr, summary.corruption_error_rate, summary.corruption_accuracy_degradation
        )?;
        println!("n_malicious {:>4} | asr {:.4}", n_m, summary.asr);
    }
    Ok(0)
}

fn cmd_gradcheck(seed: Option<u64>) -> Result<i32> {
    let report = run_gradcheck(seed.unwrap_or(7));
    println!(
        "gradcheck: {} instances, max relative error {:.3e}",
        report.instances, report.max_rel_err
    );
    if report.passed() {
        println!("gradcheck: PASS");
        Ok(0)
    } else {
        for f in &report.failures {
            eprintln!("gradcheck failure: {}", f);
        }
        Ok(3)
    }
}

fn cmd_drift(args: &CommonArgs) -> Result<i32> {
    let p = prepare(args)?;
    let tta = p.doc.tta_config()?;
    let plan = p
        .doc
        .attack_plan()?
        .ok_or_else(|| Error::Config("drift: config needs an [attack] section".into()))?;
    let defense = p.doc.defense_spec();
    let mut tta_eff = tta.clone();
    if let Some(d) = &defense {
        tta_eff.bn_mode = crate::defense::make_bn_mode(d, p.net.num_bn())?;
    }

    // One batch, one crafted attack, benign vs attacked statistics.
    let rows: Vec<usize> = (0..p.batch_size).collect();
    let batch = p.shifted_test.x.select_rows(&rows)?;
    let labels = &p.shifted_test.y[..p.batch_size];
    let trial_seed = Rng::derive(p.doc.trials_seed(p.master_seed), 0);
    let mut rng = Rng::new(trial_seed);
    let mal = rng.choose_distinct(p.batch_size, plan.n_malicious.max(1));
    let benign_rows: Vec<usize> =
        (0..p.batch_size).filter(|i| mal.binary_search(i).is_err()).collect();
    let tgt_index = benign_rows[rng.next_usize(benign_rows.len())];
    let k = p.net.output_dim();
    let tgt_label = (labels[tgt_index] + 1 + rng.next_usize(k - 1)) % k;
    let spec = crate::attack::AttackSpec {
        objective: crate::attack::AttackObjective::Targeted { tgt_index, tgt_label },
        mal_indices: mal,
        epsilon: plan.epsilon,
        alpha: plan.alpha,
        n_steps: plan.n_steps,
        bilevel: plan.bilevel,
        restarts: 1,
        pixel_bounds: (0.0, 1.0),
    };
    let result = crate::attack::dia_attack(&p.net, &batch, Some(labels), &tta_eff, &spec, &mut rng)?;
    let attacked = crate::attack::apply_perturbation(&batch, &spec.mal_indices, &result.perturbation)?;
    let (_, snap_benign) = tta_update(&p.net, &batch, &tta_eff)?;
    let (_, snap_attacked) = tta_update(&p.net, &attacked, &tta_eff)?;
    let entries = bn_drift_report(&snap_benign, &snap_attacked)?;
    write_drift_csv(&entries, out_file(&args.out, "drift.csv")?)?;
    let summary = drift_summary(&entries);
    let mut w = out_file(&args.out, "drift_summary.txt")?;
    w.write_all(summary.as_bytes())?;
    print!("{}", summary);
    Ok(0)
}

fn cmd_report(input: &Path) -> Result<i32> {
    let records = crate::bench::read_jsonl(BufReader::new(File::open(input)?))?;
    if records.is_empty() {
        return Err(Error::Config("report: no records in input".into()));
    }
    let mut by_method: BTreeMap<String, Vec<&TrialRecord>> = BTreeMap::new();
    for r in &records {
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    println!(
        "{:<14} {:>7} {:>8} {:>10} {:>12} {:>10}",
        "method", "trials", "asr", "err_rate", "degradation", "max_drift"
    );
    for (method, rs) in by_method {
        let n = rs.len() as f64;
        let evaluated: Vec<bool> = rs.iter().filter_map(|r| r.success).collect();
        let asr = if evaluated.is_empty() {
            f64::NAN
        } else {
            evaluated.iter().filter(|&&s| s).count() as f64 / evaluated.len() as f64
        };
        let err = rs.iter().map(|r| r.benign_error_rate).sum::<f64>() / n;
        let deg = rs.iter().map(|r| r.degradation).sum::<f64>() / n;
        let drift = rs.iter().map(|r| r.bn_drift_max).fold(0.0, f64::max);
        println!(
            "{:<14} {:>7} {:>8.4} {:>10.4} {:>12.4} {:>10.4}",
            method,
            rs.len(),
            asr,
            err,
            deg,
            drift
        );
    }
    Ok(0)
}
