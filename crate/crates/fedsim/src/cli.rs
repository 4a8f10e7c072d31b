//! Subcommands behind the `fedsim` binary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fedsim_core::gradcheck::{self, CheckResult, GradcheckOptions, TOLERANCE};

use crate::config::ExperimentConfig;
use crate::error::{FedsimError, Result};
use crate::io::save_model;
use crate::report::{records_csv, unix_ms, version_string, OutputPaths, RunManifest};
use crate::runner::{load_data, run_with_data, RunOptions, RunOutput};

pub const RECORDS_FILE: &str = "records.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "final_model.bin";
pub const COMPARE_FILE: &str = "compare.csv";

#[derive(Debug, Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated learning simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write records.csv, manifest.json and final_model.bin.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Write 0 in agg_time_ns so repeated runs produce identical files.
        #[arg(long)]
        no_timing: bool,
    },
    /// Run several configs on shared data and write one merged compare.csv.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_timing: bool,
    },
    /// Finite-difference checks of every analytic derivative.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Added to every analytic derivative (negative control).
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb: f64,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FedsimError::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| FedsimError::io(path, e))
}

fn run_options(no_timing: bool) -> RunOptions {
    RunOptions {
        record_timing: !no_timing,
        ..RunOptions::default()
    }
}

pub fn cmd_run(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    no_timing: bool,
) -> Result<RunOutput> {
    let mut config = ExperimentConfig::from_path(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let started = unix_ms();
    let data = load_data(&config)?;
    let output = run_with_data(&config, &data, &run_options(no_timing))?;

    create_dir(out)?;
    let paths = OutputPaths {
        records: out.join(RECORDS_FILE),
        manifest: out.join(MANIFEST_FILE),
        final_model: Some(out.join(MODEL_FILE)),
    };
    let csv = records_csv(
        config.k,
        [(config.method, config.seed, output.records.as_slice())],
    );
    write_file(&paths.records, csv.as_bytes())?;
    save_model(&output.final_model, &out.join(MODEL_FILE))?;
    let manifest = RunManifest::new(&config, &output, started, unix_ms(), paths.clone());
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&paths.manifest, json.as_bytes())?;
    Ok(output)
}

/// Fields every config of a comparison must agree on.
fn check_comparable(configs: &[(PathBuf, ExperimentConfig)]) -> Result<()> {
    let (first_path, first) = &configs[0];
    for (path, c) in &configs[1..] {
        let mismatch = |field: &str| {
            Err(FedsimError::Mismatch(format!(
                "`{field}` differs between {} and {}",
                first_path.display(),
                path.display()
            )))
        };
        if c.dataset != first.dataset
            || c.mnist_dir != first.mnist_dir
            || c.synthetic != first.synthetic
        {
            return mismatch("dataset");
        }
        if c.k != first.k {
            return mismatch("K");
        }
        if c.t != first.t {
            return mismatch("T");
        }
        if c.seed != first.seed {
            return mismatch("seed");
        }
    }
    let mut methods = BTreeSet::new();
    for (path, c) in configs {
        if !methods.insert(c.method) {
            return Err(FedsimError::Mismatch(format!(
                "method {} appears twice (again in {})",
                c.method,
                path.display()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, serde::Serialize)]
struct CompareEntry {
    config: PathBuf,
    config_hash: String,
    method: crate::config::Method,
    final_accuracy: Option<f64>,
    best_accuracy: Option<f64>,
    best_round: Option<usize>,
}

#[derive(Debug, serde::Serialize)]
struct CompareManifest {
    seed: u64,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    records: PathBuf,
    version: String,
    runs: Vec<CompareEntry>,
}

pub fn cmd_compare(
    config_paths: &[PathBuf],
    out: &Path,
    no_timing: bool,
) -> Result<Vec<RunOutput>> {
    let configs = config_paths
        .iter()
        .map(|p| ExperimentConfig::from_path(p).map(|c| (p.clone(), c)))
        .collect::<Result<Vec<_>>>()?;
    if configs.is_empty() {
        return Err(FedsimError::Mismatch("no configs given".into()));
    }
    check_comparable(&configs)?;

    let started = unix_ms();
    // One load serves every run; the shared seed then gives every method the
    // same partition, proxy split and availability sequence.
    let data = load_data(&configs[0].1)?;
    let opts = run_options(no_timing);
    let outputs = configs
        .iter()
        .map(|(_, c)| run_with_data(c, &data, &opts))
        .collect::<Result<Vec<_>>>()?;

    create_dir(out)?;
    let k = configs[0].1.k;
    let csv = records_csv(
        k,
        configs
            .iter()
            .zip(&outputs)
            .map(|((_, c), o)| (c.method, c.seed, o.records.as_slice())),
    );
    let records = out.join(COMPARE_FILE);
    write_file(&records, csv.as_bytes())?;
    let manifest = CompareManifest {
        seed: configs[0].1.seed,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        records,
        version: version_string(),
        runs: configs
            .iter()
            .zip(&outputs)
            .map(|((path, c), o)| {
                let best = o.best_accuracy();
                CompareEntry {
                    config: path.clone(),
                    config_hash: c.hash(),
                    method: c.method,
                    final_accuracy: o.final_accuracy(),
                    best_accuracy: best.map(|(_, a)| a),
                    best_round: best.map(|(t, _)| t),
                }
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(outputs)
}

pub fn cmd_gradcheck(seed: u64, perturb: f64) -> Result<Vec<CheckResult>> {
    let opts = GradcheckOptions { seed, perturb };
    Ok(gradcheck::run_all(&opts)?)
}

/// One line per check: name, worst relative error, coordinates, verdict.
pub fn format_check(r: &CheckResult) -> String {
    format!(
        "{:<22} max_rel_err {:.3e}  ({} coords)  {}",
        r.name,
        r.max_rel_err,
        r.coordinates,
        if r.passed() { "ok" } else { "FAIL" }
    )
}

/// Executes a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            no_timing,
        } => {
            let output = cmd_run(&config, &out, seed, no_timing)?;
            match output.final_accuracy() {
                Some(a) => println!(
                    "final test accuracy {a:.4} after {} rounds",
                    output.records.len()
                ),
                None => println!("ran {} rounds", output.records.len()),
            }
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Compare {
            configs,
            out,
            no_timing,
        } => {
            let outputs = cmd_compare(&configs, &out, no_timing)?;
            for (path, o) in configs.iter().zip(&outputs) {
                println!(
                    "{}: final {}",
                    path.display(),
                    o.final_accuracy().map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            println!("wrote {}", out.join(COMPARE_FILE).display());
            Ok(0)
        }
        Command::Gradcheck { seed, perturb } => {
            let results = cmd_gradcheck(seed, perturb)?;
            for r in &results {
                println!("{}", format_check(r));
            }
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name)
                .collect();
            if failed.is_empty() {
                println!("all {} checks within {TOLERANCE:e}", results.len());
                Ok(0)
            } else {
                eprintln!("failing checks: {}", failed.join(", "));
                Ok(1)
            }
        }
    }
}
