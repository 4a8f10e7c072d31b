//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Positional arguments select criteria by substring, for example
//! `cargo test --test acceptance -- properties`. MNIST criteria read the IDX
//! files from `FEDSIM_MNIST_DIR`, or `data/mnist` under the workspace root.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use fedsim::runner::{measure_aggregation_time, run_with_data, DataBundle, RunOptions, RunOutput};
use fedsim::{load_data, ExperimentConfig};
use fedsim_core::aggregation::{fedavg_weights, haw_aggregate, weighted_sum, HawState};
use fedsim_core::data::{dirichlet_partition, gen_synthetic};
use fedsim_core::gradcheck::{run_all, GradcheckOptions, TOLERANCE};
use fedsim_core::math::{exp, softmax};
use fedsim_core::{ParamVec, RngStream};

const SEEDS: [u64; 3] = [0, 1, 2];

type Verdict = Result<(bool, String), String>;

struct Criterion {
    name: &'static str,
    check: fn(&mut Suite) -> Verdict,
}

/// Shared MNIST data and every run made so far, keyed by config hash, so
/// criteria that need the same run (FedAvg at D_α = 0.1) pay for it once.
struct Suite {
    mnist: Option<Result<DataBundle, String>>,
    runs: HashMap<String, RunOutput>,
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("FEDSIM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")))
}

/// MNIST settings: K=10, E=1, batch 64, SGD with η=1e-3.
fn mnist_config(
    method: &str,
    d_alpha: f64,
    p_e: f64,
    seed: u64,
    t: usize,
    extra: &str,
) -> ExperimentConfig {
    let dir = serde_json::Value::from(mnist_dir().to_string_lossy().into_owned());
    let text = format!(
        r#"{{"dataset":"mnist","mnist_dir":{dir},"K":10,"T":{t},"E":1,"batch_size":64,
            "optimizer":{{"kind":"sgd","eta":0.001}},"method":"{method}",
            "D_alpha":{d_alpha},"p_e":{p_e},"seed":{seed}{extra}}}"#
    );
    ExperimentConfig::from_json(&text, None).expect("acceptance config is valid")
}

fn haw_rates(eta_gamma: f64, eta_lambda: f64) -> String {
    format!(r#","eta_gamma":{eta_gamma},"eta_lambda":{eta_lambda}"#)
}

impl Suite {
    fn mnist(&mut self) -> Result<DataBundle, String> {
        let cached = self.mnist.get_or_insert_with(|| {
            let dir = mnist_dir();
            let probe = mnist_config("fedavg", 1.0, 0.0, 0, 1, "");
            load_data(&probe).map_err(|e| format!("MNIST unavailable in {}: {e}", dir.display()))
        });
        cached.clone()
    }

    fn run(&mut self, config: &ExperimentConfig) -> Result<&RunOutput, String> {
        let key = config.hash();
        if !self.runs.contains_key(&key) {
            let data = self.mnist()?;
            let clock = Instant::now();
            let out =
                run_with_data(config, &data, &RunOptions::default()).map_err(|e| e.to_string())?;
            eprintln!(
                "  ran {} D_alpha={} p_e={} seed={} T={}: final {:.4} in {:.0?}",
                config.method,
                config.d_alpha,
                config.p_e,
                config.seed,
                config.t,
                out.final_accuracy().unwrap_or(f64::NAN),
                clock.elapsed()
            );
            self.runs.insert(key.clone(), out);
        }
        Ok(&self.runs[&key])
    }

    /// Mean over [`SEEDS`] of the accuracy at `round` (the last round when
    /// `None`), in percent, with the per-seed values.
    fn mean_accuracy(
        &mut self,
        make: impl Fn(u64) -> ExperimentConfig,
        round: Option<usize>,
    ) -> Result<(f64, Vec<f64>), String> {
        let mut values = Vec::new();
        for seed in SEEDS {
            let out = self.run(&make(seed))?;
            let acc = match round {
                Some(t) => out.accuracy_at(t),
                None => out.final_accuracy(),
            };
            values.push(100.0 * acc.ok_or("accuracy was not evaluated")?);
        }
        Ok((values.iter().sum::<f64>() / values.len() as f64, values))
    }
}

fn fmt_seeds(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.2}")).collect();
    format!("[{}]", parts.join(" "))
}

fn mnist_heterogeneity(s: &mut Suite) -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for d_alpha in [0.1, 1.0] {
        let (avg, avg_seeds) = s.mean_accuracy(
            |seed| mnist_config("fedavg", d_alpha, 0.0, seed, 200, ""),
            None,
        )?;
        let (haw, haw_seeds) = s.mean_accuracy(
            |seed| mnist_config("fedhaw", d_alpha, 0.0, seed, 200, &haw_rates(1e-3, 1e-2)),
            None,
        )?;
        let part_ok = if d_alpha == 0.1 {
            haw >= 85.0 && haw - avg >= 3.0
        } else {
            haw >= avg - 0.5 && haw >= 89.0 && avg >= 89.0
        };
        ok &= part_ok;
        detail.push(format!(
            "D_alpha={d_alpha}: fedhaw {haw:.2} {} fedavg {avg:.2} {} gap {:+.2} [{}]",
            fmt_seeds(&haw_seeds),
            fmt_seeds(&avg_seeds),
            haw - avg,
            if part_ok { "ok" } else { "short" }
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn mnist_comm_errors(s: &mut Suite) -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for (p_e, need) in [(0.8, 6.0), (0.2, 3.0)] {
        let (avg, avg_seeds) =
            s.mean_accuracy(|seed| mnist_config("fedavg", 0.1, p_e, seed, 200, ""), None)?;
        let (haw, haw_seeds) = s.mean_accuracy(
            |seed| mnist_config("fedhaw", 0.1, p_e, seed, 200, &haw_rates(1e-4, 1e-2)),
            None,
        )?;
        let part_ok = haw - avg >= need;
        ok &= part_ok;
        detail.push(format!(
            "p_e={p_e}: fedhaw {haw:.2} {} fedavg {avg:.2} {} gap {:+.2} (need {need:+.1})",
            fmt_seeds(&haw_seeds),
            fmt_seeds(&avg_seeds),
            haw - avg
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn fedlaw_ordering(s: &mut Suite) -> Verdict {
    let (avg, avg_seeds) =
        s.mean_accuracy(|seed| mnist_config("fedavg", 0.1, 0.0, seed, 200, ""), None)?;
    let law_extra = r#","proxy_per_class":10,"proxy_epochs":100,"proxy_lr":0.01"#;
    let (law, law_seeds) = s.mean_accuracy(
        |seed| mnist_config("fedlaw", 0.1, 0.0, seed, 200, law_extra),
        None,
    )?;
    Ok((
        law - avg >= 1.5,
        format!(
            "fedlaw {law:.2} {} fedavg {avg:.2} {} gap {:+.2} (need +1.5)",
            fmt_seeds(&law_seeds),
            fmt_seeds(&avg_seeds),
            law - avg
        ),
    ))
}

fn aggregation_timing(s: &mut Suite) -> Verdict {
    let data = s.mnist()?;
    let config = mnist_config(
        "fedlaw",
        0.1,
        0.0,
        0,
        50,
        r#","proxy_per_class":10,"proxy_epochs":100,"proxy_lr":0.01"#,
    );
    let timing = measure_aggregation_time(&config, &data, 50, &RunOptions::default())
        .map_err(|e| e.to_string())?;
    let law_over_haw = timing.fedlaw_ns / timing.fedhaw_ns;
    let haw_over_avg = timing.fedhaw_ns / timing.fedavg_ns;
    Ok((
        law_over_haw >= 100.0 && haw_over_avg <= 10.0,
        format!(
            "mean over {} rounds: fedavg {:.3} ms, fedhaw {:.3} ms, fedlaw {:.1} ms; fedlaw/fedhaw {law_over_haw:.0}x (need >= 100), fedhaw/fedavg {haw_over_avg:.2}x (need <= 10)",
            timing.rounds,
            timing.fedavg_ns / 1e6,
            timing.fedhaw_ns / 1e6,
            timing.fedlaw_ns / 1e6
        ),
    ))
}

fn fedprox_haw_early_rounds(s: &mut Suite) -> Verdict {
    // Rounds after t₁ = T/5 − 1 = 39 cannot influence it, so the runs stop there.
    let (t, t1) = (40, 39);
    let (prox, prox_seeds) = s.mean_accuracy(
        |seed| mnist_config("fedprox", 0.1, 0.5, seed, t, ""),
        Some(t1),
    )?;
    let (haw, haw_seeds) = s.mean_accuracy(
        |seed| mnist_config("fedprox_haw", 0.1, 0.5, seed, t, &haw_rates(1e-4, 1e-2)),
        Some(t1),
    )?;
    Ok((
        haw - prox >= 10.0,
        format!(
            "round {t1}: fedprox_haw {haw:.2} {} fedprox {prox:.2} {} gap {:+.2} (need +10)",
            fmt_seeds(&haw_seeds),
            fmt_seeds(&prox_seeds),
            haw - prox
        ),
    ))
}

fn synthetic_config(method: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{"dataset":"synthetic",
            "synthetic":{{"num_classes":4,"input_dim":8,"train_per_class":80,"test_per_class":40,"spread":0.5}},
            "hidden":[12],"K":5,"T":10,"E":1,"batch_size":8,
            "optimizer":{{"kind":"sgd","eta":0.05}},"method":"{method}","D_alpha":0.5,
            "proxy_per_class":4,"seed":3{extra}}}"#
    );
    ExperimentConfig::from_json(&text, None).expect("synthetic config is valid")
}

fn identical_runs(a: &RunOutput, b: &RunOutput) -> bool {
    a.final_model.bit_eq(&b.final_model)
        && a.records.len() == b.records.len()
        && a.records.iter().zip(&b.records).all(|(x, y)| {
            x.test_accuracy.map(f64::to_bits) == y.test_accuracy.map(f64::to_bits)
                && x.num_failed == y.num_failed
        })
}

fn run_synthetic(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput, String> {
    let data = load_data(config).map_err(|e| e.to_string())?;
    run_with_data(config, &data, opts).map_err(|e| e.to_string())
}

fn finite_differences(_: &mut Suite) -> Verdict {
    let mut worst: HashMap<&str, f64> = HashMap::new();
    for seed in 0..4 {
        for r in run_all(&GradcheckOptions::new(seed)).map_err(|e| e.to_string())? {
            let w = worst.entry(r.name).or_insert(0.0);
            *w = w.max(r.max_rel_err);
        }
    }
    let mut names: Vec<&&str> = worst.keys().collect();
    names.sort();
    let required = ["eq15_gamma", "eq16_lambda", "mlp_backprop"];
    let ok =
        required.iter().all(|n| worst.contains_key(n)) && worst.values().all(|&e| e <= TOLERANCE);
    let parts: Vec<String> = names
        .iter()
        .map(|n| format!("{n} {:.1e}", worst[**n]))
        .collect();
    Ok((
        ok,
        format!("worst relative error over 4 seeds: {}", parts.join(", ")),
    ))
}

fn zero_meta_rate(_: &mut Suite) -> Verdict {
    let haw = run_synthetic(
        &synthetic_config(
            "fedhaw",
            r#","eta_gamma":0,"eta_lambda":0,"lambda_init":"uniform""#,
        ),
        &RunOptions::default(),
    )?;
    let avg = run_synthetic(
        &synthetic_config("fedavg", r#","fedavg_weights":"uniform""#),
        &RunOptions::default(),
    )?;
    Ok((
        identical_runs(&haw, &avg),
        format!("{} rounds compared bit for bit", haw.records.len()),
    ))
}

fn random_vec(s: &mut RngStream, n: usize) -> ParamVec {
    ParamVec::from_slice(&(0..n).map(|_| s.normal()).collect::<Vec<_>>()).unwrap()
}

fn weight_decay_expansion(_: &mut Suite) -> Verdict {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut s = RngStream::new(i, 0);
        let k = 2 + s.below(8) as usize;
        let n = 1 + s.below(64) as usize;
        let w = random_vec(&mut s, n);
        let models: Vec<ParamVec> = (0..k).map(|_| random_vec(&mut s, n)).collect();
        let lambda: Vec<f64> = (0..k).map(|_| s.normal()).collect();
        let gamma = 0.5 * s.normal();
        let eta = 10f64.powf(s.uniform_range(-4.0, 0.0));

        let direct = haw_aggregate(&models, gamma, &lambda).map_err(|e| e.to_string())?;
        let sigma = softmax(&lambda).map_err(|e| e.to_string())?;
        let scale = exp(gamma);
        for j in 0..n {
            let wj = w.values()[j];
            let pull: f64 = sigma
                .iter()
                .zip(&models)
                .map(|(s, m)| s * (wj - m.values()[j]) / eta)
                .sum();
            let expanded = wj - eta * scale * pull - (1.0 - scale) * wj;
            worst = worst.max((expanded - direct.values()[j]).abs());
        }
    }
    Ok((
        worst <= 1e-10,
        format!("max abs difference {worst:.2e} over 100 instances (need <= 1e-10)"),
    ))
}

fn reliable_comms(_: &mut Suite) -> Verdict {
    let mut ok = true;
    for (method, extra) in [
        ("fedavg", ""),
        ("fedhaw", r#","eta_gamma":0.001,"eta_lambda":0.01"#),
        ("fedprox_haw", r#","eta_gamma":0.001,"eta_lambda":0.01"#),
    ] {
        let config = synthetic_config(method, extra);
        let sampled = run_synthetic(&config, &RunOptions::default())?;
        let bypass = RunOptions {
            bypass_comms: true,
            ..RunOptions::default()
        };
        ok &= identical_runs(&sampled, &run_synthetic(&config, &bypass)?);
    }
    Ok((
        ok,
        "fedavg, fedhaw, fedprox_haw with p_e=0 against bypassed comms".into(),
    ))
}

fn partition(_: &mut Suite) -> Verdict {
    let mut s = RngStream::new(11, 0);
    let data = gen_synthetic(10, 4, 60, 0.5, &mut s).map_err(|e| e.to_string())?;
    for seed in 0..100u64 {
        let k = 2 + (seed % 9) as usize;
        let alpha = [0.05, 0.1, 0.5, 1.0, 10.0][(seed % 5) as usize];
        let shards = dirichlet_partition(&data, k, alpha, 1, &mut RngStream::new(seed, 1))
            .map_err(|e| e.to_string())?;
        let mut seen = vec![0u32; data.len()];
        for shard in &shards {
            for &i in &shard.indices {
                seen[i] += 1;
            }
        }
        if shards.len() != k || seen.iter().any(|&c| c != 1) {
            return Ok((
                false,
                format!("seed {seed}: shards overlap or miss samples"),
            ));
        }
    }
    Ok((true, "100 seeds, every sample in exactly one shard".into()))
}

fn permutation(_: &mut Suite) -> Verdict {
    for i in 0..100 {
        let mut s = RngStream::new(1000 + i, 0);
        let k = 2 + s.below(8) as usize;
        let n = 1 + s.below(64) as usize;
        let w = random_vec(&mut s, n);
        let models: Vec<ParamVec> = (0..k).map(|_| random_vec(&mut s, n)).collect();
        let prev: Vec<ParamVec> = (0..k).map(|_| random_vec(&mut s, n)).collect();
        let lambda: Vec<f64> = (0..k).map(|_| s.normal()).collect();
        let sizes: Vec<usize> = (0..k).map(|_| 1 + s.below(1000) as usize).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        s.shuffle(&mut perm);
        let permute = |v: &[ParamVec]| perm.iter().map(|&j| v[j].clone()).collect::<Vec<_>>();

        let step = |lambda: Vec<f64>, prev: Vec<ParamVec>, models: Vec<ParamVec>| {
            let mut h = HawState::new(0.05, lambda, 1e-3, 1e-2, 1e-3)?;
            h.set_prev_client_models(Some(prev));
            h.step(1, &w, models)
        };
        let a = step(lambda.clone(), prev.clone(), models.clone()).map_err(|e| e.to_string())?;
        let b = step(
            perm.iter().map(|&j| lambda[j]).collect(),
            permute(&prev),
            permute(&models),
        )
        .map_err(|e| e.to_string())?;
        let lambda_ok = perm
            .iter()
            .enumerate()
            .all(|(pos, &j)| a.lambda_after[j].to_bits() == b.lambda_after[pos].to_bits());
        let haw_ok = a.w_next.bit_eq(&b.w_next)
            && a.gamma_after.to_bits() == b.gamma_after.to_bits()
            && lambda_ok;

        let avg =
            |sizes: &[usize], models: &[ParamVec]| weighted_sum(&fedavg_weights(sizes)?, models);
        let p_sizes: Vec<usize> = perm.iter().map(|&j| sizes[j]).collect();
        let avg_ok = avg(&sizes, &models)
            .and_then(|x| Ok(x.bit_eq(&avg(&p_sizes, &permute(&models))?)))
            .map_err(|e| e.to_string())?;
        if !(haw_ok && avg_ok) {
            return Ok((
                false,
                format!("instance {i} not equivariant (fedhaw {haw_ok}, fedavg {avg_ok})"),
            ));
        }
    }
    Ok((
        true,
        "fedhaw and fedavg steps on 100 random relabellings".into(),
    ))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "1_mnist_heterogeneity",
            check: mnist_heterogeneity,
        },
        Criterion {
            name: "2_mnist_comm_errors",
            check: mnist_comm_errors,
        },
        Criterion {
            name: "3_fedlaw_ordering",
            check: fedlaw_ordering,
        },
        Criterion {
            name: "4_aggregation_timing",
            check: aggregation_timing,
        },
        Criterion {
            name: "5_fedprox_haw_early_rounds",
            check: fedprox_haw_early_rounds,
        },
        Criterion {
            name: "6a_properties_finite_differences",
            check: finite_differences,
        },
        Criterion {
            name: "6b_properties_zero_meta_rate",
            check: zero_meta_rate,
        },
        Criterion {
            name: "6c_properties_weight_decay_expansion",
            check: weight_decay_expansion,
        },
        Criterion {
            name: "6d_properties_reliable_comms",
            check: reliable_comms,
        },
        Criterion {
            name: "6e_properties_partition",
            check: partition,
        },
        Criterion {
            name: "6f_properties_permutation",
            check: permutation,
        },
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected: Vec<&Criterion> = criteria
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())))
        .collect();

    let mut suite = Suite {
        mnist: None,
        runs: HashMap::new(),
    };
    let mut failed = Vec::new();
    // Cheap criteria first so their verdicts appear before the long MNIST runs.
    let (props, mnist): (Vec<&Criterion>, Vec<&Criterion>) =
        selected.into_iter().partition(|c| c.name.starts_with('6'));
    for c in props.into_iter().chain(mnist) {
        let clock = Instant::now();
        let (ok, detail) = match (c.check)(&mut suite) {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "{} {}: {detail} ({:.1?})",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            clock.elapsed()
        );
        if !ok {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
