//! The round loop: distribute, train locally, sample the uplink, aggregate,
//! evaluate, record.

use std::sync::Arc;
use std::time::Instant;

use fedsim_core::aggregation::{
    fedavg_weights, fedlaw_optimize, substitute_failed, weighted_sum, AggregationOutput, HawState,
    LambdaInit,
};
use fedsim_core::comms::{sample_error_probs, CommErrorModel, RoundAvailability};
use fedsim_core::data::{dirichlet_partition, gen_synthetic, split_proxy, ClientShard, Dataset};
use fedsim_core::math::ParamVec;
use fedsim_core::model::{client_update, MlpArch, OptimizerSpec};
use fedsim_core::rng::{purpose, RngStream};
use rayon::prelude::*;

use crate::config::{DatasetKind, ExperimentConfig, FedAvgWeighting, Method};
use crate::error::{FedsimError, Result};
use crate::io;

pub const THREADS_ENV: &str = "FEDSIM_THREADS";

/// Train and test splits shared by every run over the same dataset.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

/// Loads MNIST from disk or generates the synthetic splits.
pub fn load_data(config: &ExperimentConfig) -> Result<DataBundle> {
    let (train, test) = match config.dataset {
        DatasetKind::Mnist => {
            let dir = config.mnist_dir.as_deref().ok_or_else(|| {
                FedsimError::schema("mnist_dir", "required when dataset is \"mnist\"")
            })?;
            io::load_mnist_dir(dir)?
        }
        DatasetKind::Synthetic => {
            let s = config.synthetic.as_ref().ok_or_else(|| {
                FedsimError::schema("synthetic", "required when dataset is \"synthetic\"")
            })?;
            let mut train_stream = RngStream::new(config.seed, purpose::SYNTHETIC_TRAIN);
            let mut test_stream = RngStream::new(config.seed, purpose::SYNTHETIC_TEST);
            (
                gen_synthetic(
                    s.num_classes,
                    s.input_dim,
                    s.train_per_class,
                    s.spread,
                    &mut train_stream,
                )?,
                gen_synthetic(
                    s.num_classes,
                    s.input_dim,
                    s.test_per_class,
                    s.spread,
                    &mut test_stream,
                )?,
            )
        }
    };
    Ok(DataBundle {
        train: Arc::new(train),
        test: Arc::new(test),
    })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker threads for client updates; `None` reads `FEDSIM_THREADS`
    /// and falls back to the number of available cores.
    pub threads: Option<usize>,
    /// Skip the uplink model entirely: every update always arrives.
    pub bypass_comms: bool,
    /// Measure aggregation wall time. When off the column is zero, which
    /// keeps records byte-identical between runs.
    pub record_timing: bool,
    /// Print a progress line to stderr every this many rounds.
    pub progress_every: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threads: None,
            bypass_comms: false,
            record_timing: true,
            progress_every: None,
        }
    }
}

pub fn thread_count(requested: Option<usize>) -> Result<usize> {
    if let Some(n) = requested {
        return Ok(n.max(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(FedsimError::Format(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Accuracy of the aggregated model on the final test set; `None` on
    /// rounds skipped by `eval_every`.
    pub test_accuracy: Option<f64>,
    pub gamma: f64,
    /// Sum of the aggregation weights, `e^γ`.
    pub effective_l1: f64,
    pub weights: Vec<f64>,
    pub num_failed: usize,
    pub agg_wall_time_ns: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_model: ParamVec,
    pub records: Vec<RoundRecord>,
}

impl RunOutput {
    /// Accuracy recorded for the last round, if it was evaluated.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.test_accuracy)
    }

    /// Highest recorded accuracy and its round.
    pub fn best_accuracy(&self) -> Option<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.test_accuracy.map(|a| (r.round, a)))
            .fold(None, |best, (t, a)| match best {
                Some((_, b)) if b >= a => best,
                _ => Some((t, a)),
            })
    }

    pub fn accuracy_at(&self, round: usize) -> Option<f64> {
        self.records.get(round).and_then(|r| r.test_accuracy)
    }
}

/// Everything fixed before the first round.
#[derive(Debug, Clone)]
pub struct Environment {
    pub arch: MlpArch,
    pub shards: Vec<ClientShard>,
    pub proxy: Dataset,
    pub final_test: Dataset,
    pub comms: CommErrorModel,
    pub initial_model: ParamVec,
}

impl Environment {
    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(ClientShard::len).collect()
    }
}

/// Partitions the data, splits the proxy set off the test set, draws the
/// failure probabilities and initializes the model. Every piece comes from
/// its own seeded stream, so configs that agree on dataset, `K`, `D_alpha`,
/// `p_e` and seed share all of it.
pub fn prepare(config: &ExperimentConfig, data: &DataBundle) -> Result<Environment> {
    let seed = config.seed;
    let mut dims = vec![data.train.input_dim()];
    dims.extend_from_slice(&config.hidden);
    dims.push(data.train.num_classes().max(data.test.num_classes()));
    let arch = MlpArch::new(dims)?;
    let shards = dirichlet_partition(
        &data.train,
        config.k,
        config.d_alpha,
        config.min_per_client(),
        &mut RngStream::new(seed, purpose::PARTITION),
    )?;
    let split = split_proxy(
        &data.test,
        config.proxy_per_class,
        &mut RngStream::new(seed, purpose::PROXY_SPLIT),
    )?;
    let comms = sample_error_probs(
        config.k,
        config.p_e,
        &mut RngStream::new(seed, purpose::COMMS_PROBS),
    )?;
    let initial_model = arch.init_params(&mut RngStream::new(seed, purpose::MODEL_INIT));
    Ok(Environment {
        arch,
        shards,
        proxy: split.proxy,
        final_test: split.final_test,
        comms,
        initial_model,
    })
}

enum Aggregator {
    FedAvg {
        weights: Vec<f64>,
    },
    Haw(HawState),
    Law {
        epochs: usize,
        lr: f64,
        shard_sizes: Vec<usize>,
    },
}

impl Aggregator {
    fn new(config: &ExperimentConfig, env: &Environment) -> Result<Self> {
        let sizes = env.shard_sizes();
        Ok(match config.method {
            Method::Fedavg | Method::Fedprox => Aggregator::FedAvg {
                weights: match config.fedavg_weights {
                    FedAvgWeighting::ShardSize => fedavg_weights(&sizes)?,
                    FedAvgWeighting::Uniform => vec![1.0 / config.k as f64; config.k],
                },
            },
            Method::Fedhaw | Method::FedproxHaw => {
                let lambda = LambdaInit::from(config.lambda_init).logits(&sizes)?;
                Aggregator::Haw(HawState::new(
                    0.0,
                    lambda,
                    config.eta_gamma.unwrap_or(0.0),
                    config.eta_lambda.unwrap_or(0.0),
                    config.optimizer.eta,
                )?)
            }
            Method::Fedlaw => Aggregator::Law {
                epochs: config.proxy_epochs.unwrap_or(0),
                lr: config.proxy_lr.unwrap_or(0.0),
                shard_sizes: sizes,
            },
        })
    }

    /// Aggregates `effective` and returns the models that are no longer
    /// needed, so the caller can free them after stopping its clock.
    fn step(
        &mut self,
        t: usize,
        w_global: &ParamVec,
        effective: Vec<ParamVec>,
        env: &Environment,
    ) -> fedsim_core::Result<(AggregationOutput, Vec<ParamVec>)> {
        match self {
            Aggregator::FedAvg { weights } => {
                let out = AggregationOutput {
                    w_next: weighted_sum(weights, &effective)?,
                    effective_weights: weights.clone(),
                    gamma_after: 0.0,
                    lambda_after: Vec::new(),
                    agg_wall_time_ns: 0,
                };
                Ok((out, effective))
            }
            Aggregator::Haw(state) => {
                let (out, released) = state.step_releasing(t, w_global, effective)?;
                Ok((out, released.unwrap_or_default()))
            }
            Aggregator::Law {
                epochs,
                lr,
                shard_sizes,
            } => {
                let solution =
                    fedlaw_optimize(&effective, shard_sizes, &env.proxy, &env.arch, *epochs, *lr)?;
                Ok((solution.into_output(&effective)?, effective))
            }
        }
    }
}

fn client_stream(seed: u64, client: usize, round: usize) -> RngStream {
    RngStream::new(seed, purpose::CLIENT_DATA)
        .child(client as u64)
        .child(round as u64)
}

/// Local updates of the clients in `received`, run on `pool`. Results are
/// placed by client id, so scheduling cannot reorder them.
#[allow(clippy::too_many_arguments)]
fn train_clients(
    pool: &rayon::ThreadPool,
    config: &ExperimentConfig,
    env: &Environment,
    data: &Dataset,
    opt: &OptimizerSpec,
    w: &ParamVec,
    received: &[usize],
    t: usize,
) -> fedsim_core::Result<Vec<Option<ParamVec>>> {
    let trained: Vec<(usize, ParamVec)> = pool.install(|| {
        received
            .par_iter()
            .map(|&k| {
                client_update(
                    &env.arch,
                    w,
                    data,
                    &env.shards[k],
                    opt,
                    config.e,
                    config.batch_size,
                    client_stream(config.seed, k, t),
                )
                .map(|m| (k, m))
            })
            .collect::<fedsim_core::Result<_>>()
    })?;
    let mut models: Vec<Option<ParamVec>> = vec![None; config.k];
    for (k, m) in trained {
        models[k] = Some(m);
    }
    Ok(models)
}

fn build_pool(opts: &RunOptions) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(opts.threads)?)
        .build()
        .map_err(|e| FedsimError::Format(format!("thread pool: {e}")))
}

/// Runs the config from scratch, loading its data first.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    let data = load_data(config)?;
    run_with_data(config, &data, &RunOptions::default())
}

pub fn run_with_data(
    config: &ExperimentConfig,
    data: &DataBundle,
    opts: &RunOptions,
) -> Result<RunOutput> {
    config.validate()?;
    let env = prepare(config, data)?;
    run_prepared(config, data, &env, opts)
}

pub fn run_prepared(
    config: &ExperimentConfig,
    data: &DataBundle,
    env: &Environment,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let pool = build_pool(opts)?;
    let opt = config.optimizer_spec();
    let mut aggregator = Aggregator::new(config, env)?;
    let mut w = env.initial_model.clone();
    let mut records = Vec::with_capacity(config.t);
    let started = Instant::now();

    for t in 0..config.t {
        let in_round = |source| FedsimError::Round { round: t, source };
        let avail = if opts.bypass_comms {
            RoundAvailability::all_received(config.k)
        } else {
            env.comms.sample_round(t)
        };
        // Availability is a pure function of (seed, t), so updates that
        // would be lost on the uplink are never computed.
        let models = train_clients(
            &pool,
            config,
            env,
            &data.train,
            &opt,
            &w,
            &avail.received,
            t,
        )
        .map_err(in_round)?;
        let effective = substitute_failed(models, &w, &avail).map_err(in_round)?;

        let clock = Instant::now();
        let (out, released) = aggregator.step(t, &w, effective, env).map_err(in_round)?;
        let agg_ns = if opts.record_timing {
            u64::try_from(clock.elapsed().as_nanos()).unwrap_or(u64::MAX)
        } else {
            0
        };
        drop(released);
        w = out.w_next;
        w.check_finite("global model").map_err(in_round)?;

        let evaluate = (t + 1) % config.eval_every == 0 || t + 1 == config.t;
        let test_accuracy = if evaluate {
            Some(env.arch.evaluate(&w, &env.final_test).map_err(in_round)?)
        } else {
            None
        };
        let record = RoundRecord {
            round: t,
            test_accuracy,
            gamma: out.gamma_after,
            effective_l1: fedsim_core::math::exp(out.gamma_after),
            weights: out.effective_weights,
            num_failed: avail.failed.len(),
            agg_wall_time_ns: agg_ns,
        };
        if let Some(every) = opts.progress_every {
            if every > 0 && ((t + 1) % every == 0 || t + 1 == config.t) {
                eprintln!(
                    "  [{} seed {}] round {:>4}/{}  acc {}  failed {}  {:.0}s",
                    config.method,
                    config.seed,
                    t + 1,
                    config.t,
                    record
                        .test_accuracy
                        .map_or("-".into(), |a| format!("{:.4}", a)),
                    record.num_failed,
                    started.elapsed().as_secs_f64()
                );
            }
        }
        records.push(record);
    }
    Ok(RunOutput {
        final_model: w,
        records,
    })
}

/// Mean server-side aggregation time per method, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationTiming {
    pub rounds: usize,
    pub fedavg_ns: f64,
    pub fedhaw_ns: f64,
    pub fedlaw_ns: f64,
}

pub const DEFAULT_TIMING_ETA_GAMMA: f64 = 1e-3;
pub const DEFAULT_TIMING_ETA_LAMBDA: f64 = 1e-2;
pub const DEFAULT_PROXY_EPOCHS: usize = 100;
pub const DEFAULT_PROXY_LR: f64 = 0.01;

/// Times FedAvg, FedHAW and FedLAW on the same effective client models for
/// `rounds` rounds. The trajectory follows FedHAW, whose hypergradients
/// assume the global model is its own output; FedAvg and FedLAW keep no state
/// between rounds, so all three are timed on identical inputs. Meta and proxy
/// settings come from the config when present.
pub fn measure_aggregation_time(
    config: &ExperimentConfig,
    data: &DataBundle,
    rounds: usize,
    opts: &RunOptions,
) -> Result<AggregationTiming> {
    if rounds == 0 {
        return Err(FedsimError::schema("T", "timing needs at least one round"));
    }
    let env = prepare(config, data)?;
    let pool = build_pool(opts)?;
    let opt = config.optimizer_spec();
    let sizes = env.shard_sizes();
    let avg_weights = fedavg_weights(&sizes)?;
    let mut haw = HawState::new(
        0.0,
        LambdaInit::from(config.lambda_init).logits(&sizes)?,
        config.eta_gamma.unwrap_or(DEFAULT_TIMING_ETA_GAMMA),
        config.eta_lambda.unwrap_or(DEFAULT_TIMING_ETA_LAMBDA),
        config.optimizer.eta,
    )?;
    let epochs = config.proxy_epochs.unwrap_or(DEFAULT_PROXY_EPOCHS);
    let lr = config.proxy_lr.unwrap_or(DEFAULT_PROXY_LR);

    let mut w = env.initial_model.clone();
    let mut total = [0u128; 3];
    for t in 0..rounds {
        let in_round = |source| FedsimError::Round { round: t, source };
        let avail = if opts.bypass_comms {
            RoundAvailability::all_received(config.k)
        } else {
            env.comms.sample_round(t)
        };
        let models = train_clients(
            &pool,
            config,
            &env,
            &data.train,
            &opt,
            &w,
            &avail.received,
            t,
        )
        .map_err(in_round)?;
        let effective = substitute_failed(models, &w, &avail).map_err(in_round)?;

        // Results are dropped only after each clock stops, as in the run loop.
        let clock = Instant::now();
        let avg_out = weighted_sum(&avg_weights, &effective).map_err(in_round)?;
        total[0] += clock.elapsed().as_nanos();
        drop(avg_out);

        let haw_input = effective.clone();
        let clock = Instant::now();
        let (haw_out, released) = haw.step_releasing(t, &w, haw_input).map_err(in_round)?;
        total[1] += clock.elapsed().as_nanos();
        drop(released);

        let clock = Instant::now();
        let law_out = fedlaw_optimize(&effective, &sizes, &env.proxy, &env.arch, epochs, lr)
            .and_then(|s| s.aggregate(&effective))
            .map_err(in_round)?;
        total[2] += clock.elapsed().as_nanos();
        drop(law_out);

        w = haw_out.w_next;
        if let Some(every) = opts.progress_every {
            if every > 0 && (t + 1) % every == 0 {
                eprintln!("  [timing] round {}/{}", t + 1, rounds);
            }
        }
    }
    let mean = |ns: u128| ns as f64 / rounds as f64;
    Ok(AggregationTiming {
        rounds,
        fedavg_ns: mean(total[0]),
        fedhaw_ns: mean(total[1]),
        fedlaw_ns: mean(total[2]),
    })
}
