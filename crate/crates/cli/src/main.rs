//! Operator surface for the noise-prediction toolkit: dataset generation,
//! training, single-pass refinement, benchmarking, and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
//! echoes its effective configuration, accepts `--config FILE` with
//! `key=value` lines (explicit flags override file values), and writes
//! output files atomically.

mod lat;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use vnp_core::oracle::{refine_iterative, RefineConfig, SyntheticDenoiser};
use vnp_core::pndata::{
    dataset_stats, embed_prompt, generate_pndata, read_dataset, NoisePairRecord,
};
use vnp_core::scalar::Scalar;
use vnp_core::spectral::{gaussian_lowpass_mask, low_freq_energy_ratio, temporal_correlation};
use vnp_core::tensor::{sample_gaussian, Dims4, RngSeed};
use vnp_core::train::{evaluate_mse, identity_baseline_mse, train, TrainConfig};
use vnp_core::tucker::TuckerRanks;
use vnp_core::vnpnet::{
    read_checkpoint, vnpnet_forward, write_checkpoint, FilterVariant, GcrmConfig, GcrmStage,
    VnpnetConfig, VnpnetParams,
};

/// Usage problems exit 2, runtime failures exit 1.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<vnp_core::Error> for CliError {
    fn from(e: vnp_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser)]
#[command(name = "vnp", version, about = "Video-latent noise prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a prompt/noise pair dataset with the refinement loop.
    GenData(GenDataArgs),
    /// Train the prediction network on a dataset.
    Train(TrainArgs),
    /// Run one forward pass, producing a refined-noise tensor file.
    Refine(RefineArgs),
    /// Compare one network pass against the iterative refinement loop.
    Bench(BenchArgs),
    /// Dataset statistics and per-checkpoint evaluation.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// Optional key=value config file; explicit flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Numeric precision of the run.
    #[arg(long, default_value = "f32", value_parser = ["f32", "f64"])]
    precision: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Prompts file, one prompt per line, UTF-8.
    #[arg(long)]
    prompts: PathBuf,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
    /// Latent dims as CxTxHxW.
    #[arg(long, default_value = "4x8x16x16")]
    dims: String,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    /// Refinement rounds K.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// Low-pass cutoff as a fraction of Nyquist.
    #[arg(long, default_value_t = 0.25)]
    d0: f64,
    /// Re-noising coefficient in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    alpha_bar: f64,
    /// Denoiser temporal blend weight in [0, 1).
    #[arg(long, default_value_t = 0.8)]
    lambda_t: f64,
    /// Denoiser spatial blur sigma (pixels).
    #[arg(long, default_value_t = 1.5)]
    sigma_s: f64,
    /// Renormalize recombined spectra to preserve variance.
    #[arg(long, default_value_t = false)]
    renorm_variance: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Input dataset.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Contextual-branch preset.
    #[arg(long, default_value = "tiny", value_parser = ["tiny", "small", "paper"])]
    preset: String,
    /// Structured filter variant.
    #[arg(long, default_value = "tucker", value_parser = ["tucker", "svd", "mlp"])]
    variant: String,
    /// Decomposition ranks as RcxRtxRhxRw; the default clamps (4,8,32,32)
    /// to the dataset dims.
    #[arg(long)]
    ranks: Option<String>,
    #[arg(long, default_value_t = 2e-4)]
    lr0: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr1: f64,
    #[arg(long, default_value_t = 0.01)]
    wd: f64,
    /// Rescale softmax gates by the mode rank.
    #[arg(long, default_value_t = false)]
    gate_rescale: bool,
    /// Write the per-step loss history as CSV (step, lr, loss).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Hold out the last K records from training.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output refined tensor (LAT1).
    #[arg(long)]
    out: PathBuf,
    /// Prompt text to condition on.
    #[arg(long, default_value = "a quiet mountain lake at dawn")]
    prompt: String,
    /// Optional input noise (LAT1); sampled from the seed when absent.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Refinement rounds for the iterative baseline.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0.25)]
    d0: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha_bar: f64,
    #[arg(long, default_value_t = 0.8)]
    lambda_t: f64,
    #[arg(long, default_value_t = 1.5)]
    sigma_s: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoints to evaluate (repeatable).
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    d0: f64,
}

fn parse_dims(s: &str) -> Result<Dims4, CliError> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad dims '{s}', expected CxTxHxW")))?;
    if parts.len() != 4 || parts.iter().any(|&d| d == 0) {
        return Err(usage(format!("bad dims '{s}', expected four positive values")));
    }
    Ok(Dims4::new(parts[0], parts[1], parts[2], parts[3]))
}

fn parse_ranks(s: &str) -> Result<TuckerRanks, CliError> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad ranks '{s}', expected RcxRtxRhxRw")))?;
    if parts.len() != 4 {
        return Err(usage(format!("bad ranks '{s}', expected four values")));
    }
    Ok(TuckerRanks::new(parts[0], parts[1], parts[2], parts[3]))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

/// Default ranks: (4, 8, 32, 32) clamped to the dims.
fn default_ranks(dims: Dims4) -> TuckerRanks {
    let d = TuckerRanks::default();
    TuckerRanks::new(
        d.c.min(dims.c),
        d.t.min(dims.t),
        d.h.min(dims.h),
        d.w.min(dims.w),
    )
}

fn preset_gcrm(name: &str) -> GcrmConfig {
    match name {
        "paper" => GcrmConfig::paper(),
        "small" => GcrmConfig {
            patch: 2,
            stages: vec![GcrmStage { depth: 2, dim: 96, window: (2, 2, 2), global_attn: false }],
            head_dim: 16,
            drop_path: 0.0,
        },
        _ => GcrmConfig::tiny(),
    }
}

fn cmd_gen_data<T: Scalar>(a: &GenDataArgs) -> CliResult
where
    rand_distr::StandardNormal: rand_distr::Distribution<T>,
{
    require_file(&a.prompts, "prompts file")?;
    let dims = parse_dims(&a.dims)?;
    let text = std::fs::read_to_string(&a.prompts)?;
    let prompts: Vec<String> = text
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect();
    if prompts.is_empty() {
        return Err(usage(format!("no prompts in {}", a.prompts.display())));
    }
    let cfg = RefineConfig {
        iterations: a.iters,
        d0: a.d0,
        alpha_bar: a.alpha_bar,
        seed: a.common.seed,
        renormalize_variance: a.renorm_variance,
    };
    cfg.validate()?;
    let denoiser = SyntheticDenoiser::<T>::new(a.lambda_t, a.sigma_s);
    println!(
        "config: precision={} prompts={} out={} dims={dims} embed_dim={} iters={} d0={} \
         alpha_bar={} lambda_t={} sigma_s={} renorm_variance={} seed={}",
        T::NAME,
        a.prompts.display(),
        a.out.display(),
        a.embed_dim,
        a.iters,
        a.d0,
        a.alpha_bar,
        a.lambda_t,
        a.sigma_s,
        a.renorm_variance,
        a.common.seed,
    );
    let report = generate_pndata(&prompts, dims, a.embed_dim, &cfg, &denoiser, &a.out)?;
    println!(
        "wrote {} records to {}",
        report.per_record.len(),
        a.out.display()
    );
    println!(
        "mean delta temporal correlation: {:+.4}",
        report.mean_delta_temporal
    );
    println!(
        "mean delta low-frequency ratio:  {:+.4}",
        report.mean_delta_low_freq
    );
    println!("wall time: {:.2}s", report.wall_seconds);
    Ok(())
}

fn load_records<T: Scalar>(
    path: &Path,
) -> Result<(Dims4, usize, Vec<NoisePairRecord<T>>), CliError> {
    let (header, reader) = read_dataset::<T>(path)?;
    let mut records = Vec::with_capacity(header.record_count as usize);
    for rec in reader {
        records.push(rec?);
    }
    Ok((header.dims, header.embedding_dim as usize, records))
}

fn cmd_train<T: Scalar>(a: &TrainArgs) -> CliResult
where
    rand_distr::StandardNormal: rand_distr::Distribution<T>,
{
    require_file(&a.data, "dataset")?;
    let gcrm = preset_gcrm(&a.preset);
    if a.preset == "paper" {
        println!(
            "preset paper: depths {:?}, dims {:?}, head dim {}, drop path {:.2}, patch {}",
            gcrm.stages.iter().map(|s| s.depth).collect::<Vec<_>>(),
            gcrm.stages.iter().map(|s| s.dim).collect::<Vec<_>>(),
            gcrm.head_dim,
            gcrm.drop_path,
            gcrm.patch,
        );
    }
    let (dims, embed_dim, mut records) = load_records::<T>(&a.data)?;
    if records.is_empty() {
        return Err(CliError::Runtime("dataset has no records".into()));
    }
    if a.holdout >= records.len() {
        return Err(usage(format!(
            "holdout {} leaves no training records (dataset has {})",
            a.holdout,
            records.len()
        )));
    }
    let holdout_set = if a.holdout > 0 {
        records.split_off(records.len() - a.holdout)
    } else {
        Vec::new()
    };
    let ranks = match &a.ranks {
        Some(s) => parse_ranks(s)?,
        None => default_ranks(dims),
    };
    let variant = FilterVariant::parse(&a.variant)?;
    let mut net_cfg = VnpnetConfig::new(dims, ranks, gcrm);
    net_cfg.embed_dim = embed_dim;
    net_cfg.variant = variant;
    net_cfg.gate_rescale = a.gate_rescale;
    net_cfg.validate()?;
    let train_cfg = TrainConfig {
        batch_size: a.batch,
        total_steps: a.steps,
        lr0: a.lr0,
        lr1: a.lr1,
        weight_decay: a.wd,
        seed: a.common.seed,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    println!(
        "config: precision={} data={} out={} steps={} batch={} preset={} variant={} ranks={ranks} \
         lr0={:e} lr1={:e} wd={} gate_rescale={} holdout={} seed={}",
        T::NAME,
        a.data.display(),
        a.out.display(),
        a.steps,
        a.batch,
        a.preset,
        a.variant,
        a.lr0,
        a.lr1,
        a.wd,
        a.gate_rescale,
        a.holdout,
        a.common.seed,
    );

    let mut params = VnpnetParams::<T>::init(net_cfg, a.common.seed)?;
    println!("parameters: {}", params.parameter_count());
    let history = if a.steps > 0 {
        train(&records, &mut params, &train_cfg)?
    } else {
        Vec::new()
    };
    write_checkpoint(&a.out, &params)?;
    println!("checkpoint written to {}", a.out.display());

    if let Some(csv) = &a.loss_csv {
        let mut body = String::from("step,lr,loss\n");
        for s in &history {
            body.push_str(&format!("{},{:e},{:e}\n", s.step, s.lr, s.loss));
        }
        let tmp = csv.with_extension("csv.tmp");
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, csv)?;
        println!("loss history written to {}", csv.display());
    }

    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "train loss: first step {:.6}, last step {:.6}",
            first.loss, last.loss
        );
    }
    let train_identity = identity_baseline_mse(&records)?;
    let train_mse = evaluate_mse(&params, &records)?;
    println!("train-set model mse {train_mse:.6} vs identity baseline {train_identity:.6}");
    if !holdout_set.is_empty() {
        let held = evaluate_mse(&params, &holdout_set)?;
        let ident = identity_baseline_mse(&holdout_set)?;
        println!("held-out model mse {held:.6} vs identity baseline {ident:.6}");
    }
    Ok(())
}

fn cmd_refine<T: Scalar>(a: &RefineArgs) -> CliResult
where
    rand_distr::StandardNormal: rand_distr::Distribution<T>,
{
    require_file(&a.checkpoint, "checkpoint")?;
    let params = read_checkpoint::<T>(&a.checkpoint)?;
    let dims = params.cfg.dims;
    let z = match &a.input {
        Some(p) => {
            require_file(p, "input tensor")?;
            let z = lat::read_lat::<T>(p)?;
            if z.dims() != dims {
                return Err(usage(format!(
                    "input dims {} do not match checkpoint dims {dims}",
                    z.dims()
                )));
            }
            z
        }
        None => sample_gaussian::<T>(dims, RngSeed(a.common.seed))?,
    };
    println!(
        "config: precision={} checkpoint={} out={} prompt=\"{}\" seed={} dims={dims}",
        T::NAME,
        a.checkpoint.display(),
        a.out.display(),
        a.prompt,
        a.common.seed,
    );
    let embedding = embed_prompt::<T>(&a.prompt, params.cfg.embed_dim)?;
    let refined = vnpnet_forward(&z, &embedding, &params, false, 0)?;
    lat::write_lat(&a.out, &refined)?;
    println!("refined tensor written to {}", a.out.display());

    let mask = gaussian_lowpass_mask::<T>((dims.t, dims.h, dims.w), 0.25)?;
    let tc_in = temporal_correlation(&z)?.as_f64();
    let tc_out = temporal_correlation(&refined)?.as_f64();
    let lf_in = low_freq_energy_ratio(&z, &mask)?.as_f64();
    let lf_out = low_freq_energy_ratio(&refined, &mask)?.as_f64();
    println!("temporal correlation: input {tc_in:+.4} -> output {tc_out:+.4}");
    println!("low-frequency ratio:  input {lf_in:.4} -> output {lf_out:.4}");
    Ok(())
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Peak resident set size in MiB, when the platform exposes it.
fn peak_rss_mib() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: f64 = rest.trim().trim_end_matches("kB").trim().parse().ok()?;
            return Some(kb / 1024.0);
        }
    }
    None
}

fn cmd_bench<T: Scalar>(a: &BenchArgs) -> CliResult
where
    rand_distr::StandardNormal: rand_distr::Distribution<T>,
{
    require_file(&a.checkpoint, "checkpoint")?;
    if a.trials == 0 {
        return Err(usage("trials must be >= 1"));
    }
    let params = read_checkpoint::<T>(&a.checkpoint)?;
    let dims = params.cfg.dims;
    println!(
        "config: precision={} checkpoint={} dims={dims} iters={} trials={} d0={} alpha_bar={} \
         lambda_t={} sigma_s={} seed={}",
        T::NAME,
        a.checkpoint.display(),
        a.iters,
        a.trials,
        a.d0,
        a.alpha_bar,
        a.lambda_t,
        a.sigma_s,
        a.common.seed,
    );
    let embedding = embed_prompt::<T>("benchmark prompt", params.cfg.embed_dim)?;
    let denoiser = SyntheticDenoiser::<T>::new(a.lambda_t, a.sigma_s);
    let cfg = RefineConfig {
        iterations: a.iters,
        d0: a.d0,
        alpha_bar: a.alpha_bar,
        seed: a.common.seed,
        renormalize_variance: false,
    };
    cfg.validate()?;

    let mut net_times = Vec::with_capacity(a.trials);
    let mut oracle_times = Vec::with_capacity(a.trials);
    for trial in 0..a.trials {
        let z = sample_gaussian::<T>(dims, RngSeed(a.common.seed.wrapping_add(trial as u64)))?;
        let t0 = Instant::now();
        let net_out = vnpnet_forward(&z, &embedding, &params, false, 0)?;
        net_times.push(t0.elapsed().as_secs_f64());
        let t1 = Instant::now();
        let oracle_out = refine_iterative(&z, &embedding, &cfg, &denoiser)?;
        oracle_times.push(t1.elapsed().as_secs_f64());
        std::hint::black_box((net_out.data()[0], oracle_out.data()[0]));
    }
    let net = median(&mut net_times);
    let oracle = median(&mut oracle_times);
    println!("network forward (median of {}): {net:.4}s", a.trials);
    println!(
        "iterative refinement K={} (median of {}): {oracle:.4}s",
        a.iters, a.trials
    );
    println!("speedup ratio (refinement / network): {:.2}x", oracle / net);
    if a.trials == 1 {
        println!("warning: single trial, timings unstable");
    }
    match peak_rss_mib() {
        Some(mib) => println!("peak resident memory: {mib:.1} MiB"),
        None => println!("peak resident memory: unavailable on this platform"),
    }
    Ok(())
}

fn cmd_eval<T: Scalar>(a: &EvalArgs) -> CliResult
where
    rand_distr::StandardNormal: rand_distr::Distribution<T>,
{
    require_file(&a.data, "dataset")?;
    for c in &a.checkpoints {
        require_file(c, "checkpoint")?;
    }
    println!(
        "config: precision={} data={} checkpoints={} d0={} seed={}",
        T::NAME,
        a.data.display(),
        a.checkpoints.len(),
        a.d0,
        a.common.seed,
    );
    let stats = dataset_stats::<T>(&a.data)?;
    println!("records: {} dims: {}", stats.record_count, stats.dims);
    match &stats.aggregate {
        Some(agg) => {
            println!(
                "aggregate: std(rand) {:.4} std(refined) {:.4} tc(rand) {:+.4} tc(refined) {:+.4} \
                 lowfreq(rand) {:.4} lowfreq(refined) {:.4}",
                agg.std_rand,
                agg.std_refined,
                agg.temporal_rand,
                agg.temporal_refined,
                agg.low_freq_rand,
                agg.low_freq_refined,
            );
        }
        None => println!("aggregate: none (empty dataset)"),
    }
    if a.checkpoints.is_empty() {
        return Ok(());
    }
    let (_, _, records) = load_records::<T>(&a.data)?;
    if records.is_empty() {
        println!("no records: skipping checkpoint evaluation");
        return Ok(());
    }
    let identity = identity_baseline_mse(&records)?;
    println!("identity baseline mse: {identity:.6}");
    println!("variant     params      mse        mse/identity  d.temporal  d.lowfreq");
    for path in &a.checkpoints {
        let params = read_checkpoint::<T>(path)?;
        let mse = evaluate_mse(&params, &records)?;
        let dims = params.cfg.dims;
        let mask = gaussian_lowpass_mask::<T>((dims.t, dims.h, dims.w), a.d0)?;
        let mut dt = 0.0;
        let mut dl = 0.0;
        for rec in &records {
            let pred = vnpnet_forward(&rec.z_rand, &rec.embedding, &params, false, 0)?;
            dt += (temporal_correlation(&pred)? - temporal_correlation(&rec.z_rand)?).as_f64();
            dl += (low_freq_energy_ratio(&pred, &mask)?
                - low_freq_energy_ratio(&rec.z_rand, &mask)?)
            .as_f64();
        }
        dt /= records.len() as f64;
        dl /= records.len() as f64;
        println!(
            "{:<10}  {:<10}  {:<9.6}  {:<12.4}  {:+.4}     {:+.4}",
            params.cfg.variant.name(),
            params.parameter_count(),
            mse,
            mse / identity,
            dt,
            dl,
        );
    }
    Ok(())
}

/// Splice `key=value` lines from a config file in as CLI flags right after
/// the subcommand. Keys the user also passed explicitly are dropped from
/// the file's contribution, so explicit flags win.
fn expand_config_file(args: Vec<String>) -> Result<Vec<String>, CliError> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let path = args
        .get(pos + 1)
        .ok_or_else(|| usage("--config requires a file path"))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("config file {path}: {e}")))?;
    let explicit: std::collections::BTreeSet<&String> =
        args.iter().filter(|a| a.starts_with("--")).collect();
    let mut extra = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            usage(format!(
                "config line {} is not key=value: '{line}'",
                lineno + 1
            ))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(usage(format!("config line {} has an empty key", lineno + 1)));
        }
        let flag = format!("--{key}");
        if explicit.contains(&flag) {
            continue;
        }
        match value {
            "true" => extra.push(flag),
            "false" => {}
            _ => {
                extra.push(flag);
                extra.push(value.to_string());
            }
        }
    }
    if args.len() < 2 {
        return Err(usage("--config requires a subcommand"));
    }
    let mut out = args[..2].to_vec();
    out.extend(extra);
    out.extend(args[2..].iter().cloned());
    Ok(out)
}

fn dispatch(cli: Cli) -> CliResult {
    match &cli.command {
        Command::GenData(a) => match a.common.precision.as_str() {
            "f64" => cmd_gen_data::<f64>(a),
            _ => cmd_gen_data::<f32>(a),
        },
        Command::Train(a) => match a.common.precision.as_str() {
            "f64" => cmd_train::<f64>(a),
            _ => cmd_train::<f32>(a),
        },
        Command::Refine(a) => match a.common.precision.as_str() {
            "f64" => cmd_refine::<f64>(a),
            _ => cmd_refine::<f32>(a),
        },
        Command::Bench(a) => match a.common.precision.as_str() {
            "f64" => cmd_bench::<f64>(a),
            _ => cmd_bench::<f32>(a),
        },
        Command::Eval(a) => match a.common.precision.as_str() {
            "f64" => cmd_eval::<f64>(a),
            _ => cmd_eval::<f32>(a),
        },
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match expand_config_file(raw) {
        Ok(a) => a,
        Err(CliError::Usage(msg)) | Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
