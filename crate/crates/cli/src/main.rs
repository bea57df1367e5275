//! `pzmoe` — command-line driver for the toy-MoE compression pipeline.
//!
//! Machine-readable JSON goes to stdout, human-readable notes to stderr.
//! Exit codes: 0 success, 2 usage error, 3 I/O or unreadable file,
//! 4 semantic mismatch (incompatible models, infeasible ratio).

use clap::{Args, Parser, Subcommand};
use pzmoe_core::analysis::{
    exponent_histogram, pearson_pairwise, similarity_fraction_closed, similarity_fraction_mc,
};
use pzmoe_core::compress::{compress, CompressOptions};
use pzmoe_core::kernel::bench_gemv;
use pzmoe_core::model::{
    eval_deviation, gaussian_inputs, generate_toy, ModelMetadata, ToyMoEConfig, ToyMoEModel,
};
use pzmoe_core::{Container, Error, GroupingStrategy, Slot};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(
    name = "pzmoe",
    version,
    about = "Sparse expert merging with packed-bfloat16 storage for toy MoE models"
)]
struct Cli {
    /// Cap worker threads for internally parallel operations.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy MoE model container.
    GenToy(GenToyArgs),
    /// Compress a toy model by sparse expert merging into packed pairs.
    Compress(CompressArgs),
    /// Compare two models' outputs on seeded held-out inputs.
    Eval(EvalArgs),
    /// Statistical reports on model containers and the similarity theory.
    #[command(subcommand)]
    Inspect(InspectCommand),
    /// Time the fused, dense, and decode-then-dense GEMV paths.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    experts: usize,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Make expert 2k+1 a noisy copy of expert 2k.
    #[arg(long, default_value_t = false)]
    dup_pairs: bool,
    /// Perturbation scale (relative to init std) for duplicated pairs.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model_in: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = GroupingArg::Random)]
    grouping: GroupingArg,
    #[arg(long, default_value_t = 256)]
    calib_tokens: usize,
    #[arg(long, default_value_t = 1)]
    calib_seed: u64,
    #[arg(long, default_value_t = 64)]
    search_budget: usize,
}

#[derive(Copy, Clone, clap::ValueEnum)]
enum GroupingArg {
    Random,
    Search,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    compressed: PathBuf,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum InspectCommand {
    /// bf16 exponent histogram over a model's expert weights.
    Exponents { file: PathBuf },
    /// Pairwise Pearson correlation between experts within each layer.
    Correlation { file: PathBuf },
    /// Closed-form similar-entry proportion vs its Monte Carlo oracle.
    Theory {
        #[arg(long, default_value_t = 1.0)]
        sigma_ratio: f64,
        #[arg(long, default_value_t = 0.4)]
        tau: f64,
        #[arg(long, default_value_t = 1_000_000)]
        mc_samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    rows: usize,
    #[arg(long, default_value_t = 1024)]
    cols: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(flag: &str, message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: format!("invalid value for {flag}: {message}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_)
            | Error::BadMagic(_)
            | Error::CorruptHeader(_)
            | Error::TruncatedPayload { .. }
            | Error::DuplicateName(_) => EXIT_IO,
            _ => EXIT_MISMATCH,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: invalid value for --threads: must be >= 1");
            return ExitCode::from(EXIT_USAGE);
        }
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenToy(args) => cmd_gen_toy(args),
        Command::Compress(args) => cmd_compress(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(cmd) => cmd_inspect(cmd),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn positive(flag: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(CliError::usage(flag, "must be >= 1"));
    }
    Ok(())
}

fn load_model(path: &PathBuf) -> Result<(ToyMoEModel, ModelMetadata), CliError> {
    let container = Container::read(path)?;
    Ok(ToyMoEModel::from_container(&container)?)
}

/// Dense views of every expert slot, decoding packed storage.
fn dense_expert_tensors(model: &ToyMoEModel) -> Vec<pzmoe_core::ExpertTensor> {
    let mut out = Vec::new();
    for layer in &model.layers {
        for slots in &layer.experts {
            for slot in Slot::ALL {
                out.push(slots.slot(slot).to_dense());
            }
        }
    }
    out
}

fn cmd_gen_toy(args: GenToyArgs) -> Result<(), CliError> {
    positive("--layers", args.layers)?;
    positive("--experts", args.experts)?;
    positive("--top-k", args.top_k)?;
    positive("--d-model", args.d_model)?;
    positive("--d-ff", args.d_ff)?;
    if args.top_k > args.experts {
        return Err(CliError::usage("--top-k", "must not exceed --experts"));
    }
    if args.noise.is_nan() || args.noise < 0.0 {
        return Err(CliError::usage("--noise", "must be >= 0"));
    }
    let config = ToyMoEConfig {
        n_layers: args.layers,
        n_experts: args.experts,
        top_k: args.top_k,
        d_model: args.d_model,
        d_ff: args.d_ff,
        seed: args.seed,
    };
    let model = generate_toy(&config, args.dup_pairs, args.noise)?;
    let container = model.to_container(&ModelMetadata::plain(config))?;
    container.write(&args.out)?;

    let mut in_range = 0u64;
    let mut total = 0u64;
    for t in dense_expert_tensors(&model) {
        let h = exponent_histogram(&t);
        in_range += h.counts[112..=143].iter().sum::<u64>();
        total += h.counts.iter().sum::<u64>();
    }
    eprintln!("wrote toy model to {}", args.out.display());
    println!(
        "{}",
        json!({
            "router_params": model.router_params(),
            "expert_params": model.expert_params(),
            "expert_bytes": model.expert_payload_bytes(),
            "exponent_fraction_in_range": in_range as f64 / total.max(1) as f64,
            "seed": args.seed,
            "dup_pairs": args.dup_pairs,
            "noise": args.noise,
            "out": args.out,
        })
    );
    Ok(())
}

fn cmd_compress(args: CompressArgs) -> Result<(), CliError> {
    positive("--calib-tokens", args.calib_tokens)?;
    positive("--search-budget", args.search_budget)?;
    if !(0.0..=1.0).contains(&args.tau) {
        return Err(CliError::usage("--tau", "must be in [0, 1]"));
    }
    let (model, _) = load_model(&args.model_in)?;
    let opts = CompressOptions {
        ratio: args.ratio,
        tau: args.tau,
        seed: args.seed,
        grouping: match args.grouping {
            GroupingArg::Random => GroupingStrategy::Random,
            GroupingArg::Search => GroupingStrategy::Search,
        },
        search_budget: args.search_budget,
        calib_tokens: args.calib_tokens,
        calib_seed: args.calib_seed,
    };
    let out = compress(&model, &opts)?;
    let meta = ModelMetadata {
        config: model.config,
        pairing_plan: Some(out.plan.clone()),
        tau_sim: Some(args.tau),
        seed: Some(args.seed),
        calib_seed: Some(args.calib_seed),
        calib_tokens: Some(args.calib_tokens),
        grouping: Some(opts.grouping),
    };
    out.model.to_container(&meta)?.write(&args.model_out)?;
    eprintln!(
        "compressed {} -> {} in {:.1} ms",
        args.model_in.display(),
        args.model_out.display(),
        out.report.wall_time_ms
    );
    println!("{}", serde_json::to_string(&out.report).unwrap());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    positive("--tokens", args.tokens)?;
    let (original, _) = load_model(&args.original)?;
    let (compressed, _) = load_model(&args.compressed)?;
    let inputs = gaussian_inputs(args.tokens, original.config.d_model, args.seed);
    let report = eval_deviation(&original, &compressed, &inputs)?;
    println!(
        "{}",
        json!({
            "mean_rel_l2": report.mean_rel_l2,
            "max_rel_l2": report.max_rel_l2,
            "tokens": args.tokens,
            "seed": args.seed,
        })
    );
    Ok(())
}

fn cmd_inspect(cmd: InspectCommand) -> Result<(), CliError> {
    match cmd {
        InspectCommand::Exponents { file } => {
            let (model, _) = load_model(&file)?;
            let mut counts = [0u64; 256];
            for t in dense_expert_tensors(&model) {
                for (i, c) in exponent_histogram(&t).counts.iter().enumerate() {
                    counts[i] += c;
                }
            }
            let total: u64 = counts.iter().sum();
            let in_range: u64 = counts[112..=143].iter().sum();
            let histogram: serde_json::Map<String, serde_json::Value> = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(i, &c)| (i.to_string(), json!(c)))
                .collect();
            println!(
                "{}",
                json!({
                    "fraction_in_range": in_range as f64 / total.max(1) as f64,
                    "total_weights": total,
                    "histogram": histogram,
                })
            );
        }
        InspectCommand::Correlation { file } => {
            let (model, _) = load_model(&file)?;
            let mut pairs = Vec::new();
            let mut sum = 0.0f64;
            for (li, layer) in model.layers.iter().enumerate() {
                let dense: Vec<[pzmoe_core::ExpertTensor; 3]> = layer
                    .experts
                    .iter()
                    .map(|e| {
                        [
                            e.slot(Slot::W1).to_dense(),
                            e.slot(Slot::W3).to_dense(),
                            e.slot(Slot::W2).to_dense(),
                        ]
                    })
                    .collect();
                for a in 0..dense.len() {
                    for b in a + 1..dense.len() {
                        let mut r = 0.0f64;
                        for (ta, tb) in dense[a].iter().zip(&dense[b]) {
                            r += pearson_pairwise(ta, tb)? / 3.0;
                        }
                        sum += r;
                        pairs.push(json!({
                            "layer": li,
                            "expert_a": a,
                            "expert_b": b,
                            "r": r,
                        }));
                    }
                }
            }
            println!(
                "{}",
                json!({
                    "average_correlation": sum / pairs.len().max(1) as f64,
                    "pairs": pairs,
                })
            );
        }
        InspectCommand::Theory {
            sigma_ratio,
            tau,
            mc_samples,
            seed,
        } => {
            if mc_samples == 0 {
                return Err(CliError::usage("--mc-samples", "must be >= 1"));
            }
            let closed = similarity_fraction_closed(sigma_ratio, tau)
                .map_err(|e| CliError::usage("--sigma-ratio/--tau", e))?;
            let mc = similarity_fraction_mc(1.0, sigma_ratio, tau, mc_samples, seed);
            println!(
                "{}",
                json!({
                    "sigma_ratio": sigma_ratio,
                    "tau": tau,
                    "closed": closed,
                    "mc": mc,
                    "abs_diff": (closed - mc).abs(),
                    "mc_samples": mc_samples,
                    "seed": seed,
                })
            );
        }
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    positive("--rows", args.rows)?;
    positive("--cols", args.cols)?;
    positive("--iters", args.iters)?;
    let report = bench_gemv(args.rows, args.cols, args.iters, args.seed);
    if report.low_confidence {
        eprintln!("note: single-iteration timing, low confidence");
    }
    println!("{}", serde_json::to_string(&report).unwrap());
    Ok(())
}
