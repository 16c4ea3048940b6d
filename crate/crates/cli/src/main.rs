//! Command-line entry point: `train`, `eval`, `bench`, and `init`
//! subcommands binding ingestion, training, evaluation, and benchmarking
//! into reproducible runs.
//!
//! Exit codes: 0 success, 2 usage/validation error, 1 runtime failure.
//! Every failure prints exactly one `error: ...` line to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparsevi::config::{parse_sparsity, AlgKind, DataFormat, ModelKind, TrainConfig};
use sparsevi::data::{
    extract_patches, load_dense, load_uci_bow, Corpus, DenseDataset, DenseFormat,
};
use sparsevi::error::Error as CoreError;
use sparsevi::eval::{
    bench_gmm, bench_lda, bench_table, doc_completion_score, mixture_heldout, CompletionConfig,
    GmmBenchSpec, LdaBenchSpec,
};
use sparsevi::expfam::{GaussianFamily, WishartPrior};
use sparsevi::init::{init_gmm, init_lda, seed_gmm, seed_lda};
use sparsevi::lda::{LdaModel, LocalStepConfig, LogProbTable, SelectionSchedule};
use sparsevi::linalg::SquareMat;
use sparsevi::mixture::{MixtureModel, Reduction, Sparsity};
use sparsevi::snapshot::{read_snapshot, write_snapshot, Snapshot};
use sparsevi::train::{
    run, Algorithm, LdaPipeline, LearningRateSchedule, MixturePipeline, TrainOpts,
};

#[derive(Parser)]
#[command(
    name = "sparsevi",
    version,
    about = "Sparse variational inference for mixtures and topic models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics, a snapshot, and the resolved config.
    Train(Box<TrainArgs>),
    /// Score a heldout dataset against a snapshot.
    Eval(EvalArgs),
    /// Time algorithm substeps over a (K, L) grid.
    Bench(BenchArgs),
    /// Seed a model from the data and write the initial snapshot.
    Init(InitArgs),
}

#[derive(Args, Default)]
struct TrainArgs {
    /// Load a "key = value" config file first; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// Sparsity level: "dense" or an integer.
    #[arg(long)]
    l: Option<String>,
    #[arg(long)]
    alg: Option<String>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    laps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda_bar: Option<f64>,
    #[arg(long)]
    nu_bar: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    max_local_iters: Option<usize>,
    #[arg(long)]
    conv_threshold: Option<f64>,
    #[arg(long)]
    eps_active: Option<f64>,
    #[arg(long)]
    restarts: Option<bool>,
    #[arg(long)]
    warm_start: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: Option<bool>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    data_format: Option<String>,
    #[arg(long)]
    heldout: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    heldout: PathBuf,
    /// csv | raw64 | pgm | bow; must match the snapshot's family.
    #[arg(long)]
    heldout_format: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: String,
    /// Comma-separated cluster counts.
    #[arg(long, default_value = "50")]
    grid_k: String,
    /// Comma-separated sparsity levels ("dense" allowed).
    #[arg(long, default_value = "4,dense")]
    grid_l: String,
    #[arg(long, default_value_t = 10_000)]
    n_obs: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    n_docs: usize,
    #[arg(long, default_value_t = 1000)]
    vocab: usize,
    #[arg(long, default_value_t = 200)]
    tokens_per_doc: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    data: String,
    #[arg(long)]
    data_format: Option<String>,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_bar: f64,
    #[arg(long)]
    nu_bar: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            msg: msg.into(),
        }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            msg: msg.into(),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Config(_) | CoreError::InvalidArgument(_) | CoreError::SnapshotFormat(_) => {
                2
            }
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            // Help and version requests are not failures.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let flat = e.to_string().replace('\n', "; ");
            eprintln!("error: {flat}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(*args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Init(args) => cmd_init(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg.replace('\n', "; "));
            ExitCode::from(f.code)
        }
    }
}

fn resolve_config(args: TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::usage(format!("cannot read --config {}: {e}", path.display()))
            })?;
            TrainConfig::from_key_values(&text)?
        }
        None => {
            let model = args
                .model
                .as_deref()
                .ok_or_else(|| Failure::usage("--model is required (gmm or lda)"))?;
            let kind = match model {
                "gmm" => ModelKind::Gmm,
                "lda" => ModelKind::Lda,
                other => return Err(Failure::usage(format!("unknown --model '{other}'"))),
            };
            TrainConfig::defaults_for(kind)
        }
    };
    let mut apply = |key: &str, value: Option<String>| -> Result<(), Failure> {
        if let Some(v) = value {
            cfg.apply(key, &v)?;
        }
        Ok(())
    };
    apply("model", args.model)?;
    apply("k", args.k.map(|v| v.to_string()))?;
    apply("l", args.l)?;
    apply("alg", args.alg)?;
    apply("batches", args.batches.map(|v| v.to_string()))?;
    apply("laps", args.laps.map(|v| v.to_string()))?;
    apply("alpha", args.alpha.map(|v| v.to_string()))?;
    apply("lambda_bar", args.lambda_bar.map(|v| v.to_string()))?;
    apply("nu_bar", args.nu_bar.map(|v| v.to_string()))?;
    apply("delta", args.delta.map(|v| v.to_string()))?;
    apply("kappa", args.kappa.map(|v| v.to_string()))?;
    apply(
        "max_local_iters",
        args.max_local_iters.map(|v| v.to_string()),
    )?;
    apply("conv_threshold", args.conv_threshold.map(|v| v.to_string()))?;
    apply("eps_active", args.eps_active.map(|v| v.to_string()))?;
    apply("restarts", args.restarts.map(|v| v.to_string()))?;
    apply("warm_start", args.warm_start.map(|v| v.to_string()))?;
    apply("seed", args.seed.map(|v| v.to_string()))?;
    apply("deterministic", args.deterministic.map(|v| v.to_string()))?;
    apply("threads", args.threads.map(|v| v.to_string()))?;
    apply("data", args.data)?;
    apply("data_format", args.data_format)?;
    apply("heldout", args.heldout)?;
    apply("output_dir", args.output_dir)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dense_any(path: &str, format: DataFormat) -> Result<DenseDataset, Failure> {
    let p = Path::new(path);
    let data = match format {
        DataFormat::Csv => load_dense(p, DenseFormat::Csv)?,
        DataFormat::Raw64 => load_dense(p, DenseFormat::Raw64)?,
        DataFormat::Pgm => extract_patches(p, 8, 4, true)?,
        DataFormat::Bow => {
            return Err(Failure::usage("bow data is for lda models"));
        }
    };
    Ok(data)
}

fn build_prior(data: &DenseDataset, nu_bar: Option<f64>) -> Result<WishartPrior, Failure> {
    match nu_bar {
        None => Ok(WishartPrior::default_for_data(data)?),
        Some(nu) => {
            let d = data.dim;
            let mut second = data.second_moment(2000);
            for i in 0..d {
                second[i * d + i] += 1e-8;
            }
            let mut inv = SquareMat::from_rows(d, second);
            inv.scale(nu);
            Ok(WishartPrior::from_inverse_scale(nu, inv)?)
        }
    }
}

fn algorithm_of(cfg: &TrainConfig) -> Result<Algorithm, Failure> {
    Ok(match cfg.alg {
        AlgKind::Svi => Algorithm::Svi(LearningRateSchedule::new(cfg.delta, cfg.kappa)?),
        AlgKind::Mvi => Algorithm::Mvi,
        AlgKind::Full => Algorithm::Full,
    })
}

fn configure_threads(threads: usize) {
    if threads > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = resolve_config(args)?;
    configure_threads(cfg.threads);
    let out_dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out_dir).map_err(|e| {
        Failure::runtime(format!(
            "cannot create --output-dir {}: {e}",
            out_dir.display()
        ))
    })?;
    let reduction = if cfg.deterministic {
        Reduction::Ordered
    } else {
        Reduction::Fast
    };
    let opts = TrainOpts {
        algorithm: algorithm_of(&cfg)?,
        n_batches: cfg.batches,
        laps: cfg.laps,
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        warm_start: cfg.warm_start,
    };
    let config_text = cfg.to_key_values();

    let (trace_text, snapshot) = match cfg.model {
        ModelKind::Gmm => {
            let data = load_dense_any(&cfg.data, cfg.data_format)?;
            let heldout = cfg
                .heldout
                .as_ref()
                .map(|p| load_dense_any(p, cfg.data_format))
                .transpose()?;
            let prior = build_prior(&data, cfg.nu_bar)?;
            let model = MixtureModel::new(cfg.k, cfg.alpha, GaussianFamily { prior });
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let seeds = seed_gmm(&data, cfg.k, &mut rng)?;
            let g0 = init_gmm(&model, &data, &seeds)?;
            let pipeline = MixturePipeline {
                model: &model,
                data: &data,
                sparsity: cfg.l,
                reduction,
            };
            let hook =
                |g: &sparsevi::mixture::MixGlobalState<sparsevi::expfam::WishartPosterior>| {
                    heldout
                        .as_ref()
                        .and_then(|xs| mixture_heldout(xs, g).ok().map(|r| r.score))
                };
            let (g, trace) = run(&pipeline, &opts, g0, hook)?;
            let snap = Snapshot::Gmm {
                alpha: cfg.alpha,
                prior: model.family.prior.clone(),
                state: g,
                config_text: config_text.clone(),
            };
            (trace.to_jsonl(), snap)
        }
        ModelKind::Lda => {
            let corpus = load_uci_bow(Path::new(&cfg.data))?;
            warn_skipped(&corpus, &cfg.data);
            let heldout = cfg
                .heldout
                .as_ref()
                .map(|p| load_uci_bow(Path::new(p)))
                .transpose()?;
            let model = LdaModel {
                k: cfg.k,
                vocab_size: corpus.vocab_size,
                alpha: cfg.alpha,
                lambda_bar: cfg.lambda_bar,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let seeds = seed_lda(&corpus, cfg.k, cfg.lambda_bar, &mut rng)?;
            let g0 = init_lda(&model, &corpus, &seeds)?;
            let local_cfg = LocalStepConfig {
                sparsity: cfg.l,
                max_iters: cfg.max_local_iters,
                conv_threshold: cfg.conv_threshold,
                eps_active: cfg.eps_active,
                schedule: SelectionSchedule::default(),
                restarts_enabled: cfg.restarts,
                max_restart_proposals: 5,
                restart_forward_iters: 2,
                warm_start: cfg.warm_start,
            };
            let pipeline = LdaPipeline {
                model: &model,
                corpus: &corpus,
                cfg: local_cfg,
                reduction,
            };
            let completion = CompletionConfig {
                seed: cfg.seed,
                max_iters: cfg.max_local_iters,
                conv_threshold: cfg.conv_threshold,
                ..Default::default()
            };
            let alpha = cfg.alpha;
            let hook = |g: &sparsevi::lda::LdaGlobalState| {
                heldout.as_ref().and_then(|h| {
                    let log_phi = LogProbTable::from_topic_rows(&g.topic_means());
                    doc_completion_score(h, &log_phi, alpha, &completion)
                        .ok()
                        .map(|r| r.score)
                })
            };
            let (g, trace) = run(&pipeline, &opts, g0, hook)?;
            let snap = Snapshot::Lda {
                model: model.clone(),
                state: g,
                config_text: config_text.clone(),
            };
            (trace.to_jsonl(), snap)
        }
    };

    fs::write(out_dir.join("metrics.jsonl"), &trace_text)
        .map_err(|e| Failure::runtime(format!("writing metrics: {e}")))?;
    write_snapshot(&out_dir.join("model.snap"), &snapshot)?;
    fs::write(out_dir.join("config.resolved"), &config_text)
        .map_err(|e| Failure::runtime(format!("writing config: {e}")))?;
    if let Some(last) = trace_text.lines().last() {
        println!("{last}");
    }
    Ok(())
}

fn warn_skipped(corpus: &Corpus, path: &str) {
    if corpus.n_skipped_empty > 0 {
        eprintln!(
            "warning: {} empty documents skipped in {path}",
            corpus.n_skipped_empty
        );
    }
}

fn parse_format(s: Option<&str>, default: DataFormat) -> Result<DataFormat, Failure> {
    match s {
        None => Ok(default),
        Some("csv") => Ok(DataFormat::Csv),
        Some("raw64") => Ok(DataFormat::Raw64),
        Some("pgm") => Ok(DataFormat::Pgm),
        Some("bow") => Ok(DataFormat::Bow),
        Some(other) => Err(Failure::usage(format!("unknown data format '{other}'"))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let snap = read_snapshot(&args.snapshot)?;
    let report = match &snap {
        Snapshot::Gmm { state, .. } => {
            let format = parse_format(args.heldout_format.as_deref(), DataFormat::Csv)?;
            if format == DataFormat::Bow {
                return Err(Failure::usage(
                    "snapshot holds a gmm but --heldout-format is bow",
                ));
            }
            let heldout = load_dense_any(
                args.heldout
                    .to_str()
                    .ok_or_else(|| Failure::usage("non-UTF-8 heldout path"))?,
                format,
            )?;
            mixture_heldout(&heldout, state)?
        }
        Snapshot::Lda { model, state, .. } => {
            let format = parse_format(args.heldout_format.as_deref(), DataFormat::Bow)?;
            if format != DataFormat::Bow {
                return Err(Failure::usage(format!(
                    "snapshot holds an lda model but --heldout-format is {format}"
                )));
            }
            let heldout = load_uci_bow(&args.heldout)?;
            let log_phi = LogProbTable::from_topic_rows(&state.topic_means());
            let completion = CompletionConfig {
                seed: args.seed,
                ..Default::default()
            };
            doc_completion_score(&heldout, &log_phi, model.alpha, &completion)?
        }
    };
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(())
}

fn parse_grid_k(s: &str) -> Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Failure::usage(format!("bad K value '{t}' in --grid-k")))
        })
        .collect()
}

fn parse_grid_l(s: &str) -> Result<Vec<Sparsity>, Failure> {
    s.split(',')
        .map(|t| parse_sparsity(t.trim()).map_err(Failure::from))
        .collect()
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let grid_k = parse_grid_k(&args.grid_k)?;
    let grid_l = parse_grid_l(&args.grid_l)?;
    let rows = match args.model.as_str() {
        "gmm" => bench_gmm(&GmmBenchSpec {
            n_obs: args.n_obs,
            dim: args.dim,
            grid_k,
            grid_l,
            reps: args.reps,
            seed: args.seed,
        })?,
        "lda" => bench_lda(&LdaBenchSpec {
            n_docs: args.n_docs,
            vocab_size: args.vocab,
            tokens_per_doc: args.tokens_per_doc,
            grid_k,
            grid_l,
            reps: args.reps,
            seed: args.seed,
        })?,
        other => return Err(Failure::usage(format!("unknown --model '{other}'"))),
    };
    print!("{}", bench_table(&rows));
    Ok(())
}

fn cmd_init(args: InitArgs) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    match args.model.as_str() {
        "gmm" => {
            let format = parse_format(args.data_format.as_deref(), DataFormat::Csv)?;
            let data = load_dense_any(&args.data, format)?;
            if args.k > data.n_obs {
                return Err(Failure::usage(format!(
                    "--k {} exceeds {} observations",
                    args.k, data.n_obs
                )));
            }
            let prior = build_prior(&data, args.nu_bar)?;
            let model = MixtureModel::new(args.k, args.alpha, GaussianFamily { prior });
            let seeds = seed_gmm(&data, args.k, &mut rng)?;
            let state = init_gmm(&model, &data, &seeds)?;
            let mut cfg = TrainConfig::defaults_for(ModelKind::Gmm);
            cfg.k = args.k;
            cfg.alpha = args.alpha;
            cfg.nu_bar = args.nu_bar;
            cfg.seed = args.seed;
            cfg.data = args.data.clone();
            cfg.data_format = format;
            let snap = Snapshot::Gmm {
                alpha: args.alpha,
                prior: model.family.prior.clone(),
                state,
                config_text: cfg.to_key_values(),
            };
            write_snapshot(&args.output, &snap)?;
        }
        "lda" => {
            let corpus = load_uci_bow(Path::new(&args.data))?;
            warn_skipped(&corpus, &args.data);
            if args.k > corpus.docs.len() {
                return Err(Failure::usage(format!(
                    "--k {} exceeds {} documents",
                    args.k,
                    corpus.docs.len()
                )));
            }
            let model = LdaModel {
                k: args.k,
                vocab_size: corpus.vocab_size,
                alpha: args.alpha,
                lambda_bar: args.lambda_bar,
            };
            let seeds = seed_lda(&corpus, args.k, args.lambda_bar, &mut rng)?;
            let state = init_lda(&model, &corpus, &seeds)?;
            let mut cfg = TrainConfig::defaults_for(ModelKind::Lda);
            cfg.k = args.k;
            cfg.alpha = args.alpha;
            cfg.lambda_bar = args.lambda_bar;
            cfg.seed = args.seed;
            cfg.data = args.data.clone();
            let snap = Snapshot::Lda {
                model,
                state,
                config_text: cfg.to_key_values(),
            };
            write_snapshot(&args.output, &snap)?;
        }
        other => return Err(Failure::usage(format!("unknown --model '{other}'"))),
    }
    println!("wrote {}", args.output.display());
    Ok(())
}
