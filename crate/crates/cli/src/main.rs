use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskinv_cli::commands::{self, ReportFormat, Source, DEFAULT_RATIOS, DEFAULT_TAUS};
use maskinv_cli::{CliError, Context, RunConfig};
use maskinv_core::decode::{DecodeConfig, Strategy};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "maskinv", version, about = "Embedding inversion with a conditional masked diffusion model")]
struct Cli {
    /// JSON run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the corpus and cache its embeddings into <out>/data.
    GenData,
    /// Train a denoiser on <out>/data into <out>/train.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train the unconditional baseline into <out>/train-unconditional.
        #[arg(long)]
        unconditional: bool,
    },
    /// Decode one embedding and print the result as JSON.
    Invert {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Space-separated token ids to encode and invert.
        #[arg(long, group = "source")]
        from_text: Option<String>,
        /// Row of the embedding cache.
        #[arg(long, group = "source")]
        from_cache: Option<usize>,
        /// File holding the embedding vector.
        #[arg(long, group = "source")]
        from_file: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Evaluate every configured decoder and the baselines on held-out data.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Unconditional checkpoint; defaults to <out>/train-unconditional/best
        /// when present, else the zero-conditioning switch.
        #[arg(long)]
        unconditional: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Sweep the remasking fraction of euler_remask decoding.
    AblateRemask {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train one model per fixed mask ratio plus a log-linear run.
    AblateMask {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Training steps per run (overrides train.max_steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render a saved evaluation report.
    Report {
        /// Defaults to <out>/eval/report.json.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value = "euler")]
    strategy: String,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0.5)]
    t_start: f64,
    #[arg(long, default_value = "linear")]
    k_schedule: String,
    #[arg(long)]
    decode_seed: Option<u64>,
}

impl DecodeArgs {
    fn config(&self, default_seed: u64) -> Result<DecodeConfig, CliError> {
        let c = DecodeConfig {
            strategy: self.strategy.parse::<Strategy>()?,
            steps: self.steps,
            tau: self.tau,
            temperature: self.temperature,
            t_start: self.t_start,
            k_schedule: commands::parse_k_schedule(&self.k_schedule)?,
            seed: self.decode_seed.unwrap_or(default_seed),
            ..DecodeConfig::default()
        };
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    let mut ctx = Context {
        config,
        out: cli.out,
        force: cli.force,
    };
    let best = |c: &Option<PathBuf>, ctx: &Context| c.clone().unwrap_or_else(|| ctx.train_dir(true).join("best"));
    match cli.command {
        Command::GenData => {
            commands::gen_data(&ctx)?;
        }
        Command::Train { data, unconditional } => {
            commands::cmd_train(&ctx, data.as_deref(), unconditional)?;
        }
        Command::Invert {
            checkpoint,
            data,
            from_text,
            from_cache,
            from_file,
            decode,
        } => {
            let source = match (from_text, from_cache, from_file) {
                (Some(t), _, _) => Source::Text(t),
                (_, Some(i), _) => Source::Cache(i),
                (_, _, Some(p)) => Source::File(p),
                _ => return Err(CliError::config("invert needs --from-text, --from-cache or --from-file")),
            };
            let dc = decode.config(ctx.config.eval.seed)?;
            let r = commands::cmd_invert(&ctx, &best(&checkpoint, &ctx), &source, data.as_deref(), &dc)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Eval {
            checkpoint,
            unconditional,
            data,
            samples,
        } => {
            if let Some(s) = samples {
                ctx.config.eval.samples = s;
            }
            ctx.config.validate()?;
            commands::cmd_eval(&ctx, &best(&checkpoint, &ctx), unconditional.as_deref(), data.as_deref())?;
        }
        Command::AblateRemask {
            checkpoint,
            data,
            taus,
            steps,
            samples,
        } => {
            if let Some(s) = samples {
                ctx.config.eval.samples = s;
            }
            let taus = taus.unwrap_or_else(|| DEFAULT_TAUS.to_vec());
            commands::cmd_ablate_remask(&ctx, &best(&checkpoint, &ctx), &taus, steps, data.as_deref())?;
        }
        Command::AblateMask {
            data,
            ratios,
            seeds,
            steps,
        } => {
            if let Some(s) = steps {
                ctx.config.train.max_steps = s;
                ctx.config.train.warmup_steps = ctx.config.train.warmup_steps.min(s);
            }
            ctx.config.validate()?;
            let ratios = ratios.unwrap_or_else(|| DEFAULT_RATIOS.to_vec());
            commands::cmd_ablate_mask(&ctx, &ratios, &seeds, data.as_deref())?;
        }
        Command::Report { eval, format } => {
            let path = eval.unwrap_or_else(|| ctx.out.join("eval").join("report.json"));
            let format = match format {
                Format::Table => ReportFormat::Table,
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            };
            print!("{}", commands::cmd_report(&path, format)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
