use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fcn_instruct::config::RunConfig;
use fcn_instruct::instruct::Stage;
use fcn_instruct::steps;
use fcn_instruct::Error;

/// Exit status for configuration problems.
const EXIT_CONFIG: u8 = 3;
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "fcn-instruct",
    version,
    about = "Synthetic FCN cohorts, instruction data and a two-stage toy model"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true, env = "FCN_INSTRUCT_THREADS")]
    threads: Option<usize>,
    /// Fixed-order reductions for bit-reproducible training.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Run directory holding every artifact.
    #[arg(
        long,
        global = true,
        env = "FCN_INSTRUCT_OUT",
        default_value = "fcn-run"
    )]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Stage1,
    Stage2,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Stage1 => Stage::One,
            StageArg::Stage2 => Stage::Two,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic cohort and its atlas.
    Cohort,
    /// Build original and sliding-window FCNs.
    Fcn,
    /// Build Stage One, Stage Two and pretraining instruction files.
    Synth,
    /// Text-only pretraining of the toy language model.
    PretrainLm,
    /// Train the encoder (stage1) or the whole model (stage2).
    Train {
        #[arg(value_enum)]
        stage: StageArg,
    },
    /// Score held-out pairs; exits 2 when a task is mostly unparseable.
    Eval {
        #[arg(long, value_enum)]
        checkpoint: Option<StageArg>,
    },
    /// Saliency and interaction maps as CSV.
    Biomarker {
        #[arg(long, value_enum)]
        checkpoint: Option<StageArg>,
    },
    /// Finite-difference check of every trainable tensor.
    Gradcheck,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<u8, Error> {
    let root = &cli.out;
    match &cli.command {
        Command::Cohort => {
            let n = steps::run_cohort(cfg, root)?;
            println!("cohort: {n} subjects");
        }
        Command::Fcn => {
            let n = steps::run_fcn(cfg, root)?;
            println!("fcn: {n} matrices");
        }
        Command::Synth => {
            let s = steps::run_synth(cfg, root)?;
            println!(
                "synth: stage1 {} / stage2 {} / pretrain {} pairs",
                s.stage1, s.stage2, s.pretrain
            );
            for f in &s.shortfalls {
                eprintln!("shortfall: {f}");
            }
        }
        Command::PretrainLm => report_log("pretrain-lm", &steps::run_pretrain(cfg, root)?),
        Command::Train { stage } => {
            let log = steps::run_train(cfg, root, (*stage).into())?;
            report_log(steps::stage_dir((*stage).into()), &log);
        }
        Command::Eval { checkpoint } => {
            let (code, table) = steps::run_eval(cfg, root, checkpoint.map(Into::into))?;
            print!("{table}");
            return Ok(code as u8);
        }
        Command::Biomarker { checkpoint } => {
            let spans = steps::run_biomarker(cfg, root, checkpoint.map(Into::into))?;
            println!("biomarker: {spans} spans");
        }
        Command::Gradcheck => {
            let report = steps::run_gradcheck_step(root, cfg.seed)?;
            for t in &report.tensors {
                println!(
                    "{:<28} {:>6}/{:<6} {:.3e}",
                    t.name, t.checked, t.entries, t.rel_error
                );
            }
            let worst = report.max_rel_error();
            println!("max relative error {worst:.3e}");
            if !report.passes(GRADCHECK_TOLERANCE) {
                return Ok(1);
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(0)
}

fn report_log(name: &str, log: &[fcn_instruct::training::LogRecord]) {
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "{name}: {} steps, loss {:.4} -> {:.4}",
            log.len(),
            first.loss,
            last.loss
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(Error::Config(msg)) => {
            eprintln!("invalid configuration:");
            for line in msg.lines() {
                eprintln!("  {line}");
            }
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match run(&cli, &cfg) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
