use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use serlm::config::RunConfig;
use serlm::corpus::{GenerateOutcome, Split};
use serlm::curriculum::{PhaseOutcome, TrainOptions};
use serlm::decode_eval::Strategy;
use serlm::lm::Phase;
use serlm::paralinguistics::Gender;
use serlm::{pipeline, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "serlm",
    version,
    about = "Speech emotion recognition with a speech-conditioned LM"
)]
struct Cli {
    /// Run configuration (TOML). Relative paths are also looked up under $SERLM_CONFIG_DIR.
    #[arg(short, long, global = true, default_value = "serlm.toml")]
    config: PathBuf,
    /// Override a config field, e.g. `--set train.p3.max_epochs=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the default configuration as TOML.
    DefaultConfig,
    /// Synthesise the corpus and its split manifest.
    GenData,
    /// Extract paralinguistic features and tertile labels for every utterance.
    Features,
    /// Run one curriculum phase, or all three in order.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        phase: PhaseArg,
        /// Stop after this many epochs of the phase, leaving a resume checkpoint.
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Evaluate a checkpoint with one decoding strategy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Decode a single WAV file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, value_enum, default_value = "ser-only")]
        strategy: StrategyArg,
        /// Reference transcript; required by prompt-hint and joint-prefix.
        #[arg(long)]
        transcript: Option<String>,
        #[arg(long, value_enum, default_value = "unknown")]
        gender: GenderArg,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    #[value(name = "P1", alias = "p1")]
    P1,
    #[value(name = "P2", alias = "p2")]
    P2,
    #[value(name = "P3", alias = "p3")]
    P3,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    SerOnly,
    PromptHint,
    JointPrefix,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::SerOnly => Strategy::SerOnly,
            StrategyArg::PromptHint => Strategy::PromptHint,
            StrategyArg::JointPrefix => Strategy::JointPrefix,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GenderArg {
    Male,
    Female,
    Unknown,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(dir) = &cli.out_dir {
        overrides.push(format!("out_dir={}", toml::Value::String(dir.display().to_string())));
    }
    RunConfig::load_with_overrides(&cli.config, &overrides)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()),
        Command::GenData => {
            let cfg = load_config(cli)?;
            let dir = cfg.corpus_dir();
            match pipeline::gen_data(&cfg)? {
                GenerateOutcome::Written { utterances } => {
                    let m = pipeline::load_manifest(&cfg)?;
                    println!(
                        "wrote {utterances} utterances to {} (train {}, val {}, test {})",
                        dir.display(),
                        m.train.len(),
                        m.val.len(),
                        m.test.len()
                    );
                }
                GenerateOutcome::UpToDate { utterances } => {
                    println!("up-to-date: {utterances} utterances in {}", dir.display());
                }
            }
        }
        Command::Features => {
            let cfg = load_config(cli)?;
            let (path, n) = pipeline::extract_features(&cfg)?;
            println!("wrote features for {n} utterances to {}", path.display());
        }
        Command::Train { phase, halt_after } => {
            let cfg = load_config(cli)?;
            let phases = match phase {
                PhaseArg::P1 => vec![Phase::P1],
                PhaseArg::P2 => vec![Phase::P2],
                PhaseArg::P3 => vec![Phase::P3],
                PhaseArg::All => vec![Phase::P1, Phase::P2, Phase::P3],
            };
            let opts = TrainOptions {
                halt_after: *halt_after,
            };
            for outcome in pipeline::train(&cfg, &phases, &opts)? {
                match outcome {
                    PhaseOutcome::Completed { report, .. } => println!(
                        "{}: {} epochs, best epoch {} (val loss {:.4}){} -> {}",
                        report.phase,
                        report.epochs.len(),
                        report.best_epoch,
                        report.best_val_loss,
                        if report.stopped_early { ", stopped early" } else { "" },
                        serlm::curriculum::train::phase_checkpoint_path(&cfg.out_dir(), report.phase).display()
                    ),
                    PhaseOutcome::Halted { completed_epochs } => {
                        println!("halted after {completed_epochs} epochs; rerun to resume");
                    }
                }
            }
        }
        Command::Eval {
            checkpoint,
            strategy,
            split,
        } => {
            let cfg = load_config(cli)?;
            let strategy = Strategy::from(*strategy);
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let report = pipeline::evaluate_checkpoint(&cfg, checkpoint, split, strategy)?;
            let path = pipeline::eval_report_path(&cfg, strategy);
            report.write(&path)?;
            let s = &report.summary;
            let wer = s.wer.map_or_else(|| "n/a".to_string(), |w| format!("{w:.4}"));
            println!(
                "{strategy} on {split} (n={}): accuracy {:.4}, WER {wer}, malformed {:.4}; report {}",
                s.n,
                s.accuracy,
                s.malformed_rate,
                path.display()
            );
        }
        Command::Infer {
            checkpoint,
            audio,
            strategy,
            transcript,
            gender,
        } => {
            let gender = match gender {
                GenderArg::Male => Gender::Male,
                GenderArg::Female => Gender::Female,
                GenderArg::Unknown => Gender::Unknown,
            };
            let seed = cli.seed.unwrap_or(0);
            let out = pipeline::infer_file(
                checkpoint,
                audio,
                (*strategy).into(),
                transcript.as_deref(),
                gender,
                seed,
            )?;
            let p = &out.parsed;
            println!(
                "{}\tasr={}\temotion={}\tmalformed={}{}",
                out.text.trim(),
                serde_json::to_string(&p.asr).expect("strings serialise"),
                p.emotion.map_or_else(|| "none".to_string(), |e| e.to_string()),
                p.malformed,
                if p.reasons.is_empty() {
                    String::new()
                } else {
                    format!("\treasons={}", p.reasons.join(","))
                }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
