use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use egovideo::corpus::{load_world, read_manifest};
use egovideo::encoders::{post_pretrain, EncoderConfig, Encoders, PretrainConfig, TrainingPair};
use egovideo::pipeline::stages::{self, Context};
use egovideo::pipeline::{
    merge_prediction_files, render_report, run_pipeline, run_stage, PredictionKind, Profile, RunConfig, Stage,
};
use egovideo::{Error, Result};

#[derive(Parser)]
#[command(name = "egovideo", version, about = "Egocentric video-language pipeline on a synthetic world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; profile defaults fill anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Profile used when no config file is given.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Output root; overrides EGOVIDEO_OUTPUT and the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured stages, or those given with --stages.
    Run {
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
    /// Render markdown tables from every manifest under the output root.
    Report {
        /// Results directory; defaults to the output root.
        dir: Option<PathBuf>,
    },
    /// Print the effective config as TOML.
    Config,
    /// Generate the world, select pairs and build the shifted target world.
    Corpus,
    /// Contrastive post-pretraining on a pair manifest.
    Stage2 {
        /// JSON-lines pair manifest.
        #[arg(long)]
        corpus: PathBuf,
        /// World directory holding the clips; defaults to the manifest's directory.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Natural-language query grounding.
    Nlq {
        #[command(subcommand)]
        step: GroundingStep,
    },
    /// Step grounding.
    Goalstep {
        #[command(subcommand)]
        step: GroundingStep,
    },
    /// Moment queries.
    Mq {
        #[command(subcommand)]
        step: MqStep,
    },
    /// Long-term action anticipation.
    Lta {
        #[command(subcommand)]
        step: LtaStep,
    },
    /// Recognition, retrieval and domain adaptation.
    Ek {
        #[command(subcommand)]
        task: EkTask,
    },
    /// Merge prediction files, or run the NLQ ensemble stage without --inputs.
    Ensemble {
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
        /// grounding or moments
        #[arg(long, default_value = "grounding")]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Clone, Copy)]
enum GroundingStep {
    Train,
    Eval,
}

#[derive(Subcommand, Clone, Copy)]
enum MqStep {
    Train,
    Eval,
    Ensemble,
}

#[derive(Subcommand, Clone, Copy)]
enum LtaStep {
    /// Train the clip classifier and label held-out histories.
    Classify,
    /// Train the forecaster and roll out candidates.
    Predict,
    Eval,
}

#[derive(Subcommand, Clone, Copy)]
enum EkTask {
    Ar,
    Mir {
        /// Skip fine-tuning and evaluate the stage-2 towers only.
        #[arg(long)]
        zero_shot: bool,
    },
    Uda,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match (&common.config, &common.profile) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::for_profile(p.parse::<Profile>()?),
        (None, None) => RunConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn context(common: &Common) -> Result<Context> {
    let cfg = load_config(common)?;
    let root = cfg.output_root(common.output.as_deref());
    Ok(Context::new(cfg, root))
}

fn stage2(corpus: &Path, world: Option<&Path>, epochs: usize, out: &Path, cfg: &RunConfig) -> Result<()> {
    let world_dir = match world {
        Some(w) => w.to_path_buf(),
        None => corpus.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let world = load_world(&world_dir)?;
    let pairs = read_manifest(corpus)?;
    let pcfg = PretrainConfig { epochs, seed: cfg.seed, ..cfg.pretrain.clone() };
    let training = TrainingPair::from_corpus(&pairs, &world.clips, pcfg.frames_per_pair)?;
    let init = Encoders::new(EncoderConfig { seed: cfg.seed, ..cfg.encoder.clone() })?;
    let outcome = post_pretrain(&init, &training, &pcfg)?;
    outcome.checkpoint().save(out)?;
    for (i, l) in outcome.state.epoch_losses.iter().enumerate() {
        println!("epoch {}: mean loss {l:.4}", i + 1);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Run { stages } => {
            let mut ctx = context(common)?;
            if !stages.is_empty() {
                ctx.config.stages = stages.iter().map(|s| s.parse()).collect::<Result<_>>()?;
            }
            for m in run_pipeline(&ctx)? {
                info!("{}: {} artifacts, config {}", m.stage, m.artifacts.len(), &m.config_hash[..12]);
            }
        }
        Command::Report { dir } => {
            let dir = match dir {
                Some(d) => d,
                None => context(common)?.root,
            };
            let report = render_report(&dir)?;
            print!("{}", report.markdown);
        }
        Command::Config => print!("{}", load_config(common)?.to_toml_string()?),
        Command::Corpus => {
            run_stage(&context(common)?, Stage::Corpus)?;
        }
        Command::Stage2 { corpus, world, epochs, out } => {
            stage2(&corpus, world.as_deref(), epochs, &out, &load_config(common)?)?
        }
        Command::Nlq { step } => grounding(&context(common)?, Stage::Nlq, step)?,
        Command::Goalstep { step } => grounding(&context(common)?, Stage::Goalstep, step)?,
        Command::Mq { step } => {
            let ctx = context(common)?;
            match step {
                MqStep::Train => stages::mq_train(&ctx)?,
                MqStep::Eval => drop(stages::mq_eval(&ctx)?),
                MqStep::Ensemble => drop(stages::mq_ensemble(&ctx)?),
            }
        }
        Command::Lta { step } => {
            let ctx = context(common)?;
            match step {
                LtaStep::Classify => stages::lta_classify(&ctx)?,
                LtaStep::Predict => stages::lta_predict(&ctx)?,
                LtaStep::Eval => drop(stages::lta_eval(&ctx)?),
            }
        }
        Command::Ek { task } => {
            let ctx = context(common)?;
            match task {
                EkTask::Ar => drop(stages::ek_ar(&ctx)?),
                EkTask::Mir { zero_shot } => drop(stages::ek_mir(&ctx, zero_shot)?),
                EkTask::Uda => drop(stages::ek_uda(&ctx)?),
            }
        }
        Command::Ensemble { inputs, weights, kind, out } => {
            if inputs.is_empty() {
                run_stage(&context(common)?, Stage::Ensemble)?;
            } else {
                let out = out.ok_or_else(|| Error::Config("--out is required with --inputs".into()))?;
                let w = (!weights.is_empty()).then_some(weights.as_slice());
                let n = merge_prediction_files(kind.parse::<PredictionKind>()?, &inputs, w, &out)?;
                println!("wrote {n} merged records to {}", out.display());
            }
        }
    }
    Ok(())
}

fn grounding(ctx: &Context, stage: Stage, step: GroundingStep) -> Result<()> {
    match step {
        GroundingStep::Train => stages::grounding_train(ctx, stage),
        GroundingStep::Eval => stages::grounding_eval(ctx, stage).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
