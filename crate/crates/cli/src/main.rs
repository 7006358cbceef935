use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selfkd_cli::{CliError, ExperimentConfig, ModalityArg, Run};
use selfkd_core::synth::DatasetKind;
use selfkd_core::train::Stage;

#[derive(Parser)]
#[command(name = "selfkd", version, about = "Self-knowledge distillation experiments on a tiny omnimodal model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON). The run directory is its `output_dir`,
    /// or the value of the SELFKD_OUTPUT_ROOT environment variable.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config with every default spelled out.
    InitConfig {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seconds-scale smoke configuration instead of the desk experiment.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate every dataset and the manifest.
    GenData(ConfigArg),
    /// Train one stage, or all of them in order.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        stage: Option<String>,
        #[arg(long)]
        all: bool,
        /// KD ratio for vision_audio_sft (0 = conventional SFT).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Score a checkpoint under text and/or audio queries.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint path, or a tag such as `audio_text_align`.
        #[arg(long)]
        checkpoint: String,
        #[arg(long, value_parser = parse_dataset, default_value = "vqa_eval")]
        dataset: DatasetKind,
        #[arg(long, value_enum, default_value_t = ModalityArg::Both)]
        modality: ModalityArg,
        /// Output name under eval/ (defaults to the checkpoint stem).
        #[arg(long)]
        tag: Option<String>,
    },
    /// Layer-wise attention mass profile of a checkpoint.
    ProbeAttention {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: String,
        #[arg(long, value_parser = parse_dataset, default_value = "vqa_eval")]
        dataset: DatasetKind,
        #[arg(long, value_enum, default_value_t = ModalityArg::Both)]
        modality: ModalityArg,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        tag: Option<String>,
    },
    /// Train vision_audio_sft once per KD ratio and tabulate audio accuracy.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
    },
    /// Validate the run directory and assemble the report.
    Report(ConfigArg),
    /// Everything: gen-data, all stages, the KD-ratio sweep, evaluation and report.
    Run(ConfigArg),
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    DatasetKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown dataset {s:?}; expected one of {}", names(DatasetKind::ALL.iter().map(|k| k.name()))))
}

fn names<'a>(it: impl Iterator<Item = &'a str>) -> String {
    it.collect::<Vec<_>>().join(", ")
}

fn default_tag(checkpoint: &str) -> String {
    let p = std::path::Path::new(checkpoint);
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| checkpoint.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::InitConfig { seed, tiny, out } => {
            let cfg = if tiny { ExperimentConfig::tiny(seed) } else { ExperimentConfig::desk(seed) };
            std::fs::write(&out, cfg.to_json()).map_err(|e| CliError::io(&out, e))?;
            println!("wrote {}", out.display());
        }
        Command::GenData(c) => {
            let run = Run::from_config_file(&c.config)?;
            let sum = run.gen_data()?;
            println!("manifest checksum {sum}");
        }
        Command::Train { config, stage, all, alpha } => {
            let run = Run::from_config_file(&config.config)?;
            if all {
                run.train_all(alpha)?;
                println!("trained {} stages under {}", run.config.stages.len(), run.dir.root().display());
            } else {
                let name = stage.expect("clap requires --stage without --all");
                let stage = Stage::from_name(&name).ok_or_else(|| {
                    CliError::Config(format!("unknown stage {name:?}; expected one of {}", names(Stage::ALL.iter().map(|s| s.name()))))
                })?;
                let log = run.train_stage(stage, alpha)?;
                if let Some(e) = log.epochs.last() {
                    println!("{stage}: {} steps, final epoch mean loss {:.6}", log.steps.len(), e.mean_l_total);
                }
            }
        }
        Command::Eval { config, checkpoint, dataset, modality, tag } => {
            let run = Run::from_config_file(&config.config)?;
            let tag = tag.unwrap_or_else(|| default_tag(&checkpoint));
            let r = run.eval(&checkpoint, dataset, modality, &tag)?;
            for (m, avg) in &r.average {
                println!("{m}: average {avg:.2}");
            }
            if let Some(g) = &r.gap {
                println!("gap: {:.2}", g.gap_average);
            }
        }
        Command::ProbeAttention { config, checkpoint, dataset, modality, n, tag } => {
            let run = Run::from_config_file(&config.config)?;
            let tag = tag.unwrap_or_else(|| default_tag(&checkpoint));
            let profiles = run.probe_attention(&checkpoint, dataset, modality, n, &tag)?;
            println!("wrote {} profile(s) to profiles/{tag}.csv", profiles.len());
        }
        Command::Ablate { config, alphas } => {
            let run = Run::from_config_file(&config.config)?;
            for row in run.ablate(&alphas)? {
                println!("alpha {}: audio average {:.2}", row.alpha, row.average);
            }
        }
        Command::Report(c) => {
            let run = Run::from_config_file(&c.config)?;
            let r = run.report()?;
            println!("report validated: {} artifacts", r.checksums.len());
        }
        Command::Run(c) => {
            let run = Run::from_config_file(&c.config)?;
            let r = run.run_experiment()?;
            println!(
                "audio average: SFT {:.2}, Self-KD {:.2}; report in {}",
                r.sft.average["audio"],
                r.selfkd.average["audio"],
                run.dir.path("report").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
