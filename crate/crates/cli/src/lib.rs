//! Operator commands: dataset build, training, evaluation, prediction and
//! parameter audit.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use cli::{Cli, Command};
use commands::count::{count, format_rows, reference_table, CountArgs};
use config::{read_toml, RunConfig};
use error::{CliError, Result};

pub use error::CliError as Error;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildDataset { config, seed, output } => {
            commands::build::run(&commands::build::BuildArgs {
                config: &config,
                seed,
                output: output.as_deref(),
            })?;
        }
        Command::Train { run, dry_run } => {
            if run.config.is_none() {
                return Err(CliError::Usage("train needs --config".into()));
            }
            let cfg = RunConfig::load(run.config.as_deref(), &run.overrides())?;
            commands::train::run(&cfg, dry_run)?;
        }
        Command::Eval {
            run,
            checkpoint,
            zero_shot,
            subset,
        } => {
            let cfg = RunConfig::load(run.config.as_deref(), &run.overrides())?;
            commands::eval::run(
                &cfg,
                &commands::eval::EvalArgs {
                    checkpoint,
                    zero_shot,
                    subset,
                },
            )?;
        }
        Command::Predict {
            run,
            checkpoint,
            input,
            rgb_bands,
        } => {
            let cfg = RunConfig::load(run.config.as_deref(), &run.overrides())?;
            let rgb_bands = <[usize; 3]>::try_from(rgb_bands)
                .map_err(|_| CliError::Usage("--rgb-bands takes three band indices".into()))?;
            commands::predict::run(
                &cfg,
                &commands::predict::PredictArgs {
                    checkpoint,
                    input,
                    rgb_bands,
                },
            )?;
        }
        Command::CountParams {
            config,
            preset,
            decoder,
            rank,
            no_encoder_lora,
            table,
            json,
        } => {
            let cfg: RunConfig = match &config {
                Some(p) => read_toml(p)?,
                None => RunConfig::default(),
            };
            let preset = preset.unwrap_or(cfg.model.preset);
            let rows = if table {
                reference_table(preset)?
            } else {
                vec![count(&CountArgs {
                    preset,
                    decoder: decoder.unwrap_or(cfg.train.finetune_mode.decoder),
                    rank: rank.unwrap_or(cfg.train.lora_rank),
                    encoder_lora: !no_encoder_lora,
                    include_final_decoder_attn: cfg.train.include_final_decoder_attn,
                })?]
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", format_rows(&rows));
            }
            if rows.iter().any(|r| r.total == 0) {
                return Err(CliError::Config("configuration trains no parameters".into()));
            }
        }
    }
    Ok(())
}
