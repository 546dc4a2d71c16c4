//! Command-line interface. Each command reads a config file (optional),
//! applies `--set key=value` and shorthand flag overrides, runs one stage and
//! prints its manifest as JSON.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{load_config, parse_override, Override};
use crate::error::RunError;
use crate::pipeline;
use crate::workspace::{RunManifest, Workspace};

#[derive(Debug, Parser)]
#[command(name = "latent-scrub", version, about = "Latent-space feature unlearning toolkit")]
pub struct Cli {
    /// Workspace root [env: LATENT_SCRUB_WORKSPACE, default ./workspace].
    #[arg(long, global = true)]
    pub workspace: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct ConfigArgs {
    /// JSON config file with a `version` field.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set unlearn.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// Generator checkpoint id (default: newest gan or vae).
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labelled glyph dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a GAN generator and discriminator.
    TrainGan {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Train a VAE.
    TrainVae {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Train a feature probe.
    TrainProbe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Find the target vector of a feature in a generator's latent space.
    Identify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        probe: Option<String>,
        #[arg(long)]
        selection: Option<String>,
    },
    /// Fine-tune a generator so the target feature disappears.
    Unlearn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        target: Option<String>,
        /// Weight of the unlearning and perceptual terms.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Retrain on the feature-free images as a reference.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// TFR, Fréchet distance, probe IS and (with a target) identification AUC.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        probe: Option<String>,
        #[arg(long)]
        target: Option<String>,
    },
    /// Latent-space adversarial attack against an unlearned generator.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        probe: Option<String>,
        #[arg(long)]
        eval_probe: Option<String>,
    },
    /// Unlearning ablation over loss terms and alpha.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        target: Option<String>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
    },
}

fn overrides(cfg: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<Vec<Override>, RunError> {
    let mut out = cfg
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    // Shorthand flags win over --set.
    for (key, value) in flags {
        if let Some(v) = value {
            out.push(Override::new(key, v));
        }
    }
    Ok(out)
}

fn load<T: DeserializeOwned + Serialize + Default>(
    cfg: &ConfigArgs,
    flags: &[(&str, Option<String>)],
) -> Result<T, RunError> {
    load_config(cfg.config.as_deref(), &overrides(cfg, flags)?)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

/// Runs one non-serve command.
pub fn run_command(ws: &Workspace, command: &Command) -> Result<RunManifest, RunError> {
    match command {
        Command::Synth { cfg, n, seed } => pipeline::synth(ws, load(cfg, &[("n", s(n)), ("seed", s(seed))])?),
        Command::TrainGan { cfg, dataset } => pipeline::train_gan_stage(ws, load(cfg, &[("dataset", s(dataset))])?),
        Command::TrainVae { cfg, dataset } => pipeline::train_vae_stage(ws, load(cfg, &[("dataset", s(dataset))])?),
        Command::TrainProbe { cfg, dataset, seed } => pipeline::train_probe_stage(
            ws,
            load(cfg, &[("dataset", s(dataset)), ("probe.seed", s(seed))])?,
        ),
        Command::Identify {
            cfg,
            model,
            probe,
            selection,
        } => pipeline::identify(
            ws,
            load(
                cfg,
                &[
                    ("model", s(&model.model)),
                    ("probe", s(probe)),
                    ("selection", s(selection)),
                ],
            )?,
        ),
        Command::Unlearn {
            cfg,
            model,
            target,
            alpha,
        } => pipeline::unlearn_stage(
            ws,
            load(
                cfg,
                &[
                    ("model", s(&model.model)),
                    ("target", s(target)),
                    ("unlearn.alpha", alpha.map(|a| format!("{a:?}"))),
                ],
            )?,
            None,
            &mut |_, _| {},
        ),
        Command::Oracle { cfg, model } => pipeline::oracle_stage(ws, load(cfg, &[("model", s(&model.model))])?),
        Command::Eval {
            cfg,
            model,
            probe,
            target,
        } => pipeline::eval_stage(
            ws,
            load(
                cfg,
                &[("model", s(&model.model)), ("probe", s(probe)), ("target", s(target))],
            )?,
        ),
        Command::Attack {
            cfg,
            model,
            probe,
            eval_probe,
        } => pipeline::attack_stage(
            ws,
            load(
                cfg,
                &[
                    ("model", s(&model.model)),
                    ("probe", s(probe)),
                    ("eval_probe", s(eval_probe)),
                ],
            )?,
        ),
        Command::Ablate { cfg, model, target } => pipeline::ablate_stage(
            ws,
            load(cfg, &[("model", s(&model.model)), ("target", s(target))])?,
        ),
        Command::Serve { .. } => Err(RunError::invalid("serve is not a pipeline stage")),
    }
}

/// Entry point behind `main`; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let root = cli.workspace.clone().unwrap_or_else(Workspace::default_root);
    let ws = match Workspace::open(&root) {
        Ok(ws) => ws,
        Err(e) => {
            eprintln!("error: cannot open workspace {}: {e}", root.display());
            return 1;
        }
    };
    if let Command::Serve { addr } = cli.command {
        let rt = match tokio::runtime::Runtime::new() {
            Ok(rt) => rt,
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        };
        return match rt.block_on(crate::server::serve(ws, addr)) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        };
    }
    match run_command(&ws, &cli.command) {
        Ok(manifest) => {
            match serde_json::to_string_pretty(&manifest) {
                Ok(text) => println!("{text}"),
                Err(e) => eprintln!("warning: cannot print manifest: {e}"),
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
