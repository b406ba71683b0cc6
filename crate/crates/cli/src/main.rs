use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radarformer_cli::{commands, error_line, RunConfig};
use radarformer_core::CoreError;

#[derive(Parser)]
#[command(name = "radarformer", version, about = "Radar object detection on range-azimuth maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset.
    Synth(Common),
    /// Train a model and keep the best validation checkpoint.
    Train(Common),
    /// Sliding-window detection with a trained checkpoint.
    Infer(Common),
    /// Score detection files against dataset annotations.
    Eval(Common),
    /// Parameter, MAC and timing comparison of reference models.
    Profile(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded 64-bit execution.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Write per-frame heatmap images during inference.
    #[arg(long)]
    heatmaps: bool,
    /// Directory of detection files for eval.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Any other config key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn path_value(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(p) = &self.data_dir {
            o.push(format!("data_dir={}", path_value(p)));
        }
        if let Some(p) = &self.out {
            o.push(format!("out_dir={}", path_value(p)));
        }
        if self.deterministic {
            o.push("deterministic=true".into());
        }
        if let Some(m) = &self.model {
            o.push(format!("model={}", toml::Value::String(m.clone())));
        }
        if let Some(p) = &self.checkpoint {
            o.push(format!("checkpoint={}", path_value(p)));
        }
        if let Some(e) = self.epochs {
            o.push(format!("epochs={e}"));
        }
        if self.heatmaps {
            o.push("heatmaps=true".into());
        }
        if let Some(p) = &self.detections {
            o.push(format!("detections={}", path_value(p)));
        }
        o
    }
}

fn run(cli: Cli) -> Result<String, CoreError> {
    let (cmd, common) = match &cli.cmd {
        Cmd::Synth(c) => ("synth", c),
        Cmd::Train(c) => ("train", c),
        Cmd::Infer(c) => ("infer", c),
        Cmd::Eval(c) => ("eval", c),
        Cmd::Profile(c) => ("profile", c),
    };
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides())?;
    match cmd {
        "synth" => commands::synth(&cfg),
        "train" => commands::train_cmd(&cfg, &mut |line| eprintln!("{line}")),
        "infer" => commands::infer(&cfg),
        "eval" => commands::eval(&cfg),
        _ => commands::profile(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line(&CoreError::Config(first.to_string())));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(radarformer_cli::exit_code(e.category()) as u8)
        }
    }
}
