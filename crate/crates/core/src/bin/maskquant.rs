use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskquant::pipeline::{self, MemoryPreset, PipelineConfig};
use maskquant::{Error, Result};

/// Post-training binary quantization for masked diffusion language models.
#[derive(Parser)]
#[command(name = "maskquant", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Calibrate on clean sequences instead of masked replays.
    #[arg(long, global = true)]
    no_mcs: bool,
    /// Unweighted reconstruction objective.
    #[arg(long, global = true)]
    no_dor: bool,
    /// Uniform order for every group.
    #[arg(long, global = true)]
    no_abmp: bool,
    /// Skip alternating refinement after initialization.
    #[arg(long, global = true)]
    no_rsr: bool,
    #[arg(long, global = true)]
    ratio: Option<f64>,
    #[arg(long, global = true)]
    order: Option<usize>,
    #[arg(long, global = true)]
    group_width: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Masked calibration and per-layer activation statistics.
    Calib,
    /// Quantize the target layers and write model.qpk and report.json.
    Quantize,
    /// Divergence of the quantized model on a held-out masked set.
    Eval {
        #[arg(long)]
        qpk: Option<PathBuf>,
    },
    /// Memory estimate of a preset, a packed file or the configured model.
    EstimateMem {
        #[arg(long, conflicts_with = "qpk")]
        preset: Option<Preset>,
        #[arg(long)]
        qpk: Option<PathBuf>,
    },
    /// Run the ablation grid and write ablation.json.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "llada8b-2bit")]
    Llada8b,
    #[value(name = "fp16-8b")]
    Fp16,
}

fn config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.ratio {
        cfg.ratio = r;
    }
    if let Some(k) = c.order {
        cfg.daq.order = k;
    }
    if let Some(w) = c.group_width {
        cfg.group_width = w;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.use_mcs &= !c.no_mcs;
    cfg.use_dor &= !c.no_dor;
    cfg.use_abmp &= !c.no_abmp;
    cfg.use_rsr &= !c.no_rsr;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    match cli.command {
        Command::Calib => {
            let dir = pipeline::cmd_calib(&cfg)?;
            println!("statistics written to {}", dir.display());
        }
        Command::Quantize => {
            let report = pipeline::cmd_quantize(&cfg)?;
            for l in &report.layers {
                println!(
                    "{:<12} {}x{} groups={} orders(1/2/3)={:?} proxy {:.6e} -> {:.6e}",
                    l.name, l.rows, l.cols, l.groups, l.histogram, l.proxy_loss_init, l.proxy_loss_final
                );
            }
            println!("wrote {} and {}", cfg.qpk_path().display(), cfg.report_path().display());
        }
        Command::Eval { qpk } => {
            let e = pipeline::cmd_eval(&cfg, qpk.as_deref())?;
            println!(
                "sequences={} mean_sq_logit_error={:.6e} mean_kl={:.6e}",
                e.sequences, e.mean_sq_logit_error, e.mean_kl
            );
        }
        Command::EstimateMem { preset, qpk } => {
            let preset = preset.map(|p| match p {
                Preset::Llada8b => MemoryPreset::Llada8b,
                Preset::Fp16 => MemoryPreset::Fp16_8b,
            });
            print!("{}", pipeline::cmd_estimate_mem(&cfg, qpk.as_deref(), preset)?.render());
        }
        Command::Report => {
            let r = pipeline::cmd_report(&cfg)?;
            println!("{:<24} {:>14} {:>14} {:>12}", "arm", "mean_kl", "logit_mse", "orders");
            for a in &r.arms {
                println!(
                    "{:<24} {:>14.6e} {:>14.6e} {:>12}",
                    a.name,
                    a.eval.mean_kl,
                    a.eval.mean_sq_logit_error,
                    format!("{:?}", a.histogram)
                );
            }
            println!("{}", r.direction_check.note);
            println!("wrote {}", cfg.ablation_path().display());
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
