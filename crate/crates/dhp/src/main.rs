use clap::{Args, Parser, Subcommand};
use dhp::checkpoint::Checkpoint;
use dhp::config::{Overrides, RunConfig};
use dhp::error::{DhpError, Result};
use dhp::train::{self, RunStatus};
use dhp::verify;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Differentiable channel pruning via latent-vector hypernetworks.
#[derive(Parser)]
#[command(name = "dhp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct OverrideArgs {
    /// Target FLOPs ratio in (0, 1); overrides the config file.
    #[arg(long)]
    target: Option<f64>,
    /// Sparsity factor lambda; overrides the config file.
    #[arg(long)]
    lambda: Option<f64>,
    /// Mask threshold tau; overrides the config file.
    #[arg(long)]
    tau: Option<f64>,
    /// RNG seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config file and DHP_OUT_DIR.
    #[arg(long)]
    out: Option<String>,
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            target: self.target,
            lambda: self.lambda,
            tau: self.tau,
            seed: self.seed,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Search, prune, and fine-tune a network from a TOML config.
    Run {
        /// Path to the run configuration.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Run the verification suites.
    Verify {
        /// Run a single suite (prox, gradcheck, equivalence, sharing, accounting).
        #[arg(long)]
        suite: Option<String>,
    },
    /// Ablation studies: sharing on/off and l1 vs l2 at equal lambda.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Summarize a checkpoint file.
    Inspect {
        /// Path to a JSON checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(path: &Path, overrides: &OverrideArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.to_overrides().apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    if let Some(dir) = &cfg.out_dir {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var("DHP_OUT_DIR") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from(".")
}

fn cmd_run(config: &Path, overrides: &OverrideArgs) -> Result<RunStatus> {
    let cfg = load_config(config, overrides)?;
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    let out = train::run_pipeline(&cfg)?;
    train::write_metrics_csv(&dir.join("metrics.csv"), &out.metrics)?;
    train::save_record(&dir.join("record.json"), &out.record)?;
    Checkpoint::from_hyper(&out.backbone).save(&dir.join("search.json"))?;
    if let Some(net) = &out.network {
        Checkpoint::from_explicit(net).save(&dir.join("pruned.json"))?;
    }
    match out.record.status {
        RunStatus::Completed => {
            println!(
                "completed: flops ratio {:.4} (target {:.2}), search {} epochs / {} iterations, val metric {:.4}",
                out.record.final_flops_ratio,
                out.record.target_flops_ratio,
                out.record.search_epochs,
                out.record.search_iterations,
                out.record.final_val_metric
            );
        }
        RunStatus::BudgetExceeded => {
            println!(
                "budget exceeded: flops ratio {:.4} after {} search epochs (target {:.2})",
                out.record.final_flops_ratio,
                out.record.search_epochs,
                out.record.target_flops_ratio
            );
        }
    }
    println!("artifacts written to {}", dir.display());
    Ok(out.record.status)
}

fn cmd_verify(suite: Option<&str>) -> Result<()> {
    let results = verify::run_all();
    let mut failed = false;
    let mut matched = false;
    for r in &results {
        if let Some(s) = suite {
            if r.name != s {
                continue;
            }
        }
        matched = true;
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", r.name, r.detail);
        failed |= !r.passed;
    }
    if !matched {
        return Err(DhpError::InvalidConfig(format!(
            "unknown suite '{}'",
            suite.unwrap_or_default()
        )));
    }
    if failed {
        return Err(DhpError::VerifyFailed {
            suite: suite.unwrap_or("all").to_string(),
            detail: "one or more suites failed".to_string(),
        });
    }
    Ok(())
}

fn cmd_compare(config: &Path, overrides: &OverrideArgs) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let report = train::compare(&cfg)?;
    print!("{}", train::format_table("latent sharing ablation", &report.sharing_rows));
    println!();
    print!("{}", train::format_table("regularizer ablation (equal lambda)", &report.regularizer_rows));
    if !report.l2_search_is_longer() {
        return Err(DhpError::VerifyFailed {
            suite: "compare".to_string(),
            detail: format!(
                "l2 search ({} iterations) was shorter than l1 ({})",
                report.l2_search_iterations, report.l1_search_iterations
            ),
        });
    }
    println!(
        "\nl2 search took {} iterations vs {} for l1 at equal lambda",
        report.l2_search_iterations, report.l1_search_iterations
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    println!("kind: {} (format v{})", ckpt.kind, ckpt.version);
    println!("layers: {}", ckpt.graph.layers.len());
    println!("latents: {}", ckpt.graph.latents.len());
    let params: usize = ckpt.tensors.values().map(|t| t.numel()).sum();
    println!("tensors: {} ({} values)", ckpt.tensors.len(), params);
    for (i, l) in ckpt.graph.layers.iter().enumerate() {
        println!(
            "  layer {i:3}: {:?} {}x{} k{}x{} s{} g{} -> {}x{}",
            l.kind,
            l.out_channels,
            l.in_channels,
            l.kernel.0,
            l.kernel.1,
            l.stride,
            l.groups,
            l.out_h,
            l.out_w
        );
    }
    if let Some(masks) = &ckpt.masks {
        let total: usize = masks.iter().map(|m| m.len()).sum();
        let kept: usize = masks.iter().flatten().filter(|&&b| b).count();
        println!("masks: {kept}/{total} channels kept");
    }
    Ok(())
}

fn exit_code_for(e: &DhpError) -> u8 {
    match e {
        DhpError::VerifyFailed { .. } => 2,
        DhpError::BudgetExceeded { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, overrides } => cmd_run(config, overrides).map(|status| match status {
            RunStatus::Completed => ExitCode::SUCCESS,
            RunStatus::BudgetExceeded => ExitCode::from(3),
        }),
        Command::Verify { suite } => cmd_verify(suite.as_deref()).map(|()| ExitCode::SUCCESS),
        Command::Compare { config, overrides } => {
            cmd_compare(config, overrides).map(|()| ExitCode::SUCCESS)
        }
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint).map(|()| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
