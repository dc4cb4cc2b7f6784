use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use pearl::eval::{corpus_csv, parse_manifest, pes, run_corpus, PesRow};
use pearl::pipeline::{run, PipelineInputs, RunOptions};
use pearl::synth::{generate, SynthSpec};
use pearl::{Exec, PearlError, PipelineConfig, Result, TensorContainer};

#[derive(Parser)]
#[command(name = "pearl", version, about = "Training-free open-vocabulary segmentation from exported ViT tensors")]
struct Cli {
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one image.
    Run {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        prototypes: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Key=value configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the refined field `F` (C x H x W).
        #[arg(long)]
        dump_field: bool,
        /// Replace every rotation by the identity.
        #[arg(long = "debug-identity-R")]
        debug_identity_r: bool,
        /// Drop the key-key term from the aligned attention.
        #[arg(long)]
        no_key_key: bool,
        /// Write A, L, rho and G of the propagation system to this container.
        #[arg(long)]
        dump_system: Option<PathBuf>,
    },
    /// Evaluate a manifest of `dataset,features,image,gt,prototypes` rows.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precision-efficiency scores for `mIoU,pAcc,latency_ms,memory_gb` rows.
    Pes {
        #[arg(long)]
        rows: PathBuf,
    },
    /// Write a synthetic scene (features, prototypes, image, config).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let loaded = PipelineConfig::parse(&std::fs::read_to_string(path)?)?;
    for key in &loaded.unknown_keys {
        warn!("{}: unknown key `{key}`", path.display());
    }
    Ok(loaded.config)
}

fn parse_pes_rows(text: &str) -> Result<Vec<PesRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(|c: char| c.is_alphabetic()) {
            continue;
        }
        let values = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| PearlError::validation("rows", format!("line {}: {e}", n + 1)))?;
        let [miou, pacc, latency_ms, memory_gb] = values[..] else {
            return Err(PearlError::validation(
                "rows",
                format!("line {}: expected 4 values, got {}", n + 1, values.len()),
            ));
        };
        rows.push(PesRow { miou, pacc, latency_ms, memory_gb });
    }
    Ok(rows)
}

fn execute(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Run {
            features,
            prototypes,
            image,
            config,
            out,
            dump_field,
            debug_identity_r,
            no_key_key,
            dump_system,
        } => {
            let mut config = read_config(config.as_deref())?;
            config.identity_rotation |= debug_identity_r;
            config.use_key_key &= !no_key_key;
            let inputs = PipelineInputs::from_containers(
                &TensorContainer::read_file(&features)?,
                &TensorContainer::read_file(&prototypes)?,
                &TensorContainer::read_file(&image)?,
            )?;
            let output = run(&inputs, &config, RunOptions { keep_field: dump_field }, exec)?;
            let fallbacks = output.fused.windows.iter().flat_map(|w| &w.heads).filter(|h| h.fell_back).count();
            if fallbacks > 0 {
                warn!("{fallbacks} head(s) fell back to the SVD solver");
            }
            info!(
                "{} windows, CG max relative residual {:.3e}",
                output.fused.windows.len(),
                output.refinement.solution.max_relative_residual()
            );
            output.to_container().write_file(&out)?;
            if let Some(path) = dump_system {
                output.refinement.system_dump().write_file(path)?;
            }
        }
        Command::Eval { manifest, config, out } => {
            let config = read_config(config.as_deref())?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let entries = parse_manifest(&std::fs::read_to_string(&manifest)?, base)?;
            let csv = corpus_csv(&run_corpus(&entries, &config, exec)?);
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Pes { rows } => {
            let scores = pes(&parse_pes_rows(&std::fs::read_to_string(rows)?)?)?;
            for s in scores {
                println!("{s:.4}");
            }
        }
        Command::Synth { out, seed } => {
            generate(&SynthSpec { seed, ..SynthSpec::default() })?.write_to(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
