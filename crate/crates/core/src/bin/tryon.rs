//! Command-line front end for the try-on pipeline.
//!
//! Usage errors exit 2 (clap's default); everything else that fails
//! prints the error, including the offending path where there is one,
//! and exits 1.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use tryon_core::config::{self, RunConfig, Strategy};
use tryon_core::evaluate;
use tryon_core::io::{self, Dataset};
use tryon_core::tensor::Tape;
use tryon_core::train;
use tryon_core::types::Image;
use tryon_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tryon", version, about = "Garment warping and try-on synthesis on procedural data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset
    Synth {
        /// TOML run configuration; omitted fields use defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of samples to write
        #[arg(long)]
        count: usize,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the warping module
    TrainWarp {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by synth
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoint and log
        #[arg(long)]
        out: PathBuf,
        /// Truncation strategy: none, gt, or dgt
        #[arg(long, default_value = "dgt", value_parser = parse_strategy)]
        strategy: Strategy,
        /// Use a single global flow instead of per-part flows
        #[arg(long)]
        global_flow: bool,
        /// Override the configured step budget
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the try-on generator against a frozen warp checkpoint
    TrainGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Stage-one checkpoint to warp garments with
        #[arg(long)]
        warp_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one sample through the pipeline and save the outputs
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the dataset
        #[arg(long)]
        index: usize,
        #[arg(long)]
        warp_checkpoint: PathBuf,
        /// Optional stage-two checkpoint; adds the composed try-on image
        #[arg(long)]
        gen_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score checkpoints on a dataset and write metric files
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        warp_checkpoint: PathBuf,
        #[arg(long)]
        gen_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Which samples to score: all, or the held-out val split
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and compare the warping variants on one dataset
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Flag > environment > config file, for both the data and train seeds.
fn resolve(config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = config::seed_from_env()? {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { config, count, out, seed } => {
            let cfg = resolve(&config, seed)?;
            let entries = tryon_core::synth::generate_dataset(&cfg.data, count, &out)?;
            println!("wrote {} samples to {}", entries.len(), out.display());
        }
        Cmd::TrainWarp { config, data, out, strategy, global_flow, steps, seed } => {
            let mut cfg = resolve(&config, seed)?;
            if let Some(n) = steps {
                cfg.train.steps_warp = n;
            }
            let summary = train::train_warp(&cfg, &data, &out, strategy, global_flow)?;
            println!(
                "trained warp ({}{}) for {} steps, params {}",
                strategy.as_str(),
                if global_flow { ", global flow" } else { "" },
                summary.steps,
                &summary.param_hash[..12]
            );
            if let Some(v) = summary.val {
                println!("val miou={:.4} ssim={:.4} r_diff={:.4}", v.miou, v.ssim, v.r_diff);
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Cmd::TrainGen { config, data, warp_checkpoint, out, steps, seed } => {
            let mut cfg = resolve(&config, seed)?;
            if let Some(n) = steps {
                cfg.train.steps_gen = n;
            }
            let summary = train::train_gen(&cfg, &data, &warp_checkpoint, &out)?;
            println!("trained generator for {} steps", summary.steps);
            if let (Some(u), Some(v)) = (&summary.val_untrained, &summary.val) {
                println!(
                    "val ssim {:.4} -> {:.4}, mean_alpha {:.4}",
                    u.ssim, v.ssim, v.mean_alpha
                );
            }
            println!("checkpoint {}", summary.checkpoint.display());
        }
        Cmd::Infer { config, data, index, warp_checkpoint, gen_checkpoint, out, seed } => {
            let cfg = resolve(&config, seed)?;
            let ds = Dataset::open(&data)?;
            if index >= ds.len() {
                return Err(Error::InvalidArg(format!(
                    "sample index {index} out of range, dataset has {}",
                    ds.len()
                )));
            }
            let sample = ds.load_sample(index)?;
            let (model, store) = train::load_warp_model(&cfg, &warp_checkpoint)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::io(out.display().to_string(), e))?;
            infer_one(&cfg, &model, &store, &sample, gen_checkpoint.as_deref(), &out)?;
            println!("wrote inference outputs to {}", out.display());
        }
        Cmd::Eval { config, data, warp_checkpoint, gen_checkpoint, out, split, seed } => {
            let cfg = resolve(&config, seed)?;
            let ds = Dataset::open(&data)?;
            let samples = evaluate::load_split(&ds, &split, cfg.train.val_fraction)?;
            let (model, store) = train::load_warp_model(&cfg, &warp_checkpoint)?;
            let ev = evaluate::evaluate_warp_samples(&model, &store, &samples)?;
            let mut pairs = vec![
                ("count".to_string(), ev.count.to_string()),
                ("miou".to_string(), evaluate::format_metric(ev.miou)),
                ("ssim".to_string(), evaluate::format_metric(ev.ssim)),
                ("r_diff".to_string(), evaluate::format_metric(ev.r_diff)),
                ("r_skipped".to_string(), ev.r_skipped.to_string()),
            ];
            println!(
                "warp: count={} miou={:.4} ssim={:.4} r_diff={:.4} skipped={}",
                ev.count, ev.miou, ev.ssim, ev.r_diff, ev.r_skipped
            );
            if let Some(gc) = gen_checkpoint {
                let (gen, gstore) = train::load_generator(&cfg, &gc)?;
                let gss = samples
                    .iter()
                    .map(|s| evaluate::prepare_gen_sample(&model, &store, s))
                    .collect::<Result<Vec<_>>>()?;
                let gev = evaluate::evaluate_gen(&gen, &gstore, &gss)?;
                pairs.push(("gen_ssim".to_string(), evaluate::format_metric(gev.ssim)));
                pairs.push(("gen_mean_alpha".to_string(), evaluate::format_metric(gev.mean_alpha)));
                println!("gen: ssim={:.4} mean_alpha={:.4}", gev.ssim, gev.mean_alpha);
            }
            evaluate::write_metric_files(&out, "metrics", &pairs)?;
            println!("wrote metrics to {}", out.join("metrics.txt").display());
        }
        Cmd::Ablate { config, data, out, steps, seed } => {
            let mut cfg = resolve(&config, seed)?;
            if let Some(n) = steps {
                cfg.train.steps_warp = n;
            }
            let rows = train::run_ablation(&cfg, &data, &out)?;
            print!("{}", train::ablation_table(&rows));
            println!("wrote comparison to {}", out.join("ablation.txt").display());
        }
    }
    Ok(())
}

fn infer_one(
    cfg: &RunConfig,
    model: &tryon_core::model::WarpModel,
    store: &tryon_core::nn::ParamStore,
    sample: &tryon_core::types::WarpSample,
    gen_ckpt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let inf = tryon_core::model::infer_warp(model, store, sample)?;
    io::save_label_png(&out.join("warped_parsing.png"), &inf.parsing_full)?;
    for (name, flow) in ["flow_left", "flow_middle", "flow_right"].iter().zip(&inf.flows_full) {
        io::save_flow(&out.join(format!("{name}.flow")), flow)?;
    }
    let parts = tryon_core::types::PartSet::from_garment(&sample.garment, &sample.garment_parsing)?;
    let warped = tryon_core::warp::warp_parts(&parts, &inf.flows_full)?;
    let (assembled, _) = tryon_core::warp::assemble_by_parsing(&warped, &inf.parsing_full)?;
    io::save_image_png(&out.join("warped_garment.png"), &assembled)?;

    if let Some(gc) = gen_ckpt {
        let (gen, gstore) = train::load_generator(cfg, gc)?;
        let gs = evaluate::prepare_gen_sample(model, store, sample)?;
        let mut t = Tape::new();
        let fwd = gen.forward_inputs(&mut t, &gstore, &gs.inputs)?;
        let tryon = Image::from_dyn(t.value(fwd.tryon).clone())?;
        io::save_image_png(&out.join("tryon.png"), &tryon)?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
