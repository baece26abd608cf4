use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nerfmd::pipeline::config::PipelineConfig;
use nerfmd::pipeline::dataset::{generate_scene, Split};
use nerfmd::pipeline::run::{evaluate, render_to_png, run_detect, run_stage1, run_stage2};
use nerfmd::pipeline::synth::SceneConfig;

#[derive(Parser)]
#[command(name = "nerfmd", version, about = "Mirror detection and reflection-aware radiance field refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural mirror room dataset.
    Generate {
        /// Scene TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the first-stage field and write score maps.
    Stage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit mirror primitives to the stage-1 candidate points.
    Detect {
        #[arg(long)]
        run: PathBuf,
    },
    /// Jointly refine the field and the detected primitives.
    Stage2 {
        #[arg(long)]
        run: PathBuf,
    },
    /// Metrics of the latest (or the given) stage on a split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        stage: Option<u32>,
    },
    /// Render one dataset camera with the latest stage.
    Render {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> nerfmd::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = match config {
                Some(p) => SceneConfig::load(&p)?,
                None => SceneConfig::default(),
            };
            let ds = generate_scene(&cfg, seed, &out)?;
            println!("wrote {} frames to {}", ds.frames.len(), out.display());
        }
        Command::Stage1 { data, out, config } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            let s = run_stage1(&data, &out, &cfg)?;
            println!("stage 1 done: final loss {:.6}, train PSNR {:.2} dB", s.final_loss, s.train_psnr);
        }
        Command::Detect { run } => {
            let m = run_detect(&run)?;
            let accepted = m.primitives.iter().filter(|e| e.accepted).count();
            println!("{} primitives fitted, {accepted} accepted", m.primitives.len());
        }
        Command::Stage2 { run } => {
            let s = run_stage2(&run)?;
            println!("stage 2 done: {} primitives, {} rejected steps, final loss {:.6}", s.primitives.len(), s.rejected_steps, s.final_loss);
        }
        Command::Eval { run, split, stage } => {
            let r = evaluate(&run, split, stage)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
            println!(
                "stage {} {:?}: PSNR {:.3} SSIM {:.4} mirror PSNR {} mirror SSIM {}",
                r.stage, r.split, r.mean.psnr, r.mean.ssim, fmt(r.mean.mirror_psnr), fmt(r.mean.mirror_ssim)
            );
        }
        Command::Render { run, camera, out } => {
            render_to_png(&run, camera, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
