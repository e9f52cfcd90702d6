use std::error::Error as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splatrig::scene::Template;
use splatrig::Stage;
use splatrig_cli::commands::{self, Orbit, SynthOptions};
use splatrig_cli::config::load_fit_config;
use splatrig_cli::{server, CliError, Result};

#[derive(Parser)]
#[command(name = "splatrig", version, about = "Skeleton rigging, fitting and editing for Gaussian splat scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene document with fitting targets
    Synth {
        out: PathBuf,
        #[arg(long, default_value = "pendulum")]
        template: Template,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long)]
        splats_per_bone: Option<usize>,
        /// Swing amplitude in degrees
        #[arg(long, default_value_t = 30.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target renders per frame
        #[arg(long, default_value_t = 0)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Also store the generating poses
        #[arg(long)]
        with_poses: bool,
    },
    /// Replace the skeleton with one extracted from the cloud
    Skeletonize {
        input: PathBuf,
        #[arg(long)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output document; defaults to rewriting the input
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a fitting stage
    Fit {
        input: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// TOML fit configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output document; defaults to rewriting the input
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base path of the report files; defaults to the output document
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render one frame to PNG
    Render {
        input: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        azimuth: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        elevation: f64,
        #[arg(long)]
        distance: Option<f64>,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the smoothed poses as BVH
    Export {
        input: PathBuf,
        #[arg(long)]
        bvh: PathBuf,
        #[arg(long, default_value_t = 16.0)]
        fps: f64,
    },
    /// Serve the document to the pose editor
    Serve {
        input: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    match s {
        "R" | "r" | "rigid" => Ok(Stage::R),
        "N" | "n" | "refine" => Ok(Stage::N),
        _ => Err(format!("unknown stage `{s}` (expected R or N)")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            template,
            frames,
            splats_per_bone,
            amplitude,
            seed,
            views,
            resolution,
            with_poses,
        } => {
            let doc = commands::synth(&SynthOptions {
                template,
                frames,
                splats_per_bone,
                amplitude_deg: amplitude,
                seed,
                views,
                resolution,
                with_poses,
            })?;
            commands::write_document(&out, &doc)?;
            println!(
                "wrote {}: {} splats, {} joints, {} frames",
                out.display(),
                doc.cloud.as_ref().map_or(0, |c| c.len()),
                doc.skeleton.as_ref().map_or(0, |s| s.len()),
                frames
            );
        }
        Command::Skeletonize {
            input,
            candidates,
            seed,
            out,
        } => {
            let mut doc = commands::read_document(&input)?;
            let r = commands::skeletonize(&mut doc, candidates, seed)?;
            let out = out.unwrap_or(input);
            commands::write_document(&out, &doc)?;
            println!("wrote {}: {}-joint skeleton", out.display(), r.joints);
            for d in r.dropped {
                println!("dropped stale {d} section");
            }
        }
        Command::Fit {
            input,
            stage,
            config,
            out,
            report,
        } => {
            let mut doc = commands::read_document(&input)?;
            let config = config.map(|p| load_fit_config(&p)).transpose()?;
            commands::check_fit_inputs(&doc, stage)?;
            let config = commands::resolve_config(&doc, stage, config);
            let outcome = commands::fit_document(&doc, &config)?;
            let rep = commands::apply_fit(&mut doc, &config, outcome);
            let out = out.unwrap_or(input);
            commands::write_document(&out, &doc)?;
            let (jsonl, json) = commands::write_report(&rep, report.as_deref().unwrap_or(&out))?;
            println!(
                "stage {stage:?}: {} steps, final loss {:.6e} in {:.1}s",
                rep.records.len(),
                rep.final_loss.total,
                rep.wall_clock_seconds
            );
            for (k, v) in &rep.final_loss.terms {
                println!("  {k} {v:.6e}");
            }
            println!("wrote {}, {} and {}", out.display(), jsonl.display(), json.display());
        }
        Command::Render {
            input,
            frame,
            azimuth,
            elevation,
            distance,
            width,
            height,
            out,
        } => {
            let orbit = Orbit {
                azimuth,
                elevation,
                distance,
                width,
                height,
                ..Orbit::default()
            };
            let png = commands::render_png(commands::read_document(&input)?, frame, &orbit)?;
            std::fs::write(&out, png)?;
            println!("wrote {}", out.display());
        }
        Command::Export { input, bvh, fps } => {
            let text = commands::export_bvh(commands::read_document(&input)?, fps)?;
            std::fs::write(&bvh, text)?;
            println!("wrote {} at {fps} fps", bvh.display());
        }
        Command::Serve { input, port, host } => {
            let doc = commands::read_document(&input)?;
            let session = commands::session(doc)?;
            let handle = server::spawn(session, Some(input), (host.as_str(), port))?;
            println!("listening on {}", handle.addr());
            handle.wait();
        }
    }
    Ok(())
}

fn report(e: &CliError) {
    eprintln!("error: {e}");
    let mut src = e.source();
    while let Some(s) = src {
        eprintln!("  caused by: {s}");
        src = s.source();
    }
    if let Some(h) = e.hint() {
        eprintln!("hint: {h}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
