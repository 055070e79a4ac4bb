use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use flownerf::oracleio::formats::{encode_flo, encode_fndp, write_file, write_png, write_png_rgb8};
use flownerf::oracleio::{generate_scene, SceneConfig};
use flownerf::trainer::render::{colorize_depth, colorize_flow, parse_pose_text, render_flow, render_view};
use flownerf::trainer::{evaluate_checkpoint, run_training, Checkpoint, Model, TrainConfig};
use flownerf::{Error, Result};

#[derive(Parser)]
#[command(name = "flownerf", version, about = "Joint neural scene, pose and optical-flow optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rgb,
    Depth,
    Flow,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene with exact depth, flow and trajectory.
    GenScene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training frames.
        #[arg(long, default_value_t = 7)]
        frames: usize,
        #[arg(long, default_value = "64x48", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Optimize networks and poses on a scene directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a full view or a flow field from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Training frame index, or a file with a pose.
        #[arg(long)]
        pose_a: String,
        /// Target pose for flow.
        #[arg(long)]
        pose_b: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a scene's ground truth.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((dim(w)?, dim(h)?))
}

fn pose_arg(arg: &str, model: &Model) -> Result<[f64; 6]> {
    if let Ok(i) = arg.parse::<usize>() {
        if i >= model.frames() {
            return Err(Error::Config(format!("frame {i} is not one of the {} training frames", model.frames())));
        }
        return Ok(model.pose_vector(i));
    }
    let path = Path::new(arg);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_text(&text)
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.to_path_buf();
    if p.extension().is_some_and(|e| e == ext) {
        p.set_extension(format!("{ext}.png"));
    } else {
        p.set_extension("png");
    }
    p
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene { out, seed, frames, size } => {
            let mut cfg = SceneConfig::for_frames(frames);
            cfg.focal *= size.0 as f64 / cfg.width as f64;
            (cfg.width, cfg.height) = size;
            let meta = generate_scene(seed, cfg, &out)?;
            info!("wrote {} frames to {}", meta.frames.len(), out.display());
        }
        Command::Train { config, data, out, resume } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let cfg = TrainConfig::parse(&text)?;
            let outcome = run_training(&cfg, &data, &out, resume.as_deref())?;
            if let Some(r) = outcome.last {
                info!("finished at iteration {}: loss {:.5}, train PSNR {:.2} dB", outcome.iterations, r.losses.total, r.psnr);
            }
            info!("checkpoint at {}", outcome.checkpoint.display());
        }
        Command::Render { ckpt, mode, pose_a, pose_b, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = Model::from_checkpoint(&ck)?;
            let k = ck.camera;
            let a = pose_arg(&pose_a, &model)?;
            match mode {
                Mode::Rgb => {
                    let (img, _) = render_view(&model, &a, &k)?;
                    write_png(&out, &img)?;
                }
                Mode::Depth => {
                    let (_, depth) = render_view(&model, &a, &k)?;
                    write_file(&out, &encode_fndp(&depth))?;
                    let png = with_extension(&out, "fndp");
                    write_png_rgb8(&png, k.width, k.height, &colorize_depth(&depth))?;
                }
                Mode::Flow => {
                    let b = pose_b.ok_or_else(|| Error::Config("flow rendering needs --pose-b".into()))?;
                    let b = pose_arg(&b, &model)?;
                    let flow = render_flow(&model, &a, &b, &k)?;
                    write_file(&out, &encode_flo(&flow))?;
                    let png = with_extension(&out, "flo");
                    write_png_rgb8(&png, k.width, k.height, &colorize_flow(&flow))?;
                }
            }
            info!("wrote {}", out.display());
        }
        Command::Eval { ckpt, data, report } => {
            let r = evaluate_checkpoint(&ckpt, &data)?;
            r.save(&report)?;
            info!("wrote {}", report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
