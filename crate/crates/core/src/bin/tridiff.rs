use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tridiff::error::{Error, Result};
use tridiff::pipeline::{self, animate_with, load_checkpoint, repose, TrainConfig};
use tridiff::renderer::{self, DecoderMode, FeaturePlanes, LearnedDecoder, RenderConfig, View};
use tridiff::skeleton::{encode_skeleton, MotionSequence, RasterParams, Skeleton, WorldBounds};
use tridiff::synthetic::{make_dataset, make_motion, Dataset, DatasetParams, MotionStyle};
use tridiff::triplane::Triplane;

#[derive(Parser)]
#[command(name = "tridiff", version, about = "Skeleton-conditioned triplane reposing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a skeleton into a plane-aligned encoding triplane.
    EncodeSkeleton {
        skeleton: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
    /// Generate a synthetic capsule-character dataset.
    SynthDataset {
        #[arg(long)]
        chars: usize,
        #[arg(long)]
        poses: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        joints: usize,
    },
    /// Write a motion sequence for one dataset character.
    SynthMotion {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        character: usize,
        #[arg(long, default_value_t = 14)]
        frames: usize,
        #[arg(long, default_value = "walk")]
        style: MotionStyle,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser from a JSON configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Generate a triplane of the init character in a target pose.
    Repose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        skeleton: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one triplane per motion frame.
    Animate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        motion: PathBuf,
        /// Number of leading motion frames to generate (all when absent).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Condition each frame on the previous output instead of the init triplane.
        #[arg(long)]
        chain: bool,
        /// Also write a horizontal strip of renders from this view.
        #[arg(long, allow_hyphen_values = true)]
        strip_view: Option<View>,
    },
    /// Volume-render a triplane to a binary PPM.
    Render {
        #[arg(long)]
        triplane: PathBuf,
        #[arg(long, default_value = "+z", allow_hyphen_values = true)]
        view: View,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long, default_value_t = 5.0)]
        density_scale: f64,
        /// Directory holding learned decoder weights; uses the analytic decoder when absent.
        #[arg(long)]
        decoder: Option<PathBuf>,
    },
    /// Fit the learned decoder to the analytic one on a dataset's triplanes.
    FitDecoder {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::EncodeSkeleton { skeleton, out, size, channels } => {
            let skel = Skeleton::load(&skeleton)?;
            let bounds = WorldBounds::default();
            let enc = encode_skeleton(&skel, &bounds, size, size, RasterParams::for_resolution(size))?;
            Triplane::from_encoding(&enc, channels, bounds)?.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::SynthDataset { chars, poses, out, size, channels, seed, joints } => {
            let params = DatasetParams {
                characters: chars,
                poses,
                joints,
                channels,
                height: size,
                width: size,
                seed,
                ..DatasetParams::desk()
            };
            let ds = make_dataset(&params)?;
            ds.write(&out)?;
            println!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Command::SynthMotion { dataset, character, frames, style, seed, out } => {
            let ds = Dataset::load(&dataset)?;
            if character >= ds.params.characters {
                return Err(Error::InvalidArgument(format!("dataset has {} characters", ds.params.characters)));
            }
            let ch = ds.params.character(character)?;
            let motion = make_motion(&ch, frames, style, seed)?;
            motion.save(&out)?;
            println!("wrote {} frames to {}", motion.len(), out.display());
        }
        Command::Train { config, seed, resume, quiet } => {
            let text = fs::read_to_string(&config)?;
            let mut cfg: TrainConfig =
                serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {}", config.display(), e)))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let base = config.parent().unwrap_or(Path::new("."));
            cfg.dataset = cfg.dataset.map(|p| base.join(p));
            cfg.output_dir = Some(base.join(cfg.output_dir.unwrap_or_else(|| PathBuf::from("run"))));
            let summary = pipeline::train(&cfg, resume.as_deref(), |e| {
                if !quiet && (e.iteration % 50 == 0 || e.iteration == 1) {
                    println!("iter {:>7}  loss {:.5}  lr {:.2e}  recon {}", e.iteration, e.loss, e.lr, e.reconstructions);
                }
            })?;
            if let Some(ck) = summary.checkpoint {
                println!("checkpoint {}", ck.display());
            }
        }
        Command::Repose { ckpt, init, skeleton, seed, out } => {
            let (model, settings) = load_checkpoint(&ckpt)?;
            let init = Triplane::load(&init)?;
            let target = Skeleton::load(&skeleton)?;
            repose(&model, &init, &target, &settings, seed)?.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Animate { ckpt, init, motion, frames, seed, out, chain, strip_view } => {
            let (model, settings) = load_checkpoint(&ckpt)?;
            let init = Triplane::load(&init)?;
            let mut motion = MotionSequence::load(&motion)?;
            if let Some(k) = frames {
                if k == 0 || k > motion.len() {
                    return Err(Error::InvalidArgument(format!("--frames must lie in 1..={}", motion.len())));
                }
                motion = MotionSequence::new(motion.frames()[..k].to_vec())?;
            }
            fs::create_dir_all(&out)?;
            let mut images = Vec::new();
            animate_with(&model, &init, &motion, &settings, seed, chain, |t, frame| {
                frame.save(&out.join(format!("frame_{:03}.trpl", t)))?;
                if let Some(view) = strip_view {
                    let cfg = RenderConfig { view, density_scale: 5.0, ..Default::default() };
                    images.push(renderer::render(frame, &cfg)?);
                }
                println!("frame {}", t);
                Ok(())
            })?;
            if !images.is_empty() {
                renderer::write_ppm(&renderer::contact_sheet(&images)?, &out.join("strip.ppm"))?;
            }
        }
        Command::Render { triplane, view, out, size, samples, density_scale, decoder } => {
            let t = Triplane::load(&triplane)?;
            let learned = decoder.as_deref().map(LearnedDecoder::load).transpose()?;
            let cfg = RenderConfig {
                size,
                view,
                samples,
                density_scale,
                decoder: if learned.is_some() { DecoderMode::Learned } else { DecoderMode::Analytic },
                ..Default::default()
            };
            let img = renderer::render_with_decoder(&t, &cfg, learned.as_ref())?;
            renderer::write_ppm(&img, &out)?;
            println!("wrote {}", out.display());
        }
        Command::FitDecoder { dataset, out, iterations, hidden, seed } => {
            let ds = Dataset::load(&dataset)?;
            let planes: Vec<FeaturePlanes> = ds.samples.iter().map(|s| FeaturePlanes::from_triplane(&s.target)).collect();
            let mut r = tridiff::rng::seeded(seed);
            let mut dec = LearnedDecoder::new(ds.params.channels, hidden, &mut r);
            let loss = dec.fit(&planes, &renderer::AnalyticDecoder::default(), iterations, seed);
            dec.save(&out)?;
            println!("decoder loss {:.5}, wrote {}", loss, out.join(renderer::DECODER_FILE).display());
        }
    }
    Ok(())
}
