//! Command-line front end: `gen-scene`, `train`, `render`, `eval`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_image};
use crate::render::Camera;
use crate::scene::{gen_scene, GenOptions};
use crate::train::{train, TrainData};

#[derive(Debug, Parser)]
#[command(name = "ndvg", version, about = "Deformable voxel-grid radiance fields for dynamic scenes")]
pub struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a built-in analytic scene to a dataset directory.
    GenScene(GenSceneArgs),
    /// Run both training stages; writes checkpoints and loss.csv.
    Train(TrainArgs),
    /// Render images from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint against a dataset split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// translating-sphere, bouncing-ball, occluder or static.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 30)]
    pub train_views: usize,
    #[arg(long, default_value_t = 10)]
    pub test_views: usize,
    /// Distinct time steps.
    #[arg(long, default_value_t = 10)]
    pub times: usize,
    #[arg(long, default_value_t = 512)]
    pub quadrature: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Flat `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON camera (or list of cameras): width, height, fx, fy, cx, cy, c2w.
    #[arg(long, conflicts_with = "frame")]
    pub pose_file: Option<PathBuf>,
    /// Index of a frame in the dataset given by --data.
    #[arg(long, requires = "data")]
    pub frame: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Normalized time in [0, 1]; defaults to the frame's own time.
    #[arg(long)]
    pub time: Option<f64>,
    /// Output PNG, or a directory when several cameras are given.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Metrics CSV path; defaults to metrics.csv next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub chunk: usize,
}

/// Usage and range problems exit with 1, everything else with 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::OutOfRange(_) | Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownScene(_) => 1,
        _ => 2,
    }
}

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    match threads {
        None => f(),
        Some(0) => Err(Error::OutOfRange("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(f),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    with_threads(cli.threads, move || match cli.command {
        Command::GenScene(a) => cmd_gen_scene(a, seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, seed),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
    })
}

fn cmd_gen_scene(a: GenSceneArgs, seed: u64) -> Result<()> {
    let opts = GenOptions {
        width: a.width,
        height: a.height,
        train_views: a.train_views,
        test_views: a.test_views,
        times: a.times,
        quadrature: a.quadrature,
        ..GenOptions::default()
    };
    let g = gen_scene(&a.spec, seed, &opts)?;
    g.write(&a.out)?;
    println!("wrote {} train and {} test views to {}", g.train.len(), g.test.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut pairs = Vec::new();
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim(), v.trim()));
    }
    let seed_text = seed.map(|s| s.to_string());
    if let Some(s) = &seed_text {
        pairs.push(("seed", s));
    }
    cfg.apply(pairs)?;
    let ds = Dataset::load(&a.data)?;
    let data = TrainData::from_dataset(&ds)?;
    info!("{} training rays from {} views", data.rays.len(), data.views.len());
    let out = train(&data, &cfg, Some(&a.out))?;
    let last = out.log.last().map_or(f64::NAN, |r| r.psnr_train);
    println!("trained {} iterations; final train PSNR {last:.2} dB; checkpoints in {}", out.log.len(), a.out.display());
    Ok(())
}

fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let cams: Vec<Camera> = if v.is_array() {
        serde_json::from_value(v)?
    } else {
        vec![serde_json::from_value(v)?]
    };
    cams.into_iter()
        .map(|c| Camera::new(c.width, c.height, c.fx, c.fy, c.cx, c.cy, c.c2w))
        .collect()
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    if let Some(t) = a.time {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange(format!("--time {t} is outside [0, 1]")));
        }
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let jobs: Vec<(Camera, f64)> = match (&a.pose_file, a.frame) {
        (Some(p), _) => {
            let t = a
                .time
                .ok_or_else(|| Error::InvalidArgument("--pose-file needs --time".into()))?;
            load_cameras(p)?.into_iter().map(|c| (c, t)).collect()
        }
        (None, Some(i)) => {
            let ds = Dataset::load(a.data.as_deref().expect("clap enforces --data"))?;
            let views = ds.views(a.split);
            let v = views.get(i).ok_or_else(|| {
                Error::OutOfRange(format!("frame {i} not in {:?} split of {} views", a.split, views.len()))
            })?;
            vec![(v.camera.clone(), a.time.unwrap_or(v.time))]
        }
        (None, None) => return Err(Error::InvalidArgument("give --pose-file or --frame".into())),
    };
    if jobs.len() == 1 {
        render_image(&ck.model, &jobs[0].0, jobs[0].1, a.chunk)?.save_png(&a.out)?;
        println!("wrote {}", a.out.display());
    } else {
        std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        for (i, (cam, t)) in jobs.iter().enumerate() {
            render_image(&ck.model, cam, *t, a.chunk)?.save_png(&a.out.join(format!("r_{i:03}.png")))?;
        }
        println!("wrote {} images to {}", jobs.len(), a.out.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?;
    let ev = evaluate(&ck.model, ds.views(a.split), a.chunk)?;
    let out = a
        .out
        .unwrap_or_else(|| a.ckpt.parent().unwrap_or(Path::new(".")).join("metrics.csv"));
    ev.write_csv(&out)?;
    println!("mean PSNR {:.4} / mean SSIM {:.4}", ev.mean_psnr(), ev.mean_ssim());
    Ok(())
}
