use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xfields::dataset::{
    holdout_split, save_png, Dataset, DatasetError, HoldoutProtocol, ShadowGeometry, SyntheticScene,
};
use xfields::metrics::{evaluate, EvalReport, Heldout, MetricsError};
use xfields::render::{checkpoint_file, FileError, Model, ModelFile, RenderError, TrainingMeta};
use xfields::trainer::{AdamConfig, TrainConfig, TrainError, Trainer};

use crate::server::{self, ServeError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Parser, Debug)]
#[command(name = "xfields", version, about = "Train, evaluate and serve X-Field models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with known motion.
    Synth(SynthArgs),
    /// Fit a model to a dataset.
    Train(TrainArgs),
    /// Score a model on held-out images.
    Eval(EvalArgs),
    /// Render one frame to PNG.
    Render(RenderArgs),
    /// Average renders along one axis (motion blur, depth of field).
    Effect(EffectArgs),
    /// Run the HTTP render service.
    Serve(ServeArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneArg {
    Translate1d,
    LightfieldPlane,
    ShadowSweep,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    pub kind: SceneArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// translate1d: total shift in pixels.
    #[arg(long, default_value_t = 8.0)]
    pub shift: f64,
    /// translate1d: frame count.
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
    /// lightfield-plane: shift between neighbouring views in pixels.
    #[arg(long, default_value_t = 4.0)]
    pub disparity: f64,
    /// lightfield-plane: camera grid as `MxN`.
    #[arg(long, default_value = "3x3")]
    pub grid: String,
    /// shadow-sweep: light count.
    #[arg(long, default_value_t = 5)]
    pub lights: usize,
    /// shadow-sweep: `x,y,width,height,travel,penumbra` in pixels.
    #[arg(long, default_value = "10,8,28,48,16,8")]
    pub shadow: String,
    /// shadow-sweep: render without a shadow.
    #[arg(long)]
    pub no_shadow: bool,
    /// Hold-out protocol recorded in the manifest (`none` for no list).
    #[arg(long)]
    pub protocol: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest file or dataset directory.
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long)]
    pub shading_lr: Option<f64>,
    /// Sources per target (default: all others up to 9 images, else 4).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub delight: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub flow_factor: usize,
    #[arg(long, default_value_t = 128)]
    pub base_channels: usize,
    /// Images to train on: the complement of this hold-out protocol.
    /// Defaults to the manifest's held-out list when present.
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log (`step,loss` CSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Checkpoint path (default: `<out>.ckpt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub manifest: PathBuf,
    #[arg(long, default_value = "explicit")]
    pub protocol: String,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    pub model: PathBuf,
    /// Normalized coordinate, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub coord: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EffectArgs {
    #[command(flatten)]
    pub render: RenderArgs,
    /// Axis index or dimension name.
    #[arg(long)]
    pub axis: String,
    #[arg(long, default_value_t = 0.1)]
    pub radius: f64,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Directory with the viewer's static assets.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Render(a) => render(&a),
        Command::Effect(a) => effect(&a),
        Command::Serve(a) => serve(a),
    }
}

fn numbers(raw: &str, expected: usize, what: &str) -> Result<Vec<f64>, CliError> {
    let v: Vec<f64> = raw
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("{what}: `{raw}` is not a comma separated list of numbers")))?;
    if v.len() != expected {
        return Err(CliError::Usage(format!("{what}: expected {expected} values, got {}", v.len())));
    }
    Ok(v)
}

fn protocol(raw: &str) -> Result<Option<HoldoutProtocol>, CliError> {
    if raw == "none" {
        return Ok(None);
    }
    Ok(Some(raw.parse()?))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let (scene, default_protocol) = match a.kind {
        SceneArg::Translate1d => (
            SyntheticScene::translate1d(a.seed, a.size, a.shift, a.frames)?,
            "middle_frame",
        ),
        SceneArg::LightfieldPlane => {
            let (m, n) = a
                .grid
                .split_once('x')
                .and_then(|(m, n)| Some((m.parse().ok()?, n.parse().ok()?)))
                .ok_or_else(|| CliError::Usage(format!("--grid `{}` is not MxN", a.grid)))?;
            (
                SyntheticScene::lightfield_plane(a.seed, a.size, a.disparity, m, n)?,
                "center",
            )
        }
        SceneArg::ShadowSweep => {
            let shadow = if a.no_shadow {
                None
            } else {
                let v = numbers(&a.shadow, 6, "--shadow")?;
                Some(ShadowGeometry {
                    x: v[0],
                    y: v[1],
                    width: v[2],
                    height: v[3],
                    travel: v[4],
                    penumbra: v[5],
                })
            };
            (
                SyntheticScene::shadow_sweep(a.seed, a.size, shadow, a.lights)?,
                "middle_frame",
            )
        }
    };
    let heldout = match protocol(a.protocol.as_deref().unwrap_or(default_protocol))? {
        Some(p) => Some(holdout_split(&scene.manifest(), p)?.heldout),
        None => None,
    };
    let manifest = scene.write(&a.out, heldout)?;
    eprintln!(
        "wrote {} images to {}",
        manifest.images.len(),
        a.out.display()
    );
    Ok(())
}

/// Indices to train on and to hold out.
fn split_indices(ds: &Dataset, protocol_arg: Option<&str>) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    let p = match protocol_arg {
        Some(raw) => protocol(raw)?,
        None if ds.manifest.heldout.is_some() => Some(HoldoutProtocol::Explicit),
        None => None,
    };
    Ok(match p {
        Some(p) => {
            let s = holdout_split(&ds.manifest, p)?;
            (s.train, s.heldout)
        }
        None => ((0..ds.images.len()).collect(), Vec::new()),
    })
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    let defaults = TrainConfig::default();
    TrainConfig {
        adam: AdamConfig {
            learning_rate: a.lr,
            ..AdamConfig::default()
        },
        shading_learning_rate: a.shading_lr.unwrap_or(defaults.shading_learning_rate),
        steps: a.steps,
        seed: a.seed,
        k: a.k,
        delight: a.delight,
        flow_factor: a.flow_factor,
        checkpoint_interval: a.checkpoint_every,
        base_channels: a.base_channels,
        ..defaults
    }
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let ds = Dataset::load(&a.manifest)?;
    let (train_idx, _) = split_indices(&ds, a.protocol.as_deref())?;
    let observations = ds.observations(&train_idx)?;
    let config = train_config(a);
    let mut trainer = match &a.resume {
        Some(path) => {
            let file = ModelFile::load(path)?;
            let ckpt = file
                .checkpoint()?
                .ok_or_else(|| CliError::Usage(format!("{} is not a checkpoint", path.display())))?;
            Trainer::resume(ckpt, observations, config.clone())?
        }
        None => Trainer::new(ds.manifest.dims.clone(), observations, config.clone())?,
    };
    let mut log: Option<BufWriter<File>> = match &a.log {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(io_err(p))?);
            // A resumed run rewrites the history it inherited.
            xfields::trainer::write_loss_log(trainer.losses(), &mut w).map_err(io_err(p))?;
            Some(w)
        }
        None => None,
    };
    let ckpt_path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.ckpt", a.out.display())));
    let name = ds.manifest.name.clone();
    let quiet = a.quiet;
    while !trainer.is_done() {
        let r = trainer.step()?;
        if let Some(w) = log.as_mut() {
            writeln!(w, "{},{}", r.step, r.loss).map_err(io_err(a.log.as_ref().unwrap()))?;
        }
        if !quiet && (r.step % 100 == 0 || trainer.is_done()) {
            eprintln!("step {:>6}  loss {:.6}", r.step, r.loss);
        }
        if let Some(every) = a.checkpoint_every.filter(|&e| e > 0) {
            if trainer.step_index() % every == 0 {
                checkpoint_file(&name, trainer.checkpoint(), trainer.observations(), &config).save(&ckpt_path)?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush().map_err(io_err(a.log.as_ref().unwrap()))?;
    }
    let model = Model {
        name,
        training: Some(TrainingMeta {
            config,
            steps_completed: trainer.step_index(),
            final_loss: trainer.losses().last().copied(),
            checkpoint: None,
        }),
        observations: trainer.observations().to_vec(),
        params: trainer.into_checkpoint().params,
    };
    model.save(&a.out)?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<EvalReport, CliError> {
    let model = Model::load(&a.model)?;
    let ds = Dataset::load(&a.manifest)?;
    let (_, held) = split_indices(&ds, Some(&a.protocol))?;
    let heldout = held
        .iter()
        .map(|&i| {
            Ok(Heldout {
                index: i,
                coord: ds.manifest.coord(i)?.values().to_vec(),
                image: ds.images[i].clone(),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let report = evaluate(&model, &heldout)?;
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json()).map_err(io_err(p))?;
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, report.to_csv()).map_err(io_err(p))?;
    }
    print!("{}", report.to_json());
    Ok(report)
}

fn frame_size(model: &Model, a: &RenderArgs) -> (usize, usize) {
    let (h, w) = model.resolution();
    (a.width.unwrap_or(w), a.height.unwrap_or(h))
}

pub fn render(a: &RenderArgs) -> Result<(), CliError> {
    let model = Model::load(&a.model)?;
    let coord = numbers(&a.coord, model.n_d(), "--coord")?;
    let (w, h) = frame_size(&model, a);
    save_png(&model.render_frame(&coord, w, h)?, &a.out)?;
    Ok(())
}

pub fn effect(a: &EffectArgs) -> Result<(), CliError> {
    let model = Model::load(&a.render.model)?;
    let coord = numbers(&a.render.coord, model.n_d(), "--coord")?;
    let axis = match a.axis.parse::<usize>() {
        Ok(i) => i,
        Err(_) => model
            .dims()
            .iter()
            .position(|d| d.name == a.axis)
            .ok_or_else(|| CliError::Usage(format!("unknown axis `{}`", a.axis)))?,
    };
    let (w, h) = frame_size(&model, &a.render);
    let img = model.render_effect(&coord, axis, a.radius, a.samples, w, h)?;
    save_png(&img, &a.render.out)?;
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    let model = Arc::new(Model::load(&a.model)?);
    let rt = tokio::runtime::Runtime::new().map_err(io_err(Path::new("tokio runtime")))?;
    rt.block_on(server::serve(model, a.bind, a.static_dir))?;
    Ok(())
}
