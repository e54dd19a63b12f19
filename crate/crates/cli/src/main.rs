use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use spikeflow::camera_sim::{self, Motion, SceneSpec};
use spikeflow::eval::{self, EvalReport};
use spikeflow::intensity::{self, EstimatorTerms, FusionWeights};
use spikeflow::train::{self, Sequence, SpikeFlowModel, TrainConfig, Trainer};
use spikeflow::{rng, CameraConfig, FlowField, NoiseMode, SpikeStream};

const STREAM_FILE: &str = "stream.spk";
const FLOW_FILE: &str = "flow.flo";
const MANIFEST_FILE: &str = "manifest.txt";
const CHECKPOINT_FILE: &str = "model.spkw";

#[derive(Parser)]
#[command(name = "spikeflow", version, about = "Spike camera simulation, reconstruction and unsupervised optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a moving scene; writes stream.spk, flow.flo and manifest.txt.
    Simulate(SimulateArgs),
    /// Reconstruct intensity at one frame as an 8-bit PGM.
    Reconstruct(ReconstructArgs),
    /// Train a flow model without supervision.
    Train(TrainArgs),
    /// Score a checkpoint on scenes with ground truth.
    Eval(EvalArgs),
    /// Render a flow field with the Middlebury colour wheel.
    Flowviz(FlowvizArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKindArg {
    Translate,
    Rotate,
    TwoLayer,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "translate")]
    kind: SceneKindArg,
    #[arg(long)]
    seed: u64,
    /// Pixels per frame as `u,v` (background velocity for two-layer).
    #[arg(long, default_value = "0.1,-0.05", value_parser = parse_pair)]
    velocity: [f64; 2],
    /// Foreground velocity for two-layer scenes.
    #[arg(long, default_value = "-0.2,0.1", value_parser = parse_pair)]
    foreground: [f64; 2],
    /// Radians per frame for rotating scenes.
    #[arg(long, default_value_t = 0.002)]
    omega: f64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 240)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    substeps: usize,
    #[arg(long, value_enum, default_value = "deterministic")]
    noise: NoiseArg,
    /// Gap of the ground-truth pair.
    #[arg(long, default_value = "10", value_parser = parse_dt)]
    dt: usize,
    /// First frame of the ground-truth pair (default: middle of the stream).
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Deterministic,
    Poisson,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    WindowShort,
    WindowLong,
    #[value(name = "interval-1")]
    Interval1,
    #[value(name = "interval-2")]
    Interval2,
    Fused,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    t: usize,
    #[arg(long, value_enum, default_value = "fused")]
    method: Method,
    /// Short window half length.
    #[arg(long, default_value_t = 40)]
    d_s: usize,
    /// Long window half length.
    #[arg(long, default_value_t = 100)]
    d_l: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `key=value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_dt)]
    dt: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directories written by `simulate`. Without any, a translating scene is
    /// generated from the seed.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Displacement over one `dt` for the generated scene.
    #[arg(long, default_value = "1,-0.5", value_parser = parse_pair)]
    displacement: [f64; 2],
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Defaults to the gap stored in the checkpoint.
    #[arg(long, value_parser = parse_dt)]
    dt: Option<usize>,
    /// Evenly spaced pairs per scene.
    #[arg(long, default_value_t = 5)]
    pairs: usize,
    /// Score only the pair starting here (for scenes whose flow varies in time).
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlowvizArgs {
    /// A .flo file; alternatively --checkpoint with --data and --t0.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long, value_parser = parse_dt)]
    dt: Option<usize>,
    /// Fixed colour scale; default is the 99th percentile magnitude.
    #[arg(long)]
    max_magnitude: Option<f64>,
    /// Output image; `.png` or `.ppm`.
    #[arg(long)]
    out: PathBuf,
}

fn parse_dt(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ (10 | 20)) => Ok(v),
        _ => Err(format!("dt must be 10 or 20, got {s:?}")),
    }
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected u,v, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    Ok([p(a)?, p(b)?])
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPIKEFLOW_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SPIKEFLOW_THREADS={v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Train(a) => match a.precision {
            Precision::F32 => train_cmd::<f32>(a),
            Precision::F64 => train_cmd::<f64>(a),
        },
        Command::Eval(a) => eval_cmd(a),
        Command::Flowviz(a) => flowviz(a),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_stream(path: &Path) -> Result<SpikeStream> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    SpikeStream::decode(std::io::BufReader::new(f)).with_context(|| format!("decoding {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let texture = train::standard_texture(a.size, rng::derive_seed(a.seed, "scene"));
    let scene = match a.kind {
        SceneKindArg::Translate => SceneSpec::translate(a.size, a.size, a.velocity, texture),
        SceneKindArg::Rotate => SceneSpec::rotate(a.size, a.size, a.omega, texture),
        SceneKindArg::TwoLayer => {
            let half = a.size as f64 / 2.0;
            SceneSpec {
                width: a.size,
                height: a.size,
                texture,
                motion: Motion::TwoLayer {
                    background: a.velocity,
                    foreground: a.foreground,
                    center: [half, half],
                    radius: a.size as f64 / 4.0,
                    texture: train::standard_texture(a.size, rng::derive_seed(a.seed, "foreground")),
                },
            }
        }
    };
    let camera = CameraConfig {
        noise: match a.noise {
            NoiseArg::Deterministic => NoiseMode::Deterministic,
            NoiseArg::Poisson => NoiseMode::Poisson,
        },
        seed: rng::derive_seed(a.seed, "camera"),
        ..CameraConfig::default()
    };
    let t0 = a.t0.unwrap_or(a.frames / 2);
    if t0 + a.dt >= a.frames {
        bail!("ground-truth pair ({t0}, {}) exceeds {} frames", t0 + a.dt, a.frames);
    }
    let stream = camera_sim::simulate(&scene, &camera, a.frames, a.substeps)?;
    let gt = camera_sim::ground_truth_flow(&scene, t0, t0 + a.dt)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join(STREAM_FILE), stream.to_bytes())?;
    let mut flo = Vec::new();
    eval::write_flo(&gt.flow, &mut flo)?;
    write(&a.out.join(FLOW_FILE), flo)?;
    let mut manifest = camera_sim::manifest(&scene, &camera, a.frames, a.substeps);
    manifest.push_str(&format!("scene_seed={}\nt0={t0}\ndt={}\n", a.seed, a.dt));
    write(&a.out.join(MANIFEST_FILE), manifest)?;
    println!(
        "{} frames, {} spikes -> {}",
        stream.len(),
        stream.total_spikes(),
        a.out.display()
    );
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let stream = read_stream(&a.input)?;
    if a.t >= stream.len() {
        bail!("frame {} outside stream of {} frames", a.t, stream.len());
    }
    let index = stream.index();
    let map = match a.method {
        Method::WindowShort => intensity::window_estimate::<f64>(&index, a.t, a.d_s),
        Method::WindowLong => intensity::window_estimate::<f64>(&index, a.t, a.d_l),
        Method::Interval1 => intensity::interval_estimate::<f64>(&index, a.t, 1)?.map,
        Method::Interval2 => intensity::interval_estimate::<f64>(&index, a.t, 2)?.map,
        Method::Fused => {
            let cfg = intensity::ReconConfig {
                short_half: a.d_s,
                long_half: a.d_l,
                ..intensity::ReconConfig::default()
            };
            let terms = EstimatorTerms::<f64>::compute(&index, a.t, &cfg)?;
            let w = FusionWeights::uniform(stream.height(), stream.width(), [0.25; 4])?;
            intensity::fuse(&terms, &w)?
        }
    };
    write(&a.out, map.to_pgm())
}

/// Loads a `simulate` output directory. The scene name is the directory name.
fn load_sequence(dir: &Path) -> Result<Sequence> {
    let stream = read_stream(&dir.join(STREAM_FILE))?;
    let flo = dir.join(FLOW_FILE);
    let gt = if flo.exists() {
        let f = fs::File::open(&flo).with_context(|| format!("opening {}", flo.display()))?;
        Some(eval::read_flo(std::io::BufReader::new(f))?.cast::<f64>())
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(Sequence::new(name, stream, gt)?)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::parse(&text)?;
    let from_file = text
        .lines()
        .any(|l| l.split('#').next().unwrap_or("").split('=').next().map(str::trim) == Some("seed"));
    if a.seed.is_none() && !from_file {
        bail!("a seed is required (--seed or seed= in --config)");
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.dt {
        cfg.dt = d;
    }
    if let Some(n) = a.iters {
        cfg.iters = n;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("expected KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd<T: spikeflow::Scalar>(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let sequences = if a.data.is_empty() {
        let frames = 240.max(cfg.window_len + cfg.dt + 40);
        vec![Sequence::translate("translate", 32, a.displacement, cfg.dt, frames, cfg.seed)?]
    } else {
        a.data.iter().map(|d| load_sequence(d)).collect::<Result<Vec<_>>>()?
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    print!("{cfg}");

    let mut trainer = Trainer::<T>::new(cfg.clone(), sequences)?;
    let initial_loss = trainer.eval_loss(3)?;
    let log = trainer.run(|e, s| {
        let aee = e.aee.map(|v| format!(" aee {v:.4}")).unwrap_or_default();
        println!("iter {} loss {:.5} photo {:.5} smooth {:.5}{aee}", e.iter, s.loss, s.photometric, s.smoothness);
    })?;
    let final_loss = trainer.eval_loss(3)?;
    let eval = trainer.evaluate(5)?;

    let mut ckpt = Vec::new();
    trainer.model.save(cfg.dt, &mut ckpt)?;
    write(&a.out.join(CHECKPOINT_FILE), ckpt)?;
    let report = json!({
        "config": cfg.to_map(),
        "params": trainer.model.param_count(),
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "log": log.iter().map(|e| json!({"iter": e.iter, "loss": e.loss, "aee": e.aee})).collect::<Vec<_>>(),
        "eval": eval.to_json(),
    });
    write(&a.out.join("train_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(m) = eval.mean_aee() {
        println!("mean aee {m:.4}");
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(SpikeFlowModel<f64>, usize)> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    SpikeFlowModel::load(std::io::BufReader::new(f)).with_context(|| format!("loading {}", path.display()))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (model, trained_dt) = load_model(&a.checkpoint)?;
    let dt = a.dt.unwrap_or(trained_dt);
    let mut report = EvalReport::default();
    report.config.insert("checkpoint".into(), a.checkpoint.display().to_string());
    report.config.insert("dt".into(), dt.to_string());
    report.config.insert("trained_dt".into(), trained_dt.to_string());
    report.config.insert("L".into(), (2 * model.window_half() + 1).to_string());
    match a.t0 {
        Some(t0) => report.config.insert("t0".into(), t0.to_string()),
        None => report.config.insert("pairs".into(), a.pairs.to_string()),
    };
    for dir in &a.data {
        let seq = load_sequence(dir)?;
        let Some(gt) = &seq.ground_truth else {
            bail!("{} has no {FLOW_FILE}", dir.display());
        };
        let score = match a.t0 {
            Some(t0) => {
                let (f, _) = model.estimate(&seq.stream, t0, t0 + dt)?;
                eval::SceneScore::compute(&f, gt)?
            }
            None => train::evaluate_sequence(&model, &seq, dt, a.pairs)?.expect("ground truth present"),
        };
        println!("{}: aee {:.4} ({} valid)", seq.name, score.aee, score.n_valid);
        report.scenes.insert(seq.name.clone(), score);
    }
    if let Some(m) = report.mean_aee() {
        println!("mean aee {m:.4}");
    }
    let path = if a.out.extension().is_some() {
        a.out.clone()
    } else {
        fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        a.out.join("eval_report.json")
    };
    write(&path, report.to_json_string() + "\n")
}

fn flowviz(a: FlowvizArgs) -> Result<()> {
    let flow: FlowField<f64> = match (&a.input, &a.checkpoint) {
        (Some(p), None) => {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            eval::read_flo(std::io::BufReader::new(f))?.cast()
        }
        (None, Some(ck)) => {
            let (Some(data), Some(t0)) = (&a.data, a.t0) else {
                bail!("--checkpoint needs --data and --t0");
            };
            let (model, trained_dt) = load_model(ck)?;
            let stream = read_stream(&data.join(STREAM_FILE))?;
            model.estimate(&stream, t0, t0 + a.dt.unwrap_or(trained_dt))?.0
        }
        _ => bail!("give exactly one of --in or --checkpoint"),
    };
    let img = eval::flow_to_color(&flow, a.max_magnitude)?;
    match a.out.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write(&a.out, img.to_ppm()),
        Some("png") => {
            let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
                .context("image buffer size")?;
            buf.save(&a.out).with_context(|| format!("writing {}", a.out.display()))
        }
        _ => bail!("output must end in .png or .ppm"),
    }
}
