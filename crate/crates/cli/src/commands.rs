use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use crowdnav_core::mapping::{
    dataset_action_stats, read_dataset, records_from_observations, split_dataset, write_dataset, TrainingRecord,
};
use crowdnav_core::neuralnet::{
    evaluate_mse, forward_batch, load_params_for, save_params, train, write_loss_history, ExecutionMode, Samples,
};
use crowdnav_core::simworld::{pilot_dataset, run_episode, write_trajectory, NetworkPolicy, Policy, ScriptedPilot, DT};
use crowdnav_core::tracking::{labelled_steps, observations_from_detections, parse_detection_log};
use crowdnav_core::geometry::{homography_fit, max_residual};
use crowdnav_core::{Architecture, NetworkParams, Point2, ScenarioClass, ScenarioSpec};
use crowdnav_server::{Server, ServerConfig};

use crate::config::PipelineConfig;

/// Bad invocation or unusable input; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "crowdnav", version, about = "Crowd navigation pipeline: rectify, build datasets, train, evaluate, simulate, serve")]
pub struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the floor homography to `sx,sy,dx,dy` correspondence lines.
    FitHomography { correspondences: PathBuf },
    /// Build a training dataset from a detection log or the scripted pilot.
    BuildDataset {
        /// `frame,kind,x,y` detection log.
        #[arg(required_unless_present = "pilot")]
        detections: Option<PathBuf>,
        /// Record this many examples from the scripted pilot instead.
        #[arg(long, conflicts_with = "detections")]
        pilot: Option<usize>,
    },
    /// Train on 90% of a dataset and report train/test error.
    Train {
        dataset: PathBuf,
        /// Write the per-step loss history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Spread each batch over all cores.
        #[arg(long)]
        parallel: bool,
    },
    /// Report the error of saved parameters on the same split as `train`.
    Eval {
        #[arg(long)]
        params: PathBuf,
        dataset: PathBuf,
    },
    /// Run closed-loop episodes and print one row per episode.
    Simulate {
        /// `oracle` or a parameter file.
        #[arg(long, default_value = "oracle")]
        policy: String,
        #[arg(long)]
        scenario: Option<ScenarioClass>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Serve the tele-operation WebSocket protocol until interrupted.
    Serve {
        /// Parameters enabling policy mode.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        scenario: Option<ScenarioClass>,
        #[arg(long)]
        record_dir: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

struct Ctx {
    cfg: PipelineConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, what: &str) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| usage(format!("--out <path> is required for the {what}")))
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    cfg.homography_fit.seed = cfg.seed;
    let ctx = Ctx { cfg, out: cli.common.out };
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::FitHomography { correspondences } => fit_homography(&ctx, &correspondences, &mut stdout),
        Command::BuildDataset { detections, pilot } => build_dataset(&ctx, detections.as_deref(), pilot, &mut stdout),
        Command::Train { dataset, history, parallel } => {
            cmd_train(&ctx, &dataset, history.as_deref(), parallel, &mut stdout)
        }
        Command::Eval { params, dataset } => eval(&ctx, &params, &dataset, &mut stdout),
        Command::Simulate { policy, scenario, episodes, max_steps } => {
            simulate(&ctx, &policy, scenario, episodes, max_steps, &mut stdout)
        }
        Command::Serve { params, addr, scenario, record_dir } => {
            drop(stdout);
            serve(&ctx, params.as_deref(), addr, scenario, record_dir)
        }
        Command::ShowConfig => Ok(write!(stdout, "{}", ctx.cfg.to_toml())?),
    }
}

fn parse_correspondences(text: &str) -> anyhow::Result<(Vec<Point2>, Vec<Point2>)> {
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| usage(format!("line {}: {e}", i + 1)))?;
        let [sx, sy, dx, dy] = v[..] else {
            return Err(usage(format!("line {}: expected sx,sy,dx,dy", i + 1)));
        };
        src.push(Point2::new(sx, sy));
        dst.push(Point2::new(dx, dy));
    }
    if src.len() < 4 {
        return Err(usage(format!("need at least 4 correspondences, got {}", src.len())));
    }
    Ok((src, dst))
}

fn fit_homography(ctx: &Ctx, path: &Path, w: &mut impl Write) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (src, dst) = parse_correspondences(&text)?;
    let fit = homography_fit(&src, &dst, &ctx.cfg.homography_fit)?;
    let line = fit.homography.entries().map(|v| v.to_string()).join(" ");
    match &ctx.out {
        Some(out) => std::fs::write(out, format!("{line}\n")).with_context(|| format!("writing {}", out.display()))?,
        None => writeln!(w, "{line}")?,
    }
    writeln!(w, "final loss: {:e}", fit.final_loss)?;
    writeln!(w, "max residual: {:e} px", max_residual(&fit.homography, &src, &dst)?)?;
    Ok(())
}

fn records_from_log(cfg: &PipelineConfig, path: &Path) -> anyhow::Result<Vec<TrainingRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let detections = parse_detection_log(BufReader::new(file))?;
    let observations = observations_from_detections(&detections, &cfg.floor_scale()?, &cfg.rectification()?)?;
    let steps = labelled_steps(&observations, cfg.dataset.dt)?;
    let [gx, gy] = cfg.dataset.goal;
    Ok(records_from_observations(&observations, &steps, Point2::new(gx, gy), &cfg.dataset.walls, &cfg.map))
}

fn build_dataset(ctx: &Ctx, detections: Option<&Path>, pilot: Option<usize>, w: &mut impl Write) -> anyhow::Result<()> {
    let out = ctx.out("dataset")?;
    let records = match (detections, pilot) {
        (_, Some(n)) => pilot_dataset(n, ctx.cfg.seed)?,
        (Some(path), None) => records_from_log(&ctx.cfg, path)?,
        (None, None) => return Err(usage("give a detection log or --pilot <count>")),
    };
    if records.is_empty() {
        anyhow::bail!("empty dataset: no usable labelled frames");
    }
    write_dataset(out, &records).with_context(|| format!("writing {}", out.display()))?;
    let stats = dataset_action_stats(&records)?;
    writeln!(w, "records: {}", records.len())?;
    writeln!(w, "mean|speed|,mean|rotation|")?;
    writeln!(w, "{},{}", stats.mean_abs_speed, stats.mean_abs_rotation)?;
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<Vec<TrainingRecord>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn split(cfg: &PipelineConfig, records: &[TrainingRecord]) -> anyhow::Result<(Samples<f32>, Samples<f32>)> {
    if records.len() < 10 {
        return Err(usage(format!("dataset too small to split: {} records, need at least 10", records.len())));
    }
    let (train_set, test_set) = split_dataset(records, cfg.dataset.test_fraction, cfg.seed)?;
    Ok((Samples::from_records(&train_set), Samples::from_records(&test_set)))
}

/// Mean absolute predicted and recorded actions over `data`.
fn action_averages(params: &NetworkParams<f32>, data: &Samples<f32>) -> anyhow::Result<([f64; 2], [f64; 2])> {
    let (mut predicted, mut recorded) = ([0.0; 2], [0.0; 2]);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(128) {
        let part = data.select(chunk);
        let out = forward_batch(params, &part.input())?;
        for (k, (y, t)) in out.iter().zip(part.targets()).enumerate() {
            predicted[k % 2] += f64::from(y.abs());
            recorded[k % 2] += f64::from(t.abs());
        }
    }
    let n = data.len() as f64;
    Ok((predicted.map(|v| v / n), recorded.map(|v| v / n)))
}

fn report(params: &NetworkParams<f32>, train_data: &Samples<f32>, test_data: &Samples<f32>, w: &mut impl Write) -> anyhow::Result<()> {
    writeln!(w, "train records: {}", train_data.len())?;
    writeln!(w, "test records: {}", test_data.len())?;
    writeln!(w, "train MSE: {}", evaluate_mse(params, train_data)?)?;
    writeln!(w, "test MSE: {}", evaluate_mse(params, test_data)?)?;
    let (predicted, recorded) = action_averages(params, test_data)?;
    writeln!(w, "Speed average (cm/s): [predicted {:.2}, recorded {:.2}]", predicted[0], recorded[0])?;
    writeln!(w, "Rotation average (deg): [predicted {:.2}, recorded {:.2}]", predicted[1], recorded[1])?;
    Ok(())
}

fn cmd_train(ctx: &Ctx, dataset: &Path, history: Option<&Path>, parallel: bool, w: &mut impl Write) -> anyhow::Result<()> {
    let out = ctx.out("parameter file")?;
    let records = load_dataset(dataset)?;
    let (train_data, test_data) = split(&ctx.cfg, &records)?;
    let mut cfg = ctx.cfg.train.clone();
    if parallel {
        cfg.mode = ExecutionMode::Parallel;
    }
    let init = NetworkParams::init(Architecture::crowd_cnn(), ctx.cfg.seed)?;
    let outcome = train(init, &train_data, &cfg, |_| {})?;
    save_params(&outcome.params, out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = history {
        let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
        let mut file = BufWriter::new(file);
        write_loss_history(&mut file, &outcome.history)?;
        file.flush()?;
    }
    writeln!(w, "steps: {}", cfg.steps)?;
    report(&outcome.params, &train_data, &test_data, w)
}

fn load_network(path: &Path) -> anyhow::Result<NetworkParams<f32>> {
    load_params_for(path, &Architecture::crowd_cnn())
        .map_err(|e| usage(format!("cannot use parameter file {}: {e}", path.display())))
}

fn eval(ctx: &Ctx, params: &Path, dataset: &Path, w: &mut impl Write) -> anyhow::Result<()> {
    let params = load_network(params)?;
    let records = load_dataset(dataset)?;
    let (train_data, test_data) = split(&ctx.cfg, &records)?;
    report(&params, &train_data, &test_data, w)
}

fn simulate(
    ctx: &Ctx,
    policy: &str,
    scenario: Option<ScenarioClass>,
    episodes: Option<usize>,
    max_steps: Option<usize>,
    w: &mut impl Write,
) -> anyhow::Result<()> {
    let mut policy: Box<dyn Policy> = match policy {
        "oracle" => Box::new(ScriptedPilot),
        path => Box::new(NetworkPolicy { map: ctx.cfg.map, ..NetworkPolicy::new(load_network(Path::new(path))?) }),
    };
    let class = scenario.unwrap_or(ctx.cfg.scenario.class);
    let episodes = episodes.unwrap_or(ctx.cfg.scenario.episodes);
    let max_steps = max_steps.unwrap_or(ctx.cfg.scenario.max_steps);
    if episodes == 0 {
        return Err(usage("episodes must be at least 1"));
    }
    if let Some(dir) = &ctx.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    writeln!(w, "episode,success,steps,collisions,min_clearance")?;
    let mut successes = 0;
    for k in 0..episodes {
        let spec = ScenarioSpec::random(class, ctx.cfg.seed + k as u64);
        let r = run_episode(policy.as_mut(), &spec, max_steps, DT)?;
        successes += usize::from(r.success);
        writeln!(w, "{k},{},{},{},{}", r.success, r.steps_taken, r.collisions, r.min_clearance)?;
        if let Some(dir) = &ctx.out {
            let path = dir.join(format!("episode-{k:03}.csv"));
            let mut file = BufWriter::new(File::create(&path).with_context(|| format!("writing {}", path.display()))?);
            write_trajectory(&mut file, &r)?;
            file.flush()?;
        }
    }
    writeln!(w, "success_rate,{}", successes as f64 / episodes as f64)?;
    Ok(())
}

fn serve(
    ctx: &Ctx,
    params: Option<&Path>,
    addr: Option<String>,
    scenario: Option<ScenarioClass>,
    record_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let params = params.map(load_network).transpose()?;
    let spec = ScenarioSpec::random(scenario.unwrap_or(ctx.cfg.scenario.class), ctx.cfg.seed);
    let mut cfg = ServerConfig::new(
        addr.unwrap_or_else(|| ctx.cfg.serve.addr.clone()),
        spec,
        record_dir.unwrap_or_else(|| ctx.cfg.serve.record_dir.clone()),
    );
    cfg.params = params;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let server = Server::bind(cfg).await?;
        let interrupted = interrupt()?;
        println!("listening on ws://{}", server.local_addr()?);
        std::io::stdout().flush()?;
        server.run(interrupted).await?;
        Ok(())
    })
}

/// Installs the SIGINT handler now, so an interrupt arriving before the
/// server loop first polls is not lost.
#[cfg(unix)]
fn interrupt() -> std::io::Result<impl std::future::Future<Output = ()>> {
    let mut sig = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::interrupt())?;
    Ok(async move {
        sig.recv().await;
    })
}

#[cfg(not(unix))]
fn interrupt() -> std::io::Result<impl std::future::Future<Output = ()>> {
    Ok(async {
        let _ = tokio::signal::ctrl_c().await;
    })
}
