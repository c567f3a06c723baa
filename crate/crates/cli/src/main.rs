//! `sslab`: train, evaluate, probe and plot.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data,
//! checkpoint or model mismatch, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sslab_core::config::{synth_name, synth_rng, RunConfig};
use sslab_core::data::{pgm, split_of, synth_strokes, write_manifest, GrayImage, SynthOptions};
use sslab_core::eval::{evaluate_grid, metrics_csv};
use sslab_core::model::Model;
use sslab_core::plot::{render_svg, PlotSpec};
use sslab_core::probes::{
    make_variant_config, probe_delta_norms, probe_image_switch, probe_observed_mse, probe_quadrant_order,
    snapshot_reconstructions, switch_schedule, top_left_only, TrainingVariant,
};
use sslab_core::tokenize::mean_patch_baseline;
use sslab_core::train::train;
use sslab_core::Error;

/// Samples used to estimate the mean-patch baseline.
const BASELINE_SAMPLES: usize = 100_000;

#[derive(Parser)]
#[command(name = "sslab", version, about = "Patch-sequence image reconstruction experiments")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a key=value config.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a (V_I, V_Q) grid.
    Eval(EvalArgs),
    /// Run a probing experiment on a checkpoint.
    Probe(ProbeArgs),
    /// Render a CSV as an SVG line chart.
    Plot(PlotArgs),
    /// Write synthetic stroke images and a manifest.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Output directory (default: $SSLAB_OUT/train).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// default, truncated, expanded or prepended.
    #[arg(long, default_value = "default")]
    variant: String,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long, default_value = "16,32,64,128,256,512,1024,2048")]
    vi_list: String,
    #[arg(long, default_value = "256")]
    vq_list: String,
    #[arg(long, default_value_t = 64)]
    n_images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV path (default: $SSLAB_OUT/metrics.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run config for the data; defaults to config.txt beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Name in the model_id column (default: the model kind).
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args)]
struct ProbeArgs {
    checkpoint: PathBuf,
    /// snapshots, quadrants, switch, observed or delta.
    probe: String,
    /// Snapshot checkpoints (snapshots) or the stream length (observed).
    #[arg(long)]
    vi: Option<String>,
    /// V_I values for the delta probe.
    #[arg(long, default_value = "256,2048")]
    vi_list: String,
    /// Quadrant order, a permutation of 0,1,2,3.
    #[arg(long, default_value = "0,1,2,3")]
    order: String,
    /// Test image used by single-image probes.
    #[arg(long, default_value_t = 0)]
    image: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    csv: PathBuf,
    #[arg(long, default_value = "vi")]
    x: String,
    #[arg(long, default_value = "mean_mse")]
    y: String,
    #[arg(long)]
    series: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    side: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn out_root() -> PathBuf {
    std::env::var_os("SSLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_list(flag: &str, s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|x| match x.trim().parse::<usize>() {
            Ok(v) if v >= 1 => Ok(v),
            _ => Err(Error::Config(format!("--{flag}: {x:?} is not a positive integer"))),
        })
        .collect()
}

fn load_model(path: &Path) -> Result<Model, Error> {
    if !path.exists() {
        return Err(Error::Format {
            path: path.into(),
            msg: "checkpoint not found".into(),
        });
    }
    Model::load(path)
}

/// Config given explicitly, else the snapshot beside the checkpoint, else
/// the desk profile.
fn run_config(explicit: Option<&Path>, checkpoint: &Path, jobs: usize) -> Result<RunConfig, Error> {
    let beside = checkpoint.parent().map(|d| d.join("config.txt"));
    let mut c = match (explicit, beside) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(&p)?,
        _ => RunConfig::desk(),
    };
    c.train.jobs = jobs;
    Ok(c)
}

/// Run `f` on a pool capped at `jobs` workers (0 = all cores).
fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, Error> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

fn cmd_train(a: TrainArgs, jobs: usize) -> Result<(), Error> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.jobs = jobs;
    let cfg = make_variant_config(&cfg, TrainingVariant::parse(&a.variant)?)?;
    let data = cfg.dataset()?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    let out = a.out.unwrap_or_else(|| out_root().join("train"));
    let mut model = cfg.init_model()?;
    let outcome = train(&mut model, &cfg.train_config(), &data.train_images(), Some(&out))?;
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::Io {
        path: cfg_path,
        source: e,
    })?;
    println!(
        "trained {} steps, final loss {:e}, wrote {}",
        outcome.losses.len(),
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs, jobs: usize) -> Result<(), Error> {
    let vi = parse_list("vi-list", &a.vi_list)?;
    let vq = parse_list("vq-list", &a.vq_list)?;
    let model = load_model(&a.checkpoint)?;
    let cfg = run_config(a.config.as_deref(), &a.checkpoint, jobs)?;
    let data = cfg.dataset()?;
    let test = data.test_images();
    if test.len() < a.n_images {
        return Err(Error::Contract(format!(
            "{} test images requested, {} available",
            a.n_images,
            test.len()
        )));
    }
    let test = &test[..a.n_images];
    let mean = mean_patch_baseline(
        &data.train_images(),
        BASELINE_SAMPLES,
        &mut ChaCha8Rng::seed_from_u64(a.seed),
    )?;
    let id = a.model_id.unwrap_or_else(|| model.kind().as_str().to_string());
    let records = with_pool(jobs, || -> Result<_, Error> {
        let mut r = evaluate_grid(&model, &id, test, &vi, &vq, a.n_images, a.seed)?;
        r.extend(evaluate_grid(&Model::MeanPatch(mean), "Avg", test, &vi, &vq, a.n_images, a.seed)?);
        Ok(r)
    })??;
    let out = a.out.unwrap_or_else(|| out_root().join("metrics.csv"));
    write_file(&out, metrics_csv(&records).as_bytes())?;
    println!("wrote {} rows to {}", records.len(), out.display());
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.into(),
            source: e,
        })?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn cmd_probe(a: ProbeArgs, jobs: usize) -> Result<(), Error> {
    const PROBES: [&str; 5] = ["snapshots", "quadrants", "switch", "observed", "delta"];
    if !PROBES.contains(&a.probe.as_str()) {
        return Err(Error::Config(format!("unknown probe {:?}; expected one of {PROBES:?}", a.probe)));
    }
    let model = load_model(&a.checkpoint)?;
    let cfg = run_config(a.config.as_deref(), &a.checkpoint, jobs)?;
    let seed = a.seed.unwrap_or(cfg.probe.seed);
    let t_i = cfg.train.t_i_max;
    let data = cfg.dataset()?;
    let test = data.test_images();
    let pick = |k: usize| -> Result<&GrayImage, Error> {
        test.get(k)
            .ok_or_else(|| Error::Contract(format!("test image {k} not available ({} in split)", test.len())))
    };
    let mut id = a.model_id.clone().unwrap_or_else(|| model.kind().as_str().to_string());
    let report = match a.probe.as_str() {
        "snapshots" => {
            let cps = match &a.vi {
                Some(s) => parse_list("vi", s)?,
                None => vec![t_i / 4, t_i / 2, t_i, 2 * t_i, 4 * t_i, 8 * t_i],
            };
            let len = *cps.last().unwrap();
            snapshot_reconstructions(&model, pick(a.image)?, &cps, len, seed)?
        }
        "quadrants" => {
            let o = parse_list_zero("order", &a.order)?;
            let order: [usize; 4] = o
                .try_into()
                .map_err(|_| Error::Config("--order needs four quadrant indices".into()))?;
            let per = match cfg.probe.tokens_per_quadrant {
                0 => (t_i / 4).max(1),
                n => n,
            };
            id = format!("{id}_order{}", order.iter().map(|q| q.to_string()).collect::<String>());
            probe_quadrant_order(&model, &top_left_only(pick(a.image)?), order, per, seed)?
        }
        "switch" => {
            let each = match cfg.probe.tokens_each {
                0 => 16 * t_i,
                n => n,
            };
            let (x, y) = (pick(a.image)?, pick(a.image + 1)?);
            probe_image_switch(&model, x, y, each, &switch_schedule(each), seed)?
        }
        "observed" => {
            let vi = match &a.vi {
                Some(s) => *parse_list("vi", s)?.last().unwrap(),
                None => 16 * t_i,
            };
            probe_observed_mse(&model, pick(a.image)?, vi, seed)?
        }
        _ => {
            let vis = parse_list("vi-list", &a.vi_list)?;
            probe_delta_norms(&model, &test, &vis, cfg.probe.t_horizon, cfg.probe.n_sequences, seed)?.report()
        }
    };
    let root = a.out.unwrap_or_else(|| out_root().join("probes"));
    let dir = report.write(&root, &id, &cfg.to_text())?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn parse_list_zero(flag: &str, s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("--{flag}: {x:?} is not an integer")))
        })
        .collect()
}

fn cmd_plot(a: PlotArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&a.csv).map_err(|e| Error::Config(format!("cannot read {}: {e}", a.csv.display())))?;
    let mut spec = PlotSpec::new(&a.x, &a.y);
    spec.series = a.series;
    write_file(&a.out, render_svg(&text, &spec)?.as_bytes())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    if a.n == 0 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let opts = SynthOptions {
        side: a.side,
        ..SynthOptions::default()
    };
    let mut rows = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let img = synth_strokes(&mut synth_rng(a.seed, i), &opts);
        let name = synth_name(i);
        pgm::write(&a.out.join(&name), &img)?;
        let (split, hash) = split_of(&name);
        rows.push((name, split, hash));
    }
    write_manifest(&a.out.join("manifest.csv"), &rows)?;
    println!("wrote {} images to {}", a.n, a.out.display());
    Ok(())
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
    let jobs = cli.jobs;
    let r = match cli.cmd {
        Cmd::Train(a) => cmd_train(a, jobs),
        Cmd::Eval(a) => cmd_eval(a, jobs),
        Cmd::Probe(a) => cmd_probe(a, jobs),
        Cmd::Plot(a) => cmd_plot(a),
        Cmd::SynthData(a) => cmd_synth(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
