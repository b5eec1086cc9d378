//! `changenet`: run, calibrate and analyse change-based CNN inference on
//! frame sequences.
//!
//! On failure a single `error[<category>]: <message>` line is printed to
//! stderr and the process exits with status 1 (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use changenet::analysis::{memory_accounting, MemoryMode, OpReport};
use changenet::calibration::{
    layer_increments, select_thresholds, sweep_threshold_factor, Aggregation, CalibConfig, EvalConfig, EvalSequence,
    EvalWindow, LossMetric,
};
use changenet::io::{frames, manifest, report, synth, write_atomic};
use changenet::network::{convert_to_cb, CbNetwork, DenseNetwork, Reference, RunOptions};
use changenet::{presets, DetectionPolicy, NetworkSpec, Tensor3};

#[derive(Parser)]
#[command(
    name = "changenet",
    version,
    about = "Change-based CNN inference for static-camera video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a model over a frame sequence and write per-frame, per-layer statistics.
    Run(RunArgs),
    /// Select per-layer thresholds under a loss budget.
    Calibrate(CalibrateArgs),
    /// Scale a threshold vector jointly and record loss and operations.
    Sweep(SweepArgs),
    /// Print the memory accounting of a model as CSV.
    MemReport(MemArgs),
    /// Print dense, change-based and fine-grained operation counts as CSV.
    OpReport(OpArgs),
    /// Generate a seeded synthetic static-camera sequence.
    GenSynthetic(SynthArgs),
    /// Write a bundled topology with seeded random weights.
    GenModel(GenModelArgs),
}

#[derive(Args)]
struct ThresholdArgs {
    /// Threshold vector: a file of `name value` lines, or comma-separated values.
    #[arg(long)]
    thresholds: Option<String>,
    /// Multiplies every threshold (a uniform vector of 1 without --thresholds).
    #[arg(long)]
    threshold_factor: Option<f64>,
    /// Per-layer policies, e.g. `conv6=reuse,conv7=reuse`, or a file of them.
    #[arg(long)]
    policy_map: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// Sequence directory or its `sequence.txt`.
    #[arg(long)]
    frames: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    /// Statistics CSV (stdout if omitted).
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// Also run the dense network and record the loss against it.
    #[arg(long)]
    compare_dense: bool,
    /// Write the dense reference outputs as a frame sequence.
    #[arg(long)]
    ref_out: Option<PathBuf>,
    /// Write the change-based outputs as a frame sequence.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Metric::Mse)]
    metric: Metric,
    /// Record wall-clock times (otherwise written as 0 for reproducible output).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Evaluation sequence; repeat for several.
    #[arg(long, required = true, num_args = 1..)]
    frames: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Metric::Mse)]
    metric: Metric,
    #[arg(long, value_enum, default_value_t = Window::AfterBootstrap)]
    window: Window,
    #[arg(long, value_enum, default_value_t = Aggregate::Mean)]
    aggregation: Aggregate,
    #[arg(long)]
    policy_map: Option<String>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Allowed loss increment per layer.
    #[arg(long)]
    budget: f64,
    /// Per-layer budget overrides, e.g. `conv1=0.001`.
    #[arg(long)]
    layer_budget: Vec<String>,
    #[arg(long, default_value_t = 0.01)]
    init_tau: f32,
    #[arg(long, default_value_t = 1.1)]
    growth: f32,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Fail instead of reporting when a layer reaches the iteration cap.
    #[arg(long)]
    fail_on_cap: bool,
    /// Selected threshold vector.
    #[arg(long)]
    out: PathBuf,
    /// Loss-versus-threshold trace CSV.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Base threshold vector (file or comma-separated values).
    #[arg(long)]
    base_tau: String,
    #[arg(long, default_value = "0:2:0.25")]
    factors: String,
    /// Trade-off CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct ModelSource {
    #[arg(long, conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Bundled topology instead of a manifest: `scene` or `compact`.
    #[arg(long)]
    preset: Option<String>,
    /// Input height for --preset (defaults to the topology's canonical size).
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
struct MemArgs {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long, value_enum, default_value_t = MemMode::All)]
    mode: MemMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    /// First frame (1-based) included in the totals.
    #[arg(long, default_value_t = 1)]
    from: usize,
    /// Estimate fine-grained operation counts.
    #[arg(long)]
    fine_grained: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long = "n-frames", default_value_t = 20)]
    n_frames: usize,
    #[arg(long, default_value_t = 2)]
    objects: usize,
    #[arg(long, default_value_t = 10)]
    size: usize,
    /// Per-frame displacement `dx,dy`.
    #[arg(long, default_value = "1,0", allow_hyphen_values = true)]
    velocity: String,
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write 8-bit PGM/PPM instead of raw f32 frames.
    #[arg(long)]
    pnm: bool,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value = "scene")]
    preset: String,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path; the blob is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "weights.f32")]
    blob: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Mse,
    PixelAccuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Window {
    AfterBootstrap,
    Last,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregate {
    Mean,
    Worst,
}

#[derive(Clone, Copy, ValueEnum)]
enum MemMode {
    Naive,
    Shared,
    Cb,
    All,
}

impl From<Metric> for LossMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Mse => LossMetric::Mse,
            Metric::PixelAccuracy => LossMetric::PixelAccuracy,
        }
    }
}

fn conv_names(spec: &NetworkSpec) -> Vec<String> {
    spec.conv_layers()
        .iter()
        .map(|&i| spec.layers[i].name.clone())
        .collect()
}

/// Reads `arg` as a file if one exists at that path, otherwise uses it as
/// inline text.
fn file_or_inline(arg: &str) -> Result<(String, PathBuf)> {
    let p = Path::new(arg);
    if p.is_file() {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok((text, p.to_path_buf()))
    } else {
        Ok((arg.replace(',', "\n"), PathBuf::from("<command line>")))
    }
}

fn threshold_vector(arg: &str, names: &[String]) -> Result<Vec<f32>> {
    let (text, origin) = file_or_inline(arg)?;
    Ok(report::parse_thresholds(&text, &origin, names)?)
}

fn policies(arg: Option<&str>, names: &[String]) -> Result<Vec<DetectionPolicy>> {
    match arg {
        None => Ok(vec![DetectionPolicy::Detect; names.len()]),
        Some(a) => {
            let p = Path::new(a);
            let (text, origin) = if p.is_file() {
                (std::fs::read_to_string(p)?, p.to_path_buf())
            } else {
                (a.to_string(), PathBuf::from("<command line>"))
            };
            Ok(report::parse_policy_map(&text, &origin, names)?)
        }
    }
}

fn resolve_thresholds(args: &ThresholdArgs, names: &[String]) -> Result<Vec<f32>> {
    let base = match &args.thresholds {
        Some(t) => threshold_vector(t, names)?,
        None if args.threshold_factor.is_some() => vec![1.0; names.len()],
        None => vec![0.0; names.len()],
    };
    let factor = args.threshold_factor.unwrap_or(1.0);
    if !(factor.is_finite() && factor >= 0.0) {
        bail!(changenet::Error::Config(format!(
            "threshold factor must be >= 0, got {factor}"
        )));
    }
    Ok(base.iter().map(|&t| (t as f64 * factor) as f32).collect())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cb_network(net: &DenseNetwork, taus: &[f32], policy_map: Option<&str>) -> Result<CbNetwork> {
    let names = conv_names(net.spec());
    Ok(convert_to_cb(net, taus, &policies(policy_map, &names)?)?)
}

fn run(a: RunArgs) -> Result<()> {
    let net = manifest::load_model(&a.model)?;
    let names = conv_names(net.spec());
    let taus = resolve_thresholds(&a.thresholds, &names)?;
    let mut cb = cb_network(&net, &taus, a.thresholds.policy_map.as_deref())?;
    cb.set_options(RunOptions {
        timing: a.timing,
        ..RunOptions::default()
    });
    let seq = frames::read_sequence(&a.frames)?;
    let dense: Option<Vec<Tensor3>> = if a.compare_dense || a.ref_out.is_some() {
        Some(seq.iter().map(|f| net.forward(f)).collect::<changenet::Result<_>>()?)
    } else {
        None
    };
    let reference = match (&dense, a.compare_dense) {
        (Some(d), true) => Some(Reference {
            outputs: d,
            metric: a.metric.into(),
        }),
        _ => None,
    };
    let (outputs, stats) = cb.forward_sequence(&seq, reference)?;
    write_or_print(a.stats_out.as_deref(), &report::stats_csv(&stats))?;
    if let (Some(dir), Some(d)) = (&a.ref_out, &dense) {
        frames::write_sequence(dir, d)?;
    }
    if let Some(dir) = &a.out {
        frames::write_sequence(dir, &outputs)?;
    }
    Ok(())
}

fn eval_setup(e: &EvalArgs, timing: bool) -> Result<(DenseNetwork, Vec<EvalSequence>, EvalConfig)> {
    let net = manifest::load_model(&e.model)?;
    let seqs = e
        .frames
        .iter()
        .map(|p| Ok(EvalSequence::with_dense_reference(&net, frames::read_sequence(p)?)?))
        .collect::<Result<Vec<_>>>()?;
    let cfg = EvalConfig {
        metric: e.metric.into(),
        window: match e.window {
            Window::AfterBootstrap => EvalWindow::AfterBootstrap,
            Window::Last => EvalWindow::LastFrame,
        },
        aggregation: match e.aggregation {
            Aggregate::Mean => Aggregation::Mean,
            Aggregate::Worst => Aggregation::Worst,
        },
        timing,
    };
    Ok((net, seqs, cfg))
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let (net, seqs, eval) = eval_setup(&a.eval, false)?;
    let names = conv_names(net.spec());
    let cb = cb_network(&net, &vec![0.0; names.len()], a.eval.policy_map.as_deref())?;
    let mut overrides = vec![None; names.len()];
    for entry in &a.layer_budget {
        let (name, value) = entry
            .split_once('=')
            .with_context(|| format!("--layer-budget expects name=value, got '{entry}'"))?;
        let i = names
            .iter()
            .position(|n| n == name)
            .with_context(|| format!("--layer-budget: '{name}' is not a convolution layer"))?;
        overrides[i] = Some(
            value
                .parse::<f64>()
                .with_context(|| format!("--layer-budget: bad value '{value}'"))?,
        );
    }
    let cfg = CalibConfig {
        initial_tau: a.init_tau,
        growth_factor: a.growth,
        per_layer_budget: a.budget,
        budget_overrides: overrides,
        max_iterations: a.max_iter,
        fail_on_cap: a.fail_on_cap,
        eval,
    };
    let cal = select_thresholds(&cb, &cfg, &seqs)?;
    write_atomic(&a.out, report::render_thresholds(&names, &cal.thresholds).as_bytes())?;
    if let Some(p) = &a.trace_out {
        write_atomic(p, report::trace_csv(&cal.trace, &names).as_bytes())?;
    }
    let increments = layer_increments(&cb, &cal.thresholds, &seqs, &cfg.eval)?;
    for (i, name) in names.iter().enumerate() {
        let capped = if cal.capped.contains(&i) {
            " (iteration cap reached)"
        } else {
            ""
        };
        eprintln!("{name}: tau={} increment={}{capped}", cal.thresholds[i], increments[i]);
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (net, seqs, eval) = eval_setup(&a.eval, a.timing)?;
    let names = conv_names(net.spec());
    let base = threshold_vector(&a.base_tau, &names)?;
    let factors = report::parse_factors(&a.factors)?;
    let cb = cb_network(&net, &vec![0.0; names.len()], a.eval.policy_map.as_deref())?;
    let curve = sweep_threshold_factor(&cb, &base, &factors, &seqs, &eval)?;
    write_or_print(a.out.as_deref(), &report::sweep_csv(&curve))
}

fn model_spec(s: &ModelSource) -> Result<NetworkSpec> {
    match (&s.model, &s.preset) {
        (Some(path), None) => Ok(manifest::parse_manifest(
            &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            path,
        )?
        .spec),
        (None, Some(name)) => preset_spec(name, s.height, s.width),
        _ => bail!(changenet::Error::Config(
            "give exactly one of --model or --preset".into()
        )),
    }
}

fn preset_spec(name: &str, height: Option<usize>, width: Option<usize>) -> Result<NetworkSpec> {
    let canonical = match name {
        "scene" | "scene_labelling" => presets::SCENE_LABELLING_INPUT,
        _ => changenet::Shape3::new(3, 128, 128),
    };
    presets::by_name(
        name,
        height.unwrap_or(canonical.height),
        width.unwrap_or(canonical.width),
    )
    .with_context(|| format!("unknown preset '{name}' (expected scene or compact)"))
}

fn mem_report(a: MemArgs) -> Result<()> {
    let spec = model_spec(&a.source)?;
    let modes: &[MemoryMode] = match a.mode {
        MemMode::Naive => &[MemoryMode::Naive],
        MemMode::Shared => &[MemoryMode::Shared],
        MemMode::Cb => &[MemoryMode::ChangeBased],
        MemMode::All => &[MemoryMode::Naive, MemoryMode::Shared, MemoryMode::ChangeBased],
    };
    let mut text = String::new();
    for (k, mode) in modes.iter().enumerate() {
        let csv = report::mem_csv(&memory_accounting(&spec, *mode)?);
        // Keep a single header when several modes are printed.
        text.push_str(if k == 0 {
            &csv
        } else {
            csv.split_once('\n').map_or("", |(_, rest)| rest)
        });
    }
    write_or_print(a.out.as_deref(), &text)
}

fn op_report(a: OpArgs) -> Result<()> {
    let net = manifest::load_model(&a.model)?;
    let names = conv_names(net.spec());
    let taus = resolve_thresholds(&a.thresholds, &names)?;
    let mut cb = cb_network(&net, &taus, a.thresholds.policy_map.as_deref())?;
    cb.set_options(RunOptions {
        estimate_fg: a.fine_grained,
        ..RunOptions::default()
    });
    let seq = frames::read_sequence(&a.frames)?;
    let stats = cb.run_sequence(&seq, None)?;
    if a.from == 0 {
        bail!(changenet::Error::Config("--from is 1-based".into()));
    }
    let ops = OpReport::from_run(net.spec(), &stats, a.from - 1..seq.len())?;
    write_or_print(a.out.as_deref(), &report::op_csv(&ops))
}

fn gen_synthetic(a: SynthArgs) -> Result<()> {
    let (dx, dy) = a
        .velocity
        .split_once(',')
        .and_then(|(x, y)| Some((x.trim().parse().ok()?, y.trim().parse().ok()?)))
        .with_context(|| format!("--velocity expects dx,dy, got '{}'", a.velocity))?;
    let cfg = synth::SyntheticConfig {
        channels: a.channels,
        height: a.height,
        width: a.width,
        n_frames: a.n_frames,
        n_objects: a.objects,
        object_size: a.size,
        velocity: (dx, dy),
        noise_std: a.noise,
        seed: a.seed,
    };
    let seq = synth::gen_synthetic(&cfg)?;
    if a.pnm {
        std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        let ext = if a.channels == 1 { "pgm" } else { "ppm" };
        let mut listing = String::new();
        for (i, f) in seq.iter().enumerate() {
            let name = format!("frame_{i:04}.{ext}");
            write_atomic(&a.out.join(&name), &frames::encode_pnm(f)?)?;
            listing.push_str(&name);
            listing.push('\n');
        }
        write_atomic(&a.out.join(frames::SEQUENCE_MANIFEST), listing.as_bytes())?;
    } else {
        frames::write_sequence(&a.out, &seq)?;
    }
    Ok(())
}

fn gen_model(a: GenModelArgs) -> Result<()> {
    let spec = preset_spec(&a.preset, a.height, a.width)?;
    let net = presets::random_network(&spec, a.seed)?;
    manifest::save_model(&a.out, &net, &a.blob)?;
    Ok(())
}

fn category(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<changenet::Error>().map(changenet::Error::category))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("usage")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Sweep(a) => sweep(a),
        Command::MemReport(a) => mem_report(a),
        Command::OpReport(a) => op_report(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::GenModel(a) => gen_model(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", category(&e));
            ExitCode::FAILURE
        }
    }
}
