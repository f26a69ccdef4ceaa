use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use petri_core::analysis::{
    analyze_frames, rgb_complexity, species_entropy, ComplexityReport, Symbolization,
};
use petri_core::diversity::sample_indices;
use petri_core::metaevo::RunMode;
use petri_core::runio::{
    append_json_line, contact_sheet, export_frames, frame_from_image, render_frame, save_png,
    Checkpoint, Driver, EmbedderKind, RunConfig, ANALYSIS_FILE,
};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "petri",
    version,
    about = "Population-based meta-evolution of competing neural cellular automata"
)]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a meta-evolution (or a baseline) and write logs and checkpoints.
    Run(RunArgs),
    /// Compute persistence and effective complexity from a checkpoint or a
    /// directory of rendered frames.
    Analyze(AnalyzeArgs),
    /// Roll out the worlds of a checkpoint and export PNG frames and contact
    /// sheets.
    Render(RenderArgs),
    /// Print the effective configuration as JSON.
    ConfigPrint(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; missing fields take preset values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Starting point when no file is given: desk or paper.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override any field with a dotted key, e.g. meta.exploit.rho=0.5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RunMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Meta-iterations.
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Use the external embedding service at host:port.
    #[arg(long, value_name = "HOST:PORT")]
    embed_endpoint: Option<String>,
    /// Export every n-th rollout frame as PNG; 0 disables.
    #[arg(long)]
    frame_stride: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from this checkpoint; its stored configuration is used and
    /// only --output applies.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint file or directory of PNG frames.
    input: PathBuf,
    /// Segments to roll out per world from a checkpoint; defaults to the
    /// run's world_segments.
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long, value_parser = parse_symbolization)]
    symbolization: Option<Symbolization>,
    /// Agents in the rendered frames (frame directories only).
    #[arg(long, default_value_t = 3)]
    agents: usize,
    /// JSON-lines file to append to; defaults to analysis.jsonl next to the
    /// input.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    checkpoint: PathBuf,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    segments: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Frames per contact sheet.
    #[arg(long, default_value_t = 16)]
    sheet_frames: usize,
    #[arg(long, default_value_t = 4)]
    columns: usize,
    /// Only this world.
    #[arg(long)]
    world: Option<usize>,
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| "expected pbt, random-search or fixed".into())
}

fn parse_symbolization(s: &str) -> Result<Symbolization, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| "expected packed-winner, byte-winner or rgb".into())
}

/// Exit 1 for bad invocations, 2 for failures while working.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path).map_err(usage)?,
            None => RunConfig::preset(&self.preset).ok_or_else(|| {
                usage(anyhow!("unknown preset `{}` (desk or paper)", self.preset))
            })?,
        };
        for assignment in &self.set {
            c.set(assignment).map_err(usage)?;
        }
        if let Some(v) = self.mode {
            c.meta.mode = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.output {
            c.output_dir = v.clone();
        }
        if let Some(v) = &self.run_id {
            c.run_id = v.clone();
        }
        if let Some(v) = self.iterations {
            c.meta.iterations = v;
        }
        if let Some(v) = self.population {
            c.meta.population = v;
        }
        if let Some(v) = self.agents {
            c.world.agents = v;
        }
        if let Some(v) = self.height {
            c.world.height = v;
        }
        if let Some(v) = self.width {
            c.world.width = v;
        }
        if let Some(v) = &self.embed_endpoint {
            c.embedder.kind = EmbedderKind::External;
            c.embedder.endpoint = Some(v.clone());
        }
        if let Some(v) = self.frame_stride {
            c.frame_stride = v;
        }
        if let Some(v) = self.checkpoint_interval {
            c.checkpoint_interval = v;
        }
        c.validate().map_err(usage)?;
        Ok(c)
    }
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut driver = match &args.resume {
        Some(ckpt) => Driver::resume(ckpt, args.config.output.as_deref())
            .with_context(|| format!("resuming from {}", ckpt.display()))?,
        None => Driver::start(args.config.resolve()?)?,
    };
    let total = driver.config().meta.iterations;
    println!(
        "run {} mode {} seed {} -> {}",
        driver.config().run_id,
        driver.config().meta.mode.as_str(),
        driver.config().seed,
        driver.config().output_dir.display()
    );
    let started = Instant::now();
    let mut last = Instant::now();
    driver.finish(|r| {
        let healthy: Vec<f64> = r.records.iter().filter_map(|w| w.score).collect();
        let mean =
            (!healthy.is_empty()).then(|| healthy.iter().sum::<f64>() / healthy.len() as f64);
        let best = healthy.iter().copied().reduce(f64::max);
        println!(
            "t={}/{total} mean F={} best F={} archive={} unhealthy={} replaced={} {:.1}s",
            r.t,
            fmt_score(mean),
            fmt_score(best),
            r.archive_len,
            r.records.len() - healthy.len(),
            r.replacements.len(),
            last.elapsed().as_secs_f64()
        );
        last = Instant::now();
    })?;
    println!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

#[derive(Serialize)]
struct AnalysisRow<'a> {
    source: String,
    iteration: Option<u64>,
    world: Option<usize>,
    agents: usize,
    symbolization: Symbolization,
    frames: usize,
    #[serde(flatten)]
    report: &'a ComplexityReport,
}

fn analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    if args.input.is_dir() {
        return analyze_frame_dir(&args);
    }
    let ckpt = Checkpoint::load(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let segments = args.segments.unwrap_or(ckpt.config.meta.world_segments);
    let mode = args.symbolization.unwrap_or(ckpt.config.meta.symbolization);
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| sibling(&args.input).join(ANALYSIS_FILE));
    println!("world  EP      H_mean  C_eff_mean");
    for (i, world) in ckpt.worlds.iter().enumerate() {
        let tr = world.clone().rollout(segments);
        if tr.frames.is_empty() {
            println!("{i:<6} unhealthy");
            continue;
        }
        let report = analyze_frames(&tr.frames, mode);
        append_json_line(
            &out,
            &AnalysisRow {
                source: args.input.display().to_string(),
                iteration: Some(ckpt.iteration),
                world: Some(i),
                agents: ckpt.config.world.agents,
                symbolization: mode,
                frames: tr.frames.len(),
                report: &report,
            },
        )?;
        println!(
            "{i:<6} {:.4}  {:.4}  {:.4}",
            report.persistence, report.entropy_mean, report.complexity_mean
        );
    }
    println!("appended to {}", out.display());
    Ok(())
}

fn analyze_frame_dir(args: &AnalyzeArgs) -> Result<(), Failure> {
    if args.symbolization.is_some_and(|s| s != Symbolization::Rgb) {
        return Err(usage(anyhow!(
            "frame directories can only be analyzed with rgb symbolization"
        )));
    }
    if args.agents == 0 {
        return Err(usage(anyhow!("--agents must be at least 1")));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")));
    paths.sort();
    if paths.is_empty() {
        return Err(usage(anyhow!("no PNG frames in {}", args.input.display())));
    }
    let mut entropy = Vec::with_capacity(paths.len());
    let mut complexity = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p)
            .with_context(|| format!("reading {}", p.display()))?
            .to_rgb8();
        entropy.push(species_entropy(&frame_from_image(&img, args.agents)));
        complexity.push(rgb_complexity(img.as_raw()));
    }
    let report = ComplexityReport::from_series(entropy, complexity, args.agents);
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| args.input.join(ANALYSIS_FILE));
    append_json_line(
        &out,
        &AnalysisRow {
            source: args.input.display().to_string(),
            iteration: None,
            world: None,
            agents: args.agents,
            symbolization: Symbolization::Rgb,
            frames: paths.len(),
            report: &report,
        },
    )?;
    println!(
        "{} frames: EP {:.4}  H_mean {:.4}  C_eff_mean {:.4}",
        paths.len(),
        report.persistence,
        report.entropy_mean,
        report.complexity_mean
    );
    println!("appended to {}", out.display());
    Ok(())
}

fn render(args: RenderArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))?;
    if let Some(w) = args.world {
        if w >= ckpt.worlds.len() {
            return Err(usage(anyhow!(
                "world {w} out of range (population {})",
                ckpt.worlds.len()
            )));
        }
    }
    if args.segments == 0 {
        return Err(usage(anyhow!("--segments must be at least 1")));
    }
    let out = args.output.clone().unwrap_or_else(|| {
        sibling(&args.checkpoint).join(format!("render_t{:06}", ckpt.iteration))
    });
    for (i, world) in ckpt.worlds.iter().enumerate() {
        if args.world.is_some_and(|w| w != i) {
            continue;
        }
        let tr = world.clone().rollout(args.segments);
        if tr.frames.is_empty() {
            println!("world {i}: unhealthy, skipped");
            continue;
        }
        let dir = out.join(format!("world_{i:03}"));
        let written = export_frames(
            &dir,
            &ckpt.config.run_id,
            ckpt.iteration,
            &tr.frames,
            args.stride,
        )?;
        let sheet: Vec<_> = sample_indices(
            tr.frames.len(),
            args.sheet_frames.max(1).min(tr.frames.len()),
        )
        .into_iter()
        .map(|s| render_frame(&tr.frames[s]))
        .collect();
        let sheet_path = out.join(format!("world_{i:03}_sheet.png"));
        save_png(&contact_sheet(&sheet, args.columns), &sheet_path)?;
        println!(
            "world {i}: {} frames, sheet {}",
            written.len(),
            sheet_path.display()
        );
    }
    Ok(())
}

fn sibling(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(a) => run(a),
        Command::Analyze(a) => analyze(a),
        Command::Render(a) => render(a),
        Command::ConfigPrint(a) => {
            println!("{}", a.resolve()?.to_json());
            Ok(())
        }
    }
}

/// The tape allocates and frees many large buffers per step; keep freed
/// memory in the process instead of returning it to the kernel each time.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds and is called before
    // any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    tune_allocator();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}\n\nRun `petri --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
