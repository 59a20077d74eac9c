use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anomaly_bench::io::{
    dataset_stats, find_score_file, load_mask, load_score_map, load_submitted_masks, write_label_map, write_png_scores,
    write_raw_scores, Dataset, DatasetManifest, DatasetStats, ImageEntry,
};
use anomaly_bench::mask::masks_from_external;
use anomaly_bench::pixel::{evaluate_pixels, quantile_thresholds};
use anomaly_bench::report::{
    delta_sweep, emit, emit_sweep_csv, evaluate, EvalOptions, Format, ImageMeta, Predictions, Submission, SweepGrid,
    DEFAULT_SWEEP_POINTS,
};
use anomaly_bench::synth::{generate_scene, SceneSpec, SceneTruth};
use anomaly_bench::{validate_pair, Error, LabelMap, ScoreMode, ScoredImage, Track, TrackConfig};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Parser)]
#[command(
    name = "anomaly-bench",
    version,
    about = "Evaluate anomaly and obstacle segmentation results"
)]
struct Cli {
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true, env = "ANOMALY_BENCH_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a submission and write the results document.
    Evaluate(EvaluateArgs),
    /// Component-level F1 average as a function of the score threshold, as CSV.
    Sweep(SweepArgs),
    /// Class fractions and component size statistics of a dataset.
    Stats(StatsArgs),
    /// Write a synthetic dataset with fake detector scores.
    Synth(SynthArgs),
    /// Check that a submission has a readable, correctly sized file per image.
    Validate(ValidateArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Inputs {
    /// Directory of `<id>.f32` (+ `<id>.hdr`) or 16-bit `<id>.png` score maps.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Directory of 8-bit `<id>.png` binary masks.
    #[arg(long)]
    masks: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackArg {
    Anomaly,
    Obstacle,
}

impl From<TrackArg> for Track {
    fn from(t: TrackArg) -> Self {
        match t {
            TrackArg::Anomaly => Track::Anomaly,
            TrackArg::Obstacle => Track::Obstacle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Table,
    Csv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => Format::Json,
            FormatArg::Table => Format::Table,
            FormatArg::Csv => Format::Csv,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Overrides the track declared in the manifest.
    #[arg(long, value_enum)]
    track: Option<TrackArg>,
    /// Minimum predicted component size (track default otherwise).
    #[arg(long, conflicts_with = "no_filter")]
    min_size: Option<usize>,
    /// Keep predicted components of every size.
    #[arg(long)]
    no_filter: bool,
    /// Histogram the scores into this many bins instead of sweeping every value.
    #[arg(long, conflicts_with = "exact")]
    bins: Option<usize>,
    /// Use every distinct score as a threshold (the default).
    #[arg(long)]
    exact: bool,
    /// Comma-separated component quality thresholds.
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    /// Keep predictions on void pixels.
    #[arg(long)]
    keep_void: bool,
}

impl ConfigArgs {
    fn config(&self, manifest_track: Track) -> anyhow::Result<TrackConfig> {
        let track = self.track.map(Track::from).unwrap_or(manifest_track);
        let mut config = TrackConfig::for_track(track);
        if let Some(min) = self.min_size {
            config.min_component_size = min;
        }
        config.filtering = !self.no_filter;
        config.score_mode = match (self.bins, self.exact) {
            (Some(bins), _) => ScoreMode::Binned(bins),
            _ => ScoreMode::Exact,
        };
        if let Some(taus) = &self.taus {
            config.tau_grid = taus.clone();
        }
        config.clip_void = !self.keep_void;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Also report subsets split by tags of this kind, e.g. `scene`.
    #[arg(long)]
    group_by: Option<String>,
    /// Include a threshold sweep with this many quantile points.
    #[arg(long)]
    sweep_points: Option<usize>,
    /// Method name in the report (defaults to the input directory name).
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    /// Output file (standard output otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of quantile thresholds.
    #[arg(long, default_value_t = DEFAULT_SWEEP_POINTS, conflicts_with = "deltas")]
    points: usize,
    /// Explicit comma-separated thresholds.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives manifest.json, truth.json, labels/ and scores/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "obstacle")]
    track: TrackArg,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long, default_value_t = 6)]
    min_extent: usize,
    #[arg(long, default_value_t = 40)]
    max_extent: usize,
    #[arg(long, default_value_t = 0.1)]
    void_fraction: f64,
    #[arg(long, default_value_t = 0.8)]
    hit_probability: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    blur: usize,
    /// Expected false-alarm blobs per image.
    #[arg(long, default_value_t = 1.0)]
    false_alarms: f64,
    /// Write 16-bit PNG scores instead of raw floats.
    #[arg(long)]
    png_scores: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    inputs: Inputs,
}

/// Writes through a temporary file in the same directory, so a failed run
/// never leaves a partial output behind.
fn write_output(out: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    let Some(path) = out else {
        std::io::stdout().write_all(bytes)?;
        return Ok(());
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().context("output path has no file name")?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

fn load_scored(ds: &Dataset, dir: &Path) -> anomaly_bench::Result<Vec<ScoredImage>> {
    ds.manifest
        .images
        .par_iter()
        .map(|entry| {
            let labels = ds.load_labels(entry)?;
            let path = find_score_file(dir, &entry.id).ok_or_else(|| Error::MissingInput {
                kind: "score map",
                id: entry.id.clone(),
            })?;
            validate_pair(labels, load_score_map(path)?)
        })
        .collect()
}

fn image_meta(manifest: &DatasetManifest) -> Vec<ImageMeta> {
    manifest
        .images
        .iter()
        .map(|e| ImageMeta {
            id: e.id.clone(),
            tags: e.tags.clone(),
        })
        .collect()
}

fn dir_name(dir: &Path) -> String {
    fs::canonicalize(dir)
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "unnamed".into())
}

fn run_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let ds = Dataset::open(&args.manifest)?;
    let config = args.config.config(ds.manifest.track)?;
    let input = args
        .inputs
        .scores
        .as_ref()
        .or(args.inputs.masks.as_ref())
        .expect("clap requires one input");
    let predictions = match (&args.inputs.scores, &args.inputs.masks) {
        (Some(dir), _) => Predictions::Scores(load_scored(&ds, dir)?),
        (_, Some(dir)) => {
            let labels = ds.load_all_labels()?;
            let ids: Vec<(&str, &LabelMap)> = ds.manifest.images.iter().map(|e| e.id.as_str()).zip(&labels).collect();
            let bundle = masks_from_external(&ids, load_submitted_masks(dir)?, config.clip_void)?;
            Predictions::Masks { labels, bundle }
        }
        (None, None) => unreachable!(),
    };
    let submission = Submission {
        dataset: ds.manifest.name.clone(),
        method: args.method.unwrap_or_else(|| dir_name(input)),
        images: image_meta(&ds.manifest),
        predictions,
    };
    let options = EvalOptions {
        group_by: args.group_by,
        sweep: args.sweep_points.map_or(SweepGrid::None, SweepGrid::Quantiles),
    };
    let report = evaluate(&submission, &config, &options)?;
    write_output(args.out.as_deref(), &emit(&report, args.format.into())?)
}

fn run_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let ds = Dataset::open(&args.manifest)?;
    let config = args.config.config(ds.manifest.track)?;
    let images = load_scored(&ds, &args.scores)?;
    let (pixel, curve) = evaluate_pixels(&images, config.score_mode)?;
    let grid = match args.deltas {
        Some(d) => d,
        None => quantile_thresholds(&curve, args.points),
    };
    let refs: Vec<&ScoredImage> = images.iter().collect();
    let points = delta_sweep(&refs, &config, &grid, Some(pixel.delta_star))?;
    write_output(args.out.as_deref(), &emit_sweep_csv(&points)?)
}

fn stats_table(name: &str, s: &DatasetStats) -> String {
    format!(
        "dataset                {name}\n\
         images                 {}\n\
         anomaly pixels         {:.2}%\n\
         not-anomaly pixels     {:.2}%\n\
         components             {}\n\
         relative size          {:.2}% +- {:.2}%\n",
        s.image_count,
        s.anomaly_pixel_fraction * 100.0,
        s.not_anomaly_pixel_fraction * 100.0,
        s.gt_component_count,
        s.mean_relative_size * 100.0,
        s.std_relative_size * 100.0,
    )
}

fn run_stats(args: StatsArgs) -> anyhow::Result<()> {
    let ds = Dataset::open(&args.manifest)?;
    let stats = dataset_stats(&ds)?;
    let bytes = match args.format {
        FormatArg::Json => {
            let mut v = serde_json::to_vec_pretty(&stats)?;
            v.push(b'\n');
            v
        }
        FormatArg::Table => stats_table(&ds.manifest.name, &stats).into_bytes(),
        FormatArg::Csv => bail!("stats are available as json or table"),
    };
    write_output(args.out.as_deref(), &bytes)
}

fn run_synth(args: SynthArgs) -> anyhow::Result<()> {
    let base = SceneSpec {
        width: args.width,
        height: args.height,
        component_count: args.components,
        min_extent: args.min_extent,
        max_extent: args.max_extent,
        void_fraction: args.void_fraction,
        hit_probability: args.hit_probability,
        noise: args.noise,
        blur_radius: args.blur,
        false_alarm_rate: args.false_alarms,
        seed: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let seeds: Vec<u64> = (0..args.count).map(|_| rng.random()).collect();
    for sub in ["labels", "scores"] {
        fs::create_dir_all(args.out.join(sub)).with_context(|| format!("creating {}", args.out.display()))?;
    }
    let encoding = Default::default();
    let written: Vec<(ImageEntry, SceneTruth)> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| -> anyhow::Result<(ImageEntry, SceneTruth)> {
            let id = format!("synth_{i:04}");
            let scene = generate_scene(&SceneSpec { seed, ..base.clone() })?;
            let label = PathBuf::from("labels").join(format!("{id}.png"));
            write_label_map(args.out.join(&label), &scene.labels, &encoding)?;
            let scores = args.out.join("scores");
            if args.png_scores {
                write_png_scores(scores.join(format!("{id}.png")), &scene.scores)?;
            } else {
                write_raw_scores(scores.join(format!("{id}.f32")), &scene.scores)?;
            }
            let entry = ImageEntry {
                id,
                label,
                width: args.width,
                height: args.height,
                tags: vec![],
            };
            Ok((entry, scene.truth))
        })
        .collect::<anyhow::Result<_>>()?;
    let truth: BTreeMap<&str, &SceneTruth> = written.iter().map(|(e, t)| (e.id.as_str(), t)).collect();
    write_output(Some(&args.out.join("truth.json")), &serde_json::to_vec_pretty(&truth)?)?;
    let entries = written.iter().map(|(e, _)| e.clone()).collect();
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        track: args.track.into(),
        images: entries,
        label_encoding: None,
    };
    write_output(Some(&args.out.join("manifest.json")), manifest.to_json().as_bytes())?;
    eprintln!("wrote {} scenes to {}", args.count, args.out.display());
    Ok(())
}

/// Problems with one manifest entry, empty if it is usable.
fn check_entry(ds: &Dataset, entry: &ImageEntry, inputs: &Inputs) -> Vec<String> {
    let mut problems = Vec::new();
    let labels = ds.load_labels(entry);
    if let Err(e) = &labels {
        problems.push(format!("{}: labels: {e}", entry.id));
    }
    let dims = match (&inputs.scores, &inputs.masks) {
        (Some(dir), _) => match find_score_file(dir, &entry.id) {
            None => Err(format!("{}: missing score map", entry.id)),
            Some(p) => load_score_map(&p)
                .map(|s| (s.width(), s.height()))
                .map_err(|e| format!("{}: {e}", entry.id)),
        },
        (_, Some(dir)) => {
            let p = dir.join(format!("{}.png", entry.id));
            if p.is_file() {
                load_mask(&p)
                    .map(|m| (m.width(), m.height()))
                    .map_err(|e| format!("{}: {e}", entry.id))
            } else {
                Err(format!("{}: missing mask", entry.id))
            }
        }
        (None, None) => unreachable!(),
    };
    match dims {
        Err(e) => problems.push(e),
        Ok((w, h)) if (w, h) != (entry.width, entry.height) => problems.push(format!(
            "{}: prediction is {w}x{h}, manifest says {}x{}",
            entry.id, entry.width, entry.height
        )),
        Ok(_) => {}
    }
    problems
}

fn run_validate(args: ValidateArgs) -> anyhow::Result<bool> {
    let ds = Dataset::open(&args.manifest)?;
    let mut problems: Vec<String> = ds
        .manifest
        .images
        .par_iter()
        .flat_map(|e| check_entry(&ds, e, &args.inputs))
        .collect();
    if let Some(dir) = &args.inputs.masks {
        let known: Vec<&str> = ds.manifest.images.iter().map(|e| e.id.as_str()).collect();
        let mut extra: Vec<String> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok()?.path().file_stem()?.to_str().map(String::from))
            .filter(|id| !known.contains(&id.as_str()))
            .collect();
        extra.sort();
        problems.extend(
            extra
                .into_iter()
                .map(|id| format!("{id}: mask for an image not in the manifest")),
        );
    }
    for p in &problems {
        eprintln!("{p}");
    }
    if problems.is_empty() {
        println!("ok: {} images", ds.manifest.images.len());
    }
    Ok(problems.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Evaluate(a) => run_evaluate(a).map(|_| true),
        Command::Sweep(a) => run_sweep(a).map(|_| true),
        Command::Stats(a) => run_stats(a).map(|_| true),
        Command::Synth(a) => run_synth(a).map(|_| true),
        Command::Validate(a) => run_validate(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
