use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use vpr_core::evaluation::{DEFAULT_KS, DEFAULT_RUNS};
use vpr_core::prep::list_images;
use vpr_core::thresholds::generate_run_records;
use vpr_core::{
    best_match, build_mini, calculate_place_averages, emit_report, evaluate, extract_builtin,
    rank_baseline, rank_filtered, read_descriptor_file, score_places, write_descriptor_file,
    BestMatch, Dataset, Descriptor, EvalConfig, GroupStepConfig, PlaceDatabase, ReportFormat,
    ThresholdMethod, ThresholdTable, TraversalSpec,
};

const EXIT_USAGE: u8 = 1;
const EXIT_UNKNOWN_PLACE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "vpr", version, about = "Per-place adaptive thresholds for visual place recognition")]
struct Cli {
    /// Worker threads (0 = one per core). Output does not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Group sequential traversals into places and extract built-in descriptors.
    BuildMini(BuildMiniArgs),
    /// Compute per-place threshold tables over seeded cross-validation runs.
    Thresholds(ThresholdsArgs),
    /// Cross-validated Recall@K for baseline, simple and weighted thresholds.
    Evaluate(EvaluateArgs),
    /// Match one query against the database.
    Match(MatchArgs),
}

#[derive(Debug, Args)]
struct BuildMiniArgs {
    /// One directory of ordered .pgm/.ppm frames per condition.
    #[arg(long = "cond", required = true)]
    conds: Vec<PathBuf>,
    #[arg(long, conflicts_with = "preset")]
    group: Option<usize>,
    #[arg(long, conflicts_with = "preset")]
    step: Option<usize>,
    /// g3s10, g2s2 or g3s3.
    #[arg(long)]
    preset: Option<String>,
    /// Downsampled image side; descriptors have side*side components.
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value = "mini")]
    name: String,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Descriptor file; defaults to the one named in the manifest.
    #[arg(long)]
    desc: Option<PathBuf>,
}

impl DatasetArgs {
    fn load(&self) -> Result<Dataset> {
        Dataset::load(&self.manifest, self.desc.as_deref())
            .with_context(|| format!("loading dataset {}", self.manifest.display()))
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, default_value_t = DEFAULT_RUNS, value_parser = parse_runs)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_runs(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Simple,
    Weighted,
    Both,
}

#[derive(Debug, Args)]
struct ThresholdsArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Both)]
    method: MethodArg,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Also write one `image_key,mean_bad_score` file per run here.
    #[arg(long)]
    audit_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long = "k", value_delimiter = ',', default_values_t = DEFAULT_KS)]
    ks: Vec<usize>,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    /// Report file; the report is always printed to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset label in the report (default: manifest name).
    #[arg(long)]
    dataset_name: Option<String>,
    #[arg(long, default_value = "builtin")]
    descriptor_name: String,
}

#[derive(Debug, Args)]
struct MatchArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Threshold table written by `vpr thresholds`.
    #[arg(long, required_unless_present = "no_filter")]
    thresholds: Option<PathBuf>,
    /// Rank all places without thresholds.
    #[arg(long)]
    no_filter: bool,
    /// Query by row index into --query-desc (default: the database descriptors).
    #[arg(long, conflicts_with = "query_image", required_unless_present = "query_image")]
    query_row: Option<usize>,
    #[arg(long, requires = "query_row")]
    query_desc: Option<PathBuf>,
    /// Query image (.pgm/.ppm), described with the built-in extractor.
    #[arg(long)]
    query_image: Option<PathBuf>,
    /// Side used for --query-image; must match the database.
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

fn build_mini_cmd(args: &BuildMiniArgs) -> Result<()> {
    let config = match (&args.preset, args.group, args.step) {
        (Some(p), _, _) => {
            GroupStepConfig::preset(p).with_context(|| format!("unknown preset {p:?}"))?
        }
        (None, Some(g), Some(s)) => GroupStepConfig::new(g, s)?,
        _ => bail!("give either --preset or both --group and --step"),
    };
    let traversals = args
        .conds
        .iter()
        .enumerate()
        .map(|(c, dir)| {
            let images = list_images(dir)
                .with_context(|| format!("reading condition directory {}", dir.display()))?;
            Ok(TraversalSpec {
                condition_id: c as u32,
                images,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mini = build_mini(&traversals, config)?;
    let descriptors = extract_builtin(&mini.paths(), args.side)?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let desc_name = PathBuf::from(format!("{}.vprd", args.name));
    let manifest_path = args.out_dir.join(format!("{}.manifest", args.name));
    write_descriptor_file(&descriptors, args.out_dir.join(&desc_name))?;
    fs::write(&manifest_path, mini.manifest_text(&args.name, &desc_name))
        .with_context(|| format!("writing {}", manifest_path.display()))?;

    if mini.images_per_place() < 2 {
        warn!("places have fewer than 2 images; thresholds and evaluate need at least 2");
    }
    println!(
        "# group={} step={} side={} conditions={} frames={}",
        config.group,
        config.step,
        args.side,
        traversals.len(),
        mini.governing_len
    );
    println!(
        "places={} images_per_place={} entries={} dim={}",
        mini.place_count,
        mini.images_per_place(),
        mini.entries.len(),
        args.side * args.side
    );
    println!("manifest={}", manifest_path.display());
    Ok(())
}

fn thresholds_cmd(args: &ThresholdsArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let methods: &[ThresholdMethod] = match args.method {
        MethodArg::Simple => &[ThresholdMethod::SimpleAverage],
        MethodArg::Weighted => &[ThresholdMethod::WeightedAverage],
        MethodArg::Both => &ThresholdMethod::ALL,
    };
    let records = generate_run_records(&dataset, args.run.runs, args.run.seed)?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    if let Some(dir) = &args.audit_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for r in &records {
            r.write_audit(dir)?;
        }
    }
    println!(
        "# runs={} seed={} places={}",
        args.run.runs,
        args.run.seed,
        dataset.manifest.place_count()
    );
    for &method in methods {
        let table = calculate_place_averages(&records, &dataset.manifest, method)?;
        let path = args.out_dir.join(format!("thresholds_{method}.csv"));
        table.write(&path)?;
        println!("{method}={}", path.display());
    }
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let dataset = args.data.load()?;
    let config = EvalConfig {
        dataset_name: args
            .dataset_name
            .clone()
            .unwrap_or_else(|| dataset.manifest.name().to_string()),
        descriptor_name: args.descriptor_name.clone(),
        runs: args.run.runs,
        seed: args.run.seed,
        ks: args.ks.clone(),
    };
    let evaluation = evaluate(&dataset, &config)?;
    let format = match args.format {
        FormatArg::Text => ReportFormat::Text,
        FormatArg::Csv => ReportFormat::Csv,
    };
    let bytes = emit_report(&evaluation.report, format)?;
    if let Some(out) = &args.out {
        fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn query_descriptor(args: &MatchArgs, dataset: &Dataset) -> Result<Descriptor> {
    if let Some(image) = &args.query_image {
        return Ok(extract_builtin(std::slice::from_ref(image), args.side)?.remove(0));
    }
    let row = args.query_row.expect("clap enforces --query-row or --query-image");
    let rows = match &args.query_desc {
        Some(p) => read_descriptor_file(p)?,
        None => dataset.descriptors.clone(),
    };
    rows.get(row)
        .cloned()
        .with_context(|| format!("query row {row} out of range ({} rows)", rows.len()))
}

fn match_cmd(args: &MatchArgs) -> Result<ExitCode> {
    let dataset = args.data.load()?;
    let query = query_descriptor(args, &dataset)?;
    let table = match (&args.thresholds, args.no_filter) {
        (Some(p), false) => Some(ThresholdTable::read(p)?),
        _ => None,
    };
    let db = PlaceDatabase::from_dataset(&dataset)?;
    let scores = score_places(&query, &db, table.as_ref())?;
    let result = match &table {
        Some(_) => rank_filtered(&scores)?,
        None => rank_baseline(&scores),
    };

    match &table {
        Some(t) => println!("# mode=filtered method={} runs={} seed={}", t.method, t.runs, t.seed),
        None => println!("# mode=baseline"),
    }
    println!("rank,place_id,best_similarity,threshold,margin");
    for (i, s) in result.places.iter().take(args.top).enumerate() {
        let threshold = s.threshold.map_or_else(|| "-".to_string(), |t| t.to_string());
        println!(
            "{},{},{},{},{}",
            i + 1,
            s.place_id,
            s.best_similarity,
            threshold,
            s.margin
        );
    }
    match best_match(&result) {
        BestMatch::Place(p) => {
            println!("best_match,{p}");
            Ok(ExitCode::SUCCESS)
        }
        BestMatch::Unknown => {
            println!("UNKNOWN");
            Ok(ExitCode::from(EXIT_UNKNOWN_PLACE))
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring thread pool")?;
    }
    match &cli.command {
        Command::BuildMini(a) => build_mini_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Thresholds(a) => thresholds_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Evaluate(a) => evaluate_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Match(a) => match_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
