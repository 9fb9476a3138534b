mod bundle;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use survmix::baselines::kmeans_survival_fit;
use survmix::data::{apply_preprocess, fit_preprocess, load_csv, stratified_split, ColumnSchema, SurvivalDataset};
use survmix::mixture::{self, cross_validate_k, responsibilities, FitConfig, KSelection};
use survmix::protocol::{self, BenchmarkConfig};
use survmix::synth::{self, SynthSpec};

use bundle::{Bundle, Fitted};

#[derive(Parser)]
#[command(
    name = "survmix",
    version,
    about = "Cluster right-censored survival data with a gated mixture of Kaplan-Meier curves"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON spec
    Synth(SynthArgs),
    /// Stratified train/validation/test split of a CSV
    Split(SplitArgs),
    /// Fit a model and write it as JSON
    Fit(FitArgs),
    /// Per-subject survival curves, cluster and uncertainty
    Predict(PredictArgs),
    /// td-C-index, log-rank across predicted clusters, cluster sizes
    Evaluate(EvaluateArgs),
    /// Repeated-resplit comparison against K-means Survival
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the matching column schema here
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Output directory for train.csv, validation.csv and test.csv
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_fractions, default_value = "0.6,0.2,0.2")]
    fractions: (f64, f64, f64),
}

#[derive(Args, Clone)]
struct FitFlags {
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Choose k by 3-fold CV, e.g. `2..7` or `2,3,5`
    #[arg(long, value_parser = parse_k_grid)]
    k_grid: Option<KGrid>,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 0.001)]
    churn_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight of the uniform outlier component
    #[arg(long, default_value_t = 0.0)]
    tau0: f64,
}

impl FitFlags {
    fn config(&self) -> FitConfig {
        FitConfig {
            max_iters: self.max_iters,
            churn_tol: self.churn_tol,
            seed: self.seed,
            n_restarts: self.restarts,
            outlier_weight: self.tau0,
            ..FitConfig::new(self.k)
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Kmeans,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: FitFlags,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the schema stored in the model file
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    grid_points: usize,
    /// Grid end; defaults to the largest training time
    #[arg(long)]
    grid_max: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: FitFlags,
    #[arg(long, default_value_t = 20)]
    splits: usize,
}

/// Wrapper so clap treats the grid as one value rather than a repeated flag.
#[derive(Debug, Clone)]
struct KGrid(Vec<usize>);

fn parse_k_grid(s: &str) -> std::result::Result<KGrid, String> {
    let grid: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| format!("bad grid start in {s:?}"))?;
        let b: usize = b.trim().parse().map_err(|_| format!("bad grid end in {s:?}"))?;
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("bad k {p:?}")))
            .collect::<std::result::Result<_, _>>()?
    };
    if grid.is_empty() || grid.contains(&0) {
        return Err(format!("k grid {s:?} must be non-empty with every k >= 1"));
    }
    Ok(KGrid(grid))
}

fn parse_fractions(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad fraction {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated fractions, got {s:?}")),
    }
}

fn read_schema(path: &Path) -> Result<ColumnSchema> {
    ColumnSchema::from_json_file(path).with_context(|| format!("loading schema {}", path.display()))
}

fn load_dataset(data: &Path, schema: &ColumnSchema) -> Result<survmix::data::RawTable> {
    load_csv(data, schema).with_context(|| format!("loading {}", data.display()))
}

/// Loads `data` and applies the bundle's preprocessing.
fn prepare(bundle: &Bundle, data: &Path, schema: Option<&Path>) -> Result<SurvivalDataset> {
    let schema = match schema {
        Some(p) => read_schema(p)?,
        None => bundle.recipe.schema.clone(),
    };
    let table = load_dataset(data, &schema)?;
    Ok(apply_preprocess(&table, &bundle.recipe)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec = SynthSpec::from_json_str(&text).with_context(|| format!("parsing spec {}", args.spec.display()))?;
    let out = synth::generate(&spec)?;
    synth::write_csv_file(&args.out, &out.dataset, Some(&out.labels))?;
    if let Some(path) = &args.schema {
        let schema = synth::schema_for(spec.n_features());
        write_text(path, &(serde_json::to_string_pretty(&schema)? + "\n"))?;
    }
    Ok(())
}

fn cmd_split(args: &SplitArgs) -> Result<()> {
    let schema = read_schema(&args.input.schema)?;
    let table = load_dataset(&args.input.data, &schema)?;
    let parts = stratified_split(&table.labels()?, args.fractions, args.seed)?;

    let mut reader = csv::Reader::from_path(&args.input.data)?;
    let header = reader.headers()?.clone();
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (name, part) in [("train", &parts.train), ("validation", &parts.validation), ("test", &parts.test)] {
        let path = args.out.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(&header)?;
        for &i in &part.ids {
            w.write_record(&records[i])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn write_cv_report(path: &Path, selection: &KSelection) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["k", "fold", "c_index"])?;
    for r in &selection.rows {
        w.write_record([r.k.to_string(), (r.fold + 1).to_string(), r.c_index.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let schema = read_schema(&args.input.schema)?;
    let table = load_dataset(&args.input.data, &schema)?;
    let recipe = fit_preprocess(&table)?;
    let data = apply_preprocess(&table, &recipe)?;
    let config = args.flags.config();

    let grid = args.flags.k_grid.as_ref().map(|g| g.0.as_slice());
    let (model, selection) = match (args.baseline, grid) {
        (None, None) => (Fitted::Survmixclust(mixture::fit(&data, &config)?), None),
        (None, Some(grid)) => {
            let (m, sel) = mixture::select_k(&data, grid, &config)?;
            (Fitted::Survmixclust(m), Some(sel))
        }
        (Some(Baseline::Kmeans), None) => (
            Fitted::KmeansSurvival(kmeans_survival_fit(&data, config.k, config.seed)?),
            None,
        ),
        (Some(Baseline::Kmeans), Some(grid)) => {
            let sel = cross_validate_k(&data, grid, config.seed, kmeans_survival_fit)?;
            let m = kmeans_survival_fit(&data, sel.best_k, config.seed)?;
            (Fitted::KmeansSurvival(m), Some(sel))
        }
    };

    if let Some(sel) = &selection {
        write_cv_report(&sibling(&args.out, "cv.csv"), sel)?;
        eprintln!("selected k = {}", sel.best_k);
    }
    if let Fitted::Survmixclust(m) = &model {
        let path = sibling(&args.out, "diagnostics.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["iteration", "churn", "log_likelihood"])?;
        w.write_record(["0".to_string(), String::new(), m.diagnostics().initial_log_likelihood.to_string()])?;
        for r in &m.diagnostics().trace {
            w.write_record([r.iteration.to_string(), r.churn.to_string(), r.log_likelihood.to_string()])?;
        }
        w.flush()?;
    }
    Bundle {
        recipe,
        train_max_time: data.max_time(),
        model,
    }
    .save(&args.out)
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let bundle = Bundle::load(&args.model)?;
    let data = prepare(&bundle, &args.data, args.schema.as_deref())?;
    if args.grid_points < 2 {
        bail!("--grid-points must be at least 2");
    }
    let end = args.grid_max.unwrap_or(bundle.train_max_time);
    if !(end > 0.0 && end.is_finite()) {
        bail!("grid end {end} must be positive");
    }
    let step = end / (args.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..args.grid_points).map(|i| i as f64 * step).collect();

    let predictor = bundle.model.predictor();
    let curves = predictor.predict_curves(data.features.view(), &grid)?;
    let clusters = predictor.predict_clusters(data.features.view())?;
    let uncertainty = match &bundle.model {
        Fitted::Survmixclust(m) => responsibilities(m, &data)?.uncertainty(),
        // Hard nearest-centroid assignment.
        Fitted::KmeansSurvival(_) => vec![0.0; data.len()],
    };

    let mut w = csv::Writer::from_path(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let mut header = vec!["row".to_string(), "cluster".to_string(), "uncertainty".to_string()];
    header.extend(grid.iter().map(|t| format!("t={t}")));
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec = vec![
            (data.ids[i] + 1).to_string(),
            (clusters[i] + 1).to_string(),
            uncertainty[i].to_string(),
        ];
        rec.extend(curves.curves()[i].iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let bundle = Bundle::load(&args.model)?;
    let data = prepare(&bundle, &args.data, args.schema.as_deref())?;
    let e = protocol::evaluate(bundle.model.predictor(), &data)?;
    let mut report = json!({
        "n": e.n,
        "c_index": e.c_index,
        "logrank": e.logrank.as_ref().map(|r| json!({"stat": r.statistic, "df": r.df, "p": r.p_value})),
        "cluster_sizes": e.cluster_sizes,
    });
    if let Some(note) = &e.logrank_note {
        report["logrank_note"] = json!(note);
    }
    write_text(&args.out, &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let schema = read_schema(&args.input.schema)?;
    let table = load_dataset(&args.input.data, &schema)?;
    let mut config = BenchmarkConfig::new(args.flags.seed);
    config.n_splits = args.splits;
    config.fit = args.flags.config();
    if let Some(grid) = &args.flags.k_grid {
        config.k_grid = grid.0.clone();
    }
    let rows = protocol::benchmark(&table, &config)?;

    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut w = csv::Writer::from_path(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    w.write_record(["split", "model", "k", "c_index", "logrank_stat", "logrank_df", "logrank_p"])?;
    for r in &rows {
        w.write_record([
            (r.split + 1).to_string(),
            r.model.clone(),
            r.k.to_string(),
            r.c_index.to_string(),
            opt(r.logrank_statistic.map(|v| v.to_string())),
            opt(r.logrank_df.map(|v| v.to_string())),
            opt(r.logrank_p.map(|v| v.to_string())),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
