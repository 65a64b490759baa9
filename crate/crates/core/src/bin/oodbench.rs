use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use oodbench::bench::{self, DeskProvider, ExternalProvider, PackProvider, RunConfig};
use oodbench::corpus::{read_text_table, write_text_table, TableFormat, TableSpec};
use oodbench::deskmodel::{self, TrainingConfig};
use oodbench::metrics;
use oodbench::pack::{read_manifest, read_pack, write_pack, ClassifierHead, FeaturePack, LOGIT_TOLERANCE};
use oodbench::scenarios::{self, ScenarioConfig, ScenarioPlan};
use oodbench::scorers::persist::{load_detector, save_detector};
use oodbench::scorers::{fit, parse_methods, score, Method, ScorerConfig};
use oodbench::{LabeledCorpus, Matrix, Split};

#[derive(Parser)]
#[command(name = "oodbench", version, about = "Post-hoc OOD detection benchmark for text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate or build feature packs.
    #[command(subcommand)]
    Pack(PackCommand),
    /// Train the built-in classifier and export a pack.
    TrainDesk(TrainDeskArgs),
    /// Word-shuffle corruption of a text table.
    Corrupt(CorruptArgs),
    /// Expand a scenario file into plans.
    Scenario(ScenarioArgs),
    /// Fit one detector on a pack's `train` split.
    Fit(FitArgs),
    /// Score a pack split with a saved detector.
    Score(ScoreArgs),
    /// Detection metrics from two score files.
    Eval(EvalArgs),
    /// Full pipeline: scenario, packs, all methods, reports.
    Bench(BenchArgs),
    /// Re-render reports from a rows.csv.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum PackCommand {
    /// Check every file, checksum and the head/logit contract.
    Validate { dir: PathBuf },
    /// Build a pack from headerless numeric CSV files.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    out: PathBuf,
    /// `NAME=FEATURES.csv[,LOGITS.csv[,LABELS.csv]]`; use `-` to skip logits.
    #[arg(long = "split", required = true)]
    splits: Vec<String>,
    #[arg(long)]
    head_weight: Option<PathBuf>,
    #[arg(long)]
    head_bias: Option<PathBuf>,
    /// Class count, needed only without a head.
    #[arg(long)]
    n_classes: Option<usize>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, default_value = "text")]
    text_column: String,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long)]
    split_column: Option<String>,
}

impl TableArgs {
    fn spec(&self) -> TableSpec {
        TableSpec {
            text_column: self.text_column.clone(),
            label_column: self.label_column.clone(),
            split_column: self.split_column.clone(),
            ..TableSpec::default()
        }
    }
}

#[derive(Args)]
struct TrainDeskArgs {
    /// Table with train and val splits (mutually exclusive with --config).
    #[arg(long, conflicts_with = "config")]
    data: Option<PathBuf>,
    #[command(flatten)]
    table: TableArgs,
    /// Scenario file; trains on the plan whose ID corpus is `--id`.
    #[arg(long, requires = "id")]
    config: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value_t = 2021)]
    seed: u64,
    /// TOML file with training settings.
    #[arg(long)]
    training: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    table: TableArgs,
    #[arg(long, default_value_t = 2021)]
    seed: u64,
    /// Shuffle only the K most frequent classes.
    #[arg(long)]
    only_top_k: Option<usize>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    config: PathBuf,
    /// Load all corpora and print their split sizes.
    #[arg(long)]
    resolve: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    packs: PathBuf,
    #[arg(long)]
    method: Method,
    /// TOML file with scorer settings.
    #[arg(long)]
    scorer: Option<PathBuf>,
    /// Split used for KLM templates.
    #[arg(long)]
    calib: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    packs: PathBuf,
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    id_scores: PathBuf,
    #[arg(long)]
    ood_scores: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated, e.g. `msp,knn`; default all eight.
    #[arg(long)]
    methods: Option<String>,
    /// `2021..2025` or `1,2,3`; default from the scenario file.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Use pre-extracted packs under `<packs>/<id>/<seed>/` instead of
    /// training the desk model.
    #[arg(long)]
    packs: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    rows: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "OOD detection results")]
    title: String,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn table_into<T: serde::de::DeserializeOwned + Default>(table: Option<&toml::Table>) -> Result<T> {
    match table {
        Some(t) => Ok(t.clone().try_into()?),
        None => Ok(T::default()),
    }
}

fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        out.push(rec.get(0).unwrap_or("").trim().parse::<f64>()?);
    }
    Ok(out)
}

fn pack_validate(dir: &Path) -> Result<()> {
    let set = read_pack(dir)?;
    let manifest = read_manifest(dir)?;
    println!(
        "pack {}: D={} C={} splits={}",
        dir.display(),
        manifest.d_feature,
        manifest.n_classes,
        set.splits.len()
    );
    for s in &set.splits {
        let dev = match &set.head {
            Some(h) => h.max_logit_deviation(s)?,
            None => None,
        };
        println!(
            "  {:<16} rows={:<8} logits={} labels={} max|z-(Wh+b)|={}",
            s.split_name(),
            s.n_rows(),
            s.logits().is_some(),
            s.labels().is_some(),
            dev.map_or_else(|| "-".into(), |d| format!("{d:.3e}"))
        );
        if let Some(d) = dev.filter(|&d| d > LOGIT_TOLERANCE) {
            bail!(
                "split `{}`: stored logits differ from W h + b by {d:.3e} (> {LOGIT_TOLERANCE:e})",
                s.split_name()
            );
        }
    }
    Ok(())
}

fn pack_ingest(args: &IngestArgs) -> Result<()> {
    let head = match (&args.head_weight, &args.head_bias) {
        (Some(w), Some(b)) => {
            let w = Matrix::from_rows_f64(&read_numeric_csv(w)?)?;
            let bias: Vec<f32> = read_numeric_csv(b)?.into_iter().flatten().map(|v| v as f32).collect();
            Some(ClassifierHead::new(w, bias)?)
        }
        (None, None) => None,
        _ => bail!("--head-weight and --head-bias go together"),
    };
    let n_classes = match (&head, args.n_classes) {
        (Some(h), _) => h.n_classes(),
        (None, Some(c)) => c,
        (None, None) => bail!("--n-classes is required without a head"),
    };
    let mut packs = Vec::new();
    for spec in &args.splits {
        let (name, files) = spec.split_once('=').context("split must look like NAME=FILES")?;
        let files: Vec<&str> = files.split(',').collect();
        let features = Matrix::from_rows_f64(&read_numeric_csv(Path::new(files[0]))?)?;
        let mut pack = FeaturePack::new(name, features, n_classes)?;
        if let Some(&l) = files.get(1).filter(|l| **l != "-") {
            pack = pack.with_logits(Matrix::from_rows_f64(&read_numeric_csv(Path::new(l))?)?)?;
        }
        if let Some(&l) = files.get(2) {
            let labels = read_numeric_csv(Path::new(l))?
                .into_iter()
                .flatten()
                .map(|v| {
                    if v < 0.0 || v.fract() != 0.0 {
                        bail!("label {v} is not a non-negative integer");
                    }
                    Ok(v as u32)
                })
                .collect::<Result<Vec<u32>>>()?;
            pack = pack.with_labels(labels)?;
        }
        packs.push(pack);
    }
    let manifest = write_pack(&args.out, &packs, head.as_ref())?;
    println!("wrote {} splits to {}", manifest.splits.len(), args.out.display());
    Ok(())
}

fn train_desk(args: &TrainDeskArgs) -> Result<()> {
    let mut training: TrainingConfig = match &args.training {
        Some(p) => read_toml(p)?,
        None => TrainingConfig::default(),
    };
    let (corpus, ood_sets): (LabeledCorpus, Vec<(String, LabeledCorpus)>) = match (&args.data, &args.config) {
        (Some(data), None) => {
            let spec = TableSpec {
                default_split: Split::Train,
                ..args.table.spec()
            };
            (read_text_table(data, TableFormat::from_path(data), &spec)?, Vec::new())
        }
        (None, Some(cfg_path)) => {
            let cfg = ScenarioConfig::load(cfg_path)?;
            if args.training.is_none() {
                training = table_into(cfg.run.training.as_ref())?;
            }
            let base = cfg_path.parent().unwrap_or(Path::new("."));
            let resolved = scenarios::resolve(&cfg, base)?;
            let id = args.id.as_deref().expect("clap enforces --id");
            let plan = resolved
                .plans
                .iter()
                .find(|p| p.id == id)
                .with_context(|| format!("no plan with ID corpus `{id}`"))?;
            let ood = plan
                .ood
                .iter()
                .map(|o| Ok((o.set.clone(), resolved.corpus(&o.set)?.clone())))
                .collect::<Result<Vec<_>>>()?;
            (resolved.corpus(id)?.clone(), ood)
        }
        _ => bail!("pass exactly one of --data or --config"),
    };
    training.seed = args.seed;
    let model = deskmodel::train(&corpus, &training)?;
    let mut packs = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        if corpus.count(split) > 0 {
            packs.push(model.export_pack(&corpus, split)?);
        }
    }
    for (name, c) in &ood_sets {
        packs.push(model.export_texts(name, c.split(Split::Test).map(|r| r.text.as_str()))?);
    }
    write_pack(&args.out, &packs, Some(&model.classifier_head()?))?;
    let hist = args.out.join("history.csv");
    deskmodel::write_history_csv(fs::File::create(&hist)?, &model.history)?;
    let mut summary = serde_json::json!({
        "seed": args.seed,
        "selected_epoch": model.selected_epoch,
        "epochs_run": model.history.len(),
        "label_names": model.label_names,
        "featurizer": model.featurizer,
    });
    if corpus.count(Split::Test) > 0 {
        let test: Vec<_> = corpus.split(Split::Test).cloned().collect();
        summary["test"] = serde_json::to_value(model.classification_report(&test)?)?;
    }
    fs::write(args.out.join("model.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn corrupt(args: &CorruptArgs) -> Result<()> {
    let spec = args.table.spec();
    let corpus = read_text_table(&args.input, TableFormat::from_path(&args.input), &spec)?;
    let only = args
        .only_top_k
        .map(|k| scenarios::most_popular_classes(&corpus, k))
        .transpose()?;
    let out = scenarios::shuffle_corrupt_classes(&corpus, args.seed, only.as_deref())?;
    let file = fs::File::create(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    write_text_table(file, &out, TableFormat::from_path(&args.output))?;
    info!("wrote {} records to {}", out.len(), args.output.display());
    Ok(())
}

fn scenario(args: &ScenarioArgs) -> Result<()> {
    let cfg = ScenarioConfig::load(&args.config)?;
    let plans = cfg.plans()?;
    println!("{}", serde_json::to_string_pretty(&plans)?);
    if args.resolve {
        let base = args.config.parent().unwrap_or(Path::new("."));
        let resolved = scenarios::resolve(&cfg, base)?;
        for (name, c) in &resolved.corpora {
            println!(
                "{name}: classes={} train={} val={} test={}",
                c.n_classes(),
                c.count(Split::Train),
                c.count(Split::Val),
                c.count(Split::Test)
            );
        }
    }
    Ok(())
}

fn fit_cmd(args: &FitArgs) -> Result<()> {
    let set = read_pack(&args.packs)?;
    let head = set.require_head()?;
    let mut cfg: ScorerConfig = match &args.scorer {
        Some(p) => read_toml(p)?,
        None => ScorerConfig::default(),
    };
    cfg.method = args.method;
    let calib = args.calib.as_deref().map(|n| set.require_split(n)).transpose()?;
    let det = fit(&cfg, set.require_split("train")?, head, calib)?;
    save_detector(&args.out, &det)?;
    println!("saved {} detector to {}", det.method(), args.out.display());
    Ok(())
}

fn score_cmd(args: &ScoreArgs) -> Result<()> {
    let set = read_pack(&args.packs)?;
    let det = load_detector(&args.detector)?;
    let scores = score(&det, set.require_split(&args.split)?, set.require_head()?)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["score"])?;
    for s in &scores.scores {
        w.write_record([s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let outcome = metrics::evaluate(&read_scores(&args.id_scores)?, &read_scores(&args.ood_scores)?)?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}

/// Returns whether every cell succeeded.
fn bench_cmd(args: &BenchArgs) -> Result<bool> {
    let cfg = ScenarioConfig::load(&args.config)?;
    let methods = match (&args.methods, &cfg.run.methods) {
        (Some(m), _) => parse_methods(m)?,
        (None, Some(list)) => parse_methods(&list.join(","))?,
        (None, None) => Method::ALL.to_vec(),
    };
    let seeds = match &args.seeds {
        Some(s) => bench::parse_seeds(s)?,
        None => cfg.seeds.clone(),
    };
    let run_cfg = RunConfig {
        methods,
        scorer: table_into(cfg.run.scorer.as_ref())?,
        seeds,
        threads: None,
    };
    let plans: Vec<ScenarioPlan> = cfg.plans()?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let resolved;
    let external;
    let desk;
    let provider: &dyn PackProvider = match &args.packs {
        Some(root) => {
            external = ExternalProvider { root: root.clone() };
            &external
        }
        None => {
            resolved = scenarios::resolve(&cfg, base)?;
            desk = DeskProvider {
                scenario: &resolved,
                training: table_into(cfg.run.training.as_ref())?,
            };
            &desk
        }
    };
    let outcome = bench::run(&plans, provider, &run_cfg)?;
    bench::write_outputs(&args.out, &cfg.name, &plans, provider, &run_cfg, &outcome)?;
    let report = &outcome.report;
    println!(
        "{} rows, {} failed cells, outputs in {}",
        report.rows.len(),
        report.failures.len(),
        args.out.display()
    );
    for f in &report.failures {
        eprintln!(
            "failed: method={} id={} ood={} seed={}: {}",
            f.method, f.id_set, f.ood_set, f.seed, f.error
        );
    }
    Ok(report.is_complete())
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let rows = bench::read_rows_csv(&args.rows)?;
    let report = bench::EvalReport::from_rows(rows, Vec::new())?;
    let md = bench::render_report(&report, &args.title);
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            bench::write_aggregate_csv(&dir.join(bench::AGGREGATE_FILE), &report.aggregates)?;
            fs::write(dir.join(bench::REPORT_FILE), md)?;
        }
        None => print!("{md}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pack(PackCommand::Validate { dir }) => pack_validate(dir).map(|_| true),
        Command::Pack(PackCommand::Ingest(a)) => pack_ingest(a).map(|_| true),
        Command::TrainDesk(a) => train_desk(a).map(|_| true),
        Command::Corrupt(a) => corrupt(a).map(|_| true),
        Command::Scenario(a) => scenario(a).map(|_| true),
        Command::Fit(a) => fit_cmd(a).map(|_| true),
        Command::Score(a) => score_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Bench(a) => bench_cmd(a),
        Command::Report(a) => report_cmd(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
