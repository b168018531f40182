use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use mslc_core::checkpoint::Checkpoint;
use mslc_core::data::{load_csv, save_csv, CsvSchema, SplitTag};
use mslc_core::experiment::{clean_splits, prepare, run_prepared, start_run, ExperimentConfig, PreparedData, RunManifest};
use mslc_core::noise::{build_transition, empirical_transition, inject, NoiseKind};
use mslc_core::report::{mean_std, read_snapshot, snapshot_metrics, summarize_by_method, write_snapshot, RunReport};
use mslc_core::train::Method;

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "mslc", version, about = "Meta soft label correction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the clean train/meta/test splits as CSV.
    GenData(GenDataArgs),
    /// Corrupt the labels of a CSV file with the configured noise.
    Inject(InjectArgs),
    /// Train one method and write its report, snapshot and checkpoint.
    Train(TrainArgs),
    /// Sweep fixed beta values against learned beta over several seeds.
    AblateBeta(AblateArgs),
    /// Tabulate Best/Last/corrected accuracy of finished runs.
    Compare(CompareArgs),
    /// Recompute label metrics from a snapshot file.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML). The built-in benchmark when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Classifier learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    meta_lr: Option<f64>,
    #[arg(long, value_enum)]
    noise_kind: Option<NoiseArg>,
    #[arg(long)]
    noise_ratio: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    None,
    Symmetric,
    Asymmetric,
}

impl ConfigArgs {
    /// Config file plus flag overrides, fully validated.
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.warmup_epochs {
            cfg.train.warmup_epochs = Some(v);
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.meta_lr {
            cfg.train.meta_lr = v;
        }
        if let Some(v) = self.noise_kind {
            cfg.noise.kind = match v {
                NoiseArg::None => NoiseKind::None,
                NoiseArg::Symmetric => NoiseKind::Symmetric,
                NoiseArg::Asymmetric => NoiseKind::Asymmetric,
            };
            if cfg.noise.kind == NoiseKind::Asymmetric && cfg.noise.pair_map.is_none() && cfg.noise.preset.is_none() {
                cfg.noise.preset = Some("next".into());
            }
        }
        if let Some(v) = self.noise_ratio {
            cfg.noise.ratio = v;
        }
        let cfg = cfg.with_seed(self.seed.unwrap_or(cfg.seed));
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, short, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Clean CSV with a `label` column.
    #[arg(long)]
    input: PathBuf,
    /// Noisy CSV: features, noisy `label`, clean `true_label`.
    #[arg(long, short)]
    out: PathBuf,
    /// Per-row corruption mask; defaults to `<out>.mask.csv`.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Mslc,
    Ce,
    Finetune,
    Bootstrap,
    JointOpt,
    FixedBeta,
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long, short, value_enum, default_value = "mslc")]
    method: MethodArg,
    /// Constant beta for `fixed-beta`.
    #[arg(long)]
    beta: Option<f64>,
    /// Label weight for `bootstrap`; config `baseline.bootstrap_lambda` otherwise.
    #[arg(long)]
    lambda: Option<f64>,
    /// History length for `joint-opt`; config `baseline.joint_opt_q` otherwise.
    #[arg(long)]
    q: Option<usize>,
}

impl MethodArgs {
    fn resolve(&self, cfg: &ExperimentConfig) -> Result<Method> {
        let m = match self.method {
            MethodArg::Mslc => Method::Mslc,
            MethodArg::Ce => Method::Ce,
            MethodArg::Finetune => Method::Finetune,
            MethodArg::Bootstrap => Method::Bootstrap {
                lambda: self.lambda.unwrap_or(cfg.baseline.bootstrap_lambda),
            },
            MethodArg::JointOpt => Method::JointOpt {
                q: self.q.unwrap_or(cfg.baseline.joint_opt_q),
            },
            MethodArg::FixedBeta => Method::FixedBeta {
                beta: self.beta.context("--method fixed-beta needs --beta")?,
            },
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long, short, default_value = "runs/train")]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run of the same manifest.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save a checkpoint and exit after this epoch.
    #[arg(long)]
    stop_after: Option<usize>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, short, default_value = "runs/ablate-beta")]
    out: PathBuf,
    /// Seeds of the repetitions; config `baseline.seeds` otherwise.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Concurrent runs.
    #[arg(long, short, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories; searched recursively for `report-*.json`.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long)]
    json: bool,
    /// Allow runs of one seed that were trained on different data.
    #[arg(long)]
    allow_mixed_data: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Snapshot CSV written by `train`.
    #[arg(long, short)]
    snapshot: PathBuf,
    /// Number of classes; inferred from the labels when omitted.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    json: bool,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn hash_tag(hash: &str) -> &str {
    &hash[..16.min(hash.len())]
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = args.config.load()?;
    if cfg.data.csv.is_some() {
        bail!("gen-data needs a synthetic data section, not CSV sources");
    }
    let (train, meta, test) = clean_splits(&cfg)?;
    create_dir(&args.out)?;
    let mut hashes = BTreeMap::new();
    for (name, ds) in [("train", &train), ("meta", &meta), ("test", &test)] {
        save_csv(ds, &args.out.join(format!("{name}.csv")))?;
        hashes.insert(name, ds.content_hash());
    }
    #[derive(Serialize)]
    struct DataManifest<'a> {
        version: &'a str,
        config: &'a ExperimentConfig,
        dataset_hashes: BTreeMap<&'a str, String>,
    }
    write_json(
        &args.out.join("data.json"),
        &DataManifest {
            version: mslc_core::experiment::CODE_VERSION,
            config: &cfg,
            dataset_hashes: hashes,
        },
    )?;
    out!(
        "wrote {} train, {} meta, {} test samples to {}",
        train.len(),
        meta.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_inject(args: InjectArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let c = cfg.data.classes;
    let schema = CsvSchema::standard(c);
    let mut ds = load_csv(&args.input, &schema, SplitTag::Train)?;
    let expected = build_transition(&cfg.noise, c)?;
    let inj = inject(ds.true_labels(), &cfg.noise, c)?;
    ds.apply_noise(&inj)?;
    let mask_path = args.mask.clone().unwrap_or_else(|| args.out.with_extension("mask.csv"));
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_csv(&ds, &args.out)?;
    let mut mask = String::from("index,true_label,observed_label,corrupted\n");
    for (i, (&t, &o)) in ds.true_labels().iter().zip(ds.observed_labels()).enumerate() {
        mask.push_str(&format!("{i},{t},{o},{}\n", t != o));
    }
    fs::write(&mask_path, mask).with_context(|| format!("writing {}", mask_path.display()))?;

    let (empirical, _) = empirical_transition(ds.true_labels(), ds.observed_labels(), c)?;
    out!("corrupted {:.4} of {} labels", inj.corrupted_fraction(), ds.len());
    out!("class  expected row -> empirical row");
    for k in 0..c {
        let fmt = |row: &[f64]| row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
        out!("{k:>5}  {}  ->  {}", fmt(expected.row(k)), fmt(empirical.row(k)));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let method = args.method.resolve(&cfg)?;
    let resume = match &args.resume {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let data = prepare(&cfg)?;
    create_dir(&args.out)?;
    let manifest = RunManifest::new(&cfg, method, &data);
    write_json(&args.out.join("manifest.json"), &manifest)?;

    let ckpt_path = args.out.join("checkpoint.ckpt");
    let snap_dir = args.out.join("snapshots");
    let mut trainer = start_run(&cfg, method, &data, resume.as_ref())?;
    let total = trainer.total_epochs();
    while !trainer.is_finished() {
        let e = trainer.step_epoch()?.clone();
        if !args.quiet {
            let corrected = e
                .labels
                .as_ref()
                .map_or(String::new(), |l| format!(" corrected {:.4}", l.corrected.overall));
            eprintln!(
                "epoch {:>3}/{total} {:?} lr {:.4} loss {:.4} test {:.4}{corrected}",
                e.epoch, e.phase, e.lr, e.train_loss, e.test_accuracy
            );
        }
        let stop = args.stop_after.is_some_and(|n| e.epoch >= n) && !trainer.is_finished();
        if cfg.report.checkpoint_every_epoch || stop {
            trainer.checkpoint()?.save(&ckpt_path)?;
        }
        if cfg.report.snapshot_every_epoch {
            if let Some(rows) = trainer.snapshot()? {
                create_dir(&snap_dir)?;
                write_snapshot(&rows, &snap_dir.join(format!("epoch-{:03}.csv", e.epoch)))?;
            }
        }
        if stop {
            out!("stopped after epoch {}; continue with --resume {}", e.epoch, ckpt_path.display());
            return Ok(());
        }
    }

    let report = trainer.run()?;
    let files = report.emit(&args.out)?;
    if let Some(rows) = trainer.snapshot()? {
        write_snapshot(&rows, &args.out.join(format!("snapshot-{}.csv", hash_tag(&report.manifest_hash))))?;
    }
    let s = report.summary.as_ref().expect("finalized report");
    out!(
        "{} seed {}: best {:.4} (epoch {}) last {:.4}",
        report.method, report.seed, s.best_accuracy, s.best_epoch, s.last_accuracy
    );
    if let Some(l) = &s.final_labels {
        out!("corrected-label accuracy {:.4}", l.corrected.overall);
    }
    out!("report {}", files.report.display());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    method: String,
    /// `None` for learned beta.
    beta: Option<f64>,
    best_per_seed: Vec<f64>,
    best_mean: f64,
    best_std: f64,
    last_mean: f64,
    last_std: f64,
}

#[derive(Serialize)]
struct Ablation {
    seeds: Vec<u64>,
    rows: Vec<AblationRow>,
}

fn cmd_ablate_beta(args: AblateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let seeds = args.seeds.clone().unwrap_or_else(|| cfg.baseline.seeds.clone());
    if seeds.is_empty() || args.jobs == 0 {
        bail!("need at least one seed and one job");
    }
    let mut methods: Vec<Method> = cfg.baseline.beta_grid.iter().map(|&beta| Method::FixedBeta { beta }).collect();
    methods.push(Method::Mslc);

    let prepared: Vec<(ExperimentConfig, PreparedData)> = seeds
        .iter()
        .map(|&s| {
            let c = cfg.with_seed(s);
            let d = prepare(&c)?;
            Ok((c, d))
        })
        .collect::<Result<_>>()?;
    create_dir(&args.out)?;
    let cells: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|&m| (0..seeds.len()).map(move |i| (m, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let reports: Vec<RunReport> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(method, i)| {
                let (c, data) = &prepared[i];
                let out = run_prepared(c, method, data, None, |_| Ok(()))?;
                let dir = args.out.join(method.label()).join(format!("seed-{}", seeds[i]));
                out.report.emit(&dir)?;
                eprintln!(
                    "{} seed {}: best {:.4}",
                    method.label(),
                    seeds[i],
                    out.report.summary.as_ref().map_or(f64::NAN, |s| s.best_accuracy)
                );
                Ok(out.report)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let rows: Vec<AblationRow> = methods
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let runs = &reports[k * seeds.len()..(k + 1) * seeds.len()];
            let best: Vec<f64> = runs.iter().map(|r| r.summary.as_ref().map_or(f64::NAN, |s| s.best_accuracy)).collect();
            let last: Vec<f64> = runs.iter().map(|r| r.summary.as_ref().map_or(f64::NAN, |s| s.last_accuracy)).collect();
            let (best_mean, best_std) = mean_std(&best);
            let (last_mean, last_std) = mean_std(&last);
            AblationRow {
                method: m.label(),
                beta: match m {
                    Method::FixedBeta { beta } => Some(*beta),
                    _ => None,
                },
                best_per_seed: best,
                best_mean,
                best_std,
                last_mean,
                last_std,
            }
        })
        .collect();
    out!("{:<10} {:>16} {:>16}", "beta", "best (%)", "last (%)");
    for r in &rows {
        let beta = r.beta.map_or("learned".to_string(), |b| b.to_string());
        out!(
            "{beta:<10} {:>9.2} ± {:<4.2} {:>9.2} ± {:<4.2}",
            r.best_mean * 100.0,
            r.best_std * 100.0,
            r.last_mean * 100.0,
            r.last_std * 100.0
        );
    }
    let path = args.out.join("ablation.json");
    write_json(&path, &Ablation { seeds, rows })?;
    out!("wrote {}", path.display());
    Ok(())
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("report-") && n.ends_with(".json"))
        {
            found.push(p);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    path: PathBuf,
    method: String,
    seed: u64,
    best: f64,
    last: f64,
    corrected: Option<f64>,
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let mut paths = Vec::new();
    for d in &args.dirs {
        find_reports(d, &mut paths)?;
    }
    if paths.is_empty() {
        bail!("no report-*.json files found");
    }
    let reports: Vec<RunReport> = paths
        .iter()
        .map(|p| RunReport::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<_>>()?;

    let mut data_by_seed: BTreeMap<u64, &str> = BTreeMap::new();
    for r in &reports {
        let seen = data_by_seed.entry(r.seed).or_insert(&r.data_hash);
        if *seen != r.data_hash && !args.allow_mixed_data {
            bail!("runs with seed {} were trained on different data; pass --allow-mixed-data to compare anyway", r.seed);
        }
    }
    let rows: Vec<CompareRow> = paths
        .iter()
        .zip(&reports)
        .map(|(p, r)| {
            let s = r.summary.as_ref().with_context(|| format!("{} is not finalized", p.display()))?;
            Ok(CompareRow {
                path: p.clone(),
                method: r.method.clone(),
                seed: r.seed,
                best: s.best_accuracy,
                last: s.last_accuracy,
                corrected: s.final_labels.as_ref().map(|l| l.corrected.overall),
            })
        })
        .collect::<Result<_>>()?;
    let methods = summarize_by_method(&reports)?;

    if args.json {
        #[derive(Serialize)]
        struct Comparison<'a> {
            runs: &'a [CompareRow],
            methods: &'a [mslc_core::report::MethodSummary],
        }
        out!("{}", serde_json::to_string_pretty(&Comparison { runs: &rows, methods: &methods })?);
        return Ok(());
    }
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    out!("{:<20} {:>6} {:>8} {:>8} {:>8} {:>10}", "method", "seed", "best", "last", "b-l", "corrected");
    for r in &rows {
        out!(
            "{:<20} {:>6} {:>8} {:>8} {:>8} {:>10}",
            r.method,
            r.seed,
            pct(r.best),
            pct(r.last),
            pct(r.best - r.last),
            r.corrected.map_or("-".into(), pct)
        );
    }
    out!("");
    out!("{:<20} {:>6} {:>16} {:>16} {:>10}", "method", "runs", "best", "last", "corrected");
    for m in &methods {
        out!(
            "{:<20} {:>6} {:>8} ± {:<5} {:>8} ± {:<5} {:>10}",
            m.method,
            m.runs,
            pct(m.best_mean),
            pct(m.best_std),
            pct(m.last_mean),
            pct(m.last_std),
            m.corrected_accuracy_mean.map_or("-".into(), pct)
        );
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let rows = read_snapshot(&args.snapshot)?;
    if rows.is_empty() {
        bail!("{} has no rows", args.snapshot.display());
    }
    let inferred = rows
        .iter()
        .map(|r| r.true_label.max(r.observed_label).max(r.corrected_label))
        .max()
        .unwrap_or(0)
        + 1;
    let classes = args.classes.unwrap_or(inferred);
    if classes < inferred {
        bail!("labels reach class {}, but --classes is {classes}", inferred - 1);
    }
    let m = snapshot_metrics(&rows, classes);
    if args.json {
        out!("{}", serde_json::to_string_pretty(&m)?);
        return Ok(());
    }
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    out!("samples                 {}", rows.len());
    out!("corrected accuracy      {:.4}", m.corrected.overall);
    out!("  clean subset          {}", opt(m.corrected.clean));
    out!("  noisy subset          {}", opt(m.corrected.noisy));
    out!("mean alpha clean/noisy  {} / {}", opt(m.alpha.clean_mean), opt(m.alpha.noisy_mean));
    out!("alpha gap               {}", opt(m.alpha.gap));
    out!("mean beta               {}", opt(m.beta_mean));
    out!("corrected-vs-true confusion:");
    for (k, row) in m.corrected_confusion.iter().enumerate() {
        out!("  {k:>3}  {}", row.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Inject(a) => cmd_inject(a),
        Command::Train(a) => cmd_train(a),
        Command::AblateBeta(a) => cmd_ablate_beta(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
