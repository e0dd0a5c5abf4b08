use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use arwlab_core::data::{generate_corpus, load_corpus, save_corpus};
use arwlab_core::eval::{
    build_trials, fairness_report, score_trials, write_report_csv, write_scores_csv,
};
use arwlab_core::experiment::{run_experiment, write_summary_csv};
use arwlab_core::gradcheck::{run_gradcheck, Component};
use arwlab_core::model::{load_checkpoint, save_checkpoint};
use arwlab_core::numerics::streams;
use arwlab_core::trainer::train;
use arwlab_core::{
    Error, ErrorClass, ExperimentConfig, GenConfig, RngStream, Role, TrainConfig, Variant,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "arwlab",
    version,
    about = "Adversarial reweighting lab for speaker verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Train one variant on a corpus.
    Train(TrainArgs),
    /// Score eval trials and write a fairness report.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Baseline against every reweighting variant over several seeds.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// table1-gender, table2-nationality, both-axes or fairness-fixture.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// GenConfig as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    /// TrainConfig as JSON. Flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from N = 200, K = 128 instead of the desk defaults.
    #[arg(long, conflicts_with = "config")]
    full_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    warmup_epochs: Option<u32>,
    #[arg(long, visible_alias = "K")]
    k: Option<usize>,
    #[arg(long, visible_alias = "H")]
    h: Option<usize>,
    #[arg(long)]
    speakers_per_batch: Option<usize>,
    #[arg(long)]
    utterances_per_speaker: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    /// Adversary steps per learner step.
    #[arg(long)]
    adversary_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    adversary_lr: Option<f64>,
    #[arg(long)]
    label_mix: Option<f64>,
    /// Let the learner gradient flow through the adversary weights.
    #[arg(long)]
    full_gradient: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    trials_per_speaker: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to these components (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    component: Vec<String>,
    /// First of the instance seeds.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// fairness-smoke, table1-gender or table2-nationality.
    #[arg(long, default_value = "fairness-smoke", conflicts_with = "config")]
    preset: String,
    /// ExperimentConfig as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeds, starting at --first-seed.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, default_value_t = 1)]
    first_seed: u64,
    /// Comma-separated subset; baseline is always included.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long)]
    epochs: Option<u32>,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    artifacts: BTreeMap<&'static str, PathBuf>,
    timings_ms: BTreeMap<&'static str, f64>,
}

struct Timer {
    start: Instant,
    laps: BTreeMap<&'static str, f64>,
}

impl Timer {
    fn new() -> Self {
        Timer {
            start: Instant::now(),
            laps: BTreeMap::new(),
        }
    }

    fn lap<T>(&mut self, name: &'static str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.laps.insert(name, t.elapsed().as_secs_f64() * 1e3);
        out
    }

    fn finish(mut self) -> BTreeMap<&'static str, f64> {
        self.laps
            .insert("total", self.start.elapsed().as_secs_f64() * 1e3);
        self.laps
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code: 1,
        message: format!("invalid configuration in {}: {e}", path.display()),
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_manifest(manifest: &RunManifest, path: &Path) -> CliResult<()> {
    if let Some(missing) = manifest.artifacts.values().find(|p| !p.exists()) {
        return Err(Failure {
            code: 2,
            message: format!("artifact {} was not written", missing.display()),
        });
    }
    write_json(manifest, path)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn gen_preset(name: &str, seed: u64) -> CliResult<GenConfig> {
    Ok(match name {
        "table1-gender" => GenConfig::table1_gender(seed),
        "table2-nationality" => GenConfig::table2_nationality(seed),
        "both-axes" => GenConfig::both_axes(seed),
        "fairness-fixture" => GenConfig::fairness_fixture(seed),
        other => {
            return Err(Error::invalid_config(
                "preset",
                format!("unknown '{other}', expected table1-gender, table2-nationality, both-axes or fairness-fixture"),
            )
            .into())
        }
    })
}

fn cmd_gen_data(args: GenDataArgs) -> CliResult<()> {
    let mut timer = Timer::new();
    let config = match &args.config {
        Some(path) => {
            let mut c: GenConfig = read_json(path)?;
            if let Some(seed) = args.seed {
                c.seed = seed;
            }
            c
        }
        None => gen_preset(
            args.preset.as_deref().unwrap_or("fairness-fixture"),
            args.seed.unwrap_or(0),
        )?,
    };
    let corpus = timer.lap("generate", || {
        generate_corpus(&config, &mut RngStream::derive(config.seed, streams::DATA))
    })?;
    timer.lap("write", || save_corpus(&corpus, &args.out))?;
    let manifest_path = args.manifest.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".manifest.json");
        p.into()
    });
    write_manifest(
        &RunManifest {
            tool: "arwlab",
            version: env!("CARGO_PKG_VERSION"),
            command: "gen-data",
            config: to_value(&config),
            seeds: vec![config.seed],
            artifacts: BTreeMap::from([("corpus", args.out.clone())]),
            timings_ms: timer.finish(),
        },
        &manifest_path,
    )?;
    println!(
        "wrote {} speakers to {}",
        corpus.speakers.len(),
        args.out.display()
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c = match (&args.config, args.full_scale) {
        (Some(path), _) => read_json(path)?,
        (None, true) => TrainConfig::full_scale(),
        (None, false) => TrainConfig::default(),
    };
    if let Some(v) = &args.variant {
        c.variant = Variant::from_str(v)?;
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(e) = args.epochs {
        c.epochs = e;
        c.warmup_epochs = c.warmup_epochs.min(e);
    }
    if let Some(w) = args.warmup_epochs {
        c.warmup_epochs = w;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(x) = args.$flag { c.$field = x; })*
        };
    }
    set!(k => k, h => h, speakers_per_batch => speakers_per_batch,
         utterances_per_speaker => utterances_per_speaker, adversary_steps => adversary_steps,
         label_mix => label_mix);
    if let Some(b) = args.batches_per_epoch {
        c.batches_per_epoch = Some(b);
    }
    if let Some(lr) = args.lr {
        c.learner_lr.base_lr = lr;
    }
    if let Some(lr) = args.adversary_lr {
        c.adversary_lr.base_lr = lr;
    }
    if args.full_gradient {
        c.stop_gradient = false;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let mut timer = Timer::new();
    let config = train_config(&args)?;
    let corpus = timer.lap("load", || load_corpus(&args.corpus))?;
    let (model, history) = timer.lap("train", || train(&config, &corpus))?;
    ensure_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    let mut artifacts = BTreeMap::new();
    let learner_path = dir.join("learner.arwm");
    save_checkpoint(&model.learner, &learner_path)?;
    artifacts.insert("learner", learner_path);
    if let Some(adv) = &model.adversary {
        let p = dir.join("adversary.arwm");
        save_checkpoint(adv, &p)?;
        artifacts.insert("adversary", p);
    }
    let history_path = dir.join("history.jsonl");
    let mut out = create_file(&history_path)?;
    history
        .write_jsonl(&mut out)
        .and_then(|_| out.flush())
        .map_err(io_err(&history_path))?;
    artifacts.insert("history", history_path);
    let config_path = dir.join("train-config.json");
    write_json(&config, &config_path)?;
    artifacts.insert("config", config_path);
    artifacts.insert("corpus", args.corpus.clone());
    write_manifest(
        &RunManifest {
            tool: "arwlab",
            version: env!("CARGO_PKG_VERSION"),
            command: "train",
            config: to_value(&config),
            seeds: vec![config.seed],
            artifacts,
            timings_ms: timer.finish(),
        },
        &dir.join("manifest.json"),
    )?;
    let last = history.records.last().map(|r| r.ap_loss);
    match last {
        Some(l) => println!(
            "trained {} for {} epochs, final AP loss {l:.4}",
            config.variant, config.epochs
        ),
        None => println!("wrote untrained {} model", config.variant),
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let mut timer = Timer::new();
    let corpus = load_corpus(&args.corpus)?;
    let model = load_checkpoint(&args.checkpoint, Role::Learner)?;
    let trials = build_trials(
        &corpus,
        args.trials_per_speaker,
        &mut RngStream::derive(args.seed, streams::TRIALS),
    )?;
    let scores = timer.lap("score", || score_trials(&model, &corpus, &trials))?;
    let report = fairness_report(&scores, &trials)?;
    ensure_dir(&args.out_dir)?;
    let dir = &args.out_dir;
    let json_path = dir.join("report.json");
    write_json(&report, &json_path)?;
    let csv_path = dir.join("report.csv");
    write_report_csv(&report, create_file(&csv_path)?)?;
    let scores_path = dir.join("scores.csv");
    write_scores_csv(&trials, &scores, create_file(&scores_path)?)?;
    write_manifest(
        &RunManifest {
            tool: "arwlab",
            version: env!("CARGO_PKG_VERSION"),
            command: "eval",
            config: serde_json::json!({
                "trials_per_speaker": args.trials_per_speaker,
                "seed": args.seed,
            }),
            seeds: vec![args.seed],
            artifacts: BTreeMap::from([
                ("corpus", args.corpus.clone()),
                ("checkpoint", args.checkpoint.clone()),
                ("report_json", json_path),
                ("report_csv", csv_path),
                ("scores", scores_path),
            ]),
            timings_ms: timer.finish(),
        },
        &dir.join("manifest.json"),
    )?;
    println!(
        "overall EER {:.2}% over {} trials",
        report.overall_eer_percent,
        trials.len()
    );
    for axis in &report.axes {
        let cells: Vec<String> = axis
            .cells
            .iter()
            .map(|c| match c.eer_percent {
                Some(e) => format!("{} {e:.2}", c.category),
                None => format!("{} undefined", c.category),
            })
            .collect();
        println!(
            "{}: {} | gap {:.2} std {:.2}",
            axis.axis,
            cells.join(", "),
            axis.gap,
            axis.std
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let components = if args.component.is_empty() {
        Component::ALL.to_vec()
    } else {
        args.component
            .iter()
            .map(|c| Component::parse(c))
            .collect::<Result<Vec<_>, _>>()?
    };
    let seeds: Vec<u64> = (0..args.seeds.max(1))
        .map(|i| args.seed.wrapping_add(i))
        .collect();
    let report = run_gradcheck(&components, &seeds)?;
    for c in &report.components {
        println!(
            "{:12} worst {:.3e} (seed {}, coordinate {}) over {} coordinates  {}",
            c.component.name(),
            c.worst_relative_error,
            c.worst_seed,
            c.worst_coordinate,
            c.coordinates,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = &args.out {
        write_json(&report, path)?;
    }
    match report.components.iter().find(|c| !c.passed) {
        None => Ok(()),
        Some(c) => Err(Failure {
            code: 3,
            message: format!(
                "gradient mismatch in {} at coordinate {} (seed {}): relative error {:.3e} > {:.0e}",
                c.component.name(),
                c.worst_coordinate,
                c.worst_seed,
                c.worst_relative_error,
                report.tolerance
            ),
        }),
    }
}

fn cmd_experiment(args: ExperimentArgs) -> CliResult<()> {
    let mut timer = Timer::new();
    let mut config = match &args.config {
        Some(path) => read_json(path)?,
        None => ExperimentConfig::preset(&args.preset)?,
    };
    if let Some(n) = args.seeds {
        config.seeds = (0..n).map(|i| args.first_seed + i).collect();
    }
    if !args.variants.is_empty() {
        let mut vs = vec![Variant::Baseline];
        for v in &args.variants {
            let v = Variant::from_str(v)?;
            if !vs.contains(&v) {
                vs.push(v);
            }
        }
        config.variants = vs;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
        config.train.warmup_epochs = config.train.warmup_epochs.min(e);
    }
    let report = timer.lap("run", || run_experiment(&config, args.workers))?;
    ensure_dir(&args.out_dir)?;
    let json_path = args.out_dir.join("experiment.json");
    write_json(&report, &json_path)?;
    let csv_path = args.out_dir.join("experiment.csv");
    write_summary_csv(&report, create_file(&csv_path)?)?;
    write_manifest(
        &RunManifest {
            tool: "arwlab",
            version: env!("CARGO_PKG_VERSION"),
            command: "experiment",
            config: to_value(&config),
            seeds: config.seeds.clone(),
            artifacts: BTreeMap::from([("report_json", json_path), ("report_csv", csv_path)]),
            timings_ms: timer.finish(),
        },
        &args.out_dir.join("manifest.json"),
    )?;
    println!(
        "{:12} {:>5} {:>11} gap/std per axis",
        "variant", "runs", "overall EER"
    );
    for s in &report.summary {
        let axes: Vec<String> = s
            .axes
            .iter()
            .map(|a| format!("{} gap {:.2} std {:.2}", a.axis, a.gap, a.std))
            .collect();
        let eer = s
            .overall_eer_percent
            .map(|e| format!("{e:.2}"))
            .unwrap_or("-".into());
        println!(
            "{:12} {:>5} {:>11} {}",
            s.variant.name(),
            s.completed,
            eer,
            axes.join("; ")
        );
    }
    let failed: Vec<_> = report
        .replicas
        .iter()
        .filter(|r| r.error.is_some())
        .collect();
    if let Some(first) = failed.first() {
        let code = match first.error_class {
            Some(ErrorClass::Usage) => 1,
            Some(ErrorClass::Data) => 2,
            _ => 3,
        };
        return Err(Failure {
            code,
            message: format!(
                "{} of {} replicas failed; first: {} seed {}: {}",
                failed.len(),
                report.replicas.len(),
                first.variant,
                first.seed,
                first.error.as_deref().unwrap_or_default()
            ),
        });
    }
    Ok(())
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
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
