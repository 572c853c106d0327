//! `ktbench`: preprocess datasets, train and evaluate KT models, run sweeps
//! and aggregate reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use ktbench::dataset::Dataset;
use ktbench::ingest::{parse_canonical, write_canonical};
use ktbench::metrics::format_mean_std;
use ktbench::models::{Checkpoint, Model, ModelConfig, ModelTag};
use ktbench::preprocess::{filter, split_students, Split};
use ktbench::protocols::{eval_question_level, write_predictions_csv, FusionMechanism, MultiStepMode};
use ktbench::runner::{
    audit_leakage, config_hash, cross_validate_with_models, evaluate_ledger, report_rows, sweep,
    train_fold, write_report_csv, ExperimentConfig, PreparedData, RunLedger,
};
use ktbench::synth::{simulate, write_simulation, SimConfig};

#[derive(Parser, Debug)]
#[command(name = "ktbench", version, about = "Knowledge-tracing benchmark runner")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone)]
struct GlobalOpts {
    /// Experiment config (JSON). Omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the split, training and sweep seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Canonical dataset CSV.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Persisted split JSON.
    #[arg(long, global = true)]
    split: Option<PathBuf>,
    /// Model: dkt, dkt+ or sakt. Resets architecture settings to the model's defaults.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Fusion mechanism: ef, lf-avg, lf-mv or lf-s.
    #[arg(long, global = true)]
    fusion: Option<String>,
    /// Observed fraction(s) for multi-step evaluation, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    observed_pct: Option<Vec<f64>>,
    /// Multi-step mode: accumulative or non-accumulative.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Length cutoff separating long from short sequences.
    #[arg(long, global = true)]
    cutoff: Option<usize>,
    /// Print the resolved config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, filter and validate a canonical CSV; write the dataset and its split.
    Preprocess {
        input: PathBuf,
    },
    /// Generate a synthetic dataset with oracle probabilities.
    Simulate(SimArgs),
    /// Five-fold cross-validation; saves the run ledger and fold checkpoints.
    Train,
    /// Evaluates fold models on the test students (training first if needed).
    Evaluate {
        /// Also write question-level test predictions per fold.
        #[arg(long)]
        predictions: bool,
    },
    /// Seeded random hyperparameter search.
    Sweep {
        /// Number of trials (clamped to the grid size).
        #[arg(long)]
        budget: Option<usize>,
    },
    /// KC-level AUC gain of one-by-one over all-in-one evaluation.
    AuditLeakage {
        /// Models to audit, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "dkt,dkt+,sakt")]
        models: Vec<String>,
    },
    /// Aggregates evaluated runs into report.csv.
    Report,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Simulator config (JSON); flags below override it.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    #[arg(long)]
    students: Option<usize>,
    #[arg(long)]
    questions: Option<usize>,
    #[arg(long)]
    kcs: Option<usize>,
    #[arg(long)]
    kcs_min: Option<usize>,
    #[arg(long)]
    kcs_max: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gain: Option<f64>,
    /// File stem of the outputs.
    #[arg(long, default_value = "sim")]
    name: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli.global)?;
    if cli.global.print_config {
        let mut stdout = std::io::stdout().lock();
        return match writeln!(stdout, "{}", config.to_json_pretty()?) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
            _ => Ok(()),
        };
    }
    let Some(command) = cli.command else {
        Cli::command()
            .error(
                clap::error::ErrorKind::MissingSubcommand,
                "a subcommand is required unless --print-config is given",
            )
            .exit();
    };
    match command {
        Command::Preprocess { input } => preprocess(&config, &input),
        Command::Simulate(args) => simulate_cmd(&config, cli.global.seed, args),
        Command::Train => train_cmd(&config),
        Command::Evaluate { predictions } => evaluate_cmd(&config, predictions),
        Command::Sweep { budget } => sweep_cmd(config, budget),
        Command::AuditLeakage { models } => audit_cmd(&config, &models),
        Command::Report => report_cmd(&config),
    }
}

fn resolve_config(opts: &GlobalOpts) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.split_seed = seed;
        cfg.train.seed = seed;
        cfg.sweep.seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    if let Some(data) = &opts.data {
        cfg.dataset = Some(data.clone());
    }
    if let Some(split) = &opts.split {
        cfg.split = Some(split.clone());
    }
    if let Some(model) = &opts.model {
        let tag: ModelTag = model.parse()?;
        if tag != cfg.model.tag() {
            cfg.model = ModelConfig::default_for(tag);
        }
    }
    if let Some(fusion) = &opts.fusion {
        cfg.protocol.fusion = fusion.parse::<FusionMechanism>()?;
    }
    if let Some(pcts) = &opts.observed_pct {
        for &p in pcts {
            if !(p > 0.0 && p < 1.0) {
                bail!("observed pct {p} must lie in (0, 1)");
            }
        }
        cfg.protocol.observed_pcts = pcts.clone();
    }
    if let Some(mode) = &opts.mode {
        cfg.protocol.multistep_modes = vec![mode.parse::<MultiStepMode>()?];
    }
    if let Some(cutoff) = opts.cutoff {
        if cutoff == 0 {
            bail!("length cutoff must be >= 1");
        }
        cfg.protocol.length_cutoff = cutoff;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// Filtered dataset, its expanded sequences and the split in use.
struct Loaded {
    dataset: Dataset,
    data: PreparedData,
    split: Split,
}

fn load_data(cfg: &ExperimentConfig) -> Result<Loaded> {
    let path = match &cfg.dataset {
        Some(p) => p.clone(),
        None => {
            let default = cfg.output_dir.join("dataset.csv");
            if !default.exists() {
                bail!("no dataset given: pass --data or set `dataset` in the config");
            }
            default
        }
    };
    let dataset = filter(&parse_canonical(&path).with_context(|| format!("reading {}", path.display()))?);
    let split = match &cfg.split {
        Some(p) => Split::load(p).with_context(|| format!("reading split {}", p.display()))?,
        None => split_students(&dataset, cfg.split_seed)?,
    };
    let data = PreparedData::new(&dataset)?;
    log::info!("dataset {}: {}", path.display(), dataset.stats());
    Ok(Loaded { dataset, data, split })
}

fn checkpoint_path(cfg: &ExperimentConfig, hash: &str, fold: usize) -> PathBuf {
    cfg.output_dir.join("checkpoints").join(hash).join(format!("fold{fold}.json"))
}

fn preprocess(cfg: &ExperimentConfig, input: &Path) -> Result<()> {
    let raw = parse_canonical(input).with_context(|| format!("reading {}", input.display()))?;
    println!("raw:      {}", raw.stats());
    let dataset = filter(&raw);
    println!("filtered: {}", dataset.stats());
    let report = dataset.validate();
    for (student, pos) in &report.duplicate_rows {
        log::warn!("duplicate row: student {student} position {pos}");
    }
    if !report.is_valid() {
        for v in report.violations.iter().take(20) {
            log::error!("student {} position {}: {:?}", v.student_id, v.position, v.kind);
        }
        bail!("{} validation violations", report.violations.len());
    }
    let split = split_students(&dataset, cfg.split_seed)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_canonical(&dataset, out.join("dataset.csv"))?;
    split.save(out.join("split.json"))?;
    write_json(
        &out.join("stats.json"),
        &json!({ "raw": raw.stats(), "filtered": dataset.stats(), "duplicate_rows": report.duplicate_rows.len() }),
    )?;
    println!(
        "split: {} test students, folds of {:?}",
        split.test_ids.len(),
        split.folds.iter().map(Vec::len).collect::<Vec<_>>()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn simulate_cmd(cfg: &ExperimentConfig, seed: Option<u64>, args: SimArgs) -> Result<()> {
    let mut sim = match &args.sim_config {
        Some(p) => serde_json::from_str::<SimConfig>(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => SimConfig::default(),
    };
    let overrides = [
        (args.students, &mut sim.n_students),
        (args.questions, &mut sim.n_questions),
        (args.kcs, &mut sim.n_kcs),
        (args.kcs_min, &mut sim.kcs_per_question_min),
        (args.kcs_max, &mut sim.kcs_per_question_max),
        (args.steps, &mut sim.steps_per_student),
    ];
    for (value, field) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    if let Some(g) = args.gain {
        sim.gain = g;
    }
    if let Some(s) = seed {
        sim.seed = s;
    }
    let output = simulate(&sim)?;
    let (csv, sidecar) = write_simulation(&output, &cfg.output_dir, &args.name)?;
    println!("{}", output.dataset.stats());
    println!("wrote {} and {}", csv.display(), sidecar.display());
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let loaded = load_data(cfg)?;
    let (ledger, models) = cross_validate_with_models(&loaded.data, &loaded.split, cfg, false)?;
    save_run(cfg, &ledger, &models)?;
    println!(
        "{} {}: mean validation AUC {:.4}",
        ledger.config.model.tag(),
        ledger.config_hash,
        ledger.mean_validation_auc()
    );
    Ok(())
}

fn save_run(cfg: &ExperimentConfig, ledger: &RunLedger, models: &[Model]) -> Result<()> {
    let path = ledger.path_in(&cfg.output_dir);
    ledger.save(&path)?;
    for (record, model) in ledger.records.iter().zip(models) {
        let ckpt = checkpoint_path(cfg, &ledger.config_hash, record.fold);
        if let Some(dir) = ckpt.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Checkpoint::from_model(model).save(&ckpt)?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig, predictions: bool) -> Result<()> {
    let loaded = load_data(cfg)?;
    let hash = config_hash(cfg)?;
    let ledger_path = cfg.output_dir.join("runs").join(format!("{hash}.json"));
    let restored = if ledger_path.exists() {
        let ledger = RunLedger::load(&ledger_path)?;
        let models = ledger
            .records
            .iter()
            .map(|r| {
                let p = checkpoint_path(cfg, &hash, r.fold);
                Checkpoint::load(&p)
                    .and_then(Checkpoint::into_model)
                    .with_context(|| format!("loading checkpoint {}", p.display()))
            })
            .collect::<Result<Vec<_>>>();
        match models {
            Ok(models) => Some((ledger, models)),
            Err(e) => {
                log::warn!("{e:#}; retraining");
                None
            }
        }
    } else {
        None
    };
    let (mut ledger, models) = match restored {
        Some(r) => r,
        None => {
            log::info!("no trained run for config {hash}; training");
            let (ledger, models) = cross_validate_with_models(&loaded.data, &loaded.split, cfg, false)?;
            save_run(cfg, &ledger, &models)?;
            (ledger, models)
        }
    };
    let report = evaluate_ledger(&mut ledger, &models, &loaded.data, &loaded.split)?;
    ledger.save(&ledger_path)?;
    let eval_path = cfg.output_dir.join("eval").join(format!("{hash}.json"));
    if let Some(dir) = eval_path.parent() {
        fs::create_dir_all(dir)?;
    }
    report.save(&eval_path)?;
    if predictions {
        let test = loaded.data.select(&loaded.split.test_ids)?;
        let dir = cfg.output_dir.join("predictions").join(&hash);
        fs::create_dir_all(&dir)?;
        for (record, model) in ledger.records.iter().zip(&models) {
            let (records, _) = eval_question_level(model, &test, cfg.protocol.fusion)?;
            write_predictions_csv(&records, dir.join(format!("fold{}.csv", record.fold)))?;
        }
        println!("wrote {}", dir.display());
    }
    let aucs = ledger.test_aucs().expect("just evaluated");
    let accs = ledger.test_accuracies().expect("just evaluated");
    println!(
        "{} {}: test AUC {} ACC {} ({} test students of {})",
        ledger.config.model.tag(),
        hash,
        format_mean_std(&aucs),
        format_mean_std(&accs),
        loaded.split.test_ids.len(),
        loaded.dataset.sequences().len()
    );
    println!("wrote {} and {}", ledger_path.display(), eval_path.display());
    Ok(())
}

fn sweep_cmd(mut cfg: ExperimentConfig, budget: Option<usize>) -> Result<()> {
    if let Some(b) = budget {
        cfg.sweep.budget = b;
    }
    cfg.validate()?;
    let loaded = load_data(&cfg)?;
    let result = sweep(&loaded.data, &loaded.split, &cfg)?;
    let mut summary = Vec::with_capacity(result.trials.len());
    for ledger in &result.trials {
        ledger.save(ledger.path_in(&cfg.output_dir))?;
        summary.push(json!({
            "config_hash": ledger.config_hash,
            "mean_validation_auc": ledger.mean_validation_auc(),
            "learning_rate": ledger.config.train.learning_rate,
            "dropout": ledger.config.train.dropout,
            "seed": ledger.config.train.seed,
            "model": ledger.config.model,
        }));
        println!("{} val AUC {:.4}", ledger.config_hash, ledger.mean_validation_auc());
    }
    let best = result.best_trial();
    let path = cfg.output_dir.join("sweep.json");
    write_json(
        &path,
        &json!({
            "requested_budget": result.requested_budget,
            "trials": summary,
            "best": best.config_hash,
            "best_config": best.config,
        }),
    )?;
    println!("best {} (val AUC {:.4}); wrote {}", best.config_hash, best.mean_validation_auc(), path.display());
    Ok(())
}

fn audit_cmd(cfg: &ExperimentConfig, models: &[String]) -> Result<()> {
    let loaded = load_data(cfg)?;
    let test = loaded.data.select(&loaded.split.test_ids)?;
    let mut audits = Vec::with_capacity(models.len());
    for name in models {
        let tag: ModelTag = name.parse()?;
        let mut model_cfg = cfg.clone();
        if tag != cfg.model.tag() {
            model_cfg.model = ModelConfig::default_for(tag);
        }
        let (model, _) = train_fold(&loaded.data, &loaded.split, &model_cfg, 0)?;
        let audit = audit_leakage(&model, &test)?;
        println!(
            "{tag}: all-in-one AUC {:.4}, one-by-one AUC {:.4}, gain {:.4}",
            audit.all_in_one.auc, audit.one_by_one.auc, audit.gain
        );
        audits.push(audit);
    }
    let path = cfg.output_dir.join("leakage.json");
    write_json(&path, &audits)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn report_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let runs = cfg.output_dir.join("runs");
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs)
        .with_context(|| format!("reading {}", runs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut ledgers = Vec::new();
    for p in paths {
        let ledger = RunLedger::load(&p).with_context(|| format!("reading {}", p.display()))?;
        if ledger.test_aucs().is_some() {
            ledgers.push(ledger);
        } else {
            log::info!("skipping {}: not evaluated on the test set", p.display());
        }
    }
    if ledgers.is_empty() {
        bail!("no evaluated runs in {}; run `evaluate` first", runs.display());
    }
    let rows = report_rows(&ledgers)?;
    let path = cfg.output_dir.join("report.csv");
    write_report_csv(&rows, &path)?;
    for r in &rows {
        println!("{:<5} {} AUC {} ACC {} {}", r.model, &r.config_hash[..12], r.test_auc, r.test_accuracy, r.vs_best);
    }
    println!("wrote {}", path.display());
    Ok(())
}
