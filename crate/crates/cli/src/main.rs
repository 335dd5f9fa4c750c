//! `motpred`: generate synthetic scenarios, train the motion predictor,
//! track, evaluate and compare motion models.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use motpred::compare::{compare_models, comparison_csv, comparison_pretty};
use motpred::metrics::evaluate;
use motpred::mot::{self, parse_mot, read_labels, read_scenario_dir, write_labels, write_scenario_dir};
use motpred::predictor::PredictorModel;
use motpred::synth::{generate_scenario, generate_suite};
use motpred::tracker::{run_sequence, MotionModelKind};
use motpred::training::{evaluate_loss, make_dataset, save_loss_csv, train_with};

use config::RunConfig;

/// Offset separating comparison suites from training suites.
const EVAL_SEED_SALT: u64 = 0x5EED_0E7A;

#[derive(Debug, Parser)]
#[command(
    name = "motpred",
    version,
    about = "Learned motion prediction for multi-object tracking"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Weight of the direction loss; overrides `train.beta`.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// kalman | learned; overrides `tracker.motion_model`.
    #[arg(long = "motion-model", global = true)]
    motion_model: Option<String>,
    /// Output path; overrides the matching `paths` entry.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_enum, default_value_t = Format::Pretty)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Pretty,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic scenario directory (detections, ground truth, info).
    Generate,
    /// Train the predictor; writes a checkpoint and a loss-curve CSV.
    Train,
    /// Run the tracker on a scenario directory; writes MOT-format results.
    Track {
        /// Scenario directory; defaults to `paths.scenario`.
        scenario: Option<PathBuf>,
    },
    /// Score tracker results against ground truth.
    Eval {
        /// Scenario directory or ground-truth MOT file.
        gt: PathBuf,
        /// Tracker results in MOT format.
        results: PathBuf,
    },
    /// Compare the Kalman baseline with the trained predictor on a suite.
    Compare,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let rendered = e.to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("invalid usage"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(b) = cli.beta {
        cfg.train.beta = b;
    }
    if let Some(m) = &cli.motion_model {
        cfg.tracker.motion_model = m.parse()?;
    }
    cfg.validate()?;
    match &cli.command {
        Command::Generate => cmd_generate(&cli, &cfg),
        Command::Train => cmd_train(&cli, &cfg),
        Command::Track { scenario } => cmd_track(&cli, &cfg, scenario.as_deref()),
        Command::Eval { gt, results } => cmd_eval(&cli, &cfg, gt, results),
        Command::Compare => cmd_compare(&cli, &cfg),
    }
}

fn output_path(cli: &Cli, configured: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    match cli.out.as_ref().or(configured) {
        Some(p) => Ok(p.clone()),
        None => bail!("no output path for {what}: pass --out or set it under [paths]"),
    }
}

fn refuse_overwrite(cli: &Cli, path: &Path) -> Result<()> {
    if path.exists() && !cli.force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn write_output(cli: &Cli, path: &Path, contents: &str) -> Result<()> {
    refuse_overwrite(cli, path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<PredictorModel> {
    let Some(path) = &cfg.paths.checkpoint else {
        bail!("motion model 'learned' needs a checkpoint: set paths.checkpoint");
    };
    if !path.exists() {
        bail!("checkpoint {} not found", path.display());
    }
    PredictorModel::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn read_scenario(dir: &Path) -> Result<motpred::scenario::Scenario> {
    if !dir.is_dir() {
        bail!("scenario directory {} not found", dir.display());
    }
    read_scenario_dir(dir).with_context(|| format!("cannot read scenario {}", dir.display()))
}

fn cmd_generate(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let dir = output_path(cli, cfg.paths.scenario.as_ref(), "the scenario")?;
    for f in [mot::DETECTIONS_FILE, mot::GROUND_TRUTH_FILE, mot::INFO_FILE] {
        refuse_overwrite(cli, &dir.join(f))?;
    }
    let s = generate_scenario(&cfg.scenario, seed)?;
    write_scenario_dir(&dir, &s).with_context(|| format!("cannot write {}", dir.display()))?;
    println!(
        "wrote {} ({} frames, {} objects) to {}",
        s.name,
        s.num_frames(),
        s.gt_ids().len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let ckpt = output_path(cli, cfg.paths.checkpoint.as_ref(), "the checkpoint")?;
    refuse_overwrite(cli, &ckpt)?;
    let curve = cfg
        .paths
        .loss_curve
        .clone()
        .unwrap_or_else(|| ckpt.with_extension("loss.csv"));
    refuse_overwrite(cli, &curve)?;

    let scenarios = if cfg.paths.train_data.is_empty() {
        generate_suite(&cfg.scenario, &cfg.suite.kinds, cfg.suite.train_count, seed)?
    } else {
        cfg.paths
            .train_data
            .iter()
            .map(|d| read_scenario(d))
            .collect::<Result<_>>()?
    };
    let dataset = make_dataset(&scenarios, cfg.train.p, seed)?;
    if dataset.is_empty() {
        bail!("training data yields no samples");
    }
    let train_cfg = motpred::training::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut model = PredictorModel::new(motpred::predictor::PredictorConfig {
        init_seed: seed,
        ..cfg.model.clone()
    })?;
    let (initial, _, _) = evaluate_loss(&model, &dataset, train_cfg.beta)?;
    let history = train_with(&mut model, &dataset, &train_cfg, |_| {})?;
    let (fin, _, _) = evaluate_loss(&model, &dataset, train_cfg.beta)?;

    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model
        .save(&ckpt)
        .with_context(|| format!("cannot write {}", ckpt.display()))?;
    save_loss_csv(&curve, &history).with_context(|| format!("cannot write {}", curve.display()))?;
    println!(
        "trained on {} samples for {} epochs (beta {}): loss {:.6} -> {:.6}; checkpoint {}",
        dataset.len(),
        history.len(),
        train_cfg.beta,
        initial,
        fin,
        ckpt.display()
    );
    Ok(())
}

fn cmd_track(cli: &Cli, cfg: &RunConfig, scenario: Option<&Path>) -> Result<()> {
    let dir = match scenario.or(cfg.paths.scenario.as_deref()) {
        Some(d) => d.to_path_buf(),
        None => bail!("no scenario: pass a directory or set paths.scenario"),
    };
    let scenario = read_scenario(&dir)?;
    let model = match cfg.tracker.motion_model {
        MotionModelKind::Learned => Some(load_checkpoint(cfg)?),
        MotionModelKind::Kalman => None,
    };
    let out = output_path(cli, cfg.paths.results.as_ref(), "the results")?;
    refuse_overwrite(cli, &out)?;
    let tracks = run_sequence(&scenario, &cfg.tracker, model.as_ref())?;
    write_output(cli, &out, &write_labels(&tracks))?;
    let ids: std::collections::BTreeSet<_> = tracks.iter().flatten().map(|l| l.id).collect();
    println!(
        "tracked {} frames with {}: {} tracks written to {}",
        tracks.len(),
        cfg.tracker.motion_model,
        ids.len(),
        out.display()
    );
    Ok(())
}

/// Ground truth from a scenario directory or a bare MOT file.
fn read_ground_truth(path: &Path) -> Result<motpred::scenario::FrameLabels> {
    if path.is_dir() {
        let s = read_scenario(path)?;
        return s
            .ground_truth
            .with_context(|| format!("{} has no {}", path.display(), mot::GROUND_TRUTH_FILE));
    }
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let data = parse_mot(&text).with_context(|| format!("in {}", path.display()))?;
    if !data.detections.iter().all(Vec::is_empty) {
        bail!("{} contains unlabelled rows (id -1)", path.display());
    }
    Ok(data.labels)
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig, gt: &Path, results: &Path) -> Result<()> {
    let gt = read_ground_truth(gt)?;
    if !results.is_file() {
        bail!("results file {} not found", results.display());
    }
    let hyp = read_labels(results, gt.len()).with_context(|| format!("in {}", results.display()))?;
    let report = evaluate(&gt, &hyp)?;
    let text = match cli.format {
        Format::Pretty => report.to_pretty(),
        Format::Csv => report.to_csv(),
    };
    print!("{text}");
    if let Some(out) = cli.out.as_ref().or(cfg.paths.report.as_ref()) {
        write_output(cli, out, &text)?;
    }
    Ok(())
}

fn cmd_compare(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let model = load_checkpoint(cfg)?;
    let suite = generate_suite(
        &cfg.scenario,
        &cfg.suite.kinds,
        cfg.suite.eval_count,
        seed ^ EVAL_SEED_SALT,
    )?;
    let rows = compare_models(&suite, &cfg.tracker, Some(&model), &cfg.noise)?;
    let text = match cli.format {
        Format::Pretty => comparison_pretty(&rows),
        Format::Csv => comparison_csv(&rows),
    };
    print!("{text}");
    if let Some(out) = cli.out.as_ref().or(cfg.paths.report.as_ref()) {
        write_output(cli, out, &text)?;
    }
    Ok(())
}
