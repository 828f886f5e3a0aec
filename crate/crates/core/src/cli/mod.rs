//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 on runtime or configuration errors, 2 on usage errors.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eqgrad::gradcheck::{gradcheck, MapFamily};
use crate::fixedpoint::bench::bench_contractions;
use crate::homeworld::{generate_tasks, read_dataset, split_dataset, write_dataset, Split, TaskRecord};
use crate::memory::EquilibriumMemory;
use crate::planner::{plan_all, trace_lines, FeedbackPredictor, FeedbackSchedule, TraceLine};
use crate::refiner::{load_checkpoint, save_checkpoint, Transformer, Vocab};
use crate::trainer::{train, train_world_model, write_metrics, TrainMode};
use crate::worldmodel::{WorldModel, WORLD_MODEL_NAME};

pub use config::{ConfigError, RunConfig};
use report::{build_report, read_episodes, render_report, render_scaling_csv, write_episodes, EpisodeSummary, EpisodesHeader};

const REFINER_NAME: &str = "refiner";

#[derive(Debug, Parser)]
#[command(name = "eqplan", version, about = "Equilibrium sequence planner for household tasks")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Equilibrium,
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeedbackArg {
    None,
    Env,
    Wm,
    /// Alternates environment and world model, environment first.
    Both,
}

impl FeedbackArg {
    fn schedule(self) -> FeedbackSchedule {
        match self {
            FeedbackArg::None => FeedbackSchedule::None,
            FeedbackArg::Env => FeedbackSchedule::EnvOnly,
            FeedbackArg::Wm => FeedbackSchedule::WmOnly,
            FeedbackArg::Both => FeedbackSchedule::Alternate { env_first: true },
        }
    }

    fn name(self) -> &'static str {
        match self {
            FeedbackArg::None => "none",
            FeedbackArg::Env => "env",
            FeedbackArg::Wm => "wm",
            FeedbackArg::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    Scalar,
    Linear,
    Attention,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the task dataset and its split labels.
    GenTasks,
    /// Train the refiner on the training split.
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Fit the world model on environment feedback stored in memory.
    TrainWorldModel,
    /// Run the planner on evaluation splits and write the report.
    Eval {
        /// Repeatable; defaults to `evaluation.splits`.
        #[arg(long)]
        split: Vec<Split>,
        #[arg(long, value_enum, default_value = "env")]
        feedback: FeedbackArg,
        /// Outer-loop bound.
        #[arg(long)]
        max_corrections: Option<usize>,
        #[arg(long)]
        noise_ratio: Option<f64>,
        #[arg(long)]
        truncate_illegal: bool,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        world_model: Option<PathBuf>,
    },
    /// Compare implicit gradients with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Solve random linear contractions with every solver.
    BenchFixedpoint {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        max_dim: usize,
    },
    /// Regenerate `report.json` and `scaling.csv` next to an episodes file.
    Report {
        #[arg(long)]
        episodes: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(dir) = cli.out_dir {
        cfg.paths.out_dir = dir;
    }
    match cli.command {
        Command::GenTasks => gen_tasks(&cfg),
        Command::Train { mode } => {
            if let Some(m) = mode {
                cfg.training.mode = match m {
                    ModeArg::Equilibrium => TrainMode::Equilibrium,
                    ModeArg::Supervised => TrainMode::Supervised,
                };
            }
            train_refiner(&cfg)
        }
        Command::TrainWorldModel => train_wm(&cfg),
        Command::Eval {
            split,
            feedback,
            max_corrections,
            noise_ratio,
            truncate_illegal,
            jobs,
            checkpoint,
            world_model,
        } => {
            if !split.is_empty() {
                cfg.evaluation.splits = split;
            }
            cfg.planner.schedule = feedback.schedule();
            if let Some(n) = max_corrections {
                cfg.planner.outer_bound = n;
            }
            if let Some(r) = noise_ratio {
                cfg.planner.noise_ratio = r;
            }
            cfg.planner.truncate_illegal |= truncate_illegal;
            if let Some(j) = jobs {
                cfg.evaluation.jobs = j;
            }
            if let Some(p) = checkpoint {
                cfg.paths.refiner = Some(p);
            }
            if let Some(p) = world_model {
                cfg.paths.world_model = Some(p);
            }
            cfg.validate()?;
            evaluate(&cfg, feedback)
        }
        Command::Gradcheck { suite, seeds } => run_gradcheck(suite, seeds),
        Command::BenchFixedpoint { count, max_dim } => run_bench(&cfg, count, max_dim),
        Command::Report { episodes } => regenerate_report(&episodes),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<(TaskRecord, Split)>> {
    let path = cfg.paths.dataset();
    read_dataset(open(&path)?).with_context(|| format!("reading {}", path.display()))
}

fn split_tasks(data: &[(TaskRecord, Split)], split: Split) -> Vec<TaskRecord> {
    data.iter().filter(|(_, s)| *s == split).map(|(t, _)| t.clone()).collect()
}

/// Loads a checkpoint and warns when it was trained under other settings.
fn load_model(path: &Path, name: &str, cfg: &RunConfig) -> Result<Transformer> {
    let (model, meta) = load_checkpoint(path, name).with_context(|| format!("loading {}", path.display()))?;
    if meta.config_hash != cfg.model_hash() {
        eprintln!(
            "warning: {} was trained under settings {} but the current settings hash to {}",
            path.display(),
            meta.config_hash,
            cfg.model_hash()
        );
    }
    Ok(model)
}

fn init_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt)
}

fn gen_tasks(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.dataset;
    let tasks = generate_tasks(d.n_tasks, d.n_scenes, d.size, cfg.seed())?;
    let splits = split_dataset(&tasks, cfg.seed())?;
    let path = cfg.paths.dataset();
    let mut out = create(&path)?;
    write_dataset(&mut out, &tasks, &splits, &cfg.config_hash(), cfg.seed())?;
    out.flush()?;
    let counts: Vec<String> = Split::ALL
        .into_iter()
        .map(|s| format!("{} {}", s.name(), splits.count(s)))
        .collect();
    println!("wrote {} tasks to {} ({})", tasks.len(), path.display(), counts.join(", "));
    Ok(())
}

/// Provenance written next to `memory.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
struct MemoryProvenance {
    config_hash: String,
    seed: u64,
    records: usize,
}

fn train_refiner(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let tasks = split_tasks(&data, Split::Train);
    if tasks.is_empty() {
        bail!("the dataset has no training tasks");
    }
    let mut model = Transformer::new(cfg.model.model_config(), &mut init_rng(cfg.seed(), 0x01))?;
    let vocab = Vocab::new();
    let mut memory = EquilibriumMemory::new();
    let report = train(&mut model, &vocab, &tasks, &mut memory, &cfg.training)?;

    let dir = &cfg.paths.out_dir;
    let ckpt = cfg.paths.refiner();
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&ckpt, &model, REFINER_NAME, &cfg.model_hash(), cfg.seed())?;
    let mut metrics = create(&dir.join("metrics.jsonl"))?;
    write_metrics(&mut metrics, &report.metrics)?;
    metrics.flush()?;
    if cfg.training.mode == TrainMode::Equilibrium {
        let path = cfg.paths.memory();
        let mut out = create(&path)?;
        memory.save(&mut out, &vocab)?;
        out.flush()?;
        let prov = MemoryProvenance {
            config_hash: cfg.config_hash(),
            seed: cfg.seed(),
            records: memory.len(),
        };
        write_file(&crate::refiner::sidecar_path(&path), &serde_json::to_string_pretty(&prov)?)?;
    }
    println!(
        "trained on {} tasks: {} steps, {} skipped batches, {} memory records, {} environment interactions",
        tasks.len(),
        report.steps,
        report.skipped_batches,
        memory.len(),
        report.env_interactions
    );
    println!("saved {}", ckpt.display());
    Ok(())
}

fn train_wm(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let tasks: Vec<TaskRecord> = data.into_iter().map(|(t, _)| t).collect();
    let vocab = Vocab::new();
    let mem_path = cfg.paths.memory();
    let memory = EquilibriumMemory::load(open(&mem_path)?, &vocab).with_context(|| format!("reading {}", mem_path.display()))?;
    let mut wm = WorldModel::new(cfg.model.model_config(), &mut init_rng(cfg.seed(), 0x02))?;
    let metrics = train_world_model(&mut wm, &vocab, &tasks, &memory, &cfg.training)?;
    let path = cfg.paths.world_model();
    save_checkpoint(&path, wm.model(), WORLD_MODEL_NAME, &cfg.model_hash(), cfg.seed())?;
    let mut out = create(&cfg.paths.out_dir.join("wm_metrics.jsonl"))?;
    write_metrics(&mut out, &metrics)?;
    out.flush()?;
    let last = metrics.last().and_then(|m| m.mean_loss);
    println!(
        "world model fit on {} records, final loss {}",
        memory.len(),
        last.map_or("n/a".to_string(), |l| format!("{l:.4}"))
    );
    println!("saved {}", path.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, feedback: FeedbackArg) -> Result<()> {
    let data = load_dataset(cfg)?;
    let vocab = Vocab::new();
    let model = load_model(&cfg.paths.refiner(), REFINER_NAME, cfg)?;
    let wm = if cfg.planner.schedule.uses_world_model() {
        let m = load_model(&cfg.paths.world_model(), WORLD_MODEL_NAME, cfg)?;
        Some(WorldModel::from_transformer(m))
    } else {
        None
    };
    let predictor = wm.as_ref().map(|w| w as &dyn FeedbackPredictor);

    let header = EpisodesHeader {
        config_hash: cfg.config_hash(),
        seed: cfg.seed(),
        feedback: feedback.name().to_string(),
    };
    let mut summaries = Vec::new();
    let mut traces: Vec<TraceLine> = Vec::new();
    for &split in &cfg.evaluation.splits {
        let mut tasks: Vec<&TaskRecord> = data.iter().filter(|(_, s)| *s == split).map(|(t, _)| t).collect();
        if let Some(cap) = cfg.evaluation.max_tasks {
            tasks.truncate(cap);
        }
        let episodes = plan_all(&model, predictor, &vocab, &tasks, &cfg.planner, cfg.seed(), cfg.evaluation.jobs)?;
        for (task, ep) in tasks.iter().zip(&episodes) {
            traces.extend(trace_lines(&vocab, task, ep));
            summaries.push(EpisodeSummary::new(&vocab, task, split, ep));
        }
    }

    let dir = &cfg.paths.out_dir;
    let mut out = create(&dir.join("episodes.jsonl"))?;
    write_episodes(&mut out, &header, &summaries)?;
    out.flush()?;
    let mut out = create(&dir.join("trace.jsonl"))?;
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    crate::planner::write_trace(&mut out, &traces)?;
    out.flush()?;
    let report = build_report(&header, &summaries);
    write_file(&dir.join("report.json"), &render_report(&report))?;
    write_file(&dir.join("scaling.csv"), &render_scaling_csv(&summaries))?;
    for m in &report.splits {
        println!(
            "{:<12} n={:<4} exec {:6.2}  sr {:6.2}  gcr {:6.2}  inner {:.2}±{:.2}  env {:.2}  calls {:.2}",
            m.split.name(),
            m.n_tasks,
            m.exec,
            m.sr,
            m.gcr,
            m.mean_inner_iterations,
            m.std_inner_iterations,
            m.mean_env_interactions,
            m.mean_refiner_calls
        );
    }
    Ok(())
}

fn run_gradcheck(suite: SuiteArg, seeds: u64) -> Result<()> {
    let families: Vec<MapFamily> = match suite {
        SuiteArg::Scalar => vec![MapFamily::Scalar],
        SuiteArg::Linear => vec![MapFamily::Linear],
        SuiteArg::Attention => vec![MapFamily::Attention],
        SuiteArg::All => MapFamily::ALL.to_vec(),
    };
    let mut failed = 0;
    for family in families {
        for seed in 0..seeds {
            let row = gradcheck(family, seed)?;
            failed += usize::from(!row.passed);
            println!("{}", serde_json::to_string(&row)?);
        }
    }
    if failed > 0 {
        bail!("{failed} gradient checks exceeded the tolerance");
    }
    Ok(())
}

fn run_bench(cfg: &RunConfig, count: usize, max_dim: usize) -> Result<()> {
    let rows = bench_contractions(count, max_dim, cfg.seed(), &cfg.solver)?;
    for row in &rows {
        println!("{}", serde_json::to_string(row)?);
    }
    let unconverged = rows.iter().filter(|r| r.converged.iter().any(|c| !c)).count();
    if unconverged > 0 {
        bail!("{unconverged} instances did not converge under every solver");
    }
    Ok(())
}

/// Writes next to the episodes file.
fn regenerate_report(episodes: &Path) -> Result<()> {
    let (header, summaries) = read_episodes(open(episodes)?).with_context(|| format!("reading {}", episodes.display()))?;
    let dir = episodes.parent().map(Path::to_path_buf).unwrap_or_default();
    write_file(&dir.join("report.json"), &render_report(&build_report(&header, &summaries)))?;
    write_file(&dir.join("scaling.csv"), &render_scaling_csv(&summaries))?;
    println!("wrote {} and {}", dir.join("report.json").display(), dir.join("scaling.csv").display());
    Ok(())
}
