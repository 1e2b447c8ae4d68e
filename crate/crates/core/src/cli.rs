//! The `dfdepth` command line: `gen`, `run`, `report`, `attack`, `ablate`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::distiller::{
    run_datafree_distillation, run_dir, run_kd_ood, run_random_noise_kd, train_supervised, AblationFlags, Method, RunRecord, TrainConfig,
};
use crate::error::{Error, Result};
use crate::evalkit::{attack_then_distill_seeds, collect_records, make_report};
use crate::nets::{DepthNet, Role};
use crate::simworld::generate_dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dfdepth", version, about = "Data-free distillation experiments for monocular depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; overrides the config and the environment.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the target train/test and OOD datasets.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Run methods end to end and evaluate on the target test split.
    Run {
        #[command(flatten)]
        common: Common,
        /// Method(s) to run, in order; defaults to the config's list.
        #[arg(long = "method")]
        methods: Vec<Method>,
        /// Seed(s); defaults to the config's seed.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Tabulate and plot finished runs.
    Report {
        /// Run directories, or directories containing run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Report directory; defaults to `<output root>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack-then-distill sweep over the configured perturbation bounds.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// The data-free method under every single-factor ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = cfg.with_env_overrides();
    if let Some(out) = &common.out {
        cfg.output_root = out.clone();
    }
    Ok(cfg)
}

fn default_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from).unwrap_or_else(|| ExperimentConfig::default().output_root)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common } => cmd_gen(&load_config(&common)?),
        Command::Run { common, methods, seeds } => {
            let cfg = load_config(&common)?;
            let methods = if methods.is_empty() { cfg.methods.clone() } else { methods };
            for m in methods {
                for &seed in &seeds_or_default(&seeds, &cfg, m) {
                    let r = cmd_run(&cfg, m, seed)?;
                    println!("{}", summary(&r));
                }
            }
            Ok(())
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| default_root().join("report"));
            let report = cmd_report(&runs, &out)?;
            println!("wrote {} rows to {}", report.rows.len(), out.display());
            Ok(())
        }
        Command::Attack { common, seeds } => {
            let cfg = load_config(&common)?;
            let seeds = seeds_or_default(&seeds, &cfg, Method::KdOod);
            let records = cmd_attack(&cfg, &seeds)?;
            records.iter().for_each(|r| println!("{}", summary(r)));
            Ok(())
        }
        Command::Ablate { common, seeds } => {
            let cfg = load_config(&common)?;
            let seeds = seeds_or_default(&seeds, &cfg, Method::DatafreeFull);
            let records = cmd_ablate(&cfg, &seeds)?;
            records.iter().for_each(|r| println!("{}", summary(r)));
            Ok(())
        }
    }
}

fn seeds_or_default(seeds: &[u64], cfg: &ExperimentConfig, method: Method) -> Vec<u64> {
    if !seeds.is_empty() {
        return seeds.to_vec();
    }
    vec![if method == Method::TeacherSupervised { cfg.teacher_train.seed } else { cfg.train.seed }]
}

fn summary(r: &RunRecord) -> String {
    match &r.metrics {
        Some(m) => format!("{} seed {}: REL {:.4} d1 {:.4} ({:.1}s)", r.display_name(), r.seed, m.rel, m.delta1, r.wall_seconds),
        None => format!("{} seed {}: done ({:.1}s)", r.display_name(), r.seed, r.wall_seconds),
    }
}

/// Generates the three datasets under `<output root>/data`.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<()> {
    for (name, domain, count) in cfg.splits() {
        let dir = cfg.data_dir().join(name);
        let m = generate_dataset(&domain, count, &dir)?;
        println!("{name}: {} samples in {}", m.count, dir.display());
    }
    Ok(())
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<DepthNet<f32>> {
    let path = cfg.teacher_checkpoint_path();
    if !path.is_file() {
        return Err(Error::Missing(format!("teacher checkpoint {} not found; run `run --method teacher_supervised` first", path.display())));
    }
    Ok(DepthNet::load(&path, Some(&cfg.teacher))?.0)
}

/// Runs one method with one seed; the run directory is
/// `<output root>/<method>-seed<seed>`.
pub fn cmd_run(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<RunRecord> {
    let test = cfg.load_split("test_a")?;
    let student_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let out = run_dir(&cfg.output_root, method, None, seed);
    let record = match method {
        Method::TeacherSupervised => {
            let train = cfg.load_split("train_a")?;
            let tcfg = TrainConfig { seed, ..cfg.teacher_train.clone() };
            train_supervised(Role::Teacher, &cfg.teacher, &train, Some(&test), &tcfg, Some(&out))?.1
        }
        Method::StudentSupervised => {
            let train = cfg.load_split("train_a")?;
            train_supervised(Role::Student, &cfg.student, &train, Some(&test), &student_cfg, Some(&out))?.1
        }
        Method::KdOod => {
            let teacher = load_teacher(cfg)?;
            let ood = cfg.load_split("ood")?;
            run_kd_ood(&teacher, &cfg.student, &ood, Some(&test), &student_cfg, Some(&out))?.1
        }
        Method::RandomNoiseKd => {
            let teacher = load_teacher(cfg)?;
            let n = cfg.noise_samples_per_epoch.unwrap_or(cfg.sizes.ood);
            run_random_noise_kd(&teacher, &cfg.student, n, Some(&test), &student_cfg, Some(&out))?.1
        }
        Method::DatafreeFull => {
            let teacher = load_teacher(cfg)?;
            let ood = cfg.load_split("ood")?;
            run_datafree_distillation(&teacher, &cfg.student, &ood, Some(&test), &student_cfg, None, Some(&out))?.1
        }
    };
    Ok(record)
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<crate::evalkit::Report> {
    let records = collect_records(runs)?;
    make_report(&records, out)
}

/// Attack sweep; runs land in `<output root>/kd_ood-eps…-seed…` and the
/// report in `<output root>/attack-report`.
pub fn cmd_attack(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RunRecord>> {
    let teacher = load_teacher(cfg)?;
    let ood = cfg.load_split("ood")?;
    let test = cfg.load_split("test_a")?;
    let records = attack_then_distill_seeds(
        &teacher,
        &cfg.student,
        &ood,
        &cfg.attack.epsilons,
        cfg.attack.steps,
        Some(&test),
        &cfg.train,
        seeds,
        Some(&cfg.output_root),
    )?;
    make_report(&records, &cfg.output_root.join("attack-report"))?;
    Ok(records)
}

/// Ablation matrix; runs land in `<output root>/datafree_full-<variant>-seed…`
/// and the report in `<output root>/ablation-report`.
pub fn cmd_ablate(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RunRecord>> {
    let teacher = load_teacher(cfg)?;
    let ood = cfg.load_split("ood")?;
    let test = cfg.load_split("test_a")?;
    let mut records = Vec::new();
    for (name, flags) in AblationFlags::ablation_matrix() {
        for &seed in seeds {
            let tc = TrainConfig { seed, ablation: flags, ..cfg.train.clone() };
            let out = run_dir(&cfg.output_root, Method::DatafreeFull, Some(name), seed);
            records.push(run_datafree_distillation(&teacher, &cfg.student, &ood, Some(&test), &tc, Some(name.to_string()), Some(&out))?.1);
        }
    }
    make_report(&records, &cfg.output_root.join("ablation-report"))?;
    Ok(records)
}
