use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spt_core::model::ArchitectureId;

use spt_lab::config::{AttackKind, DatasetKind, Defense, ExperimentConfig, ImageFormat};
use spt_lab::report::{CellRecord, Protocol};
use spt_lab::{verify, Lab, LabError, Result};

#[derive(Parser)]
#[command(name = "spt-lab", version, about = "Structure-preserving transformation attacks: training, attacks and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    dataset: Option<DatasetArg>,
    /// Directory with the IDX files [default: $SPT_DATA_DIR/<dataset>, else data/<dataset>]
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Use the first N examples of each split.
    #[arg(long, global = true)]
    subset: Option<usize>,
    /// Experiment seed: model initialization, shuffling and attack randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Seed of the SPT weight initialization.
    #[arg(long, global = true)]
    init_seed: Option<u64>,
    /// SPT weight penalty (dataset default when omitted).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// L-infinity budget of FGSM and PGD.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// PGD step size.
    #[arg(long, global = true)]
    step: Option<f64>,
    /// PGD iterations.
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Classifier training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Comma-separated model ids (C_p,C_a0,...).
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Independent matrix cells run at once.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory for checkpoints, attacks, cells and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Fmnist,
}

#[derive(Clone, Copy, ValueEnum)]
enum DefenseArg {
    None,
    PgdAdvTrain,
}

impl From<DefenseArg> for Defense {
    fn from(d: DefenseArg) -> Self {
        match d {
            DefenseArg::None => Defense::None,
            DefenseArg::PgdAdvTrain => Defense::PgdAdvTrain,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Whitebox,
    Blackbox,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load cached) classifiers and print their test accuracy.
    TrainClassifiers,
    /// PGD adversarial training of the configured models.
    AdvTrain {
        /// Adversarial training epochs.
        #[arg(long)]
        adv_epochs: Option<usize>,
    },
    /// Run one attack against one target and print its evaluation.
    Attack {
        /// spt, fgsm or pgd.
        #[arg(long)]
        attack: String,
        #[arg(long, default_value = "C_p")]
        target: String,
        #[arg(long, value_enum, default_value = "none")]
        defense: DefenseArg,
    },
    /// Run a white-box or black-box attack matrix and write its report.
    Matrix {
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long, value_enum, default_value = "none")]
        defense: DefenseArg,
        /// Train checkpoints that are not on disk yet.
        #[arg(long)]
        train_missing: bool,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Write SPT example grids for every configured model.
    ExportExamples {
        #[arg(long, value_enum, default_value = "none")]
        defense: DefenseArg,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Run the invariant checks against the configured data.
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Png,
    Pgm,
}

fn build_config(common: &Common, command: &Command) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = common.dataset {
        cfg.dataset = match d {
            DatasetArg::Mnist => DatasetKind::Mnist,
            DatasetArg::Fmnist => DatasetKind::Fmnist,
        };
    }
    if common.data_dir.is_some() {
        cfg.data_dir = common.data_dir.clone();
    }
    if common.subset.is_some() {
        cfg.subset = common.subset;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.init_seed {
        cfg.spt.init_seed = s;
    }
    if common.alpha.is_some() {
        cfg.spt.alpha = common.alpha;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = &common.models {
        cfg.models = m.clone();
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    let pgd = &mut cfg.pgd.perturbation;
    if let Some(e) = common.epsilon {
        cfg.fgsm_epsilon = e;
        pgd.epsilon = e;
        pgd.step_size = pgd.step_size.min(e);
    }
    if let Some(s) = common.step {
        pgd.step_size = s;
    }
    if let Some(i) = common.iters {
        pgd.iterations = i;
    }
    match command {
        Command::AdvTrain { adv_epochs: Some(e) } => cfg.adv_train.epochs = *e,
        Command::Matrix { format: Some(f), .. } | Command::ExportExamples { format: Some(f), .. } => {
            cfg.export_format = match f {
                FormatArg::Png => ImageFormat::Png,
                FormatArg::Pgm => ImageFormat::Pgm,
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn print_cell(rec: &CellRecord) {
    let (mode, mass) = rec.modal_class();
    println!(
        "{:<5} {:<5} {:<14} accuracy {:6.2}%  ({} examples, modal label {mode} holds {:.1}%)",
        rec.target,
        rec.attack,
        rec.defense,
        100.0 * rec.accuracy,
        rec.examples,
        100.0 * mass
    );
    if let Some(s) = &rec.spt {
        let hist: Vec<String> = rec.histogram.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
        println!("      histogram % [{}]", hist.join(", "));
        println!(
            "      structure check: {} ({} violations over {} patterns); monotone on grid: {}",
            if s.structure.passed { "pass" } else { "FAIL" },
            s.structure.violations,
            s.structure.patterns,
            s.monotonicity.strictly_increasing || s.monotonicity.strictly_decreasing
        );
    }
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = build_config(&cli.common, &cli.command)?;
    let lab = Lab::open(cfg)?.echo(!cli.common.quiet);
    let ids = lab.config().model_ids()?;
    match cli.command {
        Command::TrainClassifiers | Command::AdvTrain { .. } => {
            let defense = if matches!(cli.command, Command::AdvTrain { .. }) {
                Defense::PgdAdvTrain
            } else {
                Defense::None
            };
            let models = lab.ensure_classifiers(defense)?;
            for (id, m) in ids.iter().zip(&models) {
                let acc = m.meta.test_accuracy.map(|a| format!("{:.2}%", 100.0 * a)).unwrap_or_else(|| "n/a".into());
                println!("{id:<5} {defense:<14} test accuracy {acc:>7}  {}", lab.checkpoint_path(*id, defense).display());
            }
            Ok(true)
        }
        Command::Attack { attack, target, defense } => {
            let attack = AttackKind::parse(&attack)?;
            let target = ArchitectureId::parse(&target).map_err(|e| LabError::Config(e.to_string()))?;
            let defense = defense.into();
            for a in [AttackKind::None, attack] {
                let recs = lab.run_unit(Protocol::Whitebox, defense, a, target, &[target])?;
                print_cell(&recs[0]);
            }
            if attack == AttackKind::Spt {
                println!("parameters: {}", lab.spt_path(target, defense, lab.config().spt.init_seed).display());
            }
            Ok(true)
        }
        Command::Matrix { protocol, defense, train_missing, .. } => {
            let protocol = match protocol {
                ProtocolArg::Whitebox => Protocol::Whitebox,
                ProtocolArg::Blackbox => Protocol::Blackbox,
            };
            let lab = lab.train_missing(train_missing);
            let outcome = lab.run_matrix(protocol, defense.into())?;
            print!("{}", std::fs::read_to_string(&outcome.table).map_err(LabError::io(&outcome.table))?);
            println!(
                "\n{} of {} cells computed, the rest resumed\nreport: {}",
                outcome.computed_cells,
                outcome.records.len(),
                outcome.report.display()
            );
            if let Some(m) = outcome.manifest {
                println!("examples: {} tiles, grid {}", m.tiles.len(), m.grid);
            }
            Ok(true)
        }
        Command::ExportExamples { defense, .. } => {
            let lab = lab.train_missing(false);
            let m = lab.export_spt_grid(defense.into())?;
            println!("{} tiles written, grid {}", m.tiles.len(), m.grid);
            Ok(true)
        }
        Command::Verify => {
            let checks = verify::run(&lab)?;
            let mut ok = true;
            for c in &checks {
                ok &= c.passed;
                let detail = if c.detail.is_empty() { String::new() } else { format!("  ({})", c.detail) };
                println!("{} {}{detail}", if c.passed { "PASS" } else { "FAIL" }, c.name);
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
