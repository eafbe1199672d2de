//! Command-line surface. Every subcommand reads a run config; the model
//! lives at `<out>/model.mmoe` and is updated in place by each stage.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ensemble::{rng_for, Ensemble};
use crate::error::{Error, Result};
use crate::eval::{self, EvalCache, EvalMode, MetricsReport};
use crate::io::{load_model, save_model, RunConfig};
use crate::nn::gradcheck::run_suite;
use crate::partition::{LabeledDataset, SuperclassMap};
use crate::training::{self, curve_csv};

pub const MODEL_FILE: &str = "model.mmoe";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "mmoe",
    version,
    about = "Mediated mixture of experts: train, extend, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the gating threshold T.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Baseline,
    Branching,
    Unmediated,
    Mmoe,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => EvalMode::Baseline,
            ModeArg::Branching => EvalMode::Branching,
            ModeArg::Unmediated => EvalMode::Unmediated,
            ModeArg::Mmoe => EvalMode::Mmoe,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the full-class mediator (also the single-model baseline).
    TrainMediator(Common),
    /// Derive experts from the mediator and train each on its superclass.
    TrainExperts(Common),
    /// Train the confidence heads on superclass labels.
    TrainConfidence(Common),
    /// Append one superclass with a new expert.
    AddExpert {
        #[command(flatten)]
        common: Common,
        /// Superclass map with the new superclass appended (default: the config's increment_map).
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Evaluate on the test split and write a metrics CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "mmoe")]
        mode: ModeArg,
    },
    /// MMoE metrics over a list of thresholds.
    SweepThreshold {
        #[command(flatten)]
        common: Common,
        /// Comma-separated thresholds (default: the config's sweep.t_list).
        #[arg(long, value_delimiter = ',')]
        t_list: Option<Vec<f64>>,
    },
    /// Retrain experts for each shared-prefix length and report MMoE accuracy.
    SweepShared {
        #[command(flatten)]
        common: Common,
        /// Comma-separated shared conv layer counts (default: the config's sweep.k_list).
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
    },
    /// Finite-difference check of backpropagation on random small networks.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 runtime/config failure,
/// 2 usage error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn open(c: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(&c.config)?;
        if let Some(seed) = c.seed {
            cfg.seed = seed;
        }
        if let Some(t) = c.threshold {
            cfg.gating = cfg.gating.with_threshold(t);
            cfg.validate()
                .map_err(|e| Error::Config(format!("{}: {e}", c.config.display())))?;
        }
        let out = c.out.clone().unwrap_or_else(|| cfg.out.clone());
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Run { cfg, out })
    }

    fn model_path(&self) -> PathBuf {
        self.out.join(MODEL_FILE)
    }

    fn load(&self) -> Result<Ensemble<f32>> {
        let mut ens = load_model(&self.model_path())?;
        ens.gating = self.cfg.gating;
        Ok(ens)
    }

    fn save(&self, ens: &Ensemble<f32>) -> Result<()> {
        save_model(ens, &self.model_path())
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn train(&self, map: &SuperclassMap) -> Result<LabeledDataset<f32>> {
        Ok(restrict(self.cfg.train_data()?, map))
    }

    fn test(&self, map: &SuperclassMap) -> Result<LabeledDataset<f32>> {
        Ok(restrict(self.cfg.test_data()?, map))
    }
}

/// Keeps the samples whose classes the map covers.
fn restrict(data: LabeledDataset<f32>, map: &SuperclassMap) -> LabeledDataset<f32> {
    let n = map.n_classes();
    data.filter(|l| l < n)
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::TrainMediator(c) => {
            let run = Run::open(&c)?;
            let map = run.cfg.map()?;
            let config = run.cfg.ensemble_config(map.n_superclasses())?;
            let mut ens = Ensemble::new(config, map.clone(), run.cfg.gating, run.cfg.seed)?;
            let curve =
                training::train_mediator(&mut ens, &run.train(&map)?, &run.cfg.train_config())?;
            run.write("curve_mediator.csv", &curve_csv(&curve))?;
            run.save(&ens)?;
            println!("mediator trained; model at {}", run.model_path().display());
        }
        Command::TrainExperts(c) => {
            let run = Run::open(&c)?;
            let mut ens = run.load()?;
            let train = run.train(&ens.map)?;
            let curves = training::train_experts(&mut ens, &train, &run.cfg.train_config())?;
            for (i, curve) in curves.iter().enumerate() {
                run.write(&format!("curve_expert_{i}.csv"), &curve_csv(curve))?;
            }
            run.save(&ens)?;
            println!("{} experts trained", curves.len());
        }
        Command::TrainConfidence(c) => {
            let run = Run::open(&c)?;
            let mut ens = run.load()?;
            let train = run.train(&ens.map)?;
            let curves =
                training::train_confidence_heads(&mut ens, &train, &run.cfg.train_config())?;
            for (i, curve) in curves.iter().enumerate() {
                run.write(&format!("curve_confidence_{i}.csv"), &curve_csv(curve))?;
            }
            run.save(&ens)?;
            println!("{} confidence heads trained", curves.len());
        }
        Command::AddExpert { common, map } => {
            let run = Run::open(&common)?;
            let new_map = match map {
                Some(p) => SuperclassMap::load(&p)?,
                None => run.cfg.increment_map()?,
            };
            let mut ens = run.load()?;
            let train = run.train(&new_map)?;
            let report = training::add_expert_incremental(
                &mut ens,
                &train,
                &new_map,
                &run.cfg.train_config(),
            )?;
            let id = ens.n_experts() - 1;
            run.write(
                &format!("curve_expert_{id}.csv"),
                &curve_csv(&report.expert_curve),
            )?;
            run.write(
                "curve_mediator_increment.csv",
                &curve_csv(&report.mediator_curve),
            )?;
            run.save(&ens)?;
            println!("added expert {id} for classes {:?}", report.new_classes);
        }
        Command::Eval { common, mode } => {
            let run = Run::open(&common)?;
            let ens = run.load()?;
            let test = run.test(&ens.map)?;
            let mode = EvalMode::from(mode);
            let (report, lines) = eval::evaluate_detailed(&ens, &test, &run.cfg.gating, mode)?;
            let n = ens.n_experts();
            run.write(
                &format!("eval_{mode}.csv"),
                &format!("{}\n{}\n", MetricsReport::csv_header(n), report.csv_row(n)),
            )?;
            run.write(
                &format!("predictions_{mode}.tsv"),
                &eval::prediction_log(&lines),
            )?;
            println!(
                "{mode}: top1 {:.4} over {} samples",
                report.top1, report.samples
            );
        }
        Command::SweepThreshold { common, t_list } => {
            let run = Run::open(&common)?;
            let ens = run.load()?;
            let t_list = t_list.unwrap_or_else(|| run.cfg.sweep.t_list.clone());
            let cache = EvalCache::build(&ens, &run.test(&ens.map)?)?;
            let rows = cache.threshold_sweep(&t_list, run.cfg.gating.mediator_weight)?;
            run.write(
                "sweep_threshold.csv",
                &eval::sweep_csv(&rows, ens.n_experts()),
            )?;
            for r in &rows {
                println!("T={}: top1 {:.4}", r.threshold, r.top1);
            }
        }
        Command::SweepShared { common, k_list } => {
            let run = Run::open(&common)?;
            let ens = run.load()?;
            let k_list = k_list.unwrap_or_else(|| run.cfg.sweep.k_list.clone());
            if k_list.is_empty() {
                return Err(Error::Config(
                    "no shared-layer counts given (--k-list or sweep.k_list)".into(),
                ));
            }
            let rows = eval::shared_layers_sweep(
                &ens,
                &run.train(&ens.map)?,
                &run.test(&ens.map)?,
                &k_list,
                &run.cfg.train_config(),
                &run.cfg.gating,
            )?;
            run.write("sweep_shared.csv", &eval::shared_csv(&rows))?;
            for r in &rows {
                println!("k={}: top1 {:.4}", r.k, r.top1);
            }
        }
        Command::Gradcheck { seed, count, eps } => {
            let report = run_suite(&mut rng_for(seed, "gradcheck", 0), count, eps)?;
            println!(
                "max relative error {:e} over {} coordinates ({} skipped at kinks)",
                report.max_rel_error, report.checked, report.skipped
            );
            return Ok(report.max_rel_error < GRADCHECK_TOLERANCE);
        }
    }
    Ok(true)
}

/// Convenience for tests and scripts: the model path inside `out`.
pub fn model_path(out: &Path) -> PathBuf {
    out.join(MODEL_FILE)
}
