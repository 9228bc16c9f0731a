//! Command-line front end. `dispatch` returns the process exit code:
//! 0 on success, 1 on invalid input, 2 on numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::parse_config;
use crate::data::{make_synthetic, save_dataset, Split, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::experiment::{
    aggregate_seeds, bias_probe, evaluate, persist_run, run_seeds, summary_csv, sweep_beta, ProbeConfig, TrainConfig,
};
use crate::model::{count_parameters, Model, ModelSpec};
use crate::norm::NormKind;
use crate::verify::{check_model, kl_oracle_suite, op_suite, ModelCheck};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "klnorm", version, about = "KL-regularized normalization: training, verification and experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Configuration file of `key = value` lines
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a configuration key; applied after the file, repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Comma-separated seed list, replacing the configured seeds
    #[arg(long, global = true, value_name = "A,B,C", value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Only print errors and the final summary
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per seed, persist runs and write summary.csv
    Train,
    /// Evaluate a checkpoint on a split of the configured dataset
    Eval {
        /// Checkpoint written by `train`
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// train, dev or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient checks for every operation and the full model
    Gradcheck {
        /// Seed for the random check inputs and model
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the closed-form Gaussian KL with a Monte-Carlo estimate
    Klcheck {
        /// Random Gaussian pairs, in addition to two fixed anchors
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        /// Monte-Carlo samples per pair
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Seed for the pairs and the samples
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train across a grid of KL weights and write sweep.csv
    SweepBeta {
        /// Strictly increasing comma-separated beta0 values
        #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.01,0.1,1,100")]
        grid: Vec<f64>,
    },
    /// Probe a frozen checkpoint for a spurious feature in the last column
    BiasProbe {
        /// Checkpoint trained on the biased dataset
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Split the probe is evaluated on
        #[arg(long, default_value = "dev")]
        split: String,
        /// Full-batch Adam steps for the probe classifier
        #[arg(long, default_value_t = 300)]
        steps: usize,
        /// Probe learning rate
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Write a synthetic dataset file
    MakeData(MakeDataArgs),
    /// Report parameter counts and normalization overhead
    Params {
        /// Input feature width
        #[arg(long, default_value_t = 768)]
        d_in: usize,
        /// Bottleneck width K
        #[arg(long, default_value_t = 512)]
        bottleneck: usize,
        /// Number of classes
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// none, batch, layer, group:<g> or klnorm
        #[arg(long, default_value = "klnorm")]
        norm: String,
        /// Parameters of a frozen upstream encoder to include in the percentage
        #[arg(long)]
        backbone: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// gauss_mix or biased
    #[arg(long, default_value = "gauss_mix")]
    pub kind: String,
    /// Total rows, split 60/20/20 into train/dev/test
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Informative feature width; `biased` appends one spurious column
    #[arg(long, default_value_t = 16)]
    pub d_in: usize,
    /// Number of classes
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale of the spurious column (`biased` only)
    #[arg(long, default_value_t = 1.0)]
    pub bias_strength: f64,
    /// Distance between class means
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    /// Per-coordinate noise standard deviation
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Destination file
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INVALID
    }
}

fn load_config(g: &GlobalArgs) -> Result<TrainConfig> {
    let mut cfg = parse_config(g.config.as_deref(), &g.set)?;
    if let Some(s) = &g.seeds {
        cfg.seeds = s.clone();
        cfg.validate()?;
    }
    Ok(cfg)
}

struct Printer<'a, W: Write> {
    out: &'a mut W,
    quiet: bool,
}

impl<W: Write> Printer<'_, W> {
    fn info(&mut self, s: impl AsRef<str>) -> Result<()> {
        if !self.quiet {
            writeln!(self.out, "{}", s.as_ref())?;
        }
        Ok(())
    }

    fn always(&mut self, s: impl AsRef<str>) -> Result<()> {
        writeln!(self.out, "{}", s.as_ref())?;
        Ok(())
    }
}

/// Runs a parsed command, writing reports to `out` and errors to `err`.
pub fn dispatch(cli: &Cli, out: &mut impl Write, err: &mut impl Write) -> i32 {
    let mut p = Printer {
        out,
        quiet: cli.global.quiet,
    };
    match run(cli, &mut p) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn run<W: Write>(cli: &Cli, p: &mut Printer<'_, W>) -> Result<i32> {
    let g = &cli.global;
    match &cli.command {
        Command::Train => {
            let cfg = load_config(g)?;
            let ds = cfg.load_dataset()?;
            let runs = run_seeds(&cfg, &ds)?;
            let mut diverged = false;
            for r in &runs {
                let dir = persist_run(&g.out, r)?;
                let res = &r.result;
                match (&res.status, res.test) {
                    (crate::experiment::RunStatus::Diverged { epoch, detail }, _) => {
                        diverged = true;
                        p.always(format!("seed {}: diverged at epoch {epoch}: {detail}", res.seed))?;
                    }
                    (_, Some(t)) => p.info(format!(
                        "seed {}: test accuracy {:.4}, macro-F1 {:.4} -> {}",
                        res.seed,
                        t.accuracy,
                        t.macro_f1,
                        dir.display()
                    ))?,
                    _ => p.info(format!("seed {}: done -> {}", res.seed, dir.display()))?,
                }
            }
            let results: Vec<_> = runs.into_iter().map(|r| r.result).collect();
            if results.len() >= 2 {
                let agg = aggregate_seeds(&results)?;
                let path = g.out.join("summary.csv");
                write_file(&path, &summary_csv(&agg))?;
                p.always(format!("config {}", agg.config_digest))?;
                for m in &agg.metrics {
                    p.always(format!("{:>14}  {}", m.metric, m.formatted))?;
                }
                p.info(format!("wrote {}", path.display()))?;
            } else {
                p.info("single seed: no summary written")?;
            }
            Ok(if diverged { EXIT_NUMERICAL } else { EXIT_OK })
        }
        Command::Eval { checkpoint, split } => {
            let cfg = load_config(g)?;
            let ds = cfg.load_dataset()?;
            let split: Split = split.parse()?;
            let model = load_checkpoint(checkpoint)?;
            if model.spec.d_in != ds.d_in() || model.spec.n_classes != ds.n_classes {
                return Err(Error::invalid("checkpoint does not match the dataset width or classes"));
            }
            let (x, y) = ds.split(split);
            if y.is_empty() {
                return Err(Error::invalid(format!("{split} split is empty")));
            }
            let (_, m) = evaluate(&model, &x, &y, 0.0)?;
            p.always(serde_json::to_string(&m)?)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { seed } => {
            let mut failed = 0;
            let model_check = ModelCheck {
                seed: *seed,
                ..ModelCheck::default()
            };
            let reports = op_suite(*seed)?.into_iter().chain(check_model(&model_check)?);
            for r in reports {
                let ok = r.passed();
                failed += usize::from(!ok);
                p.info(format!(
                    "{} {:<28} max rel err {:.3e} over {} entries",
                    if ok { "ok  " } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.checked
                ))?;
            }
            p.always(if failed == 0 {
                "gradcheck: all passed".to_string()
            } else {
                format!("gradcheck: {failed} failed")
            })?;
            Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERICAL })
        }
        Command::Klcheck { pairs, samples, seed } => {
            let rows = kl_oracle_suite(*pairs, &[1, 4, 16], *samples, *seed)?;
            let worst = rows.iter().map(|r| r.z_score()).fold(0.0, f64::max);
            let failed = rows.iter().filter(|r| !r.passed(3.0)).count();
            for r in &rows {
                p.info(format!(
                    "K={:<3} closed {:>10.6}  mc {:>10.6} ± {:.6}  z {:.2}",
                    r.k,
                    r.closed_form,
                    r.monte_carlo.mean,
                    r.monte_carlo.std_err,
                    r.z_score()
                ))?;
            }
            p.always(format!("klcheck: {} pairs, {failed} beyond 3 SE, worst z {worst:.2}", rows.len()))?;
            Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERICAL })
        }
        Command::SweepBeta { grid } => {
            let cfg = load_config(g)?;
            let ds = cfg.load_dataset()?;
            let sweep = sweep_beta(&cfg, &ds, grid)?;
            let csv = sweep.to_csv();
            let path = g.out.join("sweep.csv");
            write_file(&path, &csv)?;
            p.info(csv.trim_end())?;
            let best = sweep.best();
            p.always(format!("best beta0 {} (val {:.4}, gap {:.4})", best.beta0, best.val_loss, best.gap()))?;
            p.info(format!("wrote {}", path.display()))?;
            Ok(EXIT_OK)
        }
        Command::BiasProbe {
            checkpoint,
            split,
            steps,
            lr,
        } => {
            let cfg = load_config(g)?;
            let ds = cfg.load_dataset()?;
            let model = load_checkpoint(checkpoint)?;
            let probe = ProbeConfig {
                steps: *steps,
                lr: *lr,
                seed: cfg.seeds[0],
            };
            let r = bias_probe(&model, &ds, probe, split.parse()?)?;
            p.always(format!(
                "probe accuracy {:.4} on {split} (train {:.4})",
                r.eval_accuracy, r.train_accuracy
            ))?;
            Ok(EXIT_OK)
        }
        Command::MakeData(a) => {
            let kind: SyntheticKind = a.kind.parse()?;
            let mut spec = SyntheticSpec::new(kind, a.n, a.d_in, a.classes, a.seed);
            spec.bias_strength = a.bias_strength;
            spec.separation = a.separation;
            spec.noise = a.noise;
            let ds = make_synthetic(&spec)?;
            save_dataset(&ds, &a.output)?;
            p.info(format!(
                "wrote {} ({} rows, d={}, train/dev/test {}/{}/{})",
                a.output.display(),
                ds.len(),
                ds.d_in(),
                ds.train.len(),
                ds.dev.len(),
                ds.test.len()
            ))?;
            Ok(EXIT_OK)
        }
        Command::Params {
            d_in,
            bottleneck,
            classes,
            norm,
            backbone,
        } => {
            let norm: NormKind = norm.parse()?;
            let spec = ModelSpec::new(*d_in, *bottleneck, norm, *classes);
            let model = Model::build(&spec, 0)?;
            let c = count_parameters(&model);
            p.always(format!("widths {:?} -> {classes} classes, norm {norm}", spec.widths()))?;
            p.always(format!("total parameters      {}", c.total))?;
            p.always(format!("normalization params  {}", c.norm_overhead))?;
            p.always(format!("overhead              {:.2}%", c.overhead_pct))?;
            if let Some(b) = backbone {
                p.always(format!(
                    "overhead with backbone {:.3}% ({b} frozen parameters)",
                    c.overhead_pct_with_backbone(*b)
                ))?;
            }
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => dispatch(&cli, out, err),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            code
        }
    }
}
