use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poolbias::data::format_sig9;
use poolbias::experiment::config::parse_seeds;
use poolbias::experiment::{pipeline, report, sweep, ExperimentConfig, Layout, Workspace};
use poolbias::eval::EvalResult;
use poolbias::{io, Error, Result};

/// Pooling-bias laboratory: synthetic worlds, pooled labels, hard-negative
/// training and full-information evaluation.
///
/// Exit codes: 0 ok, 2 config, 3 I/O, 4 schema, 5 incompatible inputs.
#[derive(Parser, Debug)]
#[command(name = "poolbias", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (flat key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root. Overrides POOLBIAS_OUT and output.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed list, e.g. `1,2,3` or `1..10`; replaces `seeds` from the config.
    #[arg(long, global = true, conflicts_with = "seed")]
    seeds: Option<String>,
    /// Single seed; replaces `seeds` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print nothing on success.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the world: corpus, query splits, qrels and latent vectors.
    GenWorld,
    /// Pool the training queries and write the sparse labels.
    Pool,
    /// Retrieve candidates for every query with the strong retriever and the pooler.
    Retrieve,
    /// Train one model per seed.
    Train(RegimeArg),
    /// Evaluate trained models on the test queries, or a run file with --run.
    Eval {
        #[command(flatten)]
        regime: RegimeArg,
        /// Evaluate this run file against the full truth instead.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Train and evaluate over a one-key grid, e.g. `tau=0.5,1,2,5` or `eta=0.1..0.9`.
    Sweep {
        #[arg(long)]
        grid: String,
        #[command(flatten)]
        regime: RegimeArg,
    },
    /// Aggregate evaluated runs into a table with paired sign tests.
    Report {
        /// Directory searched for runs; defaults to `<out>/runs`.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RegimeArg {
    /// Overrides train.regime.
    #[arg(long)]
    regime: Option<String>,
}

struct Ctx {
    global: Global,
}

impl Ctx {
    fn say(&self, line: impl std::fmt::Display) {
        if !self.global.quiet {
            println!("{line}");
        }
    }

    fn config(&self, regime: Option<&str>) -> Result<ExperimentConfig> {
        let path = self
            .global
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
        let mut cfg = ExperimentConfig::parse(&io::read_text(path)?)?;
        if let Some(r) = regime {
            cfg = cfg.with_override("train.regime", r)?;
        }
        if let Some(s) = &self.global.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(s) = self.global.seed {
            cfg.seeds = vec![s];
        }
        Ok(cfg)
    }

    /// `--out`, then `POOLBIAS_OUT`, then `output.dir`.
    fn layout(&self, cfg: Option<&ExperimentConfig>) -> Layout {
        let root = self
            .global
            .out
            .clone()
            .or_else(|| std::env::var_os("POOLBIAS_OUT").filter(|v| !v.is_empty()).map(PathBuf::from))
            .or_else(|| cfg.map(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        Layout::new(root)
    }
}

fn macro_line(results: &[EvalResult]) -> String {
    results
        .iter()
        .map(|r| format!("{}@{}={}", r.metric.name(), r.k, format_sig9(r.macro_avg)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { global: cli.global };
    match cli.command {
        Command::GenWorld => {
            let cfg = ctx.config(None)?;
            let layout = ctx.layout(Some(&cfg));
            let summary = pipeline::gen_world(&cfg, &layout)?;
            ctx.say(&summary);
            ctx.say(format!("world written to {}", layout.world_dir().display()));
        }
        Command::Pool => {
            let cfg = ctx.config(None)?;
            let layout = ctx.layout(Some(&cfg));
            let s = pipeline::pool(&cfg, &layout)?;
            ctx.say(format!(
                "labeled queries {}  labels {}  dropped {}",
                s.labeled_queries,
                s.labels,
                s.dropped.len()
            ));
        }
        Command::Retrieve => {
            let cfg = ctx.config(None)?;
            let layout = ctx.layout(Some(&cfg));
            let s = pipeline::retrieve(&cfg, &layout)?;
            for (r, split, m, v) in &s.rows {
                if split == "test" || m.starts_with("fn_rate") {
                    ctx.say(format!("{r:<7} {split:<5} {m:<12} {}", format_sig9(*v)));
                }
            }
        }
        Command::Train(r) => {
            let cfg = ctx.config(r.regime.as_deref())?;
            let layout = ctx.layout(Some(&cfg));
            let ws = Workspace::load(&cfg, &layout)?;
            for &seed in &cfg.seeds {
                let dir = layout.run_dir(cfg.train.regime, seed);
                let s = pipeline::train_run(&ws, &cfg, seed, &dir, cfg.train.regime.name())?;
                ctx.say(format!(
                    "{} seed {seed}: final loss {}  skipped {}  -> {}",
                    cfg.train.regime.name(),
                    s.final_loss.map_or_else(|| "-".into(), format_sig9),
                    s.skipped_queries,
                    dir.display()
                ));
            }
        }
        Command::Eval { regime, run: Some(file) } => {
            let _ = regime;
            let cfg = ctx.config(None)?;
            let layout = ctx.layout(Some(&cfg));
            let world = pipeline::load_world(&cfg, &layout)?;
            let run = io::load(&file, io::parse_run)?;
            let results = pipeline::evaluate_run(&cfg, &world.truth, &run)?;
            let stem = file.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
            let out = layout.root.join("eval").join(stem).join("metrics.csv");
            io::write_text(&out, &pipeline::metrics_csv(&results))?;
            ctx.say(format!("{}: {}", file.display(), macro_line(&results)));
        }
        Command::Eval { regime, run: None } => {
            let cfg = ctx.config(regime.regime.as_deref())?;
            let layout = ctx.layout(Some(&cfg));
            let ws = Workspace::load(&cfg, &layout)?;
            for &seed in &cfg.seeds {
                let dir = layout.run_dir(cfg.train.regime, seed);
                let results = pipeline::eval_run(&ws, &cfg, &dir)?;
                ctx.say(format!("{} seed {seed}: {}", cfg.train.regime.name(), macro_line(&results)));
            }
        }
        Command::Sweep { grid, regime } => {
            let grid = sweep::parse_grid(&grid)?;
            let cfg = ctx.config(regime.regime.as_deref())?;
            let layout = ctx.layout(Some(&cfg));
            let out = sweep::sweep(&cfg, &layout, &grid)?;
            ctx.say(out.csv.trim_end());
            ctx.say(format!("written to {}", out.csv_path.display()));
        }
        Command::Report { runs } => {
            let cfg = match &ctx.global.config {
                Some(_) => Some(ctx.config(None)?),
                None => None,
            };
            let layout = ctx.layout(cfg.as_ref());
            let dir = runs.unwrap_or_else(|| layout.runs_dir());
            let rep = report::report(&dir)?;
            let target = ctx.global.out.as_deref().unwrap_or(dir.as_path());
            write_report(target, &rep)?;
            ctx.say(&rep);
        }
    }
    Ok(())
}

fn write_report(dir: &Path, rep: &report::Report) -> Result<()> {
    io::write_text(&dir.join("report.csv"), &rep.to_csv())?;
    io::write_text(&dir.join("sign_tests.csv"), &rep.sign_tests_csv())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
