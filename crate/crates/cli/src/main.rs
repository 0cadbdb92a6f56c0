use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sosp::experiment::{
    self, read_records, Checkpoint, ExperimentConfig, RunKind, TimingSweep, Workspace,
};
use sosp::selection::Method;
use sosp::{Error, Result};

#[derive(Parser)]
#[command(name = "sosp", version, about = "Structured pruning experiments")]
struct Cli {
    /// Log filter, e.g. `info` or `sosp=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model for every seed and write checkpoints.
    Train(Common),
    /// Train (or load a checkpoint), prune, fine-tune and record.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem (`<stem>.params` + `<stem>.model.json`); skips training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Prune at random initialization, then train twice.
    InitPrune(Common),
    /// Expand bottlenecks found in earlier prune records and compare with
    /// a uniformly widened model.
    ExpandPrune {
        #[command(flatten)]
        common: Common,
        /// Records file holding the base prune runs.
        #[arg(long)]
        base: PathBuf,
    },
    /// Time mask computation over widening MLPs and write a CSV.
    Timing {
        /// JSON file with sweep settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        multipliers: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "timing.csv")]
        output: PathBuf,
    },
    /// Aggregate records into CSV tables and plot data.
    Report {
        /// One or more records files.
        #[arg(long, required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        output_dir: PathBuf,
    },
}

/// Config file plus overrides.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    subsample: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        if let Some(r) = &self.ratios {
            cfg.ratios = r.clone();
        }
        if let Some(e) = self.epochs {
            cfg.schedule = sosp::train::Schedule::with_epochs(e);
        }
        if let Some(e) = self.finetune_epochs {
            cfg.finetune_epochs = Some(e);
        }
        if let Some(n) = self.subsample {
            cfg.subsample = n;
        }
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io {
            path: cfg.output_dir.clone(),
            source: e,
        })?;
        let path = cfg.output_dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::Io { path, source: e })?;
        Ok(cfg)
    }
}

fn print_summary(records: &[experiment::RunRecord]) {
    for r in records {
        println!(
            "{} {} seed={} method={} ratio={} acc_before_ft={:.4} acc_final={:.4} params={} macs={}",
            r.kind.as_str(),
            r.model,
            r.seed,
            r.method,
            r.ratio,
            r.accuracy_before_finetune,
            r.accuracy_final,
            r.counts.exact_params,
            r.counts.exact_macs
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.config()?;
            let ws = Workspace::new(&cfg)?;
            let mut records = Vec::new();
            for &seed in &cfg.seeds {
                records.push(ws.train(seed)?.1);
            }
            print_summary(&records);
        }
        Command::Prune { common, checkpoint } => {
            let cfg = common.config()?;
            let ws = Workspace::new(&cfg)?;
            let records = match checkpoint {
                Some(stem) => {
                    let ckpt = Checkpoint::load(&stem)?;
                    let seed = cfg.seeds[0];
                    ws.prune_checkpoint(&ckpt, &[], seed)?
                }
                None => ws.prune_pipeline()?,
            };
            print_summary(&records);
        }
        Command::InitPrune(common) => {
            let cfg = common.config()?;
            let records = Workspace::new(&cfg)?.init_prune_pipeline()?;
            print_summary(&records);
        }
        Command::ExpandPrune { common, base } => {
            let cfg = common.config()?;
            let ws = Workspace::new(&cfg)?;
            let bases: Vec<_> = read_records(&base)?
                .into_iter()
                .filter(|r| r.kind == RunKind::Prune)
                .collect();
            if bases.is_empty() {
                return Err(Error::Input(format!("{} holds no prune records", base.display())));
            }
            for b in &bases {
                let out = ws.expand_prune(b)?;
                println!(
                    "seed={} bottlenecks={:?} widen_multiplier={:.4} target_params={}",
                    out.seed, out.bottlenecks, out.widen_multiplier, out.target_params
                );
                let mut records: Vec<_> = out.expanded.into_iter().collect();
                records.push(out.widened);
                print_summary(&records);
            }
        }
        Command::Timing {
            config,
            multipliers,
            methods,
            threads,
            output,
        } => {
            let mut sweep = match config {
                Some(p) => load_json::<TimingSweep>(&p)?,
                None => TimingSweep::default(),
            };
            if let Some(m) = multipliers {
                sweep.multipliers = m;
            }
            if let Some(m) = methods {
                sweep.methods = m;
            }
            if let Some(t) = threads {
                sweep.threads = t;
            }
            let rows = experiment::timing_sweep(&sweep)?;
            experiment::write_timing_csv(&rows, &output)?;
            for m in &sweep.methods {
                let pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter(|r| r.method == m.as_str())
                    .map(|r| (r.structures as f64, r.total_secs))
                    .collect();
                if pts.len() > 1 {
                    println!("{m}: log-log slope {:.3}", experiment::log_log_slope(&pts));
                }
            }
        }
        Command::Report { records, output_dir } => {
            let mut all = Vec::new();
            for p in &records {
                all.extend(read_records(p)?);
            }
            let bundle = experiment::report(&all, &output_dir)?;
            println!("{}", bundle.summary.display());
        }
    }
    Ok(())
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "warn".into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "category": e.category(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
