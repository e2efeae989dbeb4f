//! Command-line front end. The `adfa` binary forwards to [`main_with_args`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{ablation_run, AblationGridSpec};
use crate::backbone::BackboneHandle;
use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, load_dataset, SynthConfig};
use crate::error::{AdfaError, Result};
use crate::pipeline::train_run;
use crate::scoring::{evaluate, Scorer};

#[derive(Debug, Parser)]
#[command(name = "adfa", version, about = "Unsupervised image anomaly detection by descriptor adaptation")]
pub struct Cli {
    /// Worker threads; 1 gives single-threaded runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short = 'c', long = "config")]
    pub config: PathBuf,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset root, overriding `paths.dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory, overriding `paths.output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?.with_overrides(&self.overrides)?;
        if let Some(d) = &self.dataset {
            cfg.paths.dataset = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.paths.output = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the descriptor and write a checkpoint plus the training log.
    Train(ConfigArgs),
    /// Score the test splits and write a JSON report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// ROC curve plot (SVG).
        #[arg(long)]
        roc_out: Option<PathBuf>,
        /// Report path, default `<output>/report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print `path<TAB>score` for every image.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// `default` or a list such as `eps=0,eps=0.1,hard_topk,random_init`.
        #[arg(long, default_value = "default")]
        grid: String,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        n_train: usize,
        #[arg(long, default_value_t = 20)]
        n_test_normal: usize,
        #[arg(long, default_value_t = 20)]
        n_test_abnormal: usize,
        /// Image edge in pixels.
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

pub fn cmd_train(args: &ConfigArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let cfg = args.resolve()?;
    let manifest = load_dataset(cfg.paths.dataset()?)?;
    let handle = BackboneHandle::load(&cfg.backbone, cfg.preprocess.crop_size as usize)?;
    let outcome = train_run(&cfg, &manifest, &handle)?;
    let ckpt_path = cfg.paths.checkpoint();
    let sha = outcome.checkpoint.save(&ckpt_path)?;
    let log_json = serde_json::to_string_pretty(&outcome.log).map_err(|e| AdfaError::Format(e.to_string()))?;
    write_file(&cfg.paths.train_log(), &log_json)?;
    let last = outcome.log.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
    writeln!(out, "checkpoint\t{}\t{sha}", ckpt_path.display())?;
    writeln!(out, "final_loss\t{last:.6}")?;
    Ok(())
}

pub fn cmd_eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    roc_out: Option<&Path>,
    report: Option<&Path>,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let cfg = args.resolve()?;
    let manifest = load_dataset(cfg.paths.dataset()?)?;
    let scorer = Scorer::load(checkpoint)?;
    let report_data = evaluate(&scorer, &manifest, cfg.eval.keep_patch_scores)?;
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.report());
    write_file(&report_path, &report_data.to_json())?;
    if let Some(p) = roc_out {
        report_data.write_roc(p)?;
    }
    writeln!(out, "auroc\t{:.6}", report_data.auroc)?;
    writeln!(out, "report\t{}", report_path.display())?;
    Ok(())
}

pub fn cmd_score(checkpoint: &Path, files: &[PathBuf], out: &mut dyn std::io::Write) -> Result<()> {
    let scorer = Scorer::load(checkpoint)?;
    for s in scorer.score_paths(files, false)? {
        writeln!(out, "{}\t{:.6}", s.image_id, s.score)?;
    }
    Ok(())
}

pub fn cmd_ablate(args: &ConfigArgs, grid: &str, out: &mut dyn std::io::Write) -> Result<()> {
    let cfg = args.resolve()?;
    let spec = AblationGridSpec::parse(grid)?;
    let manifest = load_dataset(cfg.paths.dataset()?)?;
    let results = ablation_run(&cfg, &manifest, &spec);
    let dir = &cfg.paths.output;
    let table = results.render_table();
    write_file(&dir.join("ablation.csv"), &results.to_csv())?;
    write_file(&dir.join("ablation.txt"), &table)?;
    let json = serde_json::to_string_pretty(&results).map_err(|e| AdfaError::Format(e.to_string()))?;
    write_file(&dir.join("ablation.json"), &json)?;
    write!(out, "{table}")?;
    Ok(())
}

pub fn cmd_synth(out_dir: &Path, cfg: &SynthConfig, out: &mut dyn std::io::Write) -> Result<()> {
    let manifest = generate_synthetic(out_dir, cfg)?;
    writeln!(
        out,
        "dataset\t{}\ttrain={}\ttest_normal={}\ttest_abnormal={}\t{}",
        out_dir.display(),
        manifest.train.len(),
        manifest.test_normal.len(),
        manifest.test_abnormal.len(),
        manifest.hash()
    )?;
    Ok(())
}

/// Runs one parsed command, writing regular output to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args, out),
        Command::Eval {
            config,
            checkpoint,
            roc_out,
            report,
        } => cmd_eval(config, checkpoint, roc_out.as_deref(), report.as_deref(), out),
        Command::Score { checkpoint, files } => cmd_score(checkpoint, files, out),
        Command::Ablate { config, grid } => cmd_ablate(config, grid, out),
        Command::Synth {
            out: dir,
            seed,
            n_train,
            n_test_normal,
            n_test_abnormal,
            size,
        } => {
            let cfg = SynthConfig {
                n_train: *n_train,
                n_test_normal: *n_test_normal,
                n_test_abnormal: *n_test_abnormal,
                size: *size,
                seed: *seed,
                ..SynthConfig::default()
            };
            cmd_synth(dir, &cfg, out)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one `error[<class>]: <message>` line to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            e.exit_code()
        }
    }
}
