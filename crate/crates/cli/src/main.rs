use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use burstmtl::checkpoint::Checkpoint;
use burstmtl::config::{Precision, RunConfig};
use burstmtl::data::{generate_synthetic, Split};
use burstmtl::gradcheck::{run_suite, REL_TOL};
use burstmtl::trainer::{
    self, load_data, multi_seed, read_epoch_log, weight_trace, Metrics, Silent, REPORT_FILE, RESOLVED_CONFIG_FILE,
};
use burstmtl::Error;
use clap::{Parser, Subcommand, ValueEnum};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "BURSTMTL_OUT";

#[derive(Parser, Debug)]
#[command(name = "burstmtl", version, about = "Multi-task vocal-burst emotion experiments")]
struct Cli {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: $BURSTMTL_OUT, else ./runs].
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (manifest, signals, label summary).
    GenerateData {
        /// Config overrides, `key=value`.
        overrides: Vec<String>,
    },
    /// Train every configured seed and report the best validation metrics.
    Train { overrides: Vec<String> },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        overrides: Vec<String>,
    },
    /// Finite-difference check of every differentiable operation and loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-epoch λ/α trajectories from a run's epoch log, as CSV.
    WeightTrace {
        /// `epochs.csv` written by `train`.
        log: PathBuf,
        /// Strategy label; read from the run's `config.resolved` when omitted.
        #[arg(long)]
        strategy: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::UnknownKey(_) | Error::Config(_) => 2,
            Error::Io(io) if io.kind() == ErrorKind::NotFound => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn require(path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure { code: 2, message: format!("file not found: {}", path.display()) })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 1, message: format!("{}: {e}", path.display()) }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve(base: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match base {
        Some(p) => {
            require(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides.iter().map(String::as_str))?;
    for p in cfg.data.manifest.iter().chain(&cfg.data.signals) {
        require(p)?;
    }
    Ok(cfg)
}

fn table(metrics: &Metrics) -> String {
    let mut out = format!("{:<8} {:<6} {:>8} {:>8}\n", "task", "metric", "value", "ρ");
    for s in &metrics.scores {
        let rho = s.rho.map_or("-".to_string(), |r| format!("{r:.4}"));
        out.push_str(&format!("{:<8} {:<6} {:>8.4} {:>8}\n", s.task.name(), s.metric_name(), s.primary, rho));
    }
    out
}

fn metrics_csv(metrics: &Metrics) -> String {
    let mut out = String::from("task,metric,value,rho\n");
    for s in &metrics.scores {
        let rho = s.rho.map_or(String::new(), |r| r.to_string());
        out.push_str(&format!("{},{},{},{}\n", s.task.name(), s.metric_name(), s.primary, rho));
    }
    out
}

fn create(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn generate_data(cli: &Cli, overrides: &[String]) -> CliResult {
    let cfg = resolve(cli.config.as_deref(), overrides)?;
    let out = out_dir(cli);
    create(&out)?;
    let ds = generate_synthetic(&cfg.data.synth)?;
    let paths = ds.save(&out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()).map_err(|e| io_err(&out, e))?;
    let s = ds.summary();
    println!("{} samples ({} train, {} val, {} test)", s.count, s.split_counts.get(&Split::Train).unwrap_or(&0),
        s.split_counts.get(&Split::Val).unwrap_or(&0), s.split_counts.get(&Split::Test).unwrap_or(&0));
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn train(cli: &Cli, overrides: &[String]) -> CliResult {
    let cfg = resolve(cli.config.as_deref(), overrides)?;
    let out = out_dir(cli);
    create(&out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()).map_err(|e| io_err(&out, e))?;
    let data = load_data(&cfg)?;
    log::info!(
        "{} + {} on {} samples, seeds {:?}",
        cfg.model.architecture,
        cfg.weighting.strategy,
        data.samples.len(),
        cfg.train.seeds
    );
    let (report, _) = match cfg.train.precision {
        Precision::F32 => multi_seed::<f32>(&cfg, &data, Some(&out), &mut Silent)?,
        Precision::F64 => multi_seed::<f64>(&cfg, &data, Some(&out), &mut Silent)?,
    };
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    fs::write(out.join(REPORT_FILE), json).map_err(|e| io_err(&out, e))?;
    for row in &report.rows {
        println!("seed {} (best epoch {}, monitor {:.4})", row.seed, row.best_epoch, row.monitor);
        print!("{}", table(&row.metrics));
    }
    if report.rows.len() > 1 {
        println!("best over {} seeds", report.rows.len());
        print!("{}", table(&report.best));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn evaluate(cli: &Cli, checkpoint: &Path, split: Split, overrides: &[String]) -> CliResult {
    require(checkpoint)?;
    let ckpt = Checkpoint::read(checkpoint)?;
    // the stored run configuration is the base; --config only supplies data settings
    let mut cfg = ckpt.header.config.clone();
    if let Some(p) = &cli.config {
        require(p)?;
        cfg.data = RunConfig::load(p)?.data;
    }
    cfg.apply_overrides(overrides.iter().map(String::as_str))?;
    for p in cfg.data.manifest.iter().chain(&cfg.data.signals) {
        require(p)?;
    }
    let data = load_data(&cfg)?;
    let metrics = match cfg.train.precision {
        Precision::F32 => trainer::evaluate::<f32>(&ckpt, &data, split, Some(&cfg.model))?,
        Precision::F64 => trainer::evaluate::<f64>(&ckpt, &data, split, Some(&cfg.model))?,
    };
    println!("{} split, epoch {} checkpoint", split, ckpt.header.epoch);
    print!("{}", table(&metrics));
    let out = out_dir(cli);
    create(&out)?;
    let csv = out.join(format!("metrics-{split}.csv"));
    fs::write(&csv, metrics_csv(&metrics)).map_err(|e| io_err(&csv, e))?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn gradcheck(trials: usize, seed: u64) -> CliResult {
    let rows = run_suite(trials, seed)?;
    println!("{:<14} {:>7} {:>12}  result", "op", "trials", "max rel err");
    for r in &rows {
        println!("{:<14} {:>7} {:>12.3e}  {}", r.name, r.trials, r.max_rel_err, if r.passed() { "pass" } else { "FAIL" });
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure { code: 1, message: format!("{failed} operations exceed relative error {REL_TOL:e}") });
    }
    println!("all {} operations pass (tolerance {REL_TOL:e})", rows.len());
    Ok(())
}

fn trace(log: &Path, strategy: Option<&str>) -> CliResult {
    require(log)?;
    let rows = read_epoch_log(log)?;
    let strategy = match strategy {
        Some(s) => s.to_string(),
        None => {
            let resolved = log.with_file_name(RESOLVED_CONFIG_FILE);
            require(&resolved)?;
            let text = fs::read_to_string(&resolved).map_err(|e| io_err(&resolved, e))?;
            RunConfig::from_toml(&text)?.weighting.strategy.name().to_string()
        }
    };
    print!("{}", weight_trace(&rows, &strategy));
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::GenerateData { overrides } => generate_data(cli, overrides),
        Command::Train { overrides } => train(cli, overrides),
        Command::Evaluate { checkpoint, split, overrides } => evaluate(cli, checkpoint, (*split).into(), overrides),
        Command::Gradcheck { trials, seed } => gradcheck(*trials, *seed),
        Command::WeightTrace { log, strategy } => trace(log, strategy.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
