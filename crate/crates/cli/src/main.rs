use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use graphmoe::checkpoint::Checkpoint;
use graphmoe::config::RunConfig;
use graphmoe::eval::{self, auroc};
use graphmoe::ingest::{self, WindowBatch};
use graphmoe::synth;
use graphmoe::trainer::{self, TrainConfig};
use graphmoe::Error;

#[derive(Parser)]
#[command(name = "graphmoe", version, about = "Graph mixture-of-experts anomaly detection for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic series to `paths.data`.
    GenData(Common),
    /// Train on `paths.data`; writes the checkpoint and loss trace.
    Train(Common),
    /// Score the test split with a checkpoint; writes score, router and adjacency CSVs.
    Score(Common),
    /// Score and compute AUROC; writes the report files.
    Eval(Common),
    /// Run the MoE × MAR grid and the expert-count sweep.
    Ablate(Common),
    /// Render SVGs from an existing score CSV.
    Plot(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{code}]: {msg}");
            ExitCode::from(code)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingFile(_) => 2,
        Error::Config(_) => 3,
        e if e.is_numeric() => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> graphmoe::Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path, &common.overrides),
        None => RunConfig::from_toml("", &common.overrides),
    }
}

fn require(path: &Path) -> graphmoe::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn write(path: &Path, contents: &str) -> graphmoe::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn test_windows(cfg: &RunConfig, train: &TrainConfig) -> graphmoe::Result<WindowBatch> {
    let series = ingest::load_csv(&cfg.paths.data)?;
    if series.labels.is_none() {
        return Err(Error::Config(format!("{} has no label column", cfg.paths.data.display())));
    }
    Ok(trainer::prepare(&series, train)?.test)
}

fn score_to_files(cfg: &RunConfig) -> graphmoe::Result<(WindowBatch, Vec<f64>)> {
    let ckpt_path = cfg.paths.checkpoint();
    require(&cfg.paths.data)?;
    require(&ckpt_path)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let test = test_windows(cfg, &ckpt.config)?;
    let scored = trainer::score(&ckpt, &test)?;
    let out = &cfg.paths.out_dir;
    write(&cfg.paths.scores(), &eval::scores_csv(&test.starts, &scored.scores, &test.labels))?;
    write(&out.join("routes.csv"), &eval::routes_csv(&scored.routes))?;
    write(&out.join("adjacency.csv"), &eval::adjacency_csv(&scored.adjacency, test.entities()))?;
    Ok((test, scored.scores))
}

fn run(command: Command) -> graphmoe::Result<()> {
    match command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let series = synth::generate(&cfg.gen)?;
            if let Some(dir) = cfg.paths.data.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            ingest::write_csv(&series, &cfg.paths.data)?;
            println!("wrote {} ({} entities, {} points)", cfg.paths.data.display(), series.entities(), series.len());
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            require(&cfg.paths.data)?;
            let series = ingest::load_csv(&cfg.paths.data)?;
            let data = trainer::prepare(&series, &cfg.train)?;
            let outcome = match trainer::train(&cfg.train, &data.train, data.val.as_ref()) {
                Err(Error::Diverged { epoch, detail, last_good }) => {
                    let path = cfg.paths.out_dir.join("last_good.ckpt");
                    last_good.save(&path)?;
                    return Err(Error::Numeric(format!(
                        "training diverged at epoch {epoch}: {detail}; last good checkpoint at {}",
                        path.display()
                    )));
                }
                r => r?,
            };
            outcome.checkpoint.save(&cfg.paths.checkpoint())?;
            write(&cfg.paths.trace(), &trainer::trace_csv(&outcome.trace))?;
            let last = outcome.trace.last().expect("at least one epoch");
            println!(
                "trained {} epochs on {} windows; final train_nll {:.6}; checkpoint {}",
                last.epoch,
                data.train.len(),
                last.train_nll,
                cfg.paths.checkpoint().display()
            );
        }
        Command::Score(c) => {
            let cfg = load_config(&c)?;
            let (test, _) = score_to_files(&cfg)?;
            println!("scored {} windows into {}", test.len(), cfg.paths.scores().display());
        }
        Command::Eval(c) => {
            let cfg = load_config(&c)?;
            let (test, scores) = score_to_files(&cfg)?;
            let roc = auroc(&scores, &test.labels)?;
            let report = cfg.paths.report_dir();
            eval::score_report(&test.starts, &scores, &test.labels, &report)?;
            let mut curve = String::from("fpr,tpr\n");
            for (f, t) in &roc.curve {
                curve.push_str(&format!("{f},{t}\n"));
            }
            write(&report.join("roc.csv"), &curve)?;
            write(
                &report.join("metrics.csv"),
                &format!("auroc,n_pos,n_neg\n{},{},{}\n", roc.auroc, roc.n_pos, roc.n_neg),
            )?;
            println!("auroc {:.6} ({} anomalous / {} normal windows)", roc.auroc, roc.n_pos, roc.n_neg);
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c)?;
            require(&cfg.paths.data)?;
            let series = ingest::load_csv(&cfg.paths.data)?;
            let grid = trainer::ablate(&series, &cfg.train, &cfg.ablation_seeds)?;
            write(&cfg.paths.out_dir.join("ablation.csv"), &trainer::ablation_csv(&grid))?;
            let sweep = trainer::expert_sweep(&series, &cfg.train, &cfg.expert_counts)?;
            write(&cfg.paths.out_dir.join("expert_sweep.csv"), &trainer::sweep_csv(&sweep))?;
            print!("{}", trainer::ablation_csv(&grid));
            print!("{}", trainer::sweep_csv(&sweep));
        }
        Command::Plot(c) => {
            let cfg = load_config(&c)?;
            let path = cfg.paths.scores();
            require(&path)?;
            let (starts, scores, labels) = eval::parse_scores_csv(&fs::read_to_string(&path)?)?;
            let report = cfg.paths.report_dir();
            eval::score_report(&starts, &scores, &labels, &report)?;
            println!("wrote plots to {}", report.display());
        }
    }
    Ok(())
}
