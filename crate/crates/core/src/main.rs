use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use vflsim::data::{generate, read_tsv, write_tsv};
use vflsim::experiment::{
    apply_env_overrides, parse_config, prepare_data, run_experiment, split_and_align, summary_table,
    write_prepared, ExperimentConfig, ExperimentReport, RunOptions, LEDGER_FILE, REPORT_FILE,
};
use vflsim::metrics::{auc, nll};
use vflsim::protocol::{predict, Federation};
use vflsim::trainer::load_model_into;
use vflsim::{Result, VflError};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "vflsim", version, about = "Two-party vertical federated learning simulator")]
struct Cli {
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Flat `section.key = value` file; `VFLSIM_*` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic click log into `<out-dir>/samples.tsv`.
    GenData,
    /// Hold out the test days, align the rest through PSI, write `<out-dir>/data/`.
    Align {
        /// Defaults to `<out-dir>/samples.tsv`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the configured pipeline and write its report and artifacts.
    Train {
        /// Directory with aligned/unaligned/test TSVs; overrides `data.dir`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Skip label-inference attacks.
        #[arg(long)]
        no_attacks: bool,
    },
    /// Run the pipeline with both attacks and print the privacy section.
    Attack {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Undefended report to compute ΔLeakAUC against.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Score a trained model on the test split.
    Eval {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Run directory holding `model.bin`; defaults to `<out-dir>/<experiment id>`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Summarize reports from the ledger or from given report files.
    Report {
        paths: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(cli: &Cli, extra: &[(&str, Option<String>)]) -> Result<ExperimentConfig> {
    let mut map = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| VflError::Config(format!("cannot read {}: {e}", p.display())))?;
            parse_config(&text)?
        }
        None => BTreeMap::new(),
    };
    apply_env_overrides(&mut map, std::env::vars());
    if let Some(seed) = cli.seed {
        map.insert("experiment.seed".into(), seed.to_string());
    }
    for (k, v) in extra {
        if let Some(v) = v {
            map.insert((*k).to_string(), v.clone());
        }
    }
    ExperimentConfig::from_map(map)
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn read_reports(paths: &[PathBuf], out_dir: &Path) -> Result<Vec<ExperimentReport>> {
    if paths.is_empty() {
        let f = fs::File::open(out_dir.join(LEDGER_FILE))?;
        return std::io::BufReader::new(f)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect();
    }
    paths
        .iter()
        .map(|p| {
            if p.is_dir() {
                ExperimentReport::load(p.join(REPORT_FILE))
            } else {
                ExperimentReport::load(p)
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(&cli, &[])?;
            let ds = generate(&cfg.data.generator)?;
            fs::create_dir_all(&cli.out_dir)?;
            let path = cli.out_dir.join("samples.tsv");
            write_tsv(&ds, &path)?;
            println!("{} samples, positive rate {:.4} -> {}", ds.len(), ds.positive_rate(), path.display());
        }
        Command::Align { input } => {
            let cfg = load_config(&cli, &[])?;
            let input = input.clone().unwrap_or_else(|| cli.out_dir.join("samples.tsv"));
            let full = read_tsv(&input)?;
            let data = split_and_align(&full, cfg.data.test_days, cfg.data.aligned_fraction, cfg.seed)?;
            let dir = cli.out_dir.join("data");
            write_prepared(&data, &dir)?;
            println!(
                "aligned {} unaligned {} test {} -> {}",
                data.aligned.len(),
                data.unaligned.len(),
                data.test.len(),
                dir.display()
            );
        }
        Command::Train { data_dir, no_attacks } => {
            let cfg = load_config(&cli, &[("data.dir", path_str(data_dir))])?;
            let opts = RunOptions {
                attacks: !no_attacks,
                write_artifacts: true,
            };
            let report = run_experiment(&cfg, &cli.out_dir, opts)?;
            print!("{}", summary_table(&[report]));
        }
        Command::Attack { data_dir, base } => {
            let cfg = load_config(
                &cli,
                &[
                    ("data.dir", path_str(data_dir)),
                    ("report.base", path_str(base)),
                    ("attack.norm", Some("true".into())),
                    ("attack.cluster", Some("true".into())),
                ],
            )?;
            let report = run_experiment(&cfg, &cli.out_dir, RunOptions::default())?;
            println!("{}", serde_json::to_string_pretty(&report.privacy)?);
        }
        Command::Eval { data_dir, run } => {
            let cfg = load_config(&cli, &[("data.dir", path_str(data_dir))])?;
            let run_dir = run.clone().unwrap_or_else(|| cli.out_dir.join(&cfg.id));
            let model_path = run_dir.join("model.bin");
            if !model_path.exists() {
                // the local pipeline has no federated model to score
                return Err(VflError::Validation(format!("{} not found", model_path.display())));
            }
            let start = Instant::now();
            let data = prepare_data(&cfg)?;
            let mut fed = Federation::new(&data.vocab, &cfg.model, &cfg.train)?;
            load_model_into(&mut fed, &model_path)?;
            let probs = predict(&mut fed, &data.test)?;
            let y = data.test.labels();
            let out = serde_json::json!({
                "experiment_id": cfg.id,
                "n_test": y.len(),
                "auc": auc(&probs, &y)?,
                "nll": nll(&probs, &y)?,
                "runtime_s": start.elapsed().as_secs_f64(),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Report { paths, json } => {
            let reports = read_reports(paths, &cli.out_dir)?;
            if *json {
                for r in &reports {
                    println!("{}", serde_json::to_string(r)?);
                }
            } else {
                print!("{}", summary_table(&reports));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ VflError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
