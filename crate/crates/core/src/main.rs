use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dccfl::dataset::{gaussian_blobs, load_dataset};
use dccfl::harness::{
    read_results_csv, read_results_jsonl, run_method, summarize, sweep_threshold, write_results, write_sweep,
    CsvRow, ExperimentConfig, Method, ResultFormat,
};
use dccfl::Error;

#[derive(Parser)]
#[command(name = "dccfl", version, about = "Single-round clustered federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Experiment config (JSON or TOML)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    /// Number of clients
    #[arg(long)]
    clients: Option<usize>,
    /// Fix the clustering threshold instead of selecting it
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over all seeds and write per-run records
    Run {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: ResultFormat,
    },
    /// Evaluate dc_cfl at each threshold, writing a CSV curve
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated thresholds; defaults to the config's list
        #[arg(long, value_delimiter = ',')]
        t_values: Option<Vec<f64>>,
    },
    /// Summarize result files as mean and std of accuracy per setting
    Report {
        /// Result files written by `run`
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Input format; inferred from the extension when omitted
        #[arg(long)]
        format: Option<ResultFormat>,
    },
    /// Write a labeled Gaussian-blob CSV for trying the pipeline
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        features: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(o: &Overrides) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_file(&o.config)?;
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(method) = o.method {
        cfg.method = method;
    }
    if let Some(c) = o.clients {
        cfg.partition.num_clients = c;
    }
    if let Some(t) = o.t {
        cfg.thresholds = vec![t];
    }
    if let Some(runs) = o.runs {
        cfg.num_runs = runs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { overrides, out, format } => {
            let cfg = load_config(&overrides)?;
            let records = run_method(&cfg)?;
            write_results(&records, &out, format)?;
            for r in &records {
                println!(
                    "{} {} {} seed={} mean_acc={:.4}",
                    r.dataset,
                    r.partition,
                    r.method.as_str(),
                    r.seed,
                    r.mean_accuracy
                );
            }
        }
        Command::Sweep { overrides, out, t_values } => {
            let cfg = load_config(&overrides)?;
            let table = load_dataset(&cfg.dataset.path, &cfg.dataset.label_column, cfg.dataset.num_classes)?;
            let ts = t_values.unwrap_or_else(|| cfg.thresholds.clone());
            let rows = sweep_threshold(&cfg, &table, &ts)?;
            write_sweep(&rows, &out)?;
            for r in &rows {
                println!(
                    "t={:.2} val={:.4} test={:.4} clusters={:.2}",
                    r.t, r.mean_validation_accuracy, r.mean_test_accuracy, r.num_clusters
                );
            }
        }
        Command::Report { inputs, format } => {
            let mut rows: Vec<CsvRow> = Vec::new();
            for path in &inputs {
                let fmt = match format {
                    Some(f) => f,
                    None if path.extension().is_some_and(|e| e == "csv") => ResultFormat::Csv,
                    None => ResultFormat::Jsonl,
                };
                match fmt {
                    ResultFormat::Csv => rows.extend(read_results_csv(path)?),
                    ResultFormat::Jsonl => rows.extend(read_results_jsonl(path)?.iter().map(CsvRow::from)),
                }
            }
            println!("dataset,partition,method,runs,mean_acc,std_acc");
            for s in summarize(&rows) {
                println!(
                    "{},{},{},{},{:.4},{:.4}",
                    s.dataset,
                    s.partition,
                    s.method.as_str(),
                    s.runs,
                    s.mean_acc,
                    s.std_acc
                );
            }
        }
        Command::Synth {
            out,
            per_class,
            features,
            classes,
            seed,
        } => {
            let table = gaussian_blobs(per_class, features, classes, 4.0, seed)?;
            let mut w = csv::Writer::from_path(&out)?;
            let mut header: Vec<String> = (0..features).map(|j| format!("x{j}")).collect();
            header.push("label".into());
            w.write_record(&header)?;
            for i in 0..table.n_rows() {
                let mut rec: Vec<String> = table.features().row(i).iter().map(|v| v.to_string()).collect();
                rec.push(table.labels()[i].to_string());
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::Io { path: out, source: e })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
