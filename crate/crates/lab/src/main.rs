use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flair_core::datagen::{make_benchmark_with, Split};
use flair_core::metrics::evaluate;
use flair_core::trainer::{ModelParams, Variant};
use flair_lab::report::{checkpoint_name, run_dir, write_manifest};
use flair_lab::{emit_reports, run_baseline_erm, run_experiment, sweep, ExperimentConfig, HeldOut, LabError, RunResult, SweepParam, SweepRow};

#[derive(Parser)]
#[command(name = "flair-lab", version, about = "Fair domain generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` experiment file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Held-out domain id or `all`.
    #[arg(long, global = true)]
    heldout: Option<String>,
    /// full, no_g, no_T, no_Rfair or fixed_duals.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Sweep parameter: lambda2, K or variant.
    #[arg(long, global = true)]
    param: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the six-domain benchmark for each seed as CSV.
    Gen,
    /// Leave-one-domain-out training and evaluation.
    Train,
    /// Re-evaluate checkpoints written by `train`.
    Eval,
    /// One run per value of a hyperparameter, plus the ERM baseline.
    Sweep,
    /// The ERM baseline alone.
    Baseline,
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, PathBuf), LabError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(h) = &cli.heldout {
        cfg.heldout = HeldOut::parse(h)?;
    }
    if let Some(v) = &cli.variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    if let Some(p) = &cli.param {
        cfg.sweep_param = SweepParam::parse(p)?;
        cfg.sweep_values = None;
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| LabError::Config("no output directory: pass --out or set out_dir".into()))?;
    Ok((cfg, out))
}

fn report_failures(run: &RunResult) {
    for c in run.failures() {
        eprintln!(
            "{}: held-out {} seed {} failed: {}",
            run.method,
            c.heldout,
            c.seed,
            c.outcome.as_ref().err().map_or("", |e| e.as_str())
        );
    }
}

fn summarize(rows: &[SweepRow]) -> Result<(), LabError> {
    for row in rows {
        report_failures(&row.result);
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "{}={}: accuracy {} delta_dp {}",
            row.param,
            row.value,
            show(row.result.mean_accuracy()),
            show(row.result.mean_delta_dp())
        );
    }
    if rows.iter().all(|r| r.result.all_failed()) {
        return Err(LabError::Runtime("every cell failed".into()));
    }
    Ok(())
}

fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<(), LabError> {
    for &seed in &cfg.seeds {
        let ds = make_benchmark_with(&cfg.generator, seed)?;
        let path = out.join(format!("benchmark_s{seed}.csv"));
        fs::create_dir_all(out).map_err(|e| LabError::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
        ds.write_csv(&path)?;
        println!("wrote {}", path.display());
    }
    write_manifest(out)?;
    Ok(())
}

fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<(), LabError> {
    let dir = out.join(run_dir("variant", cfg.variant.name()));
    for &seed in &cfg.seeds {
        let data = make_benchmark_with(&cfg.generator, seed)?;
        for heldout in cfg.heldout.domains() {
            let path = dir.join(checkpoint_name(heldout, seed));
            let file = fs::File::open(&path).map_err(|e| LabError::Io {
                path: path.clone(),
                source: e,
            })?;
            let model = ModelParams::read_checkpoint(std::io::BufReader::new(file))?;
            let ds = data.leave_one_out(heldout)?;
            let (report, _) = evaluate(&model, &ds, Split::Test, cfg.metric_k, cfg.auc_ties)?;
            let target = dir.join(format!("eval_h{heldout}_s{seed}.json"));
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            fs::write(&target, text).map_err(|e| LabError::Io {
                path: target.clone(),
                source: e,
            })?;
            let d = &report.domains[&heldout.to_string()];
            println!(
                "held-out {heldout} seed {seed}: accuracy {:?} delta_dp {:?}",
                d.accuracy, d.delta_dp
            );
        }
    }
    write_manifest(out)?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), LabError> {
    let (cfg, out) = load(cli)?;
    match cli.command {
        Command::Gen => gen(&cfg, &out),
        Command::Eval => eval(&cfg, &out),
        Command::Train => {
            let rows = vec![SweepRow {
                param: "variant".into(),
                value: cfg.variant.name().into(),
                result: run_experiment(&cfg)?,
            }];
            emit_reports(&rows, &out)?;
            summarize(&rows)
        }
        Command::Baseline => {
            let rows = vec![SweepRow {
                param: "baseline".into(),
                value: "erm".into(),
                result: run_baseline_erm(&cfg)?,
            }];
            emit_reports(&rows, &out)?;
            summarize(&rows)
        }
        Command::Sweep => {
            let values = cfg.sweep_values.clone().unwrap_or_else(|| cfg.sweep_param.default_values());
            let mut rows = sweep(&cfg, cfg.sweep_param, &values)?;
            rows.push(SweepRow {
                param: "baseline".into(),
                value: "erm".into(),
                result: run_baseline_erm(&cfg)?,
            });
            emit_reports(&rows, &out)?;
            summarize(&rows)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flair-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
