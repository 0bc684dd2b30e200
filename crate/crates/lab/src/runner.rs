//! Leave-one-domain-out experiments, the ERM baseline and sweeps.

use std::collections::BTreeMap;

use flair_core::datagen::{make_benchmark_with, Dataset, Group, Split};
use flair_core::fairgmm::FairGmmParams;
use flair_core::metrics::{evaluate, MetricsReport};
use flair_core::numkernel::Tensor;
use flair_core::trainer::{train, train_erm, ModelParams, StepRecord};
use serde::Serialize;

use crate::config::{ExperimentConfig, SweepParam};
use crate::LabError;

/// Which model a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Flair,
    Erm,
}

/// Content and fair codes of the evaluated instances.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub split: Split,
    pub domain: u32,
    pub a: Group,
    pub y: u8,
    pub content: Vec<f64>,
    pub fair: Vec<f64>,
}

/// Everything a successful cell produced.
#[derive(Clone, Debug)]
pub struct CellArtifacts {
    pub report: MetricsReport,
    pub history: Vec<StepRecord>,
    pub plateau_at: Option<usize>,
    pub model: Option<ModelParams>,
    pub embeddings: Vec<EmbeddingRow>,
}

impl CellArtifacts {
    pub fn prototypes(&self) -> Option<&FairGmmParams> {
        self.model.as_ref().and_then(|m| m.gmm.as_ref())
    }
}

/// One (held-out domain, seed) cell. Failures are kept as text so the run
/// can go on.
#[derive(Clone, Debug)]
pub struct Cell {
    pub heldout: u32,
    pub seed: u64,
    pub outcome: Result<CellArtifacts, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricSummary {
    pub accuracy: Option<Stat>,
    pub delta_dp: Option<Stat>,
    pub auc_fair: Option<Stat>,
    pub consistency: Option<Stat>,
}

impl MetricSummary {
    /// Summary of `[accuracy, delta_dp, auc_fair, consistency]` samples.
    fn from_samples(samples: &[[Option<f64>; 4]]) -> Self {
        let col = |j: usize| Stat::of(&samples.iter().filter_map(|s| s[j]).collect::<Vec<_>>());
        MetricSummary {
            accuracy: col(0),
            delta_dp: col(1),
            auc_fair: col(2),
            consistency: col(3),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    /// `erm` or the variant name.
    pub method: String,
    /// Every setting of the run, as echoed into its report.
    pub config_echo: serde_json::Value,
    pub cells: Vec<Cell>,
    /// Mean and spread over seeds for each held-out domain.
    pub per_domain: BTreeMap<u32, MetricSummary>,
    /// Mean and spread over seeds of each seed's average across held-out domains.
    pub overall: MetricSummary,
}

impl RunResult {
    fn from_cells(method: String, config_echo: serde_json::Value, cells: Vec<Cell>) -> Self {
        let metrics = |c: &Cell| -> Option<[Option<f64>; 4]> {
            let r = c.outcome.as_ref().ok()?;
            let d = r.report.domains.get(&c.heldout.to_string())?;
            Some([d.accuracy, d.delta_dp, d.auc_fair, d.consistency])
        };
        let mut by_domain: BTreeMap<u32, Vec<[Option<f64>; 4]>> = BTreeMap::new();
        let mut by_seed: BTreeMap<u64, Vec<[Option<f64>; 4]>> = BTreeMap::new();
        for c in &cells {
            if let Some(m) = metrics(c) {
                by_domain.entry(c.heldout).or_default().push(m);
                by_seed.entry(c.seed).or_default().push(m);
            }
        }
        let per_domain = by_domain
            .iter()
            .map(|(d, s)| (*d, MetricSummary::from_samples(s)))
            .collect();
        let seed_means: Vec<[Option<f64>; 4]> = by_seed
            .values()
            .map(|rows| {
                let mut out = [None; 4];
                for (j, o) in out.iter_mut().enumerate() {
                    let v: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
                    *o = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
                }
                out
            })
            .collect();
        RunResult {
            method,
            config_echo,
            cells,
            per_domain,
            overall: MetricSummary::from_samples(&seed_means),
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.outcome.is_err())
    }

    pub fn all_failed(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_err())
    }

    /// Overall mean of a metric, if any cell produced it.
    pub fn mean_accuracy(&self) -> Option<f64> {
        self.overall.accuracy.map(|s| s.mean)
    }

    pub fn mean_delta_dp(&self) -> Option<f64> {
        self.overall.delta_dp.map(|s| s.mean)
    }
}

fn embeddings(model: &ModelParams, ds: &Dataset) -> Result<Vec<EmbeddingRow>, flair_core::Error> {
    let inst = ds.instances_in(Split::Test);
    let rows: Vec<&[f64]> = inst.iter().map(|i| i.x.as_slice()).collect();
    let a: Vec<Group> = inst.iter().map(|i| i.a).collect();
    let (c, ct) = model.embed(&Tensor::from_rows(&rows)?, &a)?;
    // Without mixtures the classifier reads the content code directly.
    let fair = ct.as_ref().unwrap_or(&c);
    Ok(inst
        .iter()
        .enumerate()
        .map(|(r, i)| EmbeddingRow {
            split: Split::Test,
            domain: i.domain,
            a: i.a,
            y: i.y,
            content: c.row(r).to_vec(),
            fair: fair.row(r).to_vec(),
        })
        .collect())
}

fn run_cell(cfg: &ExperimentConfig, method: Method, data: &Dataset, heldout: u32, seed: u64) -> Result<CellArtifacts, flair_core::Error> {
    let ds = data.leave_one_out(heldout)?;
    let tcfg = cfg.trainer_for(seed);
    match method {
        Method::Flair => {
            let out = train(&ds, &tcfg)?;
            let (report, _) = evaluate(&out.model, &ds, Split::Test, cfg.metric_k, cfg.auc_ties)?;
            let embeddings = embeddings(&out.model, &ds)?;
            Ok(CellArtifacts {
                report,
                history: out.history,
                plateau_at: out.plateau_at,
                model: Some(out.model),
                embeddings,
            })
        }
        Method::Erm => {
            let model = train_erm(&ds, &tcfg)?;
            let (report, _) = evaluate(&model, &ds, Split::Test, cfg.metric_k, cfg.auc_ties)?;
            Ok(CellArtifacts {
                report,
                history: Vec::new(),
                plateau_at: None,
                model: None,
                embeddings: Vec::new(),
            })
        }
    }
}

fn run(cfg: &ExperimentConfig, method: Method) -> Result<RunResult, LabError> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        // One dataset per seed, shared by every held-out domain and method.
        let data = make_benchmark_with(&cfg.generator, seed);
        for heldout in cfg.heldout.domains() {
            let outcome = match &data {
                Ok(data) => run_cell(cfg, method, data, heldout, seed),
                Err(e) => Err(flair_core::Error::Generator(e.to_string())),
            };
            cells.push(Cell {
                heldout,
                seed,
                outcome: outcome.map_err(|e| e.to_string()),
            });
        }
    }
    let name = match method {
        Method::Flair => cfg.variant.name().to_string(),
        Method::Erm => "erm".to_string(),
    };
    Ok(RunResult::from_cells(name, cfg.echo(), cells))
}

/// Trains the configured variant on every (held-out domain, seed) cell.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, LabError> {
    run(cfg, Method::Flair)
}

/// Plain classifier on the same cells and datasets.
pub fn run_baseline_erm(cfg: &ExperimentConfig) -> Result<RunResult, LabError> {
    run(cfg, Method::Erm)
}

/// One row of a sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub result: RunResult,
}

/// Runs the experiment once per value of `param`.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[String]) -> Result<Vec<SweepRow>, LabError> {
    let cfgs = values
        .iter()
        .map(|v| cfg.with_sweep_value(param, v))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (v, c) in values.iter().zip(&cfgs) {
        rows.push(SweepRow {
            param: param.name().to_string(),
            value: v.clone(),
            result: run_experiment(c)?,
        });
    }
    Ok(rows)
}
