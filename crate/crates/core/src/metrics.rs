//! Accuracy, demographic parity gap, fairness AUC and per-domain kNN
//! consistency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Group, Split};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub y_hat: u8,
    pub score: f64,
}

/// Anything that scores feature rows given their sensitive groups.
pub trait Predictor {
    fn predict(&self, x: &Tensor, a: &[Group]) -> Result<Vec<Prediction>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub x: Vec<f64>,
    pub a: Group,
    pub y: u8,
    pub domain: u32,
    pub y_hat: u8,
    pub score: f64,
}

/// How AUC_fair scores a pair with equal scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Ties count 0.
    #[default]
    Strict,
    /// Ties count 1/2.
    Half,
}

/// Percentage of correct predictions.
pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("accuracy"));
    }
    let hits = records.iter().filter(|r| r.y_hat == r.y).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// `|P(y_hat=1 | a=-1) - P(y_hat=1 | a=1)|`.
pub fn delta_dp(records: &[EvalRecord]) -> Result<f64> {
    let mut pos = [0usize; 2];
    let mut n = [0usize; 2];
    for r in records {
        n[r.a.index()] += 1;
        pos[r.a.index()] += r.y_hat as usize;
    }
    if n.contains(&0) {
        return Err(Error::UndefinedMetric("delta_dp"));
    }
    let rate = |g: usize| pos[g] as f64 / n[g] as f64;
    Ok((rate(0) - rate(1)).abs())
}

/// Fraction of (a=1, a=-1) pairs whose a=1 member scores higher.
pub fn auc_fair(records: &[EvalRecord], ties: TieRule) -> Result<f64> {
    let mut minus: Vec<f64> = records.iter().filter(|r| r.a == Group::Minus).map(|r| r.score).collect();
    let plus: Vec<f64> = records.iter().filter(|r| r.a == Group::Plus).map(|r| r.score).collect();
    if minus.is_empty() || plus.is_empty() {
        return Err(Error::UndefinedMetric("auc_fair"));
    }
    minus.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for s in &plus {
        let below = minus.partition_point(|m| m < s);
        wins += below as f64;
        if ties == TieRule::Half {
            let equal = minus.partition_point(|m| m <= s) - below;
            wins += 0.5 * equal as f64;
        }
    }
    Ok(wins / (plus.len() as f64 * minus.len() as f64))
}

/// `1 - mean_i |y_hat_i - mean of y_hat over the k nearest neighbours of i|`,
/// neighbours taken within the same domain in raw feature space (Euclidean,
/// self excluded, ties broken by lower record index).
pub fn consistency(records: &[EvalRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("consistency"));
    }
    if k == 0 {
        return Err(Error::Config("consistency needs k >= 1".into()));
    }
    let mut by_domain: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_domain.entry(r.domain).or_default().push(i);
    }
    let mut total = 0.0;
    for (&domain, members) in &by_domain {
        if members.len() <= k {
            return Err(Error::DomainTooSmall {
                domain,
                n: members.len(),
                k,
            });
        }
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(members.len() - 1);
        for &i in members {
            cand.clear();
            let xi = &records[i].x;
            for &j in members {
                if j != i {
                    let d2: f64 = xi.iter().zip(&records[j].x).map(|(a, b)| (a - b) * (a - b)).sum();
                    cand.push((d2, j));
                }
            }
            let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, by_key);
            let mean: f64 = cand[..k].iter().map(|&(_, j)| records[j].y_hat as f64).sum::<f64>() / k as f64;
            total += (records[i].y_hat as f64 - mean).abs();
        }
    }
    Ok(1.0 - total / records.len() as f64)
}

/// Metrics of one domain. A metric that is undefined for the domain is
/// `None` (serialized as `null`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub accuracy: Option<f64>,
    pub delta_dp: Option<f64>,
    pub auc_fair: Option<f64>,
    pub consistency: Option<f64>,
    pub n: usize,
    /// Instance counts keyed `a=<a>,y=<y>`.
    pub cells: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageMetrics {
    pub accuracy: Option<f64>,
    pub delta_dp: Option<f64>,
    pub auc_fair: Option<f64>,
    pub consistency: Option<f64>,
}

/// Per-domain metrics keyed by domain id, their unweighted average over
/// domains, and the settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub domains: BTreeMap<String, DomainMetrics>,
    pub avg: AverageMetrics,
    pub config_echo: BTreeMap<String, String>,
}

fn cell_counts(records: &[EvalRecord]) -> BTreeMap<String, usize> {
    let mut cells = BTreeMap::new();
    for a in Group::ALL {
        for y in 0..2u8 {
            let n = records.iter().filter(|r| r.a == a && r.y == y).count();
            cells.insert(format!("a={},y={}", a.sign(), y), n);
        }
    }
    cells
}

fn defined(v: Result<f64>) -> Result<Option<f64>> {
    match v {
        Ok(x) => Ok(Some(x)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn domain_metrics(records: &[EvalRecord], k: usize, ties: TieRule) -> Result<DomainMetrics> {
    Ok(DomainMetrics {
        accuracy: defined(accuracy(records))?,
        delta_dp: defined(delta_dp(records))?,
        auc_fair: defined(auc_fair(records, ties))?,
        consistency: defined(consistency(records, k))?,
        n: records.len(),
        cells: cell_counts(records),
    })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn from_records(records: &[EvalRecord], k: usize, ties: TieRule) -> Result<Self> {
        let mut by_domain: BTreeMap<u32, Vec<EvalRecord>> = BTreeMap::new();
        for r in records {
            by_domain.entry(r.domain).or_default().push(r.clone());
        }
        let mut domains = BTreeMap::new();
        for (id, recs) in &by_domain {
            domains.insert(id.to_string(), domain_metrics(recs, k, ties)?);
        }
        let avg = AverageMetrics {
            accuracy: mean_defined(domains.values().map(|d: &DomainMetrics| d.accuracy)),
            delta_dp: mean_defined(domains.values().map(|d| d.delta_dp)),
            auc_fair: mean_defined(domains.values().map(|d| d.auc_fair)),
            consistency: mean_defined(domains.values().map(|d| d.consistency)),
        };
        let mut config_echo = BTreeMap::new();
        config_echo.insert("consistency_k".into(), k.to_string());
        config_echo.insert(
            "auc_ties".into(),
            match ties {
                TieRule::Strict => "strict",
                TieRule::Half => "half",
            }
            .into(),
        );
        Ok(Self {
            domains,
            avg,
            config_echo,
        })
    }
}

/// Scores every instance of `split` and builds the report.
pub fn evaluate(model: &dyn Predictor, dataset: &Dataset, split: Split, k: usize, ties: TieRule) -> Result<(MetricsReport, Vec<EvalRecord>)> {
    let instances = dataset.instances_in(split);
    if instances.is_empty() {
        return Err(Error::Config("nothing to evaluate: split is empty".into()));
    }
    let rows: Vec<&[f64]> = instances.iter().map(|i| i.x.as_slice()).collect();
    let a: Vec<Group> = instances.iter().map(|i| i.a).collect();
    let preds = model.predict(&Tensor::from_rows(&rows)?, &a)?;
    let records: Vec<EvalRecord> = instances
        .iter()
        .zip(preds)
        .map(|(i, p)| EvalRecord {
            x: i.x.clone(),
            a: i.a,
            y: i.y,
            domain: i.domain,
            y_hat: p.y_hat,
            score: p.score,
        })
        .collect();
    let report = MetricsReport::from_records(&records, k, ties)?;
    Ok((report, records))
}
