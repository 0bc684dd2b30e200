//! Experiment configuration read from a flat `key = value` file.
//!
//! Every key is optional and falls back to the library default. Strings are
//! quoted, lists use brackets:
//!
//! ```text
//! # data
//! n_per_domain = 2000
//! sensitive_offset = 0.5
//! # training
//! lr = 3e-3
//! variant = "full"
//! # protocol
//! heldout = "all"
//! seeds = [1, 2, 3, 4, 5]
//! ```
//!
//! Generator keys: `dim`, `n_per_domain`, `noise_sigma`, `plane_radius`,
//! `off_plane_separation`, `base_scale`, `sensitive_offset`.
//!
//! Trainer keys: `lr`, `eta2`, `eta3`, `eps1`, `eps2`, `lambda1_init`,
//! `lambda2_init`, `k`, `q`, `max_steps`, `em_max_iter`, `em_tol`,
//! `warm_start`, `stratify_labels`, `transfer_target` (`source`|`target`),
//! `gmm_weight`, `plateau_window`, `plateau_tol`, `content_dim`,
//! `style_dim`, `hidden`, `classifier_hidden`, `variant`.
//!
//! Protocol keys: `heldout` (domain id or `"all"`), `seeds`, `metric_k`,
//! `auc_ties` (`strict`|`half`), `out_dir`, `sweep_param`
//! (`lambda2`|`K`|`variant`), `sweep_values`.

use std::fmt;
use std::path::{Path, PathBuf};

use flair_core::datagen::{GeneratorConfig, BENCHMARK_ANGLES};
use flair_core::metrics::TieRule;
use flair_core::trainer::{TrainerConfig, TransferTarget, Variant};
use serde::Serialize;
use toml::{Table, Value};

use crate::LabError;

/// Which domains are held out in turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeldOut {
    One(u32),
    All,
}

impl Serialize for HeldOut {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            HeldOut::One(d) => s.serialize_u32(*d),
            HeldOut::All => s.serialize_str("all"),
        }
    }
}

impl HeldOut {
    pub fn domains(self) -> Vec<u32> {
        match self {
            HeldOut::One(d) => vec![d],
            HeldOut::All => (0..BENCHMARK_ANGLES.len() as u32).collect(),
        }
    }

    pub fn parse(s: &str) -> Result<HeldOut, LabError> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(HeldOut::All);
        }
        s.parse()
            .map(HeldOut::One)
            .map_err(|_| LabError::Config(format!("heldout must be a domain id or \"all\", got `{s}`")))
    }
}

impl fmt::Display for HeldOut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeldOut::One(d) => write!(f, "{d}"),
            HeldOut::All => f.write_str("all"),
        }
    }
}

/// Hyperparameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SweepParam {
    #[serde(rename = "lambda2")]
    Lambda2,
    K,
    #[serde(rename = "variant")]
    Variant,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<SweepParam, LabError> {
        match s {
            "lambda2" => Ok(SweepParam::Lambda2),
            "K" | "k" => Ok(SweepParam::K),
            "variant" => Ok(SweepParam::Variant),
            _ => Err(LabError::Config(format!("sweep parameter must be lambda2, K or variant, got `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda2 => "lambda2",
            SweepParam::K => "K",
            SweepParam::Variant => "variant",
        }
    }

    /// The default grid for each parameter.
    pub fn default_values(self) -> Vec<String> {
        match self {
            SweepParam::Lambda2 => ["0.05", "0.1", "0.5", "1", "2", "5"].map(String::from).to_vec(),
            SweepParam::K => (2..=6).map(|k| k.to_string()).collect(),
            SweepParam::Variant => Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub trainer: TrainerConfig,
    pub variant: Variant,
    pub heldout: HeldOut,
    pub seeds: Vec<u64>,
    pub metric_k: usize,
    pub auc_ties: TieRule,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    pub sweep_param: SweepParam,
    pub sweep_values: Option<Vec<String>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            trainer: TrainerConfig::default(),
            variant: Variant::Full,
            heldout: HeldOut::All,
            seeds: vec![1],
            metric_k: 5,
            auc_ties: TieRule::Strict,
            out_dir: None,
            sweep_param: SweepParam::Variant,
            sweep_values: None,
        }
    }
}

fn bad(key: &str, want: &str, got: &Value) -> LabError {
    LabError::Config(format!("`{key}` must be {want}, got {got}"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64, LabError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "a number", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize, LabError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(bad(key, "a non-negative integer", v)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool, LabError> {
    v.as_bool().ok_or_else(|| bad(key, "true or false", v))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, LabError> {
    v.as_str().ok_or_else(|| bad(key, "a quoted string", v))
}

fn scalar_text(key: &str, v: &Value) -> Result<String, LabError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(f.to_string()),
        _ => Err(bad(key, "a string or number", v)),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, LabError> {
        let table: Table = text.parse().map_err(|e| LabError::Config(format!("{e}")))?;
        let mut cfg = ExperimentConfig::default();
        for (key, v) in &table {
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<(), LabError> {
        let g = &mut self.generator;
        let t = &mut self.trainer;
        match key {
            "dim" => g.dim = as_usize(key, v)?,
            "n_per_domain" => g.n_per_domain = as_usize(key, v)?,
            "noise_sigma" => g.noise_sigma = as_f64(key, v)?,
            "plane_radius" => g.plane_radius = as_f64(key, v)?,
            "off_plane_separation" => g.off_plane_separation = as_f64(key, v)?,
            "base_scale" => g.base_scale = as_f64(key, v)?,
            "sensitive_offset" => g.sensitive_offset = as_f64(key, v)?,
            "lr" => t.lr = as_f64(key, v)?,
            "eta2" => t.eta2 = as_f64(key, v)?,
            "eta3" => t.eta3 = as_f64(key, v)?,
            "eps1" => t.eps1 = as_f64(key, v)?,
            "eps2" => t.eps2 = as_f64(key, v)?,
            "lambda1_init" => t.lambda1_init = as_f64(key, v)?,
            "lambda2_init" => t.lambda2_init = as_f64(key, v)?,
            "k" | "K" => t.k = as_usize(key, v)?,
            "q" | "Q" => t.q = as_usize(key, v)?,
            "max_steps" => t.max_steps = as_usize(key, v)?,
            "em_max_iter" => t.em_max_iter = as_usize(key, v)?,
            "em_tol" => t.em_tol = as_f64(key, v)?,
            "warm_start" => t.warm_start = as_bool(key, v)?,
            "stratify_labels" => t.stratify_labels = as_bool(key, v)?,
            "transfer_target" => t.transfer_target = as_str(key, v)?.parse::<TransferTarget>()?,
            "gmm_weight" => t.gmm_weight = as_f64(key, v)?,
            "plateau_window" => t.plateau_window = as_usize(key, v)?,
            "plateau_tol" => t.plateau_tol = as_f64(key, v)?,
            "content_dim" => t.content_dim = as_usize(key, v)?,
            "style_dim" => t.style_dim = as_usize(key, v)?,
            "hidden" => t.hidden = as_usize(key, v)?,
            "classifier_hidden" => t.classifier_hidden = as_usize(key, v)?,
            "variant" => self.variant = as_str(key, v)?.parse()?,
            "heldout" => {
                self.heldout = match v {
                    Value::Integer(i) if *i >= 0 => HeldOut::One(*i as u32),
                    Value::String(s) => HeldOut::parse(s)?,
                    _ => return Err(bad(key, "a domain id or \"all\"", v)),
                }
            }
            "seeds" => {
                let arr = v.as_array().ok_or_else(|| bad(key, "a list of integers", v))?;
                self.seeds = arr
                    .iter()
                    .map(|s| match s {
                        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
                        _ => Err(bad(key, "a list of non-negative integers", v)),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "metric_k" => self.metric_k = as_usize(key, v)?,
            "auc_ties" => {
                self.auc_ties = match as_str(key, v)? {
                    "strict" => TieRule::Strict,
                    "half" => TieRule::Half,
                    other => return Err(LabError::Config(format!("auc_ties must be strict or half, got `{other}`"))),
                }
            }
            "out_dir" => self.out_dir = Some(PathBuf::from(as_str(key, v)?)),
            "sweep_param" => self.sweep_param = SweepParam::parse(as_str(key, v)?)?,
            "sweep_values" => {
                let arr = v.as_array().ok_or_else(|| bad(key, "a list", v))?;
                self.sweep_values = Some(arr.iter().map(|x| scalar_text(key, x)).collect::<Result<_, _>>()?);
            }
            _ => return Err(LabError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Trainer settings for one cell: the configured variant and the cell seed.
    pub fn trainer_for(&self, seed: u64) -> TrainerConfig {
        TrainerConfig {
            seed,
            ablation: self.variant.ablation(),
            ..self.trainer.clone()
        }
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.trainer.validate()?;
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must not be empty".into()));
        }
        if let HeldOut::One(d) = self.heldout {
            if d as usize >= BENCHMARK_ANGLES.len() {
                return Err(LabError::Config(format!(
                    "held-out domain {d} does not exist (ids 0..{})",
                    BENCHMARK_ANGLES.len() - 1
                )));
            }
        }
        let g = &self.generator;
        if g.dim < 3 || g.n_per_domain < 2 || g.n_per_domain % 2 != 0 {
            return Err(LabError::Config(format!(
                "need dim >= 3 and an even n_per_domain >= 2, got dim={} n_per_domain={}",
                g.dim, g.n_per_domain
            )));
        }
        let reals = [
            ("noise_sigma", g.noise_sigma),
            ("plane_radius", g.plane_radius),
            ("off_plane_separation", g.off_plane_separation),
            ("base_scale", g.base_scale),
            ("sensitive_offset", g.sensitive_offset),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LabError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.metric_k == 0 {
            return Err(LabError::Config("metric_k must be positive".into()));
        }
        if let Some(values) = &self.sweep_values {
            for v in values {
                self.with_sweep_value(self.sweep_param, v)?;
            }
        }
        Ok(())
    }

    /// A copy with one sweep parameter replaced.
    pub fn with_sweep_value(&self, param: SweepParam, value: &str) -> Result<ExperimentConfig, LabError> {
        let mut out = self.clone();
        match param {
            SweepParam::Lambda2 => {
                out.trainer.lambda2_init = value
                    .parse()
                    .map_err(|_| LabError::Config(format!("lambda2 value `{value}` is not a number")))?
            }
            SweepParam::K => {
                out.trainer.k = value
                    .parse()
                    .map_err(|_| LabError::Config(format!("K value `{value}` is not an integer")))?
            }
            SweepParam::Variant => out.variant = value.parse()?,
        }
        out.trainer.validate()?;
        Ok(out)
    }

    /// Flat listing of every setting, echoed into reports.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn keys_land_in_the_right_blocks() {
        let cfg = ExperimentConfig::parse(
            "n_per_domain = 100\nlr = 0.01\nK = 4\nheldout = 2\nseeds = [3, 4]\nvariant = \"no_T\"\nauc_ties = \"half\"\n",
        )
        .unwrap();
        assert_eq!(cfg.generator.n_per_domain, 100);
        assert_eq!(cfg.trainer.lr, 0.01);
        assert_eq!(cfg.trainer.k, 4);
        assert_eq!(cfg.heldout, HeldOut::One(2));
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.variant, Variant::NoT);
        assert_eq!(cfg.auc_ties, TieRule::Half);
        assert!(cfg.trainer_for(9).ablation.no_t);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "seeds = []",
            "heldout = 6",
            "k = 1",
            "lr = \"fast\"",
            "[section]\nlr = 1",
            "variant = \"no_x\"",
            "sweep_param = \"lambda2\"\nsweep_values = [\"x\"]",
        ] {
            let err = ExperimentConfig::parse(text).expect_err(text);
            assert_eq!(err.exit_code(), 1, "{text}: {err}");
        }
    }

    #[test]
    fn sweep_grids() {
        assert_eq!(SweepParam::Lambda2.default_values().len(), 6);
        assert_eq!(SweepParam::K.default_values(), vec!["2", "3", "4", "5", "6"]);
        assert_eq!(SweepParam::Variant.default_values().len(), 5);
    }
}
