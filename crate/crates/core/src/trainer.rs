//! Primal-dual training: per batch, refit the fair mixtures on the encoded
//! contents, take one Adam step on `R_cls + λ₁ R_inv + λ₂ R̂_fair`, then move
//! the multipliers by projected ascent.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_tensors, write_tensors};
use crate::datagen::{fmt_f64, Dataset, Group, Instance, QuartetBatch, QuartetSampler, Split};
use crate::disentangle::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::fairgmm::{
    fair_em, fair_loss_approx, fair_loss_exact, group_graph, reconstruct, weight_denominator, EmConfig, FairGmmParams,
    Mixture, VAR_FLOOR,
};
use crate::metrics::{Prediction, Predictor};
use crate::numkernel::{sigmoid, Activation, AdamConfig, AdamState, Dense, Mlp, Tape, Tensor, Var};
use crate::rng::stream;

/// Switches that remove parts of the method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Classify raw content codes; no mixtures, no fairness term.
    pub no_g: bool,
    /// No style encoder or decoder; drops `R_inv` and the transfer terms.
    pub no_t: bool,
    /// `λ₂ = 0` in the mixture update and no fairness term in the objective.
    pub no_rfair: bool,
    /// Multipliers stay at their initial values.
    pub fixed_duals: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoG,
    NoT,
    NoRfair,
    FixedDuals,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoG, Variant::NoT, Variant::NoRfair, Variant::FixedDuals];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoG => "no_g",
            Variant::NoT => "no_T",
            Variant::NoRfair => "no_Rfair",
            Variant::FixedDuals => "fixed_duals",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoG => a.no_g = true,
            Variant::NoT => a.no_t = true,
            Variant::NoRfair => a.no_rfair = true,
            Variant::FixedDuals => a.fixed_duals = true,
        }
        a
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which instance the transferred sample `T(R_i, R_j)` is compared with in
/// the classification loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferTarget {
    /// `d[R_i, T(R_i, R_j)]`
    Source,
    /// `d[R_j, T(R_i, R_j)]`
    Target,
}

impl FromStr for TransferTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(TransferTarget::Source),
            "target" => Ok(TransferTarget::Target),
            _ => Err(Error::Config(format!("unknown transfer target `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Adam learning rate η₁.
    pub lr: f64,
    /// Dual step for λ₁.
    pub eta2: f64,
    /// Dual step for λ₂.
    pub eta3: f64,
    /// Margin on `R_inv`.
    pub eps1: f64,
    /// Margin on `R̂_fair`.
    pub eps2: f64,
    pub lambda1_init: f64,
    pub lambda2_init: f64,
    /// Prototypes per group.
    pub k: usize,
    /// Quartets per batch.
    pub q: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub em_max_iter: usize,
    pub em_tol: f64,
    /// Start each step's EM from the previous step's mixtures.
    pub warm_start: bool,
    /// Balance the quartet labels within each batch.
    pub stratify_labels: bool,
    pub transfer_target: TransferTarget,
    /// Coefficient of the mixture negative log-likelihood inside the
    /// classification loss.
    pub gmm_weight: f64,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub content_dim: usize,
    pub style_dim: usize,
    pub hidden: usize,
    pub classifier_hidden: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            eta2: 0.01,
            eta3: 0.01,
            eps1: 0.05,
            eps2: 0.05,
            lambda1_init: 1.0,
            lambda2_init: 0.5,
            k: 3,
            q: 64,
            max_steps: 2000,
            seed: 0,
            ablation: Ablation::default(),
            em_max_iter: 30,
            em_tol: 1e-5,
            warm_start: true,
            stratify_labels: true,
            transfer_target: TransferTarget::Source,
            gmm_weight: 1.0,
            plateau_window: 20,
            plateau_tol: 1e-4,
            content_dim: 8,
            style_dim: 4,
            hidden: 32,
            classifier_hidden: 16,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("eta2", self.eta2), ("eta3", self.eta3)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("lambda1_init", self.lambda1_init),
            ("lambda2_init", self.lambda2_init),
            ("em_tol", self.em_tol),
            ("plateau_tol", self.plateau_tol),
            ("gmm_weight", self.gmm_weight),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.k < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {}", self.k)));
        }
        let counts = [
            ("q", self.q),
            ("max_steps", self.max_steps),
            ("em_max_iter", self.em_max_iter),
            ("content_dim", self.content_dim),
            ("style_dim", self.style_dim),
            ("hidden", self.hidden),
            ("classifier_hidden", self.classifier_hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl DualState {
    pub fn new(cfg: &TrainerConfig) -> Self {
        Self {
            lambda1: cfg.lambda1_init,
            lambda2: if cfg.ablation.no_rfair || cfg.ablation.no_g { 0.0 } else { cfg.lambda2_init },
        }
    }

    /// Projected ascent; a `None` residual leaves its multiplier alone.
    pub fn update(&mut self, r_inv: Option<f64>, rfair_hat: Option<f64>, cfg: &TrainerConfig) {
        if cfg.ablation.fixed_duals {
            return;
        }
        if let Some(r) = r_inv {
            self.lambda1 = (self.lambda1 + cfg.eta2 * (r - cfg.eps1)).max(0.0);
        }
        if let Some(r) = rfair_hat {
            self.lambda2 = (self.lambda2 + cfg.eta3 * (r - cfg.eps2)).max(0.0);
        }
    }
}

/// All trainable state of the predictor and transformation model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// `c~ -> (z0, z1)`
    pub classifier: Mlp,
    /// Latest mixture fit; `None` when the model classifies raw contents.
    pub gmm: Option<FairGmmParams>,
}

impl ModelParams {
    pub fn new(input_dim: usize, cfg: &TrainerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, 0x1417));
        let dims = EncoderDims {
            input: input_dim,
            content: cfg.content_dim,
            style: cfg.style_dim,
            hidden: cfg.hidden,
        };
        let encoder = EncoderParams::new(dims, &mut rng);
        let classifier = Mlp::new(&[cfg.content_dim, cfg.classifier_hidden, 2], Activation::Tanh, &mut rng);
        Self {
            encoder,
            classifier,
            gmm: None,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.classifier.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.classifier.params_mut());
        p
    }

    /// Content codes and, when mixtures are present, fair codes.
    pub fn embed(&self, x: &Tensor, a: &[Group]) -> Result<(Tensor, Option<Tensor>)> {
        let c = self.encoder.encode_content(x)?;
        let Some(gmm) = &self.gmm else {
            return Ok((c, None));
        };
        if a.len() != c.rows() {
            return Err(Error::Shape {
                op: "embed",
                lhs: c.shape().to_vec(),
                rhs: vec![a.len()],
            });
        }
        let mut ct = c.clone();
        for g in Group::ALL {
            let idx: Vec<usize> = (0..a.len()).filter(|&i| a[i] == g).collect();
            if idx.is_empty() {
                continue;
            }
            let (rec, _) = reconstruct(&c.select_rows(&idx), gmm.group(g))?;
            for (r, &i) in idx.iter().enumerate() {
                ct.row_mut(i).copy_from_slice(rec.row(r));
            }
        }
        Ok((c, Some(ct)))
    }

    /// `sigmoid(z1 - z0)` of the classifier on the fair code of each row.
    /// The group of each row selects the mixture used for its fair code.
    pub fn predict(&self, x: &Tensor, a: &[Group]) -> Result<Vec<Prediction>> {
        let (c, ct) = self.embed(x, a)?;
        let logits = self.classifier.apply(ct.as_ref().unwrap_or(&c))?;
        Ok((0..logits.rows())
            .map(|i| {
                let z = logits.row(i);
                let score = sigmoid(z[1] - z[0]);
                Prediction {
                    y_hat: u8::from(score > 0.5),
                    score,
                }
            })
            .collect())
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for (prefix, mlp) in [
            ("content", &self.encoder.content),
            ("style", &self.encoder.style),
            ("decoder", &self.encoder.decoder),
            ("classifier", &self.classifier),
        ] {
            for (i, layer) in mlp.layers.iter().enumerate() {
                named.push((format!("{prefix}.{i}.weight"), &layer.weight));
                named.push((format!("{prefix}.{i}.bias"), &layer.bias));
            }
        }
        let weights: Vec<Tensor>;
        if let Some(g) = &self.gmm {
            weights = g.groups.iter().map(|m| Tensor::vector(&m.weights)).collect();
            for (gi, name) in ["minus", "plus"].into_iter().enumerate() {
                named.push((format!("gmm.{name}.means"), &g.groups[gi].means));
                named.push((format!("gmm.{name}.vars"), &g.groups[gi].vars));
                named.push((format!("gmm.{name}.weights"), &weights[gi]));
            }
        }
        write_tensors(w, &named)
    }

    /// Inverse of [`write_checkpoint`](Self::write_checkpoint); hidden
    /// activations are tanh.
    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let tensors = read_tensors(r)?;
        let take_mlp = |prefix: &str| -> Result<Mlp> {
            let mut layers = Vec::new();
            loop {
                let i = layers.len();
                let find = |suffix: &str| {
                    let key = format!("{prefix}.{i}.{suffix}");
                    tensors.iter().find(|(n, _)| *n == key).map(|(_, t)| t.clone())
                };
                match (find("weight"), find("bias")) {
                    (Some(weight), Some(bias)) => layers.push(Dense { weight, bias }),
                    _ => break,
                }
            }
            if layers.is_empty() {
                return Err(Error::Config(format!("checkpoint lacks `{prefix}` layers")));
            }
            Ok(Mlp {
                layers,
                activation: Activation::Tanh,
            })
        };
        let encoder = EncoderParams {
            content: take_mlp("content")?,
            style: take_mlp("style")?,
            decoder: take_mlp("decoder")?,
        };
        encoder.validate()?;
        let classifier = take_mlp("classifier")?;
        let get = |key: &str| tensors.iter().find(|(n, _)| n == key).map(|(_, t)| t.clone());
        let gmm = match get("gmm.minus.means") {
            None => None,
            Some(_) => {
                let mix = |name: &str| -> Result<Mixture> {
                    let field = |f: &str| {
                        get(&format!("gmm.{name}.{f}"))
                            .ok_or_else(|| Error::Config(format!("checkpoint lacks gmm.{name}.{f}")))
                    };
                    Ok(Mixture {
                        means: field("means")?,
                        vars: field("vars")?,
                        weights: field("weights")?.into_data(),
                    })
                };
                let p = FairGmmParams {
                    groups: [mix("minus")?, mix("plus")?],
                };
                p.validate()?;
                Some(p)
            }
        };
        Ok(Self {
            encoder,
            classifier,
            gmm,
        })
    }
}

impl Predictor for ModelParams {
    fn predict(&self, x: &Tensor, a: &[Group]) -> Result<Vec<Prediction>> {
        ModelParams::predict(self, x, a)
    }
}

/// Per-group parts of the classification loss; absent parts are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClsComponents {
    /// Mean L1 distance of the transferred sample to its reference.
    pub transfer: f64,
    /// Mean `-ln p(c)` plus `sum_k pi_k`.
    pub gmm: f64,
    /// Mean `|c - c~|_2`.
    pub rec: f64,
    pub ce: f64,
}

/// Value and gradient of the primal objective at fixed mixtures.
#[derive(Clone, Debug)]
pub struct Objective {
    pub r_cls: f64,
    pub r_inv: Option<f64>,
    /// Differentiable estimate of `sum_k |pi^{-1}_k - pi^{+1}_k|` built from
    /// the batch responsibilities.
    pub rfair_surrogate: Option<f64>,
    pub total: f64,
    /// Indexed by [`Group::index`].
    pub components: [ClsComponents; 2],
    /// In the order of [`ModelParams::params`].
    pub grads: Vec<Tensor>,
}

/// Row layout of a stacked quartet batch: row `r*Q + q` holds role `r` of
/// quartet `q`; each row is paired with the same-label row of the other
/// domain.
fn pairing(batch: &QuartetBatch) -> (Vec<[Vec<usize>; 2]>, Vec<usize>) {
    let q = batch.len();
    let mut rows: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    let mut partners: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for r in 0..4 {
        for (i, quartet) in batch.quartets.iter().enumerate() {
            let g = quartet.members[r].a.index();
            rows[g].push(r * q + i);
            partners[g].push(((r + 2) % 4) * q + i);
        }
    }
    let labels: Vec<usize> = (0..4)
        .flat_map(|r| batch.quartets.iter().map(move |qt| qt.members[r].y as usize))
        .collect();
    (vec![rows, partners], labels)
}

/// Evaluates `R_cls + λ₁ R_inv + λ₂ R̂_fair` and its gradient. Mixture
/// parameters come from `model.gmm` and are constants here.
pub fn primal_objective(model: &ModelParams, batch: &QuartetBatch, duals: &DualState, cfg: &TrainerConfig) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Config("empty quartet batch".into()));
    }
    let ab = cfg.ablation;
    let gmm = if ab.no_g {
        None
    } else {
        Some(
            model
                .gmm
                .as_ref()
                .ok_or_else(|| Error::Config("mixtures must be fitted before the primal step".into()))?,
        )
    };

    let tape = Tape::new();
    let enc = model.encoder.bind(&tape);
    let cls = model.classifier.bind(&tape);
    let x = tape.leaf(batch.stacked());
    let c = enc.content.forward(x)?;
    let s = if ab.no_t { None } else { Some(enc.style.forward(x)?) };
    let q = batch.len();
    let role = |r: usize| -> Vec<usize> { (r * q..(r + 1) * q).collect() };

    let r_inv = match s {
        Some(s) => {
            let t12 = enc.decode(c.select_rows(&role(0))?, s.select_rows(&role(1))?)?;
            let t34 = enc.decode(c.select_rows(&role(2))?, s.select_rows(&role(3))?)?;
            let d1 = x.select_rows(&role(0))?.l1_rows(t12)?;
            let d3 = x.select_rows(&role(2))?.l1_rows(t34)?;
            Some(d1.add(d3)?.mean())
        }
        None => None,
    };

    let (layout, labels) = pairing(batch);
    let (rows, partners) = (&layout[0], &layout[1]);
    let nan = ClsComponents {
        transfer: f64::NAN,
        gmm: f64::NAN,
        rec: f64::NAN,
        ce: f64::NAN,
    };
    let mut components = [nan, nan];
    let mut r_cls: Option<Var> = None;
    let mut resp_means: [Option<Var>; 2] = [None, None];
    for g in Group::ALL {
        let gi = g.index();
        let idx = &rows[gi];
        if idx.is_empty() {
            continue;
        }
        let cg = c.select_rows(idx)?;
        let mut terms: Vec<Var> = Vec::new();
        if let Some(s) = s {
            let moved = enc.decode(cg, s.select_rows(&partners[gi])?)?;
            let reference = match cfg.transfer_target {
                TransferTarget::Source => idx,
                TransferTarget::Target => &partners[gi],
            };
            let d = x.select_rows(reference)?.l1_rows(moved)?.mean();
            components[gi].transfer = d.item();
            terms.push(d);
        }
        let features = match gmm {
            Some(gmm) => {
                let mix = gmm.group(g);
                let gg = group_graph(cg, mix)?;
                let l_gmm = gg.nll.mean().add_scalar(mix.weight_sum());
                let l_rec = gg.rec.mean();
                components[gi].gmm = l_gmm.item();
                components[gi].rec = l_rec.item();
                if cfg.gmm_weight != 0.0 {
                    terms.push(l_gmm.scale(cfg.gmm_weight));
                }
                terms.push(l_rec);
                if !ab.no_rfair {
                    let other = gmm.group(g.other());
                    let inv_den: Vec<f64> = (0..mix.k())
                        .map(|k| 1.0 / weight_denominator(idx.len(), duals.lambda2, mix.weights[k] >= other.weights[k]))
                        .collect();
                    resp_means[gi] = Some(gg.gamma.sum_cols().mul_row(tape.leaf(Tensor::row_vector(&inv_den)))?);
                }
                gg.ctilde
            }
            None => cg,
        };
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let ce = cls.forward(features)?.cross_entropy(&y)?;
        components[gi].ce = ce.item();
        terms.push(ce);
        let mut group_loss = terms[0];
        for t in &terms[1..] {
            group_loss = group_loss.add(*t)?;
        }
        r_cls = Some(match r_cls {
            Some(acc) => acc.add(group_loss)?,
            None => group_loss,
        });
    }
    let r_cls = r_cls.expect("a non-empty batch has at least one group");

    let surrogate = match (&resp_means[0], &resp_means[1]) {
        (Some(m), Some(p)) => Some(m.sub(*p)?.abs().sum()),
        _ => None,
    };
    let mut total = r_cls;
    if let Some(r) = r_inv {
        total = total.add(r.scale(duals.lambda1))?;
    }
    if let Some(f) = surrogate {
        total = total.add(f.scale(duals.lambda2))?;
    }

    let g = tape.backward(total)?;
    let mut grads = enc.grads(&g);
    grads.extend(cls.grads(&g));
    Ok(Objective {
        r_cls: r_cls.item(),
        r_inv: r_inv.map(|v| v.item()),
        rfair_surrogate: surrogate.map(|v| v.item()),
        total: total.item(),
        components,
        grads,
    })
}

/// One row of the training history; inapplicable values are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub r_cls: f64,
    pub r_inv: f64,
    pub rfair_hat: f64,
    pub rfair_exact: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sum_pi_a1: f64,
    pub sum_pi_am1: f64,
    pub em_iterations: usize,
    pub relaxed: usize,
}

pub const HISTORY_HEADER: &str = "step,R_cls,R_inv,Rfair_hat,Rfair_exact,lambda1,lambda2,sum_pi_a1,sum_pi_am1";

pub fn write_history<W: Write>(w: &mut W, history: &[StepRecord]) -> Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in history {
        let vals = [
            r.r_cls,
            r.r_inv,
            r.rfair_hat,
            r.rfair_exact,
            r.lambda1,
            r.lambda2,
            r.sum_pi_a1,
            r.sum_pi_am1,
        ];
        let vals: Vec<String> = vals.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(w, "{},{}", r.step, vals.join(","))?;
    }
    Ok(())
}

/// Encoded batch contents split by sensitive group.
fn grouped_contents(model: &ModelParams, batch: &QuartetBatch) -> Result<[Tensor; 2]> {
    let c = model.encoder.encode_content(&batch.stacked())?;
    let q = batch.len();
    let mut idx: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for r in 0..4 {
        for (i, quartet) in batch.quartets.iter().enumerate() {
            idx[quartet.members[r].a.index()].push(r * q + i);
        }
    }
    for g in Group::ALL {
        if idx[g.index()].is_empty() {
            return Err(Error::EmptyGroup(g));
        }
    }
    Ok([c.select_rows(&idx[0]), c.select_rows(&idx[1])])
}

/// Refits the mixtures on the batch and returns `(R̂_fair, R_fair, iterations)`.
pub fn refresh_mixtures(model: &mut ModelParams, batch: &QuartetBatch, duals: &DualState, cfg: &TrainerConfig, step: usize) -> Result<(f64, f64, usize)> {
    let contents = grouped_contents(model, batch)?;
    let em_cfg = EmConfig {
        k: cfg.k,
        lambda2: if cfg.ablation.no_rfair { 0.0 } else { duals.lambda2 },
        tol: cfg.em_tol,
        max_iter: cfg.em_max_iter,
        var_floor: VAR_FLOOR,
    };
    let init = if cfg.warm_start { model.gmm.as_ref() } else { None };
    let out = fair_em(
        [&contents[0], &contents[1]],
        &em_cfg,
        init,
        stream(cfg.seed, 0x3e00_0000 + step as u64),
    )?;
    let approx = fair_loss_approx(&out.params);
    let exact = fair_loss_exact([&contents[0], &contents[1]], &out.params)?;
    model.gmm = Some(out.params);
    Ok((approx, exact, out.iterations))
}

/// One outer iteration: mixture refresh, primal Adam step, dual step.
/// Nothing is modified when the loss or gradient is not finite.
pub fn train_step(
    model: &mut ModelParams,
    duals: &mut DualState,
    adam: &mut AdamState,
    batch: &QuartetBatch,
    cfg: &TrainerConfig,
    step: usize,
) -> Result<StepRecord> {
    let abort = |what: String| Error::NonFiniteLoss {
        step,
        what,
        last_good: step.saturating_sub(1),
    };
    let previous_gmm = model.gmm.clone();
    let (rfair_hat, rfair_exact, em_iterations) = if cfg.ablation.no_g {
        (f64::NAN, f64::NAN, 0)
    } else {
        match refresh_mixtures(model, batch, duals, cfg, step) {
            Ok(v) => v,
            Err(e) => {
                model.gmm = previous_gmm;
                return Err(e);
            }
        }
    };
    let obj = match primal_objective(model, batch, duals, cfg) {
        Ok(o) if o.total.is_finite() => o,
        Ok(o) => {
            model.gmm = previous_gmm;
            return Err(abort(format!("total loss {}", o.total)));
        }
        Err(e) => {
            model.gmm = previous_gmm;
            return Err(e);
        }
    };
    if let Err(e) = adam.step(&mut model.params_mut(), &obj.grads) {
        model.gmm = previous_gmm;
        return Err(match e {
            Error::NonFiniteGradient { index } => abort(format!("gradient of parameter tensor #{index}")),
            other => other,
        });
    }
    let fair_active = !cfg.ablation.no_g && !cfg.ablation.no_rfair;
    duals.update(obj.r_inv, fair_active.then_some(rfair_hat), cfg);
    let (sum_pi_am1, sum_pi_a1) = match &model.gmm {
        Some(g) if !cfg.ablation.no_g => (g.groups[0].weight_sum(), g.groups[1].weight_sum()),
        _ => (f64::NAN, f64::NAN),
    };
    Ok(StepRecord {
        step,
        r_cls: obj.r_cls,
        r_inv: obj.r_inv.unwrap_or(f64::NAN),
        rfair_hat,
        rfair_exact,
        lambda1: duals.lambda1,
        lambda2: duals.lambda2,
        sum_pi_a1,
        sum_pi_am1,
        em_iterations,
        relaxed: batch.relaxed,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub duals: DualState,
    pub history: Vec<StepRecord>,
    /// Step at which all tracked losses plateaued, if before the budget.
    pub plateau_at: Option<usize>,
}

impl TrainOutcome {
    pub fn relaxed_total(&self) -> usize {
        self.history.iter().map(|r| r.relaxed).sum()
    }
}

fn plateaued(history: &[StepRecord], cfg: &TrainerConfig) -> bool {
    let w = cfg.plateau_window;
    if w == 0 || history.len() <= w {
        return false;
    }
    let now = &history[history.len() - 1];
    let then = &history[history.len() - 1 - w];
    let series = [(now.r_cls, then.r_cls), (now.r_inv, then.r_inv), (now.rfair_hat, then.rfair_hat)];
    series
        .iter()
        .filter(|(a, b)| !a.is_nan() && !b.is_nan())
        .all(|(a, b)| (a - b).abs() <= cfg.plateau_tol * b.abs().max(1e-12))
}

/// Trains on the training split of `dataset`.
pub fn train(dataset: &Dataset, cfg: &TrainerConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = dataset.instances_in(Split::Train);
    let domains = dataset.domain_ids(Split::Train);
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least two training domains, got {}",
            domains.len()
        )));
    }
    let sampler = QuartetSampler::new(&pool)?;
    let dim = pool[0].x.len();
    let mut model = ModelParams::new(dim, cfg);
    let mut duals = DualState::new(cfg);
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, 0x5a3b));
    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut plateau_at = None;
    for step in 0..cfg.max_steps {
        let batch = if cfg.stratify_labels {
            sampler.sample_stratified(cfg.q, &mut rng)
        } else {
            sampler.sample(cfg.q, &mut rng)
        };
        history.push(train_step(&mut model, &mut duals, &mut adam, &batch, cfg, step)?);
        if plateaued(&history, cfg) {
            plateau_at = Some(step);
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        duals,
        history,
        plateau_at,
    })
}

/// Plain classifier on raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct ErmModel {
    pub net: Mlp,
}

impl ErmModel {
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        let logits = self.net.apply(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let score = sigmoid(logits.get(i, 1) - logits.get(i, 0));
                Prediction {
                    y_hat: u8::from(score > 0.5),
                    score,
                }
            })
            .collect())
    }
}

impl Predictor for ErmModel {
    fn predict(&self, x: &Tensor, _a: &[Group]) -> Result<Vec<Prediction>> {
        ErmModel::predict(self, x)
    }
}

/// Cross-entropy training of an MLP on the pooled training split, with the
/// same step budget and learning rate as the main trainer and `4Q`
/// instances per batch. Ablation switches are ignored.
pub fn train_erm(dataset: &Dataset, cfg: &TrainerConfig) -> Result<ErmModel> {
    cfg.validate()?;
    let pool: Vec<&Instance> = dataset.instances_in(Split::Train);
    if pool.is_empty() {
        return Err(Error::Config("no training instances".into()));
    }
    let dim = pool[0].x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, 0xe7a));
    let mut net = Mlp::new(&[dim, cfg.hidden, 2], Activation::Tanh, &mut rng);
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        net.params(),
    );
    let batch_size = 4 * cfg.q;
    for step in 0..cfg.max_steps {
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..pool.len()))
            .collect();
        let rows: Vec<&[f64]> = idx.iter().map(|&i| pool[i].x.as_slice()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| pool[i].y as usize).collect();
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let loss = bound
            .forward(tape.leaf(Tensor::from_rows(&rows)?))?
            .cross_entropy(&labels)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                what: "erm cross-entropy".into(),
                last_good: step.saturating_sub(1),
            });
        }
        let grads = bound.grads(&tape.backward(loss)?);
        adam.step(&mut net.params_mut(), &grads)?;
    }
    Ok(ErmModel { net })
}
