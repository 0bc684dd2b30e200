//! Per-group diagonal Gaussian mixtures over content codes, the EM variant
//! whose weight update penalises prototype imbalance between the sensitive
//! groups, and prototype-weighted reconstruction of fair content codes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{fmt_f64, Group};
use crate::error::{Error, Result};
use crate::numkernel::{lse_and_softmax, Tensor, Var};
use crate::rng::stream;

/// Lower bound applied to every covariance diagonal entry.
pub const VAR_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One group's mixture: `means` and `vars` are `K x c`, `weights` has `K`
/// entries that need not sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub means: Tensor,
    pub vars: Tensor,
    pub weights: Vec<f64>,
}

impl Mixture {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.means.shape() != [k, self.dim()] || self.vars.shape() != self.means.shape() {
            return Err(Error::Shape {
                op: "mixture",
                lhs: self.means.shape().to_vec(),
                rhs: self.vars.shape().to_vec(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::DegenerateMixture(format!("invalid weights {:?}", self.weights)));
        }
        if self.weights.iter().all(|w| *w == 0.0) {
            return Err(Error::DegenerateMixture("all mixing weights are zero".into()));
        }
        if self.vars.data().iter().any(|v| !v.is_finite() || *v <= 0.0) || !self.means.is_finite() {
            return Err(Error::DegenerateMixture("non-finite mean or non-positive variance".into()));
        }
        Ok(())
    }

    fn check_contents(&self, contents: &Tensor) -> Result<()> {
        if contents.cols() != self.dim() {
            return Err(Error::Shape {
                op: "mixture_contents",
                lhs: contents.shape().to_vec(),
                rhs: self.means.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `N x K` matrix of `ln pi_k + ln N(c_i | mu_k, Sigma_k)`.
    pub fn log_joint(&self, contents: &Tensor) -> Result<Tensor> {
        self.validate()?;
        self.check_contents(contents)?;
        let (n, k, c) = (contents.rows(), self.k(), self.dim());
        let norm: Vec<f64> = (0..k)
            .map(|j| {
                self.weights[j].ln()
                    - 0.5 * self.vars.row(j).iter().map(|v| LN_2PI + v.ln()).sum::<f64>()
            })
            .collect();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let x = contents.row(i);
            for j in 0..k {
                let mu = self.means.row(j);
                let var = self.vars.row(j);
                let mut q = 0.0;
                for t in 0..c {
                    let d = x[t] - mu[t];
                    q += d * d / var[t];
                }
                out.push(norm[j] - 0.5 * q);
            }
        }
        Tensor::matrix(n, k, out)
    }
}

/// Mixtures for `a = -1` (index 0) and `a = +1` (index 1), with prototype
/// `k` of one group corresponding to prototype `k` of the other.
#[derive(Clone, Debug, PartialEq)]
pub struct FairGmmParams {
    pub groups: [Mixture; 2],
}

impl FairGmmParams {
    pub fn group(&self, g: Group) -> &Mixture {
        &self.groups[g.index()]
    }

    pub fn k(&self) -> usize {
        self.groups[0].k()
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.groups {
            m.validate()?;
        }
        if self.groups[0].means.shape() != self.groups[1].means.shape() {
            return Err(Error::Shape {
                op: "fair_gmm_params",
                lhs: self.groups[0].means.shape().to_vec(),
                rhs: self.groups[1].means.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// CSV rows `group,k,pi,mu0..,sigma0..` for both groups.
    pub fn write_prototypes<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = self.groups[0].dim();
        let mut header = String::from("group,k,pi");
        for j in 0..c {
            header.push_str(&format!(",mu{j}"));
        }
        for j in 0..c {
            header.push_str(&format!(",sigma{j}"));
        }
        writeln!(w, "{header}")?;
        for g in Group::ALL {
            let m = self.group(g);
            for k in 0..m.k() {
                write!(w, "{},{},{}", g.sign(), k, fmt_f64(m.weights[k]))?;
                for v in m.means.row(k).iter().chain(m.vars.row(k)) {
                    write!(w, ",{}", fmt_f64(*v))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Responsibilities `gamma[k][i]` of one group, stored `K x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    gamma: Tensor,
}

impl PosteriorMatrix {
    pub fn k(&self) -> usize {
        self.gamma.rows()
    }

    pub fn n(&self) -> usize {
        self.gamma.cols()
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.gamma.get(k, i)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.gamma
    }

    /// `sum_i gamma[k][i]` per component.
    pub fn component_sums(&self) -> Vec<f64> {
        (0..self.k()).map(|k| self.gamma.row(k).iter().sum()).collect()
    }

    /// `mean_i gamma[k][i]` per component.
    pub fn component_means(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.component_sums().into_iter().map(|s| s / n).collect()
    }
}

/// Negative log-likelihood `-sum_i ln sum_k pi_k N(c_i) + sum_k pi_k`.
pub fn gmm_loglik_loss(contents: &Tensor, mix: &Mixture) -> Result<f64> {
    let lj = mix.log_joint(contents)?;
    let k = mix.k();
    let nll: f64 = lj.data().chunks(k).map(|row| -lse_and_softmax(row).0).sum();
    Ok(nll + mix.weight_sum())
}

pub fn posterior(contents: &Tensor, mix: &Mixture) -> Result<PosteriorMatrix> {
    let lj = mix.log_joint(contents)?;
    let (n, k) = (lj.rows(), lj.cols());
    let mut gamma = Tensor::zeros(&[k, n]);
    for i in 0..n {
        let (_, p) = lse_and_softmax(lj.row(i));
        for (j, pj) in p.into_iter().enumerate() {
            gamma.set(j, i, pj);
        }
    }
    Ok(PosteriorMatrix { gamma })
}

/// Fair codes `c~_i = sum_k gamma[k][i] mu_k` and the reconstruction loss
/// `sum_i |c_i - c~_i|_2`.
pub fn reconstruct(contents: &Tensor, mix: &Mixture) -> Result<(Tensor, f64)> {
    let post = posterior(contents, mix)?;
    let ctilde = post.gamma.transpose().matmul(&mix.means)?;
    let loss = (0..contents.rows())
        .map(|i| {
            contents
                .row(i)
                .iter()
                .zip(ctilde.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok((ctilde, loss))
}

/// `sum_k |mean_i gamma^{+1}_{k,i} - mean_i gamma^{-1}_{k,i}|`, each group
/// under its own mixture.
pub fn fair_loss_exact(contents_by_group: [&Tensor; 2], params: &FairGmmParams) -> Result<f64> {
    let mut means = Vec::with_capacity(2);
    for g in Group::ALL {
        let c = contents_by_group[g.index()];
        if c.rows() == 0 {
            return Err(Error::EmptyGroup(g));
        }
        means.push(posterior(c, params.group(g))?.component_means());
    }
    Ok(means[0].iter().zip(&means[1]).map(|(a, b)| (a - b).abs()).sum())
}

/// `sum_k |pi^{-1}_k - pi^{+1}_k|`.
pub fn fair_loss_approx(params: &FairGmmParams) -> f64 {
    params.groups[0]
        .weights
        .iter()
        .zip(&params.groups[1].weights)
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Weight update of the fair M-step: the larger of a like-indexed pair of
/// weights is shrunk (`n + lambda2`), the smaller one grown (`n - lambda2`).
pub fn fair_weight(resp_sum: f64, n: usize, lambda2: f64, at_least_other: bool) -> f64 {
    resp_sum / weight_denominator(n, lambda2, at_least_other)
}

pub fn weight_denominator(n: usize, lambda2: f64, at_least_other: bool) -> f64 {
    if at_least_other {
        n as f64 + lambda2
    } else {
        n as f64 - lambda2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub k: usize,
    pub lambda2: f64,
    /// Stop once no weight moves by more than this in one iteration.
    pub tol: f64,
    pub max_iter: usize,
    pub var_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            lambda2: 0.5,
            tol: 1e-5,
            max_iter: 30,
            var_floor: VAR_FLOOR,
        }
    }
}

/// k-means++ seeding over the pooled contents of both groups. Both groups
/// start from the same centers, the pooled per-dimension variance and
/// uniform weights.
pub fn init_params(contents_by_group: [&Tensor; 2], k: usize, var_floor: f64, seed: u64) -> Result<FairGmmParams> {
    let c = contents_by_group[0].cols();
    if contents_by_group[1].cols() != c {
        return Err(Error::Shape {
            op: "init_params",
            lhs: contents_by_group[0].shape().to_vec(),
            rhs: contents_by_group[1].shape().to_vec(),
        });
    }
    let pooled: Vec<&[f64]> = contents_by_group
        .iter()
        .flat_map(|t| (0..t.rows()).map(move |i| t.row(i)))
        .collect();
    if k == 0 || pooled.len() < k {
        return Err(Error::Config(format!("cannot seed {k} prototypes from {} points", pooled.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, 0x6a11));
    let mut centers: Vec<&[f64]> = vec![pooled[rng.random_range(0..pooled.len())]];
    let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut d2: Vec<f64> = pooled.iter().map(|p| sq(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = pooled.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..pooled.len())
        };
        centers.push(pooled[next]);
        for (d, p) in d2.iter_mut().zip(&pooled) {
            *d = d.min(sq(p, centers[centers.len() - 1]));
        }
    }

    let n = pooled.len() as f64;
    let mut mean = vec![0.0; c];
    for p in &pooled {
        for (m, v) in mean.iter_mut().zip(*p) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; c];
    for p in &pooled {
        for ((s, v), m) in var.iter_mut().zip(*p).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let var: Vec<f64> = var.into_iter().map(|v| v.max(var_floor)).collect();

    let mix = Mixture {
        means: Tensor::from_rows(&centers)?,
        vars: Tensor::from_rows(&vec![var; k])?,
        weights: vec![1.0 / k as f64; k],
    };
    Ok(FairGmmParams {
        groups: [mix.clone(), mix],
    })
}

/// Lockstep EM over both groups.
pub struct FairEm<'a> {
    contents: [&'a Tensor; 2],
    cfg: EmConfig,
    params: FairGmmParams,
    iterations: usize,
}

impl<'a> FairEm<'a> {
    pub fn new(contents_by_group: [&'a Tensor; 2], cfg: EmConfig, init: FairGmmParams) -> Result<Self> {
        if !(cfg.lambda2 >= 0.0) || !cfg.lambda2.is_finite() {
            return Err(Error::Config(format!("lambda2 must be finite and >= 0, got {}", cfg.lambda2)));
        }
        if !(cfg.var_floor > 0.0) {
            return Err(Error::Config("variance floor must be positive".into()));
        }
        init.validate()?;
        if init.k() != cfg.k {
            return Err(Error::Config(format!("initial params have K={}, config K={}", init.k(), cfg.k)));
        }
        for g in Group::ALL {
            let c = contents_by_group[g.index()];
            let n = c.rows();
            if n == 0 {
                return Err(Error::EmptyGroup(g));
            }
            if n <= cfg.k {
                return Err(Error::TooFewPoints { group: g, n, k: cfg.k });
            }
            if cfg.lambda2 >= n as f64 {
                return Err(Error::NegativeDenominator {
                    group: g,
                    n,
                    lambda2: cfg.lambda2,
                });
            }
            if c.cols() != init.groups[0].dim() {
                return Err(Error::Shape {
                    op: "fair_em",
                    lhs: c.shape().to_vec(),
                    rhs: init.groups[0].means.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            contents: contents_by_group,
            cfg,
            params: init,
            iterations: 0,
        })
    }

    pub fn params(&self) -> &FairGmmParams {
        &self.params
    }

    pub fn into_params(self) -> FairGmmParams {
        self.params
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// One E-step and M-step for both groups. Returns the largest absolute
    /// change of any mixing weight.
    pub fn iterate(&mut self) -> Result<f64> {
        let old = self.params.clone();
        let mut next = old.clone();
        for g in Group::ALL {
            let x = self.contents[g.index()];
            let mix = old.group(g);
            let other = old.group(g.other());
            let post = posterior(x, mix)?;
            let (n, c) = (x.rows(), x.cols());
            let out = &mut next.groups[g.index()];
            for k in 0..self.cfg.k {
                let gk = post.gamma.row(k);
                let nk: f64 = gk.iter().sum();
                if nk > 0.0 {
                    let mut mu = vec![0.0; c];
                    for (i, w) in gk.iter().enumerate() {
                        for (m, v) in mu.iter_mut().zip(x.row(i)) {
                            *m += w * v;
                        }
                    }
                    mu.iter_mut().for_each(|m| *m /= nk);
                    let mut var = vec![0.0; c];
                    for (i, w) in gk.iter().enumerate() {
                        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mu) {
                            *s += w * (v - m) * (v - m);
                        }
                    }
                    out.means.row_mut(k).copy_from_slice(&mu);
                    for (dst, s) in out.vars.row_mut(k).iter_mut().zip(var) {
                        *dst = (s / nk).max(self.cfg.var_floor);
                    }
                }
                let dominant = mix.weights[k] >= other.weights[k];
                out.weights[k] = fair_weight(nk, n, self.cfg.lambda2, dominant);
            }
        }
        let change = old
            .groups
            .iter()
            .zip(&next.groups)
            .flat_map(|(a, b)| a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        self.params = next;
        self.iterations += 1;
        Ok(change)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmOutcome {
    pub params: FairGmmParams,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs the fair EM until no weight moves by more than `cfg.tol` or
/// `cfg.max_iter` iterations have run. Starts from `init` when given, else
/// from [`init_params`] with `seed`.
pub fn fair_em(contents_by_group: [&Tensor; 2], cfg: &EmConfig, init: Option<&FairGmmParams>, seed: u64) -> Result<EmOutcome> {
    for g in Group::ALL {
        if contents_by_group[g.index()].rows() == 0 {
            return Err(Error::EmptyGroup(g));
        }
    }
    let start = match init {
        Some(p) => p.clone(),
        None => init_params(contents_by_group, cfg.k, cfg.var_floor, seed)?,
    };
    let mut em = FairEm::new(contents_by_group, *cfg, start)?;
    let mut converged = false;
    while em.iterations() < cfg.max_iter {
        if em.iterate()? < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmOutcome {
        iterations: em.iterations(),
        params: em.into_params(),
        converged,
    })
}

/// Differentiable pieces of one group's mixture evaluated at taped contents,
/// with the mixture parameters held constant.
pub struct GroupGraph<'t> {
    /// `N x K` log joint densities.
    pub log_joint: Var<'t>,
    /// `N x 1` per-instance `-ln sum_k pi_k N(c_i)`.
    pub nll: Var<'t>,
    /// `N x K` responsibilities.
    pub gamma: Var<'t>,
    /// `N x c` fair codes.
    pub ctilde: Var<'t>,
    /// `N x 1` Euclidean distances `|c_i - c~_i|`.
    pub rec: Var<'t>,
}

pub fn group_graph<'t>(contents: Var<'t>, mix: &Mixture) -> Result<GroupGraph<'t>> {
    mix.validate()?;
    let tape = contents.tape();
    let value = contents.value();
    mix.check_contents(&value)?;
    let cols: Vec<Var<'t>> = (0..mix.k())
        .map(|k| {
            let neg_mu = tape.leaf(Tensor::row_vector(mix.means.row(k)).scale(-1.0));
            let inv_var = tape.leaf(Tensor::row_vector(mix.vars.row(k)).map(|v| 1.0 / v));
            let norm = mix.weights[k].ln() - 0.5 * mix.vars.row(k).iter().map(|v| LN_2PI + v.ln()).sum::<f64>();
            Ok(contents
                .add_row(neg_mu)?
                .square()
                .mul_row(inv_var)?
                .sum_rows()
                .scale(-0.5)
                .add_scalar(norm))
        })
        .collect::<Result<_>>()?;
    let log_joint = Var::concat_cols(&cols)?;
    let nll = log_joint.logsumexp_rows().neg();
    let gamma = log_joint.softmax_rows();
    let ctilde = gamma.matmul(tape.leaf(mix.means.clone()))?;
    let rec = contents.euclid_rows(ctilde)?;
    Ok(GroupGraph {
        log_joint,
        nll,
        gamma,
        ctilde,
        rec,
    })
}
