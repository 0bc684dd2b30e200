use flair_core::fairgmm::{
    fair_em, fair_loss_approx, init_params, posterior, reconstruct, EmConfig, FairEm, FairGmmParams, Mixture, VAR_FLOOR,
};
use flair_core::numkernel::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Textbook diagonal-covariance EM for one group, written against plain
/// vectors.
struct ReferenceEm {
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl ReferenceEm {
    fn from_mixture(m: &Mixture) -> Self {
        let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
        Self {
            means: rows(&m.means),
            vars: rows(&m.vars),
            weights: m.weights.clone(),
        }
    }

    fn step(&mut self, x: &[Vec<f64>]) {
        let k = self.weights.len();
        let d = x[0].len();
        let mut resp = vec![vec![0.0; k]; x.len()];
        for (i, xi) in x.iter().enumerate() {
            let logp: Vec<f64> = (0..k)
                .map(|j| {
                    let mut s = self.weights[j].ln();
                    for t in 0..d {
                        let v = self.vars[j][t];
                        s -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (xi[t] - self.means[j][t]).powi(2) / v);
                    }
                    s
                })
                .collect();
            let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logp.iter().map(|l| (l - m).exp()).sum();
            for j in 0..k {
                resp[i][j] = (logp[j] - m).exp() / z;
            }
        }
        for j in 0..k {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            for t in 0..d {
                let mu = resp.iter().zip(x).map(|(r, xi)| r[j] * xi[t]).sum::<f64>() / nk;
                let var = resp.iter().zip(x).map(|(r, xi)| r[j] * (xi[t] - mu).powi(2)).sum::<f64>() / nk;
                self.means[j][t] = mu;
                self.vars[j][t] = var.max(VAR_FLOOR);
            }
            self.weights[j] = nk / x.len() as f64;
        }
    }

    fn max_diff(&self, m: &Mixture) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.weights.len() {
            worst = worst.max((self.weights[j] - m.weights[j]).abs());
            for t in 0..self.means[j].len() {
                worst = worst.max((self.means[j][t] - m.means.get(j, t)).abs());
                worst = worst.max((self.vars[j][t] - m.vars.get(j, t)).abs());
            }
        }
        worst
    }
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Three blobs per group; the `+1` group is shifted by `shift` and uses
/// mixing proportions different from the `-1` group.
fn paired_blobs(seed: u64, n: usize, shift: f64) -> [Tensor; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]];
    let props = [[0.6, 0.3, 0.1], [0.2, 0.3, 0.5]];
    let mut out = Vec::new();
    for (g, p) in props.iter().enumerate() {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let j = if u < p[0] { 0 } else if u < p[0] + p[1] { 1 } else { 2 };
            let s = if g == 0 { 0.0 } else { shift };
            rows.push(
                (0..2)
                    .map(|t| centers[j][t] + s + 0.7 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>(),
            );
        }
        out.push(Tensor::from_rows(&rows).unwrap());
    }
    [out[0].clone(), out[1].clone()]
}

#[test]
fn unpenalised_em_matches_reference_em() {
    for seed in 0..20u64 {
        let data = paired_blobs(seed, 150, 0.5);
        let init = init_params([&data[0], &data[1]], 3, VAR_FLOOR, seed).unwrap();
        let cfg = EmConfig {
            k: 3,
            lambda2: 0.0,
            ..EmConfig::default()
        };
        let mut em = FairEm::new([&data[0], &data[1]], cfg, init.clone()).unwrap();
        let mut refs = [ReferenceEm::from_mixture(&init.groups[0]), ReferenceEm::from_mixture(&init.groups[1])];
        let rows = [to_rows(&data[0]), to_rows(&data[1])];
        for it in 0..30 {
            em.iterate().unwrap();
            for g in 0..2 {
                refs[g].step(&rows[g]);
                let d = refs[g].max_diff(&em.params().groups[g]);
                assert!(d < 1e-8, "seed {seed} iteration {it} group {g}: {d:e}");
            }
        }
    }
}

#[test]
fn penalty_narrows_prototype_imbalance() {
    let mut narrower = 0;
    for seed in 0..20u64 {
        let data = paired_blobs(100 + seed, 200, 0.3);
        let run = |lambda2: f64| {
            let cfg = EmConfig {
                k: 3,
                lambda2,
                tol: 1e-10,
                max_iter: 300,
                ..EmConfig::default()
            };
            fair_loss_approx(&fair_em([&data[0], &data[1]], &cfg, None, seed).unwrap().params)
        };
        let (plain, fair) = (run(0.0), run(0.5));
        assert!(fair <= plain + 1e-12, "seed {seed}: {fair} > {plain}");
        if fair < plain {
            narrower += 1;
        }
    }
    assert!(narrower >= 18, "only {narrower}/20 seeds narrowed");
}

#[test]
fn converges_on_separated_blobs() {
    let data = paired_blobs(7, 300, 0.0);
    let cfg = EmConfig {
        k: 3,
        lambda2: 0.0,
        tol: 1e-8,
        max_iter: 500,
        ..EmConfig::default()
    };
    let out = fair_em([&data[0], &data[1]], &cfg, None, 7).unwrap();
    assert!(out.converged);
    let mut w = out.params.groups[0].weights.clone();
    w.sort_by(f64::total_cmp);
    for (got, want) in w.iter().zip([0.1, 0.3, 0.6]) {
        assert!((got - want).abs() < 0.06, "{w:?}");
    }
}

#[test]
fn prototype_dump_has_one_row_per_component() {
    let data = paired_blobs(3, 60, 0.0);
    let params = init_params([&data[0], &data[1]], 2, VAR_FLOOR, 3).unwrap();
    let mut buf = Vec::new();
    params.write_prototypes(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 2);
    let cols = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == cols));
}

fn mixture_strategy(k: usize, c: usize) -> impl Strategy<Value = Mixture> {
    (
        prop::collection::vec(-3.0..3.0f64, k * c),
        prop::collection::vec(0.05..3.0f64, k * c),
        prop::collection::vec(0.01..1.0f64, k),
    )
        .prop_map(move |(m, v, w)| Mixture {
            means: Tensor::matrix(k, c, m).unwrap(),
            vars: Tensor::matrix(k, c, v).unwrap(),
            weights: w,
        })
}

fn contents_strategy(n: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0..20.0f64, n * c).prop_map(move |d| Tensor::matrix(n, c, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_columns_sum_to_one(mix in mixture_strategy(4, 3), x in contents_strategy(9, 3)) {
        let post = posterior(&x, &mix).unwrap();
        for i in 0..post.n() {
            let s: f64 = (0..post.k()).map(|k| post.get(k, i)).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reconstruction_is_translation_equivariant(mix in mixture_strategy(3, 2), x in contents_strategy(6, 2), v in prop::collection::vec(-5.0..5.0f64, 2)) {
        let shift = |t: &Tensor| {
            let mut out = t.clone();
            for i in 0..out.rows() {
                for (o, s) in out.row_mut(i).iter_mut().zip(&v) {
                    *o += s;
                }
            }
            out
        };
        let moved = Mixture { means: shift(&mix.means), ..mix.clone() };
        let (base, loss) = reconstruct(&x, &mix).unwrap();
        let (shifted, loss2) = reconstruct(&shift(&x), &moved).unwrap();
        let expect = shift(&base);
        for (a, b) in shifted.data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((loss - loss2).abs() < 1e-8);
    }

    #[test]
    fn weight_sums_stay_bounded(seed in 0u64..10_000, frac in 0.0..0.1f64, k in 2usize..5) {
        let data = paired_blobs(seed, 40, 1.0);
        let n = data[0].rows().min(data[1].rows()) as f64;
        let cfg = EmConfig { k, lambda2: frac * n, tol: 0.0, max_iter: 1, ..EmConfig::default() };
        let init = init_params([&data[0], &data[1]], k, VAR_FLOOR, seed).unwrap();
        let mut em = FairEm::new([&data[0], &data[1]], cfg, init).unwrap();
        for _ in 0..40 {
            em.iterate().unwrap();
            for m in &em.params().groups {
                let s = m.weight_sum();
                prop_assert!((0.5..=1.5).contains(&s), "weight sum {s}");
            }
        }
    }
}

#[test]
fn em_is_deterministic_for_a_seed() {
    let data = paired_blobs(11, 80, 0.4);
    let cfg = EmConfig::default();
    let a: FairGmmParams = fair_em([&data[0], &data[1]], &cfg, None, 5).unwrap().params;
    let b = fair_em([&data[0], &data[1]], &cfg, None, 5).unwrap().params;
    assert_eq!(a, b);
}
