//! Synthetic multi-domain data with separately controlled covariate shift and
//! label/sensitive-attribute correlation shift, plus the quartet sampler used
//! for training.
//!
//! A domain is a planar rotation (the style) applied to a designated pair of
//! coordinates of two class prototypes, together with a target φ-coefficient
//! between the label and the sensitive attribute. The sensitive attribute is
//! written into its own coordinate as a signed offset.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::rng::stream;

/// Sensitive attribute `a ∈ {-1, 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// a = -1
    Minus,
    /// a = +1
    Plus,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Minus, Group::Plus];

    pub fn sign(self) -> i32 {
        match self {
            Group::Minus => -1,
            Group::Plus => 1,
        }
    }

    pub fn from_sign(s: i64) -> Option<Group> {
        match s {
            -1 => Some(Group::Minus),
            1 => Some(Group::Plus),
            _ => None,
        }
    }

    /// 0 for a = -1, 1 for a = +1.
    pub fn index(self) -> usize {
        match self {
            Group::Minus => 0,
            Group::Plus => 1,
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::Minus => Group::Plus,
            Group::Plus => Group::Minus,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: u32,
    /// Rotation angle in degrees, `[0, 360)`.
    pub angle: f64,
    /// Target φ-coefficient between `y` and `a`.
    pub corr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub x: Vec<f64>,
    pub a: Group,
    pub y: u8,
    pub domain: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domains: Vec<DomainSpec>,
    pub instances: Vec<Instance>,
    /// One tag per entry of `domains`.
    pub splits: Vec<Split>,
}

/// The six benchmark domains: rotation angle and Corr(Y, A) per domain.
pub const BENCHMARK_ANGLES: [f64; 6] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0];
pub const BENCHMARK_CORRS: [f64; 6] = [0.0, 0.8, 0.5, 0.1, 0.3, 0.6];

pub fn benchmark_domains() -> Vec<DomainSpec> {
    BENCHMARK_ANGLES
        .iter()
        .zip(BENCHMARK_CORRS)
        .enumerate()
        .map(|(i, (&angle, corr))| DomainSpec {
            id: i as u32,
            angle,
            corr,
        })
        .collect()
}

/// Knobs of the benchmark generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub n_per_domain: usize,
    pub noise_sigma: f64,
    /// Half the distance between the two class prototypes inside the rotated plane.
    pub plane_radius: f64,
    /// Class separation outside the rotated plane.
    pub off_plane_separation: f64,
    /// Standard deviation of the shared prototype component.
    pub base_scale: f64,
    /// `|offset|` written to the sensitive coordinate.
    pub sensitive_offset: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_per_domain: 2000,
            noise_sigma: 0.3,
            plane_radius: 0.35,
            off_plane_separation: 0.3,
            base_scale: 0.5,
            sensitive_offset: 0.5,
        }
    }
}

/// Class prototypes and the coordinate layout shared by all domains.
#[derive(Clone, Debug, PartialEq)]
pub struct BasePatterns {
    /// Prototype of class 0 and class 1.
    pub prototypes: [Vec<f64>; 2],
    /// Coordinates rotated by the domain angle.
    pub rotation_axes: (usize, usize),
    /// Coordinate carrying `sensitive_offset * a`.
    pub sensitive_coord: usize,
    pub sensitive_offset: f64,
}

impl BasePatterns {
    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    fn validate(&self) -> Result<()> {
        let [p0, p1] = &self.prototypes;
        let d = p0.len();
        let (i, j) = self.rotation_axes;
        if d < 3 || p1.len() != d {
            return Err(Error::Generator(format!(
                "prototypes must share a dimension >= 3, got {} and {}",
                d,
                p1.len()
            )));
        }
        if i == j || i >= d || j >= d || self.sensitive_coord >= d || self.sensitive_coord == i || self.sensitive_coord == j {
            return Err(Error::Generator("rotation axes and sensitive coordinate must be distinct and in range".into()));
        }
        let dot: f64 = p0.iter().zip(p1).map(|(a, b)| a * b).sum();
        let n0: f64 = p0.iter().map(|v| v * v).sum();
        let n1: f64 = p1.iter().map(|v| v * v).sum();
        // Cauchy-Schwarz is tight exactly for dependent vectors.
        if n0 == 0.0 || n1 == 0.0 || (n0 * n1 - dot * dot) <= 1e-12 * n0 * n1 {
            return Err(Error::Generator("class prototypes are linearly dependent".into()));
        }
        Ok(())
    }
}

/// Draws the benchmark prototypes for a given seed.
pub fn make_patterns(cfg: &GeneratorConfig, seed: u64) -> Result<BasePatterns> {
    if cfg.dim < 4 {
        return Err(Error::Generator(format!("dim must be >= 4, got {}", cfg.dim)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, 0x9a77));
    let d = cfg.dim;
    let sens = 2;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut base: Vec<f64> = (0..d).map(|_| cfg.base_scale * normal(&mut rng)).collect();
    base[sens] = 0.0;
    let mut dir: Vec<f64> = (0..d)
        .map(|k| if k < 3 { 0.0 } else { normal(&mut rng) })
        .collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut dir {
        *v /= norm;
    }
    let proto = |sign: f64| -> Vec<f64> {
        let mut p = base.clone();
        p[0] += sign * cfg.plane_radius;
        for (pk, dk) in p.iter_mut().zip(&dir) {
            *pk += sign * 0.5 * cfg.off_plane_separation * dk;
        }
        p
    };
    let patterns = BasePatterns {
        prototypes: [proto(-1.0), proto(1.0)],
        rotation_axes: (0, 1),
        sensitive_coord: sens,
        sensitive_offset: cfg.sensitive_offset,
    };
    patterns.validate()?;
    Ok(patterns)
}

/// Rotates coordinates `axes` of `v` by `angle_deg`.
pub fn rotate(v: &[f64], axes: (usize, usize), angle_deg: f64) -> Vec<f64> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut out = v.to_vec();
    let (i, j) = axes;
    out[i] = c * v[i] - s * v[j];
    out[j] = s * v[i] + c * v[j];
    out
}

/// Counts of `a = +1` among `y = 1` and `y = 0` instances for a balanced
/// binary joint with φ = `corr`: P(a=1, y=1) = (1 + ρ)/4.
pub fn sensitive_quotas(n: usize, corr: f64) -> (usize, usize) {
    let half = (n / 2) as f64;
    let pos_given_y1 = ((half * (1.0 + corr) / 2.0).round() as usize).min(n / 2);
    let pos_given_y0 = ((half * (1.0 - corr) / 2.0).round() as usize).min(n / 2);
    (pos_given_y1, pos_given_y0)
}

/// Generates `n` instances of one domain.
///
/// Labels are exactly balanced. Sensitive attributes follow fixed quotas
/// within each label (see [`sensitive_quotas`]) and are assigned to random
/// instances, so the empirical φ matches `spec.corr` up to rounding.
pub fn make_domain(patterns: &BasePatterns, spec: &DomainSpec, n: usize, noise_sigma: f64, seed: u64) -> Result<Vec<Instance>> {
    patterns.validate()?;
    if !(-1.0..=1.0).contains(&spec.corr) || !spec.corr.is_finite() {
        return Err(Error::Generator(format!("corr {} outside [-1, 1]", spec.corr)));
    }
    if !(0.0..360.0).contains(&spec.angle) {
        return Err(Error::Generator(format!("angle {} outside [0, 360)", spec.angle)));
    }
    if n % 2 == 1 || n == 0 {
        return Err(Error::InfeasibleJoint {
            domain: spec.id,
            reason: format!("n={n} cannot be split into balanced labels"),
        });
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::Generator(format!("noise sigma {noise_sigma} must be finite and >= 0")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, 0xd0 + spec.id as u64));
    let half = n / 2;
    let (q1, q0) = sensitive_quotas(n, spec.corr);
    let mut labels_and_groups = Vec::with_capacity(n);
    for (y, quota) in [(1u8, q1), (0u8, q0)] {
        let mut groups: Vec<Group> = (0..half)
            .map(|i| if i < quota { Group::Plus } else { Group::Minus })
            .collect();
        shuffle(&mut groups, &mut rng);
        labels_and_groups.extend(groups.into_iter().map(|g| (y, g)));
    }
    shuffle(&mut labels_and_groups, &mut rng);

    let rotated = [
        rotate(&patterns.prototypes[0], patterns.rotation_axes, spec.angle),
        rotate(&patterns.prototypes[1], patterns.rotation_axes, spec.angle),
    ];
    let instances = labels_and_groups
        .into_iter()
        .map(|(y, a)| {
            let mut x = rotated[y as usize].clone();
            x[patterns.sensitive_coord] += patterns.sensitive_offset * a.sign() as f64;
            for v in &mut x {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += noise_sigma * z;
            }
            Instance {
                x,
                a,
                y,
                domain: spec.id,
            }
        })
        .collect();
    Ok(instances)
}

fn shuffle<T, R: Rng>(v: &mut [T], rng: &mut R) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// The six-domain benchmark with default generator settings.
pub fn make_benchmark(seed: u64) -> Dataset {
    make_benchmark_with(&GeneratorConfig::default(), seed).expect("default generator settings are valid")
}

pub fn make_benchmark_with(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    let patterns = make_patterns(cfg, seed)?;
    let domains = benchmark_domains();
    let mut instances = Vec::with_capacity(domains.len() * cfg.n_per_domain);
    for spec in &domains {
        instances.extend(make_domain(&patterns, spec, cfg.n_per_domain, cfg.noise_sigma, seed)?);
    }
    Ok(Dataset {
        splits: vec![Split::Train; domains.len()],
        domains,
        instances,
    })
}

/// Empirical φ-coefficient between `y` and `a` (coded 0/1).
pub fn phi_coefficient(instances: &[Instance]) -> f64 {
    let n = instances.len() as f64;
    let mut n11 = 0.0;
    let mut n_y = 0.0;
    let mut n_a = 0.0;
    for inst in instances {
        let a1 = inst.a == Group::Plus;
        let y1 = inst.y == 1;
        if a1 && y1 {
            n11 += 1.0;
        }
        if y1 {
            n_y += 1.0;
        }
        if a1 {
            n_a += 1.0;
        }
    }
    let num = n * n11 - n_y * n_a;
    let den = (n_y * (n - n_y) * n_a * (n - n_a)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl Dataset {
    pub fn empty() -> Self {
        Self {
            domains: Vec::new(),
            instances: Vec::new(),
            splits: Vec::new(),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.instances.first().map(|i| i.x.len())
    }

    pub fn domain(&self, id: u32) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.domains.len() {
            return Err(Error::Generator("one split tag per domain required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.domains {
            if !seen.insert(d.id) {
                return Err(Error::Generator(format!("duplicate domain id {}", d.id)));
            }
            if d.corr.abs() > 1.0 {
                return Err(Error::Generator(format!("domain {} corr {} outside [-1, 1]", d.id, d.corr)));
            }
        }
        let dim = self.dim();
        for inst in &self.instances {
            if !seen.contains(&inst.domain) {
                return Err(Error::Generator(format!("instance refers to unknown domain {}", inst.domain)));
            }
            if inst.y > 1 || Some(inst.x.len()) != dim || inst.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Generator("malformed instance".into()));
            }
        }
        Ok(())
    }

    /// Marks `held_out` as the only test domain.
    pub fn leave_one_out(&self, held_out: u32) -> Result<Dataset> {
        if self.domain(held_out).is_none() {
            return Err(Error::Config(format!("held-out domain {held_out} does not exist")));
        }
        let mut ds = self.clone();
        ds.splits = ds
            .domains
            .iter()
            .map(|d| if d.id == held_out { Split::Test } else { Split::Train })
            .collect();
        Ok(ds)
    }

    pub fn split_of(&self, domain: u32) -> Option<Split> {
        self.domains
            .iter()
            .position(|d| d.id == domain)
            .map(|i| self.splits[i])
    }

    pub fn instances_in(&self, split: Split) -> Vec<&Instance> {
        self.instances
            .iter()
            .filter(|i| self.split_of(i.domain) == Some(split))
            .collect()
    }

    pub fn domain_ids(&self, split: Split) -> Vec<u32> {
        self.domains
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(d, _)| d.id)
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_writer(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    /// CSV with header `domain,angle,corr,a,y,x0..x{d-1}`; floats carry 17
    /// significant digits so values round-trip exactly.
    pub fn to_writer<W: Write>(&self, w: &mut W) -> Result<()> {
        let dim = self.dim().unwrap_or(0);
        let mut header = String::from("domain,angle,corr,a,y");
        for k in 0..dim {
            header.push_str(&format!(",x{k}"));
        }
        writeln!(w, "{header}")?;
        for inst in &self.instances {
            let spec = self
                .domain(inst.domain)
                .ok_or_else(|| Error::Generator(format!("unknown domain {}", inst.domain)))?;
            write!(
                w,
                "{},{},{},{},{}",
                spec.id,
                fmt_f64(spec.angle),
                fmt_f64(spec.corr),
                inst.a.sign(),
                inst.y
            )?;
            for v in &inst.x {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn from_reader<R: Read>(r: BufReader<R>) -> Result<Dataset> {
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(h) => h?,
            None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
        };
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.len() < 5 || cols[..5] != ["domain", "angle", "corr", "a", "y"] {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected header `{header}`"),
            });
        }
        let dim = cols.len() - 5;
        for (k, c) in cols[5..].iter().enumerate() {
            if *c != format!("x{k}") {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected column x{k}, found `{c}`"),
                });
            }
        }

        let mut domains: Vec<DomainSpec> = Vec::new();
        let mut instances = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != 5 + dim {
                return Err(err(format!("expected {} fields, found {}", 5 + dim, fields.len())));
            }
            let id: u32 = fields[0].parse().map_err(|_| err(format!("bad domain id `{}`", fields[0])))?;
            let angle = parse_f64(fields[1]).ok_or_else(|| err(format!("bad angle `{}`", fields[1])))?;
            let corr = parse_f64(fields[2]).ok_or_else(|| err(format!("bad corr `{}`", fields[2])))?;
            let a = fields[3]
                .parse::<i64>()
                .ok()
                .and_then(Group::from_sign)
                .ok_or_else(|| err(format!("sensitive attribute must be -1 or 1, found `{}`", fields[3])))?;
            let y = match fields[4] {
                "0" => 0,
                "1" => 1,
                other => return Err(err(format!("label must be 0 or 1, found `{other}`"))),
            };
            let x = fields[5..]
                .iter()
                .map(|f| parse_f64(f).ok_or_else(|| err(format!("bad feature `{f}`"))))
                .collect::<Result<Vec<f64>>>()?;
            match domains.iter().find(|d| d.id == id) {
                Some(d) if d.angle.to_bits() != angle.to_bits() || d.corr.to_bits() != corr.to_bits() => {
                    return Err(err(format!("domain {id} redeclared with different angle/corr")));
                }
                Some(_) => {}
                None => domains.push(DomainSpec { id, angle, corr }),
            }
            instances.push(Instance { x, a, y, domain: id });
        }
        Ok(Dataset {
            splits: vec![Split::Train; domains.len()],
            domains,
            instances,
        })
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// One quartet `(r1, r2, r3, r4)`: `r1, r2` from domain `e`, `r3, r4` from
/// `e' != e`; `r1, r3` have label `y` and `a = -1`; `r2, r4` have label
/// `1 - y` and `a = +1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quartet {
    pub members: [Instance; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuartetBatch {
    pub quartets: Vec<Quartet>,
    /// Members drawn with an unconstrained sensitive attribute because the
    /// requested (domain, label, a) cell was empty.
    pub relaxed: usize,
}

impl QuartetBatch {
    pub fn len(&self) -> usize {
        self.quartets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quartets.is_empty()
    }

    /// Feature matrix of role `r` (0-based) across quartets, `Q x d`.
    pub fn role_matrix(&self, role: usize) -> Tensor {
        let rows: Vec<&[f64]> = self.quartets.iter().map(|q| q.members[role].x.as_slice()).collect();
        Tensor::from_rows(&rows).expect("non-empty batch with equal dims")
    }

    /// All members stacked role-major: rows `[r*Q, (r+1)*Q)` hold role `r`.
    pub fn stacked(&self) -> Tensor {
        let q = self.len();
        let rows: Vec<&[f64]> = (0..4)
            .flat_map(|r| (0..q).map(move |i| (r, i)))
            .map(|(r, i)| self.quartets[i].members[r].x.as_slice())
            .collect();
        Tensor::from_rows(&rows).expect("non-empty batch with equal dims")
    }

    /// Checks the domain/label structure of every quartet. The sensitive
    /// pattern is checked only when no member was relaxed.
    pub fn check_structure(&self) -> std::result::Result<(), String> {
        for (i, q) in self.quartets.iter().enumerate() {
            let [r1, r2, r3, r4] = &q.members;
            if r1.domain != r2.domain || r3.domain != r4.domain || r1.domain == r3.domain {
                return Err(format!("quartet {i}: domain pattern violated"));
            }
            if r1.y != r3.y || r2.y != r4.y || r1.y == r2.y {
                return Err(format!("quartet {i}: label pattern violated"));
            }
            if self.relaxed == 0
                && (r1.a != Group::Minus || r3.a != Group::Minus || r2.a != Group::Plus || r4.a != Group::Plus)
            {
                return Err(format!("quartet {i}: sensitive pattern violated"));
            }
        }
        Ok(())
    }
}

/// Index of training instances by (domain, label, sensitive attribute).
pub struct QuartetSampler<'a> {
    instances: Vec<&'a Instance>,
    domains: Vec<u32>,
    cells: HashMap<(u32, u8, Group), Vec<usize>>,
    by_label: HashMap<(u32, u8), Vec<usize>>,
}

impl<'a> QuartetSampler<'a> {
    pub fn new(train: &[&'a Instance]) -> Result<Self> {
        let mut domains: Vec<u32> = train.iter().map(|i| i.domain).collect();
        domains.sort_unstable();
        domains.dedup();
        if domains.len() < 2 {
            return Err(Error::TooFewDomains(domains.len()));
        }
        let mut cells: HashMap<(u32, u8, Group), Vec<usize>> = HashMap::new();
        let mut by_label: HashMap<(u32, u8), Vec<usize>> = HashMap::new();
        for (idx, inst) in train.iter().enumerate() {
            cells.entry((inst.domain, inst.y, inst.a)).or_default().push(idx);
            by_label.entry((inst.domain, inst.y)).or_default().push(idx);
        }
        for &d in &domains {
            for y in 0..2u8 {
                if !by_label.contains_key(&(d, y)) {
                    return Err(Error::EmptyCell { domain: d, y });
                }
            }
        }
        Ok(Self {
            instances: train.to_vec(),
            domains,
            cells,
            by_label,
        })
    }

    pub fn domains(&self) -> &[u32] {
        &self.domains
    }

    fn draw<R: Rng>(&self, domain: u32, y: u8, a: Group, rng: &mut R, relaxed: &mut usize) -> Instance {
        let idx = match self.cells.get(&(domain, y, a)) {
            Some(cell) => *cell.choose(rng).expect("cells are non-empty"),
            None => {
                *relaxed += 1;
                *self.by_label[&(domain, y)].choose(rng).expect("checked in new")
            }
        };
        self.instances[idx].clone()
    }

    /// Draws `q` quartets: an ordered domain pair uniformly among distinct
    /// pairs, a label uniformly, then one instance per role uniformly from
    /// its cell.
    pub fn sample<R: Rng>(&self, q: usize, rng: &mut R) -> QuartetBatch {
        self.sample_impl(q, rng, false)
    }

    /// Like [`sample`](Self::sample), but the label `y` alternates across
    /// quartets from a random start, so each label leads `floor(q/2)` or
    /// `ceil(q/2)` quartets.
    pub fn sample_stratified<R: Rng>(&self, q: usize, rng: &mut R) -> QuartetBatch {
        self.sample_impl(q, rng, true)
    }

    fn sample_impl<R: Rng>(&self, q: usize, rng: &mut R, stratify: bool) -> QuartetBatch {
        let m = self.domains.len();
        let mut relaxed = 0;
        let offset: u8 = if stratify { rng.random_range(0..2) } else { 0 };
        let quartets = (0..q)
            .map(|n| {
                let i = rng.random_range(0..m);
                let mut j = rng.random_range(0..m - 1);
                if j >= i {
                    j += 1;
                }
                let (e, e2) = (self.domains[i], self.domains[j]);
                let y: u8 = if stratify {
                    (n % 2) as u8 ^ offset
                } else {
                    rng.random_range(0..2)
                };
                let y2 = 1 - y;
                Quartet {
                    members: [
                        self.draw(e, y, Group::Minus, rng, &mut relaxed),
                        self.draw(e, y2, Group::Plus, rng, &mut relaxed),
                        self.draw(e2, y, Group::Minus, rng, &mut relaxed),
                        self.draw(e2, y2, Group::Plus, rng, &mut relaxed),
                    ],
                }
            })
            .collect();
        QuartetBatch { quartets, relaxed }
    }
}

/// Samples `q` quartets from the training split of `train`.
pub fn sample_quartets(train: &Dataset, q: usize, seed: u64) -> Result<QuartetBatch> {
    let pool = train.instances_in(Split::Train);
    let sampler = QuartetSampler::new(&pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, 0x4a));
    Ok(sampler.sample(q, &mut rng))
}
