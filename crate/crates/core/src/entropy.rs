//! Conditional-entropy tools for checking that observing more variables never
//! increases the remaining uncertainty about the target.
//!
//! All entropies are in nats. Variable 0 of a joint table is the target `w`;
//! conditioning sets index the observed variables `x_1..x_N` as `0..N`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{generate_synthetic, SynthConfig};

/// Tolerance for treating a negative entropy gap as rounding noise.
pub const GAP_TOL: f64 = 1e-9;

/// Probability table over `(w, x_1, ..., x_N)`, row-major with `w` slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    dims: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(dims: Vec<usize>, probs: Vec<f64>) -> Result<DiscreteJoint> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config("a joint needs the target and at least one observed variable".into()));
        }
        let size: usize = dims.iter().product();
        if probs.len() != size {
            return Err(Error::Shape(format!("table has {} entries, dims imply {size}", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Data("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("probabilities sum to {total}, not 1")));
        }
        Ok(DiscreteJoint { dims, probs })
    }

    /// Empirical distribution of integer-coded observations.
    pub fn from_counts(dims: Vec<usize>, rows: &[Vec<usize>]) -> Result<DiscreteJoint> {
        if rows.is_empty() {
            return Err(Error::Data("no observations".into()));
        }
        let size: usize = dims.iter().product();
        let mut counts = vec![0u64; size];
        for r in rows {
            if r.len() != dims.len() || r.iter().zip(&dims).any(|(&v, &d)| v >= d) {
                return Err(Error::Shape(format!("observation {r:?} does not fit dims {dims:?}")));
            }
            counts[r.iter().zip(&dims).fold(0, |acc, (&v, &d)| acc * d + v)] += 1;
        }
        let n = rows.len() as f64;
        DiscreteJoint::new(dims, counts.into_iter().map(|c| c as f64 / n).collect())
    }

    /// Random table with i.i.d. exponential weights (a flat Dirichlet draw).
    pub fn random<R: Rng + ?Sized>(dims: Vec<usize>, rng: &mut R) -> DiscreteJoint {
        let size: usize = dims.iter().product();
        let raw: Vec<f64> = (0..size).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = raw.iter().sum();
        DiscreteJoint {
            dims,
            probs: raw.into_iter().map(|v| v / total).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_observed(&self) -> usize {
        self.dims.len() - 1
    }

    /// Marginal over the listed table axes, in the given order.
    fn marginal(&self, axes: &[usize]) -> Vec<f64> {
        let size: usize = axes.iter().map(|&a| self.dims[a]).product();
        let mut out = vec![0.0; size];
        let mut idx = vec![0usize; self.dims.len()];
        for &p in &self.probs {
            if p > 0.0 {
                let flat = axes.iter().fold(0, |acc, &a| acc * self.dims[a] + idx[a]);
                out[flat] += p;
            }
            for d in (0..self.dims.len()).rev() {
                idx[d] += 1;
                if idx[d] < self.dims[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        out
    }

    fn check_given(&self, given: &[usize]) -> Result<()> {
        let set: BTreeSet<_> = given.iter().collect();
        if set.len() != given.len() || given.iter().any(|&g| g >= self.n_observed()) {
            return Err(Error::Config(format!(
                "conditioning set {given:?} is not a set of observed variables 0..{}",
                self.n_observed()
            )));
        }
        Ok(())
    }
}

fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `H(w | X_S)`.
pub fn cond_entropy(joint: &DiscreteJoint, given: &[usize]) -> Result<f64> {
    joint.check_given(given)?;
    let axes: Vec<usize> = given.iter().map(|g| g + 1).collect();
    let mut with_w = vec![0];
    with_w.extend(&axes);
    let joint_ws = joint.marginal(&with_w);
    let cond = joint.marginal(&axes);
    let stride = cond.len();
    // H(w|S) = -Σ p(w,s) ln(p(w,s)/p(s)); entries are laid out with w slowest.
    let mut h = 0.0;
    for (i, &p) in joint_ws.iter().enumerate() {
        if p > 0.0 {
            h -= p * (p / cond[i % stride]).ln();
        }
    }
    Ok(h.max(0.0).min(entropy_of(&joint.marginal(&[0]))))
}

#[derive(Clone, Debug, Serialize)]
pub struct MonotonicityReport {
    pub chain: Vec<Vec<usize>>,
    pub entropies: Vec<f64>,
    /// `H(w|S_i) − H(w|S_{i+1})`, the conditional mutual information of the added variables.
    pub gaps: Vec<f64>,
    pub monotone: bool,
}

fn check_nested(chain: &[Vec<usize>]) -> Result<()> {
    for pair in chain.windows(2) {
        let a: BTreeSet<_> = pair[0].iter().collect();
        let b: BTreeSet<_> = pair[1].iter().collect();
        if !(a.is_subset(&b) && b.len() > a.len()) {
            return Err(Error::Config(format!("{:?} is not a strict subset of {:?}", pair[0], pair[1])));
        }
    }
    Ok(())
}

fn report_from(chain: &[Vec<usize>], entropies: Vec<f64>) -> MonotonicityReport {
    let gaps: Vec<f64> = entropies.windows(2).map(|e| e[0] - e[1]).collect();
    MonotonicityReport {
        chain: chain.to_vec(),
        monotone: gaps.iter().all(|&g| g >= -GAP_TOL),
        entropies,
        gaps,
    }
}

pub fn verify_monotonicity(joint: &DiscreteJoint, chain: &[Vec<usize>]) -> Result<MonotonicityReport> {
    check_nested(chain)?;
    let entropies = chain.iter().map(|s| cond_entropy(joint, s)).collect::<Result<Vec<_>>>()?;
    Ok(report_from(chain, entropies))
}

/// Jointly Gaussian `(w, x_1, ..., x_N)`.
#[derive(Clone, Debug)]
pub struct GaussianSystem {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSystem {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<GaussianSystem> {
        if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() || mean.len() < 2 {
            return Err(Error::Shape("covariance must be square and match the mean".into()));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 * cov.abs().max().max(1.0) {
            return Err(Error::Data("covariance is not symmetric".into()));
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::Numeric("covariance is not positive definite".into()));
        }
        Ok(GaussianSystem { mean, cov })
    }

    /// `A Aᵀ + ridge·I` with standard normal `A`.
    pub fn random<R: Rng + ?Sized>(n_observed: usize, ridge: f64, rng: &mut R) -> GaussianSystem {
        let d = n_observed + 1;
        let a: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        let cov: DMatrix<f64> = &a * a.transpose() + DMatrix::identity(d, d) * ridge;
        GaussianSystem {
            mean: DVector::zeros(d),
            cov: (&cov + cov.transpose()) * 0.5,
        }
    }

    pub fn n_observed(&self) -> usize {
        self.mean.len() - 1
    }

    /// Conditional variance of `w` given `X_S` (Schur complement).
    pub fn cond_variance(&self, given: &[usize]) -> Result<f64> {
        let set: BTreeSet<_> = given.iter().collect();
        if set.len() != given.len() || given.iter().any(|&g| g >= self.n_observed()) {
            return Err(Error::Config(format!("conditioning set {given:?} is invalid")));
        }
        let sww = self.cov[(0, 0)];
        if given.is_empty() {
            return Ok(sww);
        }
        let idx: Vec<usize> = given.iter().map(|g| g + 1).collect();
        let sss = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.cov[(idx[i], idx[j])]);
        let ssw = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.cov[(i, 0)]));
        let chol = sss
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("conditioning block for {given:?} is singular")))?;
        let sol = chol.solve(&ssw);
        Ok(sww - ssw.dot(&sol))
    }
}

/// `H(w | X_S) = ½ ln(2πe σ²_{w|S})`.
pub fn gaussian_cond_entropy(sys: &GaussianSystem, given: &[usize]) -> Result<f64> {
    let var = sys.cond_variance(given)?;
    if !(var > 0.0) {
        return Err(Error::Numeric(format!("conditional variance {var} is not positive")));
    }
    Ok(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln())
}

pub fn verify_gaussian_monotonicity(sys: &GaussianSystem, chain: &[Vec<usize>]) -> Result<MonotonicityReport> {
    check_nested(chain)?;
    let entropies = chain.iter().map(|s| gaussian_cond_entropy(sys, s)).collect::<Result<Vec<_>>>()?;
    Ok(report_from(chain, entropies))
}

/// Random maximal chain `∅ ⊂ {a} ⊂ {a,b} ⊂ ...` over `n` observed variables.
pub fn random_chain<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    (0..=n).map(|k| order[..k].to_vec()).collect()
}

/// Table where `x_2 ⊥ w | x_1`: `p(w,x1,x2) = p(x1)·p(w|x1)·p(x2|x1)`.
pub fn conditionally_independent_joint<R: Rng + ?Sized>(q: usize, rng: &mut R) -> DiscreteJoint {
    let p_x1 = DiscreteJoint::random(vec![q], rng).probs;
    let p_w: Vec<Vec<f64>> = (0..q).map(|_| DiscreteJoint::random(vec![q], rng).probs).collect();
    let p_x2: Vec<Vec<f64>> = (0..q).map(|_| DiscreteJoint::random(vec![q], rng).probs).collect();
    let mut probs = Vec::with_capacity(q * q * q);
    for w in 0..q {
        for x1 in 0..q {
            for x2 in 0..q {
                probs.push(p_x1[x1] * p_w[x1][w] * p_x2[x1][x2]);
            }
        }
    }
    DiscreteJoint { dims: vec![q; 3], probs }
}

/// Two fair bits with `w = x1 XOR x2`: neither bit alone says anything about `w`.
pub fn xor_joint() -> DiscreteJoint {
    let mut probs = vec![0.0; 8];
    for x1 in 0..2 {
        for x2 in 0..2 {
            probs[((x1 ^ x2) * 2 + x1) * 2 + x2] = 0.25;
        }
    }
    DiscreteJoint { dims: vec![2; 3], probs }
}

/// Per-pixel samples `(w, SSH, U, V, B)` pooled over a synthetic series.
#[derive(Clone, Debug)]
pub struct PixelPool {
    pub columns: Vec<Vec<f64>>,
}

impl PixelPool {
    /// Pools every pixel of every step; `level` selects the target depth.
    pub fn from_synthetic(cfg: &SynthConfig, level: usize) -> Result<PixelPool> {
        let out = generate_synthetic(cfg)?;
        let names = ["SSH", "U", "V", "B"];
        let mut columns = vec![Vec::new(); 1 + names.len()];
        for s in &out.samples {
            columns[0].extend(s.target.channel(level).iter().map(|&v| v as f64));
            for (c, name) in names.iter().enumerate() {
                columns[c + 1].extend(s.surface[*name].data().iter().map(|&v| v as f64));
            }
        }
        Ok(PixelPool { columns })
    }

    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Plug-in joint of `samples` rows drawn with replacement, each column
    /// quantized into `q` equal-frequency bins.
    pub fn plug_in_joint<R: Rng + ?Sized>(&self, q: usize, samples: usize, rng: &mut R) -> Result<DiscreteJoint> {
        if self.is_empty() || q < 2 {
            return Err(Error::Config("plug-in estimate needs data and at least 2 bins".into()));
        }
        let rows_idx: Vec<usize> = (0..samples).map(|_| rng.random_range(0..self.len())).collect();
        let coded: Vec<Vec<usize>> = self
            .columns
            .iter()
            .map(|col| {
                let vals: Vec<f64> = rows_idx.iter().map(|&i| col[i]).collect();
                quantize(&vals, q)
            })
            .collect();
        let rows: Vec<Vec<usize>> = (0..samples).map(|r| coded.iter().map(|c| c[r]).collect()).collect();
        DiscreteJoint::from_counts(vec![q; self.columns.len()], &rows)
    }
}

/// Equal-frequency bin codes in `0..q`.
pub fn quantize(values: &[f64], q: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..q).map(|k| sorted[(k * sorted.len() / q).min(sorted.len() - 1)]).collect();
    values.iter().map(|&v| cuts.partition_point(|&c| c <= v)).collect()
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub trials: usize,
    pub ci_cases: usize,
    pub bins: usize,
    pub plug_in_samples: usize,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            trials: 100,
            ci_cases: 10,
            bins: 8,
            plug_in_samples: 100_000,
            seed: 0,
            synth: SynthConfig {
                height: 32,
                width: 32,
                steps: 120,
                ..SynthConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCount {
    pub trials: usize,
    pub passed: usize,
    /// Smallest gap seen (most negative is worst), or largest `|gap|` for
    /// the equality cases.
    pub extreme_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub exact_discrete: SuiteCount,
    pub conditional_independence: SuiteCount,
    /// Gap for adding the second bit of the XOR construction (equals ln 2).
    pub coupled_gap: f64,
    pub gaussian: SuiteCount,
    pub plug_in: SuiteCount,
    /// Mean plug-in estimate of `I(w; SSH,U,V,B)` on the synthetic data.
    pub plug_in_mutual_information: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.exact_discrete.passed == self.exact_discrete.trials
            && self.conditional_independence.passed == self.conditional_independence.trials
            && self.gaussian.passed == self.gaussian.trials
            && self.plug_in.passed * 100 >= self.plug_in.trials * 95
            && self.coupled_gap > 0.0
    }
}

fn min_gap(r: &MonotonicityReport) -> f64 {
    r.gaps.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Runs every family of monotonicity checks.
pub fn run_monotonicity_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut exact = SuiteCount {
        trials: cfg.trials,
        passed: 0,
        extreme_gap: f64::INFINITY,
    };
    for _ in 0..cfg.trials {
        let n = rng.random_range(2..=4);
        let q = rng.random_range(2..=4);
        let joint = DiscreteJoint::random(vec![q; n + 1], &mut rng);
        let r = verify_monotonicity(&joint, &random_chain(n, &mut rng))?;
        exact.passed += r.monotone as usize;
        exact.extreme_gap = exact.extreme_gap.min(min_gap(&r));
    }

    let mut ci = SuiteCount {
        trials: cfg.ci_cases,
        passed: 0,
        extreme_gap: 0.0,
    };
    for _ in 0..cfg.ci_cases {
        let q = rng.random_range(2..=5);
        let joint = conditionally_independent_joint(q, &mut rng);
        let gap = verify_monotonicity(&joint, &[vec![0], vec![0, 1]])?.gaps[0];
        ci.passed += (gap.abs() <= GAP_TOL) as usize;
        ci.extreme_gap = ci.extreme_gap.max(gap.abs());
    }

    let coupled_gap = verify_monotonicity(&xor_joint(), &[vec![0], vec![0, 1]])?.gaps[0];

    let mut gaussian = SuiteCount {
        trials: cfg.trials,
        passed: 0,
        extreme_gap: f64::INFINITY,
    };
    for _ in 0..cfg.trials {
        let n = rng.random_range(2..=6);
        let sys = GaussianSystem::random(n, 0.1, &mut rng);
        let r = verify_gaussian_monotonicity(&sys, &random_chain(n, &mut rng))?;
        gaussian.passed += r.monotone as usize;
        gaussian.extreme_gap = gaussian.extreme_gap.min(min_gap(&r));
    }

    let pool = PixelPool::from_synthetic(&cfg.synth, 0)?;
    let mut plug_in = SuiteCount {
        trials: cfg.trials,
        passed: 0,
        extreme_gap: f64::INFINITY,
    };
    let mut mi_total = 0.0;
    for _ in 0..cfg.trials {
        let joint = pool.plug_in_joint(cfg.bins, cfg.plug_in_samples, &mut rng)?;
        let chain = random_chain(joint.n_observed(), &mut rng);
        let r = verify_monotonicity(&joint, &chain)?;
        plug_in.passed += r.monotone as usize;
        plug_in.extreme_gap = plug_in.extreme_gap.min(min_gap(&r));
        mi_total += r.entropies[0] - r.entropies[r.entropies.len() - 1];
    }

    Ok(SuiteReport {
        exact_discrete: exact,
        conditional_independence: ci,
        coupled_gap,
        gaussian,
        plug_in,
        plug_in_mutual_information: mi_total / cfg.trials.max(1) as f64,
    })
}
