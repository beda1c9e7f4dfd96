//! Closed-form probability primitives shared by fitting and scoring.
//!
//! Everything is evaluated in log space with `ln Γ` as the only special
//! function. The Dirichlet-multinomial marginal is the *sequence* probability
//! (no multinomial coefficient), which is the form the cluster reassignment
//! and hyperparameter updates are written against.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{BirdError, Result};

/// Concentration floor applied after every fixed-point step.
pub const CONCENTRATION_FLOOR: f64 = 1e-6;

/// Smallest coordinate a Dirichlet sample may take.
pub const SAMPLE_FLOOR: f64 = 1e-300;

const SIMPLEX_TOL: f64 = 1e-9;

/// Natural log of the gamma function.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// `ln Σ exp(v)` without overflow or underflow. Empty input and all-`-inf`
/// input both give `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Concentration vector of a Dirichlet distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DirichletParams(Vec<f64>);

impl DirichletParams {
    pub fn new(concentration: Vec<f64>) -> Result<Self> {
        if concentration.len() < 2 {
            return Err(BirdError::InvalidParams(format!(
                "need at least 2 components, got {}",
                concentration.len()
            )));
        }
        if let Some((i, a)) = concentration
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0))
        {
            return Err(BirdError::InvalidParams(format!(
                "component {i} is {a}, must be finite and positive"
            )));
        }
        Ok(Self(concentration))
    }

    /// The uniform prior: every component equal to one.
    pub fn ones(len: usize) -> Self {
        assert!(len >= 2, "Dirichlet needs at least 2 components");
        Self(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total concentration `Σ a_l`.
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let total = self.total();
        self.0.iter().map(|a| a / total).collect()
    }

    /// Conjugate update: `a + counts`.
    pub fn posterior(&self, counts: &CountVector) -> Result<Self> {
        check_dim(self.len(), counts.len())?;
        Ok(Self(
            self.0
                .iter()
                .zip(counts.counts())
                .map(|(a, &c)| a + f64::from(c))
                .collect(),
        ))
    }

    /// Scale every component by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|a| a * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for DirichletParams {
    type Error = BirdError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DirichletParams> for Vec<f64> {
    fn from(p: DirichletParams) -> Self {
        p.0
    }
}

/// Per-category observation counts with their cached total.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CountVector {
    counts: Vec<u32>,
    total: u64,
}

impl CountVector {
    pub fn new(counts: Vec<u32>) -> Self {
        let total = counts.iter().map(|&c| u64::from(c)).sum();
        Self { counts, total }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            counts: vec![0; len],
            total: 0,
        }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Record one observation in `category`.
    pub fn increment(&mut self, category: usize) {
        self.counts[category] += 1;
        self.total += 1;
    }

    /// Componentwise sum.
    pub fn combined(&self, other: &CountVector) -> Result<CountVector> {
        check_dim(self.len(), other.len())?;
        Ok(CountVector::new(
            self.counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }
}

/// A probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(BirdError::InvalidSimplex(
                "entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(BirdError::InvalidSimplex(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(BirdError::DimensionMismatch { expected, got })
    }
}

/// `ln Γ(Σa) − Σ ln Γ(a_l)`, the log normalizer of a Dirichlet density.
pub fn dirichlet_log_normalizer(a: &DirichletParams) -> f64 {
    ln_gamma(a.total()) - a.as_slice().iter().map(|&x| ln_gamma(x)).sum::<f64>()
}

/// Log density of `Dirichlet(a)` at `p`.
///
/// A zero coordinate gives `-inf` when its concentration exceeds one, is
/// harmless when it equals one, and is a domain error below one where the
/// density diverges.
pub fn dirichlet_log_pdf(p: &SimplexPoint, a: &DirichletParams) -> Result<f64> {
    check_dim(a.len(), p.len())?;
    dirichlet_log_pdf_with_normalizer(p.as_slice(), a.as_slice(), dirichlet_log_normalizer(a))
}

pub(crate) fn dirichlet_log_pdf_with_normalizer(
    p: &[f64],
    a: &[f64],
    log_normalizer: f64,
) -> Result<f64> {
    let mut acc = log_normalizer;
    for (index, (&pl, &al)) in p.iter().zip(a).enumerate() {
        if pl > 0.0 {
            acc += (al - 1.0) * pl.ln();
        } else if al > 1.0 {
            return Ok(f64::NEG_INFINITY);
        } else if al < 1.0 {
            return Err(BirdError::DensityDiverges {
                index,
                concentration: al,
            });
        }
    }
    Ok(acc)
}

/// Log probability of an exchangeable observation sequence with the given
/// counts under the Dirichlet-multinomial (Pólya urn) law:
/// `ln Γ(A) − ln Γ(n + A) + Σ_l [ln Γ(c_l + a_l) − ln Γ(a_l)]`.
pub fn dirmult_log_marginal(counts: &CountVector, a: &DirichletParams) -> Result<f64> {
    check_dim(a.len(), counts.len())?;
    Ok(dirmult_log_marginal_unchecked(counts, a.as_slice()))
}

pub(crate) fn dirmult_log_marginal_unchecked(counts: &CountVector, a: &[f64]) -> f64 {
    if counts.total() == 0 {
        return 0.0;
    }
    let big_a: f64 = a.iter().sum();
    let mut acc = ln_gamma(big_a) - ln_gamma(counts.total() as f64 + big_a);
    for (&c, &al) in counts.counts().iter().zip(a) {
        if c > 0 {
            acc += ln_gamma(f64::from(c) + al) - ln_gamma(al);
        }
    }
    acc
}

/// Reusable sampler for one Dirichlet distribution.
///
/// Draws normalized Gamma(a_l, 1) variates. Small shapes are drawn in log
/// space (`ln G(a+1) + ln U / a`) so that the largest coordinate never
/// underflows; coordinates are clamped below at [`SAMPLE_FLOOR`].
#[derive(Debug, Clone)]
pub struct DirichletSampler {
    shapes: Vec<f64>,
    gammas: Vec<Gamma<f64>>,
}

impl DirichletSampler {
    pub fn new(a: &DirichletParams) -> Self {
        let gammas = a
            .as_slice()
            .iter()
            .map(|&shape| {
                let shape = if shape < 1.0 { shape + 1.0 } else { shape };
                Gamma::new(shape, 1.0).expect("validated concentration")
            })
            .collect();
        Self {
            shapes: a.as_slice().to_vec(),
            gammas,
        }
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// Fill `out` with one draw.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        out.clear();
        for (&shape, gamma) in self.shapes.iter().zip(&self.gammas) {
            let g: f64 = gamma.sample(rng);
            let mut log_g = g.ln();
            if shape < 1.0 {
                let u = 1.0 - rng.random::<f64>();
                log_g += u.ln() / shape;
            }
            out.push(log_g);
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v = (*v / sum).max(SAMPLE_FLOOR);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimplexPoint {
        let mut out = Vec::with_capacity(self.len());
        self.sample_into(rng, &mut out);
        SimplexPoint(out)
    }
}

/// One draw from `Dirichlet(a)`.
pub fn sample_dirichlet<R: Rng + ?Sized>(a: &DirichletParams, rng: &mut R) -> SimplexPoint {
    DirichletSampler::new(a).sample(rng)
}

/// Sufficient statistics of a set of count vectors for the
/// Dirichlet-multinomial likelihood: how many members had each non-zero
/// count value per category, and each non-zero total.
///
/// Both the fixed-point update and the likelihood depend on the data only
/// through these tables, so a cluster of a million users costs no more per
/// iteration than the number of distinct count values.
#[derive(Debug, Clone, PartialEq)]
pub struct CountSummary {
    dim: usize,
    members: u64,
    categories: Vec<Vec<(u32, u64)>>,
    totals: Vec<(u64, u64)>,
}

/// Incremental builder for [`CountSummary`].
#[derive(Debug, Clone)]
pub struct CountSummaryBuilder {
    dim: usize,
    members: u64,
    categories: Vec<Vec<u64>>,
    totals: Vec<u64>,
}

impl CountSummaryBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            members: 0,
            categories: vec![Vec::new(); dim],
            totals: Vec::new(),
        }
    }

    /// Add one member. The caller guarantees `counts.len() == dim`.
    pub fn add(&mut self, counts: &CountVector) {
        debug_assert_eq!(counts.len(), self.dim);
        self.members += 1;
        for (table, &c) in self.categories.iter_mut().zip(counts.counts()) {
            if c > 0 {
                bump(table, c as usize);
            }
        }
        if counts.total() > 0 {
            bump(&mut self.totals, counts.total() as usize);
        }
    }

    pub fn merge(mut self, other: CountSummaryBuilder) -> Self {
        self.members += other.members;
        for (mine, theirs) in self.categories.iter_mut().zip(other.categories) {
            merge_tables(mine, &theirs);
        }
        merge_tables(&mut self.totals, &other.totals);
        self
    }

    pub fn finish(self) -> CountSummary {
        let compress = |table: Vec<u64>| {
            table
                .into_iter()
                .enumerate()
                .filter(|&(_, m)| m > 0)
                .map(|(c, m)| (c, m))
                .collect::<Vec<_>>()
        };
        CountSummary {
            dim: self.dim,
            members: self.members,
            categories: self
                .categories
                .into_iter()
                .map(|t| {
                    compress(t)
                        .into_iter()
                        .map(|(c, m)| (c as u32, m))
                        .collect()
                })
                .collect(),
            totals: compress(self.totals)
                .into_iter()
                .map(|(n, m)| (n as u64, m))
                .collect(),
        }
    }
}

fn bump(table: &mut Vec<u64>, index: usize) {
    if table.len() <= index {
        table.resize(index + 1, 0);
    }
    table[index] += 1;
}

fn merge_tables(into: &mut Vec<u64>, from: &[u64]) {
    if into.len() < from.len() {
        into.resize(from.len(), 0);
    }
    for (a, b) in into.iter_mut().zip(from) {
        *a += b;
    }
}

/// Result of a single fixed-point application.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointStep {
    pub params: DirichletParams,
    /// True when the members carry no observations and `a` was returned as is.
    pub stalled: bool,
}

/// Stopping rule for the inner hyperparameter loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointLimits {
    pub max_iters: usize,
    /// Stop once the largest relative change of any component falls below this.
    pub rel_tol: f64,
    pub floor: f64,
}

impl Default for FixedPointLimits {
    fn default() -> Self {
        Self {
            max_iters: 200,
            rel_tol: 1e-6,
            floor: CONCENTRATION_FLOOR,
        }
    }
}

/// Outcome of iterating the fixed-point update.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointFit {
    pub params: DirichletParams,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stalled: bool,
}

const MAX_STEP_HALVINGS: usize = 12;

impl CountSummary {
    pub fn from_counts<'a, I>(dim: usize, counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a CountVector>,
    {
        let mut builder = CountSummaryBuilder::new(dim);
        for c in counts {
            check_dim(dim, c.len())?;
            builder.add(c);
        }
        Ok(builder.finish())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn members(&self) -> u64 {
        self.members
    }

    /// True when no member has a single observation.
    pub fn is_uninformative(&self) -> bool {
        self.totals.is_empty()
    }

    /// `Σ_i dirmult_log_marginal(counts_i, a)` over the summarized members.
    pub fn log_likelihood(&self, a: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.dim);
        let big_a: f64 = a.iter().sum();
        let lg_big_a = ln_gamma(big_a);
        let mut acc = 0.0;
        for &(n, mult) in &self.totals {
            acc += mult as f64 * (lg_big_a - ln_gamma(n as f64 + big_a));
        }
        for (table, &al) in self.categories.iter().zip(a) {
            if table.is_empty() {
                continue;
            }
            let lg_a = ln_gamma(al);
            for &(c, mult) in table {
                acc += mult as f64 * (ln_gamma(f64::from(c) + al) - lg_a);
            }
        }
        acc
    }

    /// One application of the multiplicative update
    /// `a_l ← a_l · [Σ_i c_il / (c_il − 1 + a_l)] / [Σ_i n_i / (n_i − 1 + A)]`,
    /// followed by the concentration floor.
    pub fn fixed_point_step(&self, a: &DirichletParams, floor: f64) -> Result<FixedPointStep> {
        check_dim(self.dim, a.len())?;
        let big_a = a.total();
        let denominator: f64 = self
            .totals
            .iter()
            .map(|&(n, mult)| mult as f64 * n as f64 / (n as f64 - 1.0 + big_a))
            .sum();
        if denominator <= 0.0 || !denominator.is_finite() {
            return Ok(FixedPointStep {
                params: a.clone(),
                stalled: true,
            });
        }
        let params = self
            .categories
            .iter()
            .zip(a.as_slice())
            .map(|(table, &al)| {
                let numerator: f64 = table
                    .iter()
                    .map(|&(c, mult)| {
                        let c = f64::from(c);
                        mult as f64 * c / (c - 1.0 + al)
                    })
                    .sum();
                (al * numerator / denominator).max(floor)
            })
            .collect();
        Ok(FixedPointStep {
            params: DirichletParams(params),
            stalled: false,
        })
    }

    /// Iterate the fixed-point update from `init` until the largest relative
    /// change drops below `limits.rel_tol` or `limits.max_iters` is reached.
    ///
    /// Each accepted iterate never lowers the likelihood. When a full step
    /// would lower it (the update's fixed point sits slightly off the exact
    /// maximum), the step is shortened geometrically in log space; if no
    /// shortened step helps, iteration stops at the current point.
    pub fn fit(&self, init: &DirichletParams, limits: &FixedPointLimits) -> Result<FixedPointFit> {
        check_dim(self.dim, init.len())?;
        let mut a = init.clone();
        let mut ll = self.log_likelihood(a.as_slice());
        let mut iterations = 0;
        let mut converged = false;
        let mut stalled = false;
        let mut candidate = vec![0.0; self.dim];
        while iterations < limits.max_iters {
            let step = self.fixed_point_step(&a, limits.floor)?;
            if step.stalled {
                stalled = true;
                break;
            }
            iterations += 1;
            let mut fraction = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_STEP_HALVINGS {
                for ((slot, &old), &new) in candidate
                    .iter_mut()
                    .zip(a.as_slice())
                    .zip(step.params.as_slice())
                {
                    *slot = if fraction == 1.0 {
                        new
                    } else {
                        (old * (new / old).powf(fraction)).max(limits.floor)
                    };
                }
                let cand_ll = self.log_likelihood(&candidate);
                if cand_ll >= ll {
                    accepted = Some(cand_ll);
                    break;
                }
                fraction *= 0.5;
            }
            let Some(cand_ll) = accepted else {
                converged = true;
                break;
            };
            let rel_change = candidate
                .iter()
                .zip(a.as_slice())
                .map(|(n, o)| ((n - o) / o).abs())
                .fold(0.0, f64::max);
            a.0.copy_from_slice(&candidate);
            ll = cand_ll;
            if rel_change < limits.rel_tol {
                converged = true;
                break;
            }
        }
        Ok(FixedPointFit {
            params: a,
            log_likelihood: ll,
            iterations,
            converged,
            stalled,
        })
    }
}

/// One fixed-point application over `member_counts`, with the default
/// concentration floor.
pub fn fixed_point_update(
    a: &DirichletParams,
    member_counts: &[CountVector],
) -> Result<FixedPointStep> {
    if member_counts.is_empty() {
        return Err(BirdError::InvalidArgument(
            "fixed-point update needs at least one member".into(),
        ));
    }
    CountSummary::from_counts(a.len(), member_counts)?.fixed_point_step(a, CONCENTRATION_FLOOR)
}

/// Dirichlet-multinomial maximum likelihood by iterated fixed-point updates.
pub fn fit_dirichlet_multinomial(
    init: &DirichletParams,
    member_counts: &[CountVector],
    limits: &FixedPointLimits,
) -> Result<FixedPointFit> {
    CountSummary::from_counts(init.len(), member_counts)?.fit(init, limits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dp(v: &[f64]) -> DirichletParams {
        DirichletParams::new(v.to_vec()).unwrap()
    }

    fn cv(v: &[u32]) -> CountVector {
        CountVector::new(v.to_vec())
    }

    /// Tanh-sinh quadrature of `f(t, 1 - t)` over t in (0, 1). Both
    /// coordinates are formed without cancellation so endpoint singularities
    /// such as t^-1/2 stay integrable.
    fn tanh_sinh_unit(f: impl Fn(f64, f64) -> f64) -> f64 {
        let h = 1.0 / 64.0;
        let half_pi = std::f64::consts::FRAC_PI_2;
        let mut sum = 0.0;
        for k in -400i32..=400 {
            let t = f64::from(k) * h;
            let u = half_pi * t.sinh();
            let w = half_pi * t.cosh() / u.cosh().powi(2);
            let near_end = 1.0 / (1.0 + (2.0 * u.abs()).exp());
            if near_end <= 0.0 || w == 0.0 {
                continue;
            }
            let (x, y) = if u < 0.0 {
                (near_end, 1.0 - near_end)
            } else {
                (1.0 - near_end, near_end)
            };
            sum += 0.5 * w * f(x, y);
        }
        sum * h
    }

    fn density_on_segment(a: &DirichletParams) -> impl Fn(f64, f64) -> f64 + '_ {
        move |x, y| {
            dirichlet_log_pdf_with_normalizer(&[x, y], a.as_slice(), dirichlet_log_normalizer(a))
                .unwrap()
                .exp()
        }
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        let big = log_sum_exp(&[1234.0, 1232.0]);
        assert!((big - (1232.0 + (2f64.exp() + 1.0).ln())).abs() < 1e-12);
        let small = log_sum_exp(&[0.5, 2.0]);
        assert!((small - (0.5f64.exp() + 2f64.exp()).ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 3.0]), 3.0);
    }

    #[test]
    fn params_validation() {
        assert!(DirichletParams::new(vec![1.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, 0.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, -2.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, f64::NAN]).is_err());
        assert!(DirichletParams::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(SimplexPoint::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexPoint::new(vec![-0.1, 1.1]).is_err());
        let json = serde_json::to_string(&dp(&[0.5, 2.0])).unwrap();
        assert_eq!(json, "[0.5,2.0]");
        assert!(serde_json::from_str::<DirichletParams>("[0.5,-1.0]").is_err());
    }

    #[test]
    fn log_pdf_uniform_cases() {
        let third = 1.0 / 3.0;
        let p = SimplexPoint::new(vec![third, third, third]).unwrap();
        let v = dirichlet_log_pdf(&p, &dp(&[1.0, 1.0, 1.0])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);

        let p = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let v = dirichlet_log_pdf(&p, &dp(&[1.0, 1.0])).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn log_pdf_beta_2_3() {
        // Γ(5)/(Γ(2)Γ(3)) · 0.2 · 0.8² = 12 · 0.128
        let p = SimplexPoint::new(vec![0.2, 0.8]).unwrap();
        let a = dp(&[2.0, 3.0]);
        let v = dirichlet_log_pdf(&p, &a).unwrap();
        assert!((v - (12.0f64 * 0.128).ln()).abs() < 1e-12);
        let mass = tanh_sinh_unit(density_on_segment(&a));
        assert!((mass - 1.0).abs() < 1e-8, "mass {mass}");
    }

    #[test]
    fn log_pdf_boundary_rules() {
        let p = SimplexPoint::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(
            dirichlet_log_pdf(&p, &dp(&[2.0, 1.0])).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(dirichlet_log_pdf(&p, &dp(&[1.0, 1.0])).unwrap().is_finite());
        assert!(matches!(
            dirichlet_log_pdf(&p, &dp(&[0.5, 1.0])),
            Err(BirdError::DensityDiverges { index: 0, .. })
        ));
        let p3 = SimplexPoint::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(
            dirichlet_log_pdf(&p3, &dp(&[1.0, 1.0])),
            Err(BirdError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn log_pdf_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let a = dp(&[rng.random_range(0.5..5.0), rng.random_range(0.5..5.0)]);
            let mass = tanh_sinh_unit(density_on_segment(&a));
            assert!((mass - 1.0).abs() < 1e-4, "a={a:?} mass={mass}");
        }
    }

    #[test]
    fn marginal_examples() {
        let v = dirmult_log_marginal(&cv(&[1, 0]), &dp(&[2.0, 2.0])).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
        let v = dirmult_log_marginal(&cv(&[0, 0, 0]), &dp(&[0.3, 2.0, 7.0])).unwrap();
        assert_eq!(v, 0.0);
        let v = dirmult_log_marginal(&cv(&[2, 0]), &dp(&[1.0, 1.0])).unwrap();
        assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(matches!(
            dirmult_log_marginal(&cv(&[1, 0, 0]), &dp(&[1.0, 1.0])),
            Err(BirdError::DimensionMismatch { .. })
        ));
    }

    /// Pólya urn sequence probability by direct simulation of the urn.
    fn urn_sequence_prob(seq: &[usize], a: &[f64]) -> f64 {
        let mut weights = a.to_vec();
        let mut prob = 1.0;
        for &x in seq {
            let total: f64 = weights.iter().sum();
            prob *= weights[x] / total;
            weights[x] += 1.0;
        }
        prob
    }

    #[test]
    fn marginal_matches_urn_and_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..6.0)).collect();
            let params = dp(&a);
            for n in 0..=4u32 {
                let mut total = 0.0;
                for code in 0..3usize.pow(n) {
                    let mut seq = Vec::new();
                    let mut c = code;
                    for _ in 0..n {
                        seq.push(c % 3);
                        c /= 3;
                    }
                    let mut counts = CountVector::zeros(3);
                    seq.iter().for_each(|&x| counts.increment(x));
                    let p = dirmult_log_marginal(&counts, &params).unwrap().exp();
                    assert!((p - urn_sequence_prob(&seq, &a)).abs() < 1e-12);
                    total += p;
                }
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn marginal_chain_rule(
            a in prop::collection::vec(0.05f64..8.0, 2..6),
            c1 in prop::collection::vec(0u32..6, 6),
            c2 in prop::collection::vec(0u32..6, 6),
        ) {
            let s = a.len();
            let params = dp(&a);
            let first = cv(&c1[..s]);
            let second = cv(&c2[..s]);
            let joint = dirmult_log_marginal(&first.combined(&second).unwrap(), &params).unwrap();
            let split = dirmult_log_marginal(&first, &params).unwrap()
                + dirmult_log_marginal(&second, &params.posterior(&first).unwrap()).unwrap();
            prop_assert!((joint - split).abs() < 1e-9);
        }

        #[test]
        fn summary_likelihood_matches_sum(
            a in prop::collection::vec(0.01f64..10.0, 3),
            rows in prop::collection::vec(prop::collection::vec(0u32..40, 3), 1..30),
        ) {
            let counts: Vec<CountVector> = rows.into_iter().map(CountVector::new).collect();
            let summary = CountSummary::from_counts(3, &counts).unwrap();
            let direct: f64 = counts.iter().map(|c| dirmult_log_marginal(c, &dp(&a)).unwrap()).sum();
            prop_assert!((summary.log_likelihood(&a) - direct).abs() < 1e-8 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn sampler_concentrates_at_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_dirichlet(&dp(&[1e6, 1e6]), &mut rng);
        assert!((p.as_slice()[0] - 0.5).abs() < 0.01);
        assert!((p.as_slice()[1] - 0.5).abs() < 0.01);
    }

    #[test]
    fn sampler_is_deterministic() {
        let a = dp(&[1.0, 2.0, 3.0]);
        let x = sample_dirichlet(&a, &mut ChaCha8Rng::seed_from_u64(99));
        let y = sample_dirichlet(&a, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(x, y);
    }

    #[test]
    fn sampler_mean_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sampler = DirichletSampler::new(&dp(&[1.0, 1.0]));
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| sampler.sample(&mut rng).as_slice()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");

        // small shapes go through the log-space path
        let a = dp(&[0.3, 0.7, 2.0]);
        let sampler = DirichletSampler::new(&a);
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let p = sampler.sample(&mut rng);
            let sum: f64 = p.as_slice().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.as_slice().iter().all(|&x| x >= SAMPLE_FLOOR));
            for (s, x) in acc.iter_mut().zip(p.as_slice()) {
                *s += x;
            }
        }
        for (s, m) in acc.iter().zip(a.mean()) {
            assert!((s / n as f64 - m).abs() < 0.02);
        }
    }

    #[test]
    fn sampler_stays_interior_for_tiny_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sampler = DirichletSampler::new(&dp(&[1e-6, 1e-6, 1e-6]));
        for _ in 0..100 {
            let p = sampler.sample(&mut rng);
            assert!(p.as_slice().iter().all(|&x| x > 0.0 && x.is_finite()));
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fixed_point_stalls_without_data() {
        let a = dp(&[1.5, 2.5]);
        let step = fixed_point_update(&a, &[cv(&[0, 0]), cv(&[0, 0])]).unwrap();
        assert!(step.stalled);
        assert_eq!(step.params, a);
        assert!(fixed_point_update(&a, &[]).is_err());
        assert!(fixed_point_update(&a, &[cv(&[1, 0, 0])]).is_err());
    }

    #[test]
    fn fixed_point_hand_example() {
        // numerator (1/(1-1+1), 0) = (1, 0); denominator 1/(1-1+2) = 0.5
        let step = fixed_point_update(&dp(&[1.0, 1.0]), &[cv(&[1, 0])]).unwrap();
        assert!(!step.stalled);
        assert_eq!(step.params.as_slice(), &[2.0, CONCENTRATION_FLOOR]);
    }

    #[test]
    fn fixed_point_single_step_does_not_decrease_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let s = rng.random_range(2..6);
            let truth = dp(&(0..s)
                .map(|_| rng.random_range(0.2..6.0))
                .collect::<Vec<_>>());
            let sampler = DirichletSampler::new(&truth);
            let counts: Vec<CountVector> = (0..rng.random_range(5..200))
                .map(|_| {
                    let p = sampler.sample(&mut rng);
                    let mut c = CountVector::zeros(s);
                    for _ in 0..rng.random_range(0..30) {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut cat = s - 1;
                        for (l, &pl) in p.as_slice().iter().enumerate() {
                            acc += pl;
                            if u < acc {
                                cat = l;
                                break;
                            }
                        }
                        c.increment(cat);
                    }
                    c
                })
                .collect();
            let start = dp(&(0..s)
                .map(|_| rng.random_range(0.1..10.0))
                .collect::<Vec<_>>());
            let summary = CountSummary::from_counts(s, &counts).unwrap();
            let step = summary.fixed_point_step(&start, CONCENTRATION_FLOOR).unwrap();
            if step.stalled {
                continue;
            }
            let before = summary.log_likelihood(start.as_slice());
            let after = summary.log_likelihood(step.params.as_slice());
            assert!(after >= before - 1e-7, "{before} -> {after}");
        }
    }

    #[test]
    fn guarded_fit_is_monotone_and_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = dp(&[9.0, 1.0, 1.0, 1.0, 1.0]);
        let sampler = DirichletSampler::new(&truth);
        let counts: Vec<CountVector> = (0..3000)
            .map(|_| {
                let p = sampler.sample(&mut rng);
                let mut c = CountVector::zeros(5);
                for _ in 0..30 {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut cat = 4;
                    for (l, &pl) in p.as_slice().iter().enumerate() {
                        acc += pl;
                        if u < acc {
                            cat = l;
                            break;
                        }
                    }
                    c.increment(cat);
                }
                c
            })
            .collect();
        let summary = CountSummary::from_counts(5, &counts).unwrap();
        let limits = FixedPointLimits::default();
        let mut a = DirichletParams::ones(5);
        let mut ll = summary.log_likelihood(a.as_slice());
        // one iteration at a time: every accepted iterate is at least as likely
        for _ in 0..300 {
            let fit = summary
                .fit(&a, &FixedPointLimits { max_iters: 1, ..limits })
                .unwrap();
            assert!(fit.log_likelihood >= ll);
            ll = fit.log_likelihood;
            a = fit.params;
        }
        let fit = summary.fit(&DirichletParams::ones(5), &limits).unwrap();
        assert!(fit.converged);
        for (got, want) in fit.params.as_slice().iter().zip(truth.as_slice()) {
            assert!(((got - want) / want).abs() < 0.15, "{got} vs {want}");
        }
    }

    #[test]
    fn unseen_category_collapses_to_floor() {
        let counts = vec![cv(&[3, 1, 0]), cv(&[2, 2, 0]), cv(&[5, 0, 0])];
        let fit = fit_dirichlet_multinomial(
            &DirichletParams::ones(3),
            &counts,
            &FixedPointLimits::default(),
        )
        .unwrap();
        assert!(fit.params.as_slice()[2] < 1e-3);
        assert!(fit.params.as_slice().iter().all(|&a| a >= CONCENTRATION_FLOOR));
    }
}
