//! Hard-assignment hill climbing for the Dirichlet-multinomial user mixture.
//!
//! Each user belongs to one of `K` clusters; a cluster carries a mixing
//! weight and a pair of Dirichlet priors, one over the user's star
//! distribution and one over their gap-bucket distribution. Fitting
//! alternates four coordinate-ascent moves until the assignments settle:
//!
//! 1. mixing weights from cluster sizes,
//! 2. a trial reseed of any empty cluster (kept only if the joint
//!    likelihood does not drop),
//! 3. per-cluster fixed-point updates of both priors,
//! 4. per-user reassignment to `argmax_k π_k P(x_i | α_k) P(Δ_i | β_k)`.
//!
//! Every move is recorded in a [`FitTrace`]; none of them lowers the joint
//! log-likelihood.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BirdError, Result};
use crate::ingest::UserHistogram;
use crate::math::{
    dirmult_log_marginal_unchecked, ln_gamma, CountSummary, CountSummaryBuilder, CountVector,
    DirichletParams, FixedPointLimits,
};
use crate::seed::{self, Domain};

/// Outer-loop limits and restart count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitLimits {
    pub max_iters: usize,
    /// Absolute log-likelihood improvement below which a sweep with no
    /// reassignments counts as converged.
    pub tol: f64,
    pub restarts: usize,
    pub fixed_point: FixedPointLimits,
}

impl Default for FitLimits {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-5,
            restarts: 5,
            fixed_point: FixedPointLimits::default(),
        }
    }
}

/// Mixing weight and priors of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub pi: f64,
    pub alpha: DirichletParams,
    pub beta: DirichletParams,
}

/// A fitted mixture.
///
/// Assignments are 0-based in memory and 1-based in the JSON form. Per-user
/// posteriors are not stored; [`BirdModel::posterior_rating`] and
/// [`BirdModel::posterior_temporal`] derive them from a histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelRepr", try_from = "ModelRepr")]
pub struct BirdModel {
    pub clusters: Vec<ClusterParams>,
    pub user_ids: Vec<String>,
    pub assignments: Vec<usize>,
    pub total_log_likelihood: f64,
    pub bic: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    #[serde(rename = "K")]
    k: usize,
    clusters: Vec<ClusterParams>,
    assignments: BTreeMap<String, usize>,
    bic: f64,
    log_likelihood: f64,
}

impl From<BirdModel> for ModelRepr {
    fn from(m: BirdModel) -> Self {
        ModelRepr {
            k: m.clusters.len(),
            assignments: m
                .user_ids
                .into_iter()
                .zip(m.assignments.iter().map(|z| z + 1))
                .collect(),
            clusters: m.clusters,
            bic: m.bic,
            log_likelihood: m.total_log_likelihood,
        }
    }
}

impl TryFrom<ModelRepr> for BirdModel {
    type Error = BirdError;

    fn try_from(r: ModelRepr) -> Result<Self> {
        if r.k == 0 || r.k != r.clusters.len() {
            return Err(BirdError::InvalidArgument(format!(
                "K = {} but {} clusters listed",
                r.k,
                r.clusters.len()
            )));
        }
        let (s, d) = (r.clusters[0].alpha.len(), r.clusters[0].beta.len());
        if r.clusters.iter().any(|c| c.alpha.len() != s || c.beta.len() != d) {
            return Err(BirdError::InvalidArgument(
                "clusters disagree on dimensions".into(),
            ));
        }
        let pi_sum: f64 = r.clusters.iter().map(|c| c.pi).sum();
        if r.clusters.iter().any(|c| !(0.0..=1.0).contains(&c.pi)) || (pi_sum - 1.0).abs() > 1e-9 {
            return Err(BirdError::InvalidArgument(format!(
                "mixing weights sum to {pi_sum}"
            )));
        }
        let mut user_ids = Vec::with_capacity(r.assignments.len());
        let mut assignments = Vec::with_capacity(r.assignments.len());
        for (user, z) in r.assignments {
            if z == 0 || z > r.k {
                return Err(BirdError::InvalidArgument(format!(
                    "user {user} assigned to cluster {z} outside 1..={}",
                    r.k
                )));
            }
            user_ids.push(user);
            assignments.push(z - 1);
        }
        Ok(BirdModel {
            clusters: r.clusters,
            user_ids,
            assignments,
            total_log_likelihood: r.log_likelihood,
            bic: r.bic,
        })
    }
}

/// Free parameters: `K − 1` mixing weights plus `K (s + Δ_max)` concentrations.
pub fn parameter_count(k: usize, stars: usize, buckets: usize) -> usize {
    (k - 1) + k * (stars + buckets)
}

/// `−2 ℓ + ρ ln m`.
pub fn bic(log_likelihood: f64, k: usize, stars: usize, buckets: usize, users: usize) -> f64 {
    -2.0 * log_likelihood + parameter_count(k, stars, buckets) as f64 * (users as f64).ln()
}

impl BirdModel {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn rating_dim(&self) -> usize {
        self.clusters[0].alpha.len()
    }

    pub fn temporal_dim(&self) -> usize {
        self.clusters[0].beta.len()
    }

    fn check_histogram(&self, hist: &UserHistogram) -> Result<()> {
        for (expected, got) in [
            (self.rating_dim(), hist.rating_counts.len()),
            (self.temporal_dim(), hist.temporal_counts.len()),
        ] {
            if expected != got {
                return Err(BirdError::DimensionMismatch { expected, got });
            }
        }
        Ok(())
    }

    /// `ln π_k + ln P(x | α_k) + ln P(Δ | β_k)`.
    pub fn user_log_score(&self, hist: &UserHistogram, k: usize) -> f64 {
        let c = &self.clusters[k];
        log_weight(c.pi)
            + dirmult_log_marginal_unchecked(&hist.rating_counts, c.alpha.as_slice())
            + dirmult_log_marginal_unchecked(&hist.temporal_counts, c.beta.as_slice())
    }

    /// Most likely cluster for a histogram; the lowest index wins ties.
    pub fn assign(&self, hist: &UserHistogram) -> Result<usize> {
        self.check_histogram(hist)?;
        Ok(argmax((0..self.k()).map(|k| self.user_log_score(hist, k))).0)
    }

    /// Cluster of each histogram: the stored assignment when the user was
    /// part of the fit, otherwise [`BirdModel::assign`].
    pub fn resolve_assignments(&self, hists: &[UserHistogram]) -> Result<Vec<usize>> {
        let aligned = self.user_ids.len() == hists.len()
            && self.user_ids.iter().zip(hists).all(|(u, h)| *u == h.user_id);
        if aligned {
            for h in hists {
                self.check_histogram(h)?;
            }
            return Ok(self.assignments.clone());
        }
        let lookup: HashMap<&str, usize> = self
            .user_ids
            .iter()
            .map(String::as_str)
            .zip(self.assignments.iter().copied())
            .collect();
        hists
            .par_iter()
            .map(|h| match lookup.get(h.user_id.as_str()) {
                Some(&z) => self.check_histogram(h).map(|_| z),
                None => self.assign(h),
            })
            .collect()
    }

    /// Posterior over the user's star distribution: `α_z + n^x`.
    pub fn posterior_rating(&self, cluster: usize, hist: &UserHistogram) -> Result<DirichletParams> {
        self.clusters[cluster].alpha.posterior(&hist.rating_counts)
    }

    /// Posterior over the user's gap distribution: `β_z + n^Δ`.
    pub fn posterior_temporal(
        &self,
        cluster: usize,
        hist: &UserHistogram,
    ) -> Result<DirichletParams> {
        self.clusters[cluster].beta.posterior(&hist.temporal_counts)
    }
}

/// Joint log-likelihood `Σ_i [ln π_{z_i} + ln P(x_i | α_{z_i}) + ln P(Δ_i | β_{z_i})]`.
pub fn log_joint(model: &BirdModel, hists: &[UserHistogram]) -> Result<f64> {
    let z = model.resolve_assignments(hists)?;
    Ok(hists
        .iter()
        .zip(&z)
        .map(|(h, &k)| model.user_log_score(h, k))
        .sum())
}

fn log_weight(pi: f64) -> f64 {
    if pi > 0.0 {
        pi.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn argmax(scores: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, s) in scores.enumerate() {
        if s > best.1 || (k == 0 && s == f64::NEG_INFINITY) {
            best = (k, s);
        }
    }
    best
}

/// Which coordinate-ascent move produced a trace entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitStep {
    Init,
    Weights,
    Reseed { cluster: usize },
    Alpha { cluster: usize },
    Beta { cluster: usize },
    Assign { changed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub step: FitStep,
    pub log_joint: f64,
}

/// Joint log-likelihood after every move of one restart.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitTrace {
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
    pub iterations: usize,
}

impl FitTrace {
    /// Largest drop between consecutive entries (0 when monotone).
    pub fn worst_decrease(&self) -> f64 {
        self.entries
            .windows(2)
            .map(|w| w[0].log_joint - w[1].log_joint)
            .fold(0.0, f64::max)
    }
}

/// A fit together with the per-restart traces.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: BirdModel,
    pub traces: Vec<FitTrace>,
    /// Index of the restart that produced `model`.
    pub best_restart: usize,
}

/// Precomputed `ln Γ(c + a) − ln Γ(a)` and `ln Γ(A) − ln Γ(n + A)` for
/// small counts, so reassignment touches `ln Γ` only for rare large counts.
struct MarginalTable {
    per_category: Vec<Vec<f64>>,
    per_total: Vec<f64>,
    a: Vec<f64>,
    lg_a: Vec<f64>,
    big_a: f64,
    lg_big_a: f64,
}

impl MarginalTable {
    fn new(a: &DirichletParams, cap: usize) -> Self {
        let a = a.as_slice().to_vec();
        let lg_a: Vec<f64> = a.iter().map(|&x| ln_gamma(x)).collect();
        let big_a: f64 = a.iter().sum();
        let lg_big_a = ln_gamma(big_a);
        let per_category = a
            .iter()
            .zip(&lg_a)
            .map(|(&al, &lg)| (0..=cap).map(|c| ln_gamma(c as f64 + al) - lg).collect())
            .collect();
        let per_total = (0..=cap)
            .map(|n| lg_big_a - ln_gamma(n as f64 + big_a))
            .collect();
        Self {
            per_category,
            per_total,
            a,
            lg_a,
            big_a,
            lg_big_a,
        }
    }

    fn log_marginal(&self, counts: &CountVector) -> f64 {
        let n = counts.total() as usize;
        if n == 0 {
            return 0.0;
        }
        let mut acc = match self.per_total.get(n) {
            Some(&v) => v,
            None => self.lg_big_a - ln_gamma(n as f64 + self.big_a),
        };
        for (l, &c) in counts.counts().iter().enumerate() {
            if c == 0 {
                continue;
            }
            acc += match self.per_category[l].get(c as usize) {
                Some(&v) => v,
                None => ln_gamma(f64::from(c) + self.a[l]) - self.lg_a[l],
            };
        }
        acc
    }
}

struct Fitter<'a> {
    hists: &'a [UserHistogram],
    k: usize,
    stars: usize,
    buckets: usize,
    limits: FitLimits,
    table_cap: usize,
}

/// Mutable state of one restart.
struct State {
    z: Vec<usize>,
    sizes: Vec<u64>,
    pi: Vec<f64>,
    alpha: Vec<DirichletParams>,
    beta: Vec<DirichletParams>,
    rating_summaries: Vec<CountSummary>,
    temporal_summaries: Vec<CountSummary>,
    ll_rating: Vec<f64>,
    ll_temporal: Vec<f64>,
}

impl State {
    fn log_joint(&self) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.sizes.len() {
            if self.sizes[k] > 0 {
                acc += self.sizes[k] as f64 * log_weight(self.pi[k]);
            }
            acc += self.ll_rating[k] + self.ll_temporal[k];
        }
        acc
    }
}

impl<'a> Fitter<'a> {
    fn summaries(&self, z: &[usize]) -> (Vec<CountSummary>, Vec<CountSummary>, Vec<u64>) {
        let empty = || {
            (
                vec![CountSummaryBuilder::new(self.stars); self.k],
                vec![CountSummaryBuilder::new(self.buckets); self.k],
            )
        };
        let (rating, temporal) = self
            .hists
            .par_iter()
            .zip(z.par_iter())
            .fold(empty, |(mut r, mut t), (h, &k)| {
                r[k].add(&h.rating_counts);
                t[k].add(&h.temporal_counts);
                (r, t)
            })
            .reduce(empty, |(r1, t1), (r2, t2)| {
                (
                    r1.into_iter().zip(r2).map(|(a, b)| a.merge(b)).collect(),
                    t1.into_iter().zip(t2).map(|(a, b)| a.merge(b)).collect(),
                )
            });
        let rating: Vec<CountSummary> = rating.into_iter().map(|b| b.finish()).collect();
        let temporal: Vec<CountSummary> = temporal.into_iter().map(|b| b.finish()).collect();
        let sizes = rating.iter().map(|s| s.members()).collect();
        (rating, temporal, sizes)
    }

    fn refresh_likelihoods(&self, st: &mut State) {
        for k in 0..self.k {
            st.ll_rating[k] = st.rating_summaries[k].log_likelihood(st.alpha[k].as_slice());
            st.ll_temporal[k] = st.temporal_summaries[k].log_likelihood(st.beta[k].as_slice());
        }
    }

    fn set_assignments(&self, st: &mut State, z: Vec<usize>) {
        let (r, t, sizes) = self.summaries(&z);
        st.z = z;
        st.rating_summaries = r;
        st.temporal_summaries = t;
        st.sizes = sizes;
        self.refresh_likelihoods(st);
    }

    fn update_weights(&self, st: &mut State) {
        let m = self.hists.len() as f64;
        st.pi = st.sizes.iter().map(|&n| n as f64 / m).collect();
    }

    fn init(&self, restart_seed: u64) -> State {
        let z: Vec<usize> = (0..self.hists.len())
            .into_par_iter()
            .map(|i| seed::stream(restart_seed, Domain::ClusterInit, i as u64).random_range(0..self.k))
            .collect();
        let mut st = State {
            z: Vec::new(),
            sizes: Vec::new(),
            pi: Vec::new(),
            alpha: vec![DirichletParams::ones(self.stars); self.k],
            beta: vec![DirichletParams::ones(self.buckets); self.k],
            rating_summaries: Vec::new(),
            temporal_summaries: Vec::new(),
            ll_rating: vec![0.0; self.k],
            ll_temporal: vec![0.0; self.k],
        };
        self.set_assignments(&mut st, z);
        self.update_weights(&mut st);
        st
    }

    fn tables(&self, st: &State) -> Vec<(MarginalTable, MarginalTable)> {
        (0..self.k)
            .map(|k| {
                (
                    MarginalTable::new(&st.alpha[k], self.table_cap),
                    MarginalTable::new(&st.beta[k], self.table_cap),
                )
            })
            .collect()
    }

    fn fit_priors(&self, st: &mut State, k: usize) -> Result<()> {
        let fp = &self.limits.fixed_point;
        let a = st.rating_summaries[k].fit(&st.alpha[k], fp)?;
        st.alpha[k] = a.params;
        st.ll_rating[k] = a.log_likelihood;
        Ok(())
    }

    fn fit_temporal_prior(&self, st: &mut State, k: usize) -> Result<()> {
        let fp = &self.limits.fixed_point;
        let b = st.temporal_summaries[k].fit(&st.beta[k], fp)?;
        st.beta[k] = b.params;
        st.ll_temporal[k] = b.log_likelihood;
        Ok(())
    }

    /// Try to give each empty cluster the user that the current model
    /// explains worst. A move is kept only when, after refitting the new
    /// cluster's priors and the mixing weights, the joint likelihood has not
    /// decreased; otherwise the cluster stays empty with zero weight.
    fn reseed_empty(&self, st: &mut State, trace: &mut FitTrace, iteration: usize) -> Result<()> {
        let empties: Vec<usize> = (0..self.k).filter(|&k| st.sizes[k] == 0).collect();
        if empties.is_empty() {
            return Ok(());
        }
        let tables = self.tables(st);
        let mut fit_ll: Vec<(f64, usize)> = self
            .hists
            .par_iter()
            .zip(st.z.par_iter())
            .enumerate()
            .map(|(i, (h, &k))| {
                let (tx, td) = &tables[k];
                (
                    tx.log_marginal(&h.rating_counts) + td.log_marginal(&h.temporal_counts),
                    i,
                )
            })
            .collect();
        fit_ll.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut candidates = fit_ll.into_iter().map(|(_, i)| i);
        for k in empties {
            let donor_ok = |i: usize| st.sizes[st.z[i]] >= 2;
            let Some(user) = candidates.by_ref().find(|&i| donor_ok(i)) else {
                break;
            };
            let before = st.log_joint();
            let saved = (
                st.z.clone(),
                st.alpha[k].clone(),
                st.beta[k].clone(),
                st.pi.clone(),
            );
            let mut z = st.z.clone();
            z[user] = k;
            st.alpha[k] = DirichletParams::ones(self.stars);
            st.beta[k] = DirichletParams::ones(self.buckets);
            self.set_assignments(st, z);
            self.update_weights(st);
            self.fit_priors(st, k)?;
            self.fit_temporal_prior(st, k)?;
            let after = st.log_joint();
            if after >= before {
                trace.entries.push(TraceEntry {
                    iteration,
                    step: FitStep::Reseed { cluster: k },
                    log_joint: after,
                });
            } else {
                let (z, a, b, pi) = saved;
                st.alpha[k] = a;
                st.beta[k] = b;
                self.set_assignments(st, z);
                st.pi = pi;
            }
        }
        Ok(())
    }

    /// Move every user to its best cluster. Returns the number of moves.
    fn reassign(&self, st: &mut State) -> usize {
        let tables = self.tables(st);
        let log_pi: Vec<f64> = st.pi.iter().map(|&p| log_weight(p)).collect();
        let best: Vec<usize> = self
            .hists
            .par_iter()
            .zip(st.z.par_iter())
            .map(|(h, &current)| {
                let scores = tables.iter().zip(&log_pi).map(|((tx, td), lp)| {
                    if *lp == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else {
                        lp + tx.log_marginal(&h.rating_counts) + td.log_marginal(&h.temporal_counts)
                    }
                });
                let (k, score) = argmax(scores);
                if score == f64::NEG_INFINITY {
                    current
                } else {
                    k
                }
            })
            .collect();
        let changed = best.iter().zip(&st.z).filter(|(a, b)| a != b).count();
        if changed > 0 {
            self.set_assignments(st, best);
        }
        changed
    }

    fn adjust_parameters(
        &self,
        st: &mut State,
        trace: &mut FitTrace,
        iteration: usize,
    ) -> Result<()> {
        self.update_weights(st);
        trace.entries.push(TraceEntry {
            iteration,
            step: FitStep::Weights,
            log_joint: st.log_joint(),
        });
        self.reseed_empty(st, trace, iteration)?;
        for k in 0..self.k {
            if st.sizes[k] == 0 {
                continue;
            }
            self.fit_priors(st, k)?;
            trace.entries.push(TraceEntry {
                iteration,
                step: FitStep::Alpha { cluster: k },
                log_joint: st.log_joint(),
            });
            self.fit_temporal_prior(st, k)?;
            trace.entries.push(TraceEntry {
                iteration,
                step: FitStep::Beta { cluster: k },
                log_joint: st.log_joint(),
            });
        }
        Ok(())
    }

    fn run(&self, restart_seed: u64) -> Result<(State, FitTrace)> {
        let mut st = self.init(restart_seed);
        let mut trace = FitTrace::default();
        trace.entries.push(TraceEntry {
            iteration: 0,
            step: FitStep::Init,
            log_joint: st.log_joint(),
        });
        let mut previous = st.log_joint();
        for iteration in 1..=self.limits.max_iters {
            trace.iterations = iteration;
            self.adjust_parameters(&mut st, &mut trace, iteration)?;
            let changed = self.reassign(&mut st);
            let current = st.log_joint();
            trace.entries.push(TraceEntry {
                iteration,
                step: FitStep::Assign { changed },
                log_joint: current,
            });
            if changed == 0 && current - previous < self.limits.tol {
                trace.converged = true;
                break;
            }
            previous = current;
        }
        if !trace.converged {
            // leave weights and priors consistent with the final assignments
            let final_sweep = trace.iterations + 1;
            self.adjust_parameters(&mut st, &mut trace, final_sweep)?;
        }
        Ok((st, trace))
    }

    fn into_model(&self, st: State) -> BirdModel {
        let total_log_likelihood = st.log_joint();
        BirdModel {
            clusters: (0..self.k)
                .map(|k| ClusterParams {
                    pi: st.pi[k],
                    alpha: st.alpha[k].clone(),
                    beta: st.beta[k].clone(),
                })
                .collect(),
            user_ids: self.hists.iter().map(|h| h.user_id.clone()).collect(),
            assignments: st.z,
            total_log_likelihood,
            bic: bic(
                total_log_likelihood,
                self.k,
                self.stars,
                self.buckets,
                self.hists.len(),
            ),
        }
    }
}

fn validate_inputs(hists: &[UserHistogram], k: usize) -> Result<(usize, usize)> {
    if k == 0 {
        return Err(BirdError::InvalidArgument("K must be at least 1".into()));
    }
    if hists.is_empty() || k > hists.len() {
        return Err(BirdError::TooManyClusters {
            k,
            users: hists.len(),
        });
    }
    let stars = hists[0].rating_counts.len();
    let buckets = hists[0].temporal_counts.len();
    if stars < 2 || buckets < 2 {
        return Err(BirdError::InvalidArgument(
            "histograms need at least 2 star levels and 2 buckets".into(),
        ));
    }
    for h in hists {
        if h.rating_counts.len() != stars {
            return Err(BirdError::DimensionMismatch {
                expected: stars,
                got: h.rating_counts.len(),
            });
        }
        if h.temporal_counts.len() != buckets {
            return Err(BirdError::DimensionMismatch {
                expected: buckets,
                got: h.temporal_counts.len(),
            });
        }
    }
    Ok((stars, buckets))
}

/// Fit with `limits.restarts` random restarts and keep the most likely.
pub fn fit_bird_traced(
    hists: &[UserHistogram],
    k: usize,
    seed: u64,
    limits: &FitLimits,
) -> Result<FitOutcome> {
    let (stars, buckets) = validate_inputs(hists, k)?;
    let max_count = hists
        .iter()
        .map(|h| h.n_ratings() as usize)
        .max()
        .unwrap_or(0);
    let fitter = Fitter {
        hists,
        k,
        stars,
        buckets,
        limits: *limits,
        table_cap: max_count.min(256),
    };
    let mut best: Option<(usize, State)> = None;
    let mut traces = Vec::new();
    for restart in 0..limits.restarts.max(1) {
        let restart_seed = seed::derive_seed(
            seed::derive_seed(seed, restart as u64),
            Domain::Restart as u64,
        );
        let (st, trace) = fitter.run(restart_seed)?;
        traces.push(trace);
        let better = match &best {
            None => true,
            Some((_, b)) => st.log_joint() > b.log_joint(),
        };
        if better {
            best = Some((restart, st));
        }
    }
    let (best_restart, st) = best.expect("at least one restart");
    Ok(FitOutcome {
        model: fitter.into_model(st),
        traces,
        best_restart,
    })
}

/// Fit a `K`-cluster mixture.
pub fn fit_bird(
    hists: &[UserHistogram],
    k: usize,
    seed: u64,
    limits: &FitLimits,
) -> Result<BirdModel> {
    fit_bird_traced(hists, k, seed, limits).map(|o| o.model)
}

/// One row of a BIC sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KCandidate {
    pub k: usize,
    pub log_likelihood: f64,
    pub bic: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub model: BirdModel,
    pub candidates: Vec<KCandidate>,
}

/// Fit every `K` in `k_min..=k_max` and keep the lowest BIC (smaller `K` on ties).
pub fn select_k(
    hists: &[UserHistogram],
    k_min: usize,
    k_max: usize,
    seed: u64,
    limits: &FitLimits,
) -> Result<Selection> {
    if k_min == 0 || k_min > k_max {
        return Err(BirdError::InvalidArgument(format!(
            "invalid K range {k_min}..={k_max}"
        )));
    }
    let mut best: Option<BirdModel> = None;
    let mut candidates = Vec::new();
    for k in k_min..=k_max {
        let model = fit_bird(hists, k, seed, limits)?;
        candidates.push(KCandidate {
            k,
            log_likelihood: model.total_log_likelihood,
            bic: model.bic,
        });
        if best.as_ref().map_or(true, |b| model.bic < b.bic) {
            best = Some(model);
        }
    }
    Ok(Selection {
        model: best.expect("non-empty range"),
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::dirmult_log_marginal;

    fn hist(id: &str, x: &[u32], d: &[u32]) -> UserHistogram {
        UserHistogram {
            user_id: id.into(),
            rating_counts: CountVector::new(x.to_vec()),
            temporal_counts: CountVector::new(d.to_vec()),
        }
    }

    fn mixed_population() -> Vec<UserHistogram> {
        let mut out = Vec::new();
        for i in 0..60u32 {
            let (x, d) = if i % 3 == 0 {
                (vec![0, 0, 1, 2, 9 + i % 4], vec![6 + i % 3, 2, 0, 0])
            } else {
                (vec![4 + i % 2, 3, 2, 1, 0], vec![0, 1, 3, 5 + i % 5])
            };
            out.push(hist(&format!("u{i:02}"), &x, &d));
        }
        out
    }

    #[test]
    fn log_joint_hand_example() {
        let model = BirdModel {
            clusters: vec![ClusterParams {
                pi: 1.0,
                alpha: DirichletParams::ones(2),
                beta: DirichletParams::ones(3),
            }],
            user_ids: vec!["a".into()],
            assignments: vec![0],
            total_log_likelihood: 0.0,
            bic: 0.0,
        };
        let v = log_joint(&model, &[hist("a", &[1, 0], &[0, 0, 0])]).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_fit() {
        let hists = mixed_population();
        let model = fit_bird(&hists, 1, 3, &FitLimits::default()).unwrap();
        assert_eq!(model.k(), 1);
        assert_eq!(model.clusters[0].pi, 1.0);
        assert!(model.assignments.iter().all(|&z| z == 0));
        let direct: f64 = hists
            .iter()
            .map(|h| {
                dirmult_log_marginal(&h.rating_counts, &model.clusters[0].alpha).unwrap()
                    + dirmult_log_marginal(&h.temporal_counts, &model.clusters[0].beta).unwrap()
            })
            .sum();
        assert!((model.total_log_likelihood - direct).abs() < 1e-8);
        assert!((log_joint(&model, &hists).unwrap() - direct).abs() < 1e-8);
        assert!(model.total_log_likelihood <= 0.0);
    }

    #[test]
    fn two_groups_separate_and_trace_is_monotone() {
        let hists = mixed_population();
        let outcome = fit_bird_traced(&hists, 2, 9, &FitLimits::default()).unwrap();
        for t in &outcome.traces {
            assert!(t.worst_decrease() <= 1e-7, "drop {}", t.worst_decrease());
        }
        let m = &outcome.model;
        let first = m.assignments[0];
        for (i, &z) in m.assignments.iter().enumerate() {
            assert_eq!(z == first, i % 3 == 0, "user {i}");
        }
        let pi_sum: f64 = m.clusters.iter().map(|c| c.pi).sum();
        assert!((pi_sum - 1.0).abs() < 1e-12);
        assert!((log_joint(m, &hists).unwrap() - m.total_log_likelihood).abs() < 1e-7);
        let expected_bic = -2.0 * m.total_log_likelihood + 19.0 * 60f64.ln();
        assert!((m.bic - expected_bic).abs() < 1e-9);
    }

    #[test]
    fn posteriors_are_prior_plus_counts() {
        let hists = mixed_population();
        let m = fit_bird(&hists, 2, 1, &FitLimits::default()).unwrap();
        for (h, &z) in hists.iter().zip(&m.assignments) {
            let post = m.posterior_rating(z, h).unwrap();
            for ((p, a), &c) in post
                .as_slice()
                .iter()
                .zip(m.clusters[z].alpha.as_slice())
                .zip(h.rating_counts.counts())
            {
                assert_eq!(*p, a + f64::from(c));
            }
            let post = m.posterior_temporal(z, h).unwrap();
            assert_eq!(post.len(), 4);
        }
    }

    #[test]
    fn identical_users_match_single_cluster() {
        let hists: Vec<_> = (0..40)
            .map(|i| hist(&format!("u{i}"), &[1, 2, 3], &[2, 3]))
            .collect();
        let one = fit_bird(&hists, 1, 5, &FitLimits::default()).unwrap();
        let two = fit_bird(&hists, 2, 5, &FitLimits::default()).unwrap();
        assert!(
            (one.total_log_likelihood - two.total_log_likelihood).abs() < 1e-6,
            "{} vs {}",
            one.total_log_likelihood,
            two.total_log_likelihood
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let hists = mixed_population();
        assert!(matches!(
            fit_bird(&hists[..2], 3, 0, &FitLimits::default()),
            Err(BirdError::TooManyClusters { k: 3, users: 2 })
        ));
        assert!(fit_bird(&hists, 0, 0, &FitLimits::default()).is_err());
        let mut bad = hists.clone();
        bad.push(hist("odd", &[1, 2], &[0, 0, 0, 1]));
        assert!(matches!(
            fit_bird(&bad, 2, 0, &FitLimits::default()),
            Err(BirdError::DimensionMismatch { .. })
        ));
        assert!(select_k(&hists, 3, 2, 0, &FitLimits::default()).is_err());
    }

    #[test]
    fn argmax_ignores_constant_offsets() {
        let hists = mixed_population();
        let m = fit_bird(&hists, 2, 2, &FitLimits::default()).unwrap();
        for h in &hists {
            let plain = argmax((0..2).map(|k| m.user_log_score(h, k))).0;
            let shifted = argmax((0..2).map(|k| m.user_log_score(h, k) + 123.456)).0;
            assert_eq!(plain, shifted);
            assert_eq!(m.assign(h).unwrap(), plain);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax([1.0, 1.0, 0.5].into_iter()).0, 0);
        assert_eq!(argmax([f64::NEG_INFINITY, f64::NEG_INFINITY].into_iter()).0, 0);
        assert_eq!(argmax([f64::NEG_INFINITY, -3.0].into_iter()).0, 1);
    }

    #[test]
    fn json_round_trip() {
        let hists = mixed_population();
        let m = fit_bird(&hists, 2, 4, &FitLimits::default()).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["K"], 2);
        assert!(value["assignments"]["u00"].as_u64().unwrap() >= 1);
        let back: BirdModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back.clusters, m.clusters);
        assert_eq!(back.bic.to_bits(), m.bic.to_bits());
        assert_eq!(back.total_log_likelihood.to_bits(), m.total_log_likelihood.to_bits());
        assert_eq!(back.resolve_assignments(&hists).unwrap(), m.assignments);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn rejects_inconsistent_json() {
        let bad = r#"{"K":2,"clusters":[{"pi":1.0,"alpha":[1,1],"beta":[1,1]}],"assignments":{},"bic":0,"log_likelihood":0}"#;
        assert!(serde_json::from_str::<BirdModel>(bad).is_err());
        let bad = r#"{"K":1,"clusters":[{"pi":1.0,"alpha":[1,1],"beta":[1,1]}],"assignments":{"a":2},"bic":0,"log_likelihood":0}"#;
        assert!(serde_json::from_str::<BirdModel>(bad).is_err());
        let bad = r#"{"K":1,"clusters":[{"pi":0.5,"alpha":[1,1],"beta":[1,1]}],"assignments":{},"bic":0,"log_likelihood":0}"#;
        assert!(serde_json::from_str::<BirdModel>(bad).is_err());
    }
}
