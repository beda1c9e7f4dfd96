//! Expected-surprise scoring against the fitted population.
//!
//! A user's surprise on one side is the negative log density of the global
//! mixture, averaged over the user's posterior. Each side is divided by its
//! population standard deviation and the two are summed into the NEST score.

use std::cmp::Ordering;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{BirdError, Result};
use crate::fit::BirdModel;
use crate::ingest::UserHistogram;
use crate::math::{
    dirichlet_log_normalizer, dirichlet_log_pdf_with_normalizer, log_sum_exp, DirichletParams,
    DirichletSampler, SimplexPoint, CONCENTRATION_FLOOR,
};
use crate::seed::{self, Domain};

/// Default Monte Carlo draws per user and side.
pub const DEFAULT_SAMPLES: usize = 128;

/// Default draws per user for posterior mean-rating plots.
pub const PLOT_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Rating,
    Temporal,
}

impl Side {
    fn prior(self, model: &BirdModel, k: usize) -> &DirichletParams {
        match self {
            Side::Rating => &model.clusters[k].alpha,
            Side::Temporal => &model.clusters[k].beta,
        }
    }

    fn domain(self) -> Domain {
        match self {
            Side::Rating => Domain::RatingSurprise,
            Side::Temporal => Domain::TemporalSurprise,
        }
    }
}

struct Component {
    /// `ln π_k + ln Γ(A_k) − Σ ln Γ(a_kl)`.
    offset: f64,
    log_normalizer: f64,
    a: Vec<f64>,
}

/// One side of the population mixture `Σ_k π_k Dir(p; a_k)`, with the
/// per-component constants precomputed. Components with zero weight are
/// dropped.
pub struct GlobalDensity {
    dim: usize,
    components: Vec<Component>,
}

impl GlobalDensity {
    pub fn new(model: &BirdModel, side: Side) -> Self {
        let components = (0..model.k())
            .filter(|&k| model.clusters[k].pi > 0.0)
            .map(|k| {
                let prior = side.prior(model, k);
                let log_normalizer = dirichlet_log_normalizer(prior);
                Component {
                    offset: model.clusters[k].pi.ln() + log_normalizer,
                    log_normalizer,
                    a: prior.as_slice().to_vec(),
                }
            })
            .collect();
        let dim = match side {
            Side::Rating => model.rating_dim(),
            Side::Temporal => model.temporal_dim(),
        };
        Self { dim, components }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Log mixture density at `p`. Returns `-inf` when every component
    /// vanishes there.
    pub fn log_density(&self, p: &[f64]) -> Result<f64> {
        if p.len() != self.dim {
            return Err(BirdError::DimensionMismatch {
                expected: self.dim,
                got: p.len(),
            });
        }
        let mut terms = Vec::with_capacity(self.components.len());
        if p.iter().all(|&x| x > 0.0) {
            let ln_p: Vec<f64> = p.iter().map(|x| x.ln()).collect();
            self.interior_terms(&ln_p, &mut terms);
        } else {
            for c in &self.components {
                let pdf = dirichlet_log_pdf_with_normalizer(p, &c.a, c.log_normalizer)?;
                terms.push(c.offset - c.log_normalizer + pdf);
            }
        }
        Ok(log_sum_exp(&terms))
    }

    fn interior_terms(&self, ln_p: &[f64], terms: &mut Vec<f64>) {
        terms.clear();
        terms.extend(self.components.iter().map(|c| {
            c.offset
                + c.a
                    .iter()
                    .zip(ln_p)
                    .map(|(&a, &lp)| (a - 1.0) * lp)
                    .sum::<f64>()
        }));
    }

    /// Monte Carlo estimate of `−E[ln F(p)]` for `p ~ Dir(posterior)`.
    ///
    /// Draws whose density is `-inf` are excluded and counted; if nothing
    /// survives the estimate is an error.
    pub fn expected_surprise<R: Rng + ?Sized>(
        &self,
        posterior: &DirichletParams,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<SurpriseEstimate> {
        if n_samples == 0 {
            return Err(BirdError::InvalidArgument("n_samples must be at least 1".into()));
        }
        if posterior.len() != self.dim {
            return Err(BirdError::DimensionMismatch {
                expected: self.dim,
                got: posterior.len(),
            });
        }
        let sampler = DirichletSampler::new(posterior);
        let mut p = Vec::with_capacity(self.dim);
        let mut ln_p = vec![0.0; self.dim];
        let mut terms = Vec::with_capacity(self.components.len());
        let (mut sum, mut sum_sq, mut used) = (0.0f64, 0.0f64, 0usize);
        for _ in 0..n_samples {
            sampler.sample_into(rng, &mut p);
            debug_assert!(p.iter().all(|&x| x > 0.0));
            for (lp, &x) in ln_p.iter_mut().zip(&p) {
                *lp = x.ln();
            }
            self.interior_terms(&ln_p, &mut terms);
            let density = log_sum_exp(&terms);
            if density.is_finite() {
                sum -= density;
                sum_sq += density * density;
                used += 1;
            }
        }
        if used == 0 {
            return Err(BirdError::AllSamplesExcluded { samples: n_samples });
        }
        let mean = sum / used as f64;
        let variance = if used > 1 {
            ((sum_sq - used as f64 * mean * mean) / (used - 1) as f64).max(0.0)
        } else {
            0.0
        };
        Ok(SurpriseEstimate {
            value: mean,
            std_error: (variance / used as f64).sqrt(),
            used,
            excluded: n_samples - used,
        })
    }
}

/// `ln Σ_k π_k Dir(p; a_k)` for one side of the model.
pub fn log_global_density(p: &SimplexPoint, model: &BirdModel, side: Side) -> Result<f64> {
    GlobalDensity::new(model, side).log_density(p.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurpriseEstimate {
    pub value: f64,
    /// Sample standard deviation over `sqrt(used)`.
    pub std_error: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Expected surprise of a posterior under one side of `model`.
pub fn expected_surprise<R: Rng + ?Sized>(
    posterior: &DirichletParams,
    model: &BirdModel,
    side: Side,
    n_samples: usize,
    rng: &mut R,
) -> Result<SurpriseEstimate> {
    GlobalDensity::new(model, side).expected_surprise(posterior, n_samples, rng)
}

/// Raw per-user surprises before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSurprise {
    pub user_id: String,
    pub s_x: f64,
    pub s_delta: f64,
    /// 0-based.
    pub cluster: usize,
    pub n_ratings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuspiciousnessRecord {
    pub rank: usize,
    pub user_id: String,
    pub nest: f64,
    pub s_x: f64,
    pub s_delta: f64,
    /// 1-based, as in the model file.
    pub cluster: usize,
    pub n_ratings: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NestScores {
    pub records: Vec<SuspiciousnessRecord>,
    pub sigma_x: f64,
    pub sigma_delta: f64,
    pub excluded_samples: u64,
    pub warnings: Vec<String>,
}

/// Surprise on both sides for every user. User `i` draws from streams keyed
/// by `(seed, side, i)`, so results do not depend on scheduling.
pub fn user_surprises(
    model: &BirdModel,
    hists: &[UserHistogram],
    n_samples: usize,
    seed_value: u64,
) -> Result<(Vec<UserSurprise>, u64)> {
    let assignments = model.resolve_assignments(hists)?;
    let rating = GlobalDensity::new(model, Side::Rating);
    let temporal = GlobalDensity::new(model, Side::Temporal);
    let rows: Vec<(UserSurprise, u64)> = hists
        .par_iter()
        .zip(assignments.par_iter())
        .enumerate()
        .map(|(i, (h, &z))| {
            let score = |density: &GlobalDensity, side: Side, posterior: DirichletParams| {
                let mut rng = seed::stream(seed_value, side.domain(), i as u64);
                density.expected_surprise(&posterior, n_samples, &mut rng)
            };
            let sx = score(&rating, Side::Rating, model.posterior_rating(z, h)?)?;
            let sd = score(&temporal, Side::Temporal, model.posterior_temporal(z, h)?)?;
            Ok((
                UserSurprise {
                    user_id: h.user_id.clone(),
                    s_x: sx.value,
                    s_delta: sd.value,
                    cluster: z,
                    n_ratings: h.n_ratings(),
                },
                (sx.excluded + sd.excluded) as u64,
            ))
        })
        .collect::<Result<_>>()?;
    let excluded = rows.iter().map(|r| r.1).sum();
    Ok((rows.into_iter().map(|r| r.0).collect(), excluded))
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Normalize each side by its population standard deviation, sum, and rank
/// by descending score with `user_id` breaking ties. A side with zero
/// spread contributes nothing and adds a warning.
pub fn normalize_and_rank(surprises: Vec<UserSurprise>, excluded_samples: u64) -> NestScores {
    let sigma_x = population_std(surprises.iter().map(|u| u.s_x));
    let sigma_delta = population_std(surprises.iter().map(|u| u.s_delta));
    let mut warnings = Vec::new();
    let mut scale = |sigma: f64, name: &str| {
        if sigma > 0.0 && sigma.is_finite() {
            1.0 / sigma
        } else {
            let msg = format!("{name} surprise has zero spread; side ignored");
            log::warn!("{msg}");
            warnings.push(msg);
            0.0
        }
    };
    let (wx, wd) = (scale(sigma_x, "rating"), scale(sigma_delta, "temporal"));
    let mut records: Vec<SuspiciousnessRecord> = surprises
        .into_iter()
        .map(|u| SuspiciousnessRecord {
            rank: 0,
            nest: u.s_x * wx + u.s_delta * wd,
            user_id: u.user_id,
            s_x: u.s_x,
            s_delta: u.s_delta,
            cluster: u.cluster + 1,
            n_ratings: u.n_ratings,
        })
        .collect();
    records.par_sort_by(|a, b| match b.nest.total_cmp(&a.nest) {
        Ordering::Equal => a.user_id.cmp(&b.user_id),
        other => other,
    });
    for (i, r) in records.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    NestScores {
        records,
        sigma_x,
        sigma_delta,
        excluded_samples,
        warnings,
    }
}

/// Score and rank every user.
pub fn nest_scores(
    model: &BirdModel,
    hists: &[UserHistogram],
    n_samples: usize,
    seed_value: u64,
) -> Result<NestScores> {
    let (surprises, excluded) = user_surprises(model, hists, n_samples, seed_value)?;
    if excluded > 0 {
        log::warn!("{excluded} Monte Carlo samples excluded for zero density");
    }
    let floored = floored_bins(model);
    let mut scores = normalize_and_rank(surprises, excluded);
    for msg in floored {
        log::warn!("{msg}");
        scores.warnings.push(msg);
    }
    Ok(scores)
}

/// Bins whose fitted concentration sits near the floor in some active
/// cluster. A user's surprise then swings by hundreds of nats on whether
/// they have any count in that bin, which can dominate the ranking.
pub fn floored_bins(model: &BirdModel) -> Vec<String> {
    const NEAR_FLOOR: f64 = 1e3 * CONCENTRATION_FLOOR;
    let mut out = Vec::new();
    for (side, name) in [(Side::Rating, "rating"), (Side::Temporal, "gap")] {
        let dim = match side {
            Side::Rating => model.rating_dim(),
            Side::Temporal => model.temporal_dim(),
        };
        let bins: Vec<usize> = (0..dim)
            .filter(|&j| {
                model.clusters.iter().any(|c| {
                    let p = match side {
                        Side::Rating => &c.alpha,
                        Side::Temporal => &c.beta,
                    };
                    c.pi > 0.0 && p.as_slice()[j] < NEAR_FLOOR
                })
            })
            .collect();
        if !bins.is_empty() {
            out.push(format!(
                "{name} bins {bins:?} have near-zero fitted concentration; \
                 users with counts there may dominate the ranking"
            ));
        }
    }
    out
}

pub const SCORE_HEADER: [&str; 7] = ["rank", "user_id", "nest", "s_x", "s_delta", "cluster", "n_ratings"];

pub fn write_scores_csv<W: Write>(out: W, records: &[SuspiciousnessRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORE_HEADER)?;
    for r in records {
        w.write_record([
            r.rank.to_string(),
            r.user_id.clone(),
            r.nest.to_string(),
            r.s_x.to_string(),
            r.s_delta.to_string(),
            r.cluster.to_string(),
            r.n_ratings.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores_json<W: Write>(out: W, scores: &NestScores) -> Result<()> {
    serde_json::to_writer_pretty(out, scores)?;
    Ok(())
}

/// Averaged normalized histograms of one group of users.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupDistribution {
    pub group: String,
    pub users: usize,
    pub rating: Vec<f64>,
    /// Users with a single rating have no gaps and are left out here.
    pub temporal: Vec<f64>,
}

fn averaged<'a>(hists: impl Iterator<Item = &'a crate::math::CountVector>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for c in hists.filter(|c| c.total() > 0) {
        let t = c.total() as f64;
        for (a, &x) in acc.iter_mut().zip(c.counts()) {
            *a += f64::from(x) / t;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Averaged rating and gap distributions for the `top` highest-ranked users
/// and for everyone else.
pub fn group_distributions(
    hists: &[UserHistogram],
    records: &[SuspiciousnessRecord],
    top: usize,
) -> Result<[GroupDistribution; 2]> {
    let first = hists.first().ok_or(BirdError::InvalidArgument("no users".into()))?;
    let (s, d) = (first.rating_counts.len(), first.temporal_counts.len());
    let flagged: std::collections::HashSet<&str> = records
        .iter()
        .filter(|r| r.rank <= top)
        .map(|r| r.user_id.as_str())
        .collect();
    let (top_users, rest): (Vec<&UserHistogram>, Vec<&UserHistogram>) =
        hists.iter().partition(|h| flagged.contains(h.user_id.as_str()));
    let group = |name: &str, members: &[&UserHistogram]| GroupDistribution {
        group: name.into(),
        users: members.len(),
        rating: averaged(members.iter().map(|h| &h.rating_counts), s),
        temporal: averaged(members.iter().map(|h| &h.temporal_counts), d),
    };
    Ok([group("top", &top_users), group("rest", &rest)])
}

/// Long-format CSV `group,side,bin,value` (bins 1-based: stars, or gap
/// bucket index + 1).
pub fn write_group_distributions_csv<W: Write>(out: W, groups: &[GroupDistribution]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "side", "bin", "value"])?;
    for g in groups {
        for (side, values) in [("rating", &g.rating), ("temporal", &g.temporal)] {
            for (bin, v) in values.iter().enumerate() {
                w.write_record([g.group.clone(), side.into(), (bin + 1).to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Draws of a user's mean star rating `Σ_l l·p_l` with `p` from the user's
/// rating posterior. `user_index` keys the random stream.
pub fn posterior_mean_rating_draws(
    model: &BirdModel,
    hist: &UserHistogram,
    cluster: usize,
    draws: usize,
    seed_value: u64,
    user_index: usize,
) -> Result<Vec<f64>> {
    let posterior = model.posterior_rating(cluster, hist)?;
    let sampler = DirichletSampler::new(&posterior);
    let mut rng = seed::stream(seed_value, Domain::PlotDraws, user_index as u64);
    let mut p = Vec::with_capacity(posterior.len());
    Ok((0..draws)
        .map(|_| {
            sampler.sample_into(&mut rng, &mut p);
            p.iter().enumerate().map(|(l, &x)| (l + 1) as f64 * x).sum()
        })
        .collect())
}

pub fn write_draws_csv<W: Write>(out: W, draws: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["draw", "mean_rating"])?;
    for (i, v) in draws.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::ClusterParams;
    use crate::math::{dirichlet_log_pdf, sample_dirichlet, CountVector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dp(v: &[f64]) -> DirichletParams {
        DirichletParams::new(v.to_vec()).unwrap()
    }

    fn model(clusters: Vec<(f64, Vec<f64>, Vec<f64>)>) -> BirdModel {
        BirdModel {
            clusters: clusters
                .into_iter()
                .map(|(pi, a, b)| ClusterParams {
                    pi,
                    alpha: dp(&a),
                    beta: dp(&b),
                })
                .collect(),
            user_ids: vec![],
            assignments: vec![],
            total_log_likelihood: 0.0,
            bic: 0.0,
        }
    }

    fn hist(id: &str, x: &[u32], d: &[u32]) -> UserHistogram {
        UserHistogram {
            user_id: id.into(),
            rating_counts: CountVector::new(x.to_vec()),
            temporal_counts: CountVector::new(d.to_vec()),
        }
    }

    fn point(v: &[f64]) -> SimplexPoint {
        SimplexPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn floored_bins_ignore_dormant_clusters() {
        let m = model(vec![
            (1.0, vec![2.0, 3.0], vec![1.0, 1e-6, 2.0]),
            (0.0, vec![1e-6, 1.0], vec![1.0, 1.0, 1.0]),
        ]);
        let w = floored_bins(&m);
        assert_eq!(w.len(), 1);
        assert!(w[0].starts_with("gap bins [1]"), "{}", w[0]);
        assert!(floored_bins(&model(vec![(1.0, vec![2.0, 3.0], vec![1.0, 1.0])])).is_empty());
    }

    #[test]
    fn single_component_is_its_own_density() {
        let m = model(vec![(1.0, vec![2.0, 3.0, 0.7], vec![1.0, 1.0])]);
        let p = point(&[0.2, 0.5, 0.3]);
        let direct = dirichlet_log_pdf(&p, &m.clusters[0].alpha).unwrap();
        let mixed = log_global_density(&p, &m, Side::Rating).unwrap();
        assert!((mixed - direct).abs() < 1e-14, "{mixed} vs {direct}");
    }

    #[test]
    fn duplicate_components_collapse() {
        let a = vec![4.0, 1.5, 0.9];
        let m = model(vec![(0.5, a.clone(), vec![1.0, 2.0]), (0.5, a.clone(), vec![1.0, 2.0])]);
        let p = point(&[0.6, 0.1, 0.3]);
        let direct = dirichlet_log_pdf(&p, &dp(&a)).unwrap();
        assert!((log_global_density(&p, &m, Side::Rating).unwrap() - direct).abs() < 1e-12);
    }

    /// Direct exp-space evaluation with its own normalizer.
    fn naive_mixture(p: &[f64], comps: &[(f64, Vec<f64>)]) -> f64 {
        comps
            .iter()
            .map(|(pi, a)| {
                let big_a: f64 = a.iter().sum();
                let norm = libm::tgamma(big_a) / a.iter().map(|&x| libm::tgamma(x)).product::<f64>();
                pi * norm * p.iter().zip(a).map(|(&x, &al)| x.powf(al - 1.0)).product::<f64>()
            })
            .sum::<f64>()
            .ln()
    }

    proptest! {
        #[test]
        fn matches_naive_summation(
            a1 in prop::collection::vec(0.5f64..6.0, 4),
            a2 in prop::collection::vec(0.5f64..6.0, 4),
            w in 0.05f64..0.95,
            raw in prop::collection::vec(0.05f64..1.0, 4),
        ) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let m = model(vec![(w, a1.clone(), vec![1.0, 1.0]), (1.0 - w, a2.clone(), vec![1.0, 1.0])]);
            let got = log_global_density(&point(&p), &m, Side::Rating).unwrap();
            let naive = naive_mixture(&p, &[(w, a1), (1.0 - w, a2)]);
            prop_assert!(got.is_finite());
            prop_assert!((got - naive).abs() < 1e-10 * naive.abs().max(1.0), "{} vs {}", got, naive);
        }
    }

    #[test]
    fn zero_weight_components_are_ignored() {
        let m = model(vec![(1.0, vec![2.0, 2.0], vec![1.0, 1.0]), (0.0, vec![9.0, 1.0], vec![1.0, 1.0])]);
        let p = point(&[0.3, 0.7]);
        let direct = dirichlet_log_pdf(&p, &dp(&[2.0, 2.0])).unwrap();
        assert_eq!(log_global_density(&p, &m, Side::Rating).unwrap(), direct);
    }

    #[test]
    fn boundary_points_follow_pdf_rules() {
        let m = model(vec![(1.0, vec![2.0, 2.0], vec![0.5, 2.0])]);
        let edge = point(&[0.0, 1.0]);
        assert_eq!(log_global_density(&edge, &m, Side::Rating).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(
            log_global_density(&edge, &m, Side::Temporal),
            Err(BirdError::DensityDiverges { .. })
        ));
    }

    #[test]
    fn corner_user_is_more_surprising_than_mean_user() {
        let alpha = vec![2.0, 3.0, 4.0, 3.0, 2.0];
        let m = model(vec![(1.0, alpha.clone(), vec![1.0, 1.0])]);
        let typical = dp(&alpha).scaled(1e6).unwrap();
        let corner = dp(&[1e6, 1.0, 1.0, 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s_typ = expected_surprise(&typical, &m, Side::Rating, 64, &mut rng).unwrap();
        let s_cor = expected_surprise(&corner, &m, Side::Rating, 64, &mut rng).unwrap();
        assert!(s_cor.value > s_typ.value);
        let at_mean = dirichlet_log_pdf(&point(&dp(&alpha).mean()), &dp(&alpha)).unwrap();
        assert!((s_typ.value + at_mean).abs() < 1e-3, "{} vs {}", s_typ.value, -at_mean);
    }

    #[test]
    fn one_sample_is_that_draw() {
        let m = model(vec![(0.3, vec![2.0, 1.0, 1.0], vec![1.0, 1.0]), (0.7, vec![1.0, 1.0, 5.0], vec![1.0, 1.0])]);
        let post = dp(&[3.0, 2.0, 4.0]);
        let est = expected_surprise(&post, &m, Side::Rating, 1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let draw = sample_dirichlet(&post, &mut ChaCha8Rng::seed_from_u64(8));
        let direct = -log_global_density(&draw, &m, Side::Rating).unwrap();
        assert!((est.value - direct).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn doubling_samples_stays_within_standard_error() {
        let m = model(vec![(0.4, vec![1.5, 1.0, 3.0, 2.0], vec![1.0, 1.0]), (0.6, vec![4.0, 2.0, 1.0, 1.0], vec![1.0, 1.0])]);
        let post = dp(&[3.0, 1.0, 2.0, 6.0]);
        let small = expected_surprise(&post, &m, Side::Rating, 2000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let large = expected_surprise(&post, &m, Side::Rating, 4000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let se = (small.std_error.powi(2) + large.std_error.powi(2)).sqrt();
        assert!((small.value - large.value).abs() < 3.0 * se);
    }

    #[test]
    fn zero_samples_rejected() {
        let m = model(vec![(1.0, vec![1.0, 1.0], vec![1.0, 1.0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(expected_surprise(&dp(&[1.0, 1.0]), &m, Side::Rating, 0, &mut rng).is_err());
    }

    #[test]
    fn samples_with_vanishing_density_are_excluded() {
        // A second component with zero weight makes the mixture vanish nowhere,
        // so build the degenerate case directly.
        let density = GlobalDensity { dim: 2, components: vec![] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            density.expected_surprise(&dp(&[1.0, 1.0]), 5, &mut rng),
            Err(BirdError::AllSamplesExcluded { samples: 5 })
        ));
    }

    fn small_population() -> (BirdModel, Vec<UserHistogram>) {
        let mut m = model(vec![
            (0.6, vec![1.0, 1.0, 2.0, 4.0, 6.0], vec![0.5, 2.0, 3.0]),
            (0.4, vec![3.0, 2.0, 2.0, 1.0, 1.0], vec![2.0, 1.0, 0.5]),
        ]);
        let hists: Vec<UserHistogram> = (0..40u32)
            .map(|i| {
                hist(
                    &format!("u{i:02}"),
                    &[i % 3, i % 5, 1, i % 7, (i * 3) % 11],
                    &[i % 2, i % 4, i % 3 + 1],
                )
            })
            .collect();
        m.user_ids = hists.iter().map(|h| h.user_id.clone()).collect();
        m.assignments = hists.iter().map(|h| m.assign(h).unwrap()).collect();
        (m, hists)
    }

    #[test]
    fn scores_are_deterministic_and_ranked() {
        let (m, hists) = small_population();
        let a = nest_scores(&m, &hists, 32, 77).unwrap();
        let b = nest_scores(&m, &hists, 32, 77).unwrap();
        assert_eq!(a, b);
        let ranks: Vec<usize> = a.records.iter().map(|r| r.rank).collect();
        assert_eq!(ranks, (1..=40).collect::<Vec<_>>());
        assert!(a.records.windows(2).all(|w| w[0].nest >= w[1].nest));
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_scores_csv(&mut csv_a, &a.records).unwrap();
        write_scores_csv(&mut csv_b, &b.records).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(String::from_utf8(csv_a).unwrap().starts_with("rank,user_id,nest,s_x,s_delta,cluster,n_ratings\n"));
    }

    #[test]
    fn normalized_sides_have_unit_spread() {
        let (m, hists) = small_population();
        let scores = nest_scores(&m, &hists, 32, 5).unwrap();
        let sx = population_std(scores.records.iter().map(|r| r.s_x / scores.sigma_x));
        let sd = population_std(scores.records.iter().map(|r| r.s_delta / scores.sigma_delta));
        assert!((sx - 1.0).abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_users_tie_by_id() {
        let mut m = model(vec![(1.0, vec![2.0, 2.0, 2.0], vec![1.0, 3.0])]);
        let hists = vec![hist("zed", &[1, 2, 3], &[2, 3]), hist("amy", &[1, 2, 3], &[2, 3])];
        m.user_ids = vec!["zed".into(), "amy".into()];
        m.assignments = vec![0, 0];
        let scores = nest_scores(&m, &hists, 16, 0).unwrap();
        // Different streams per user index, so pin the raw surprises equal.
        let raw = scores
            .records
            .iter()
            .map(|r| UserSurprise {
                user_id: r.user_id.clone(),
                s_x: 1.5,
                s_delta: 2.5,
                cluster: 0,
                n_ratings: r.n_ratings,
            })
            .collect();
        let tied = normalize_and_rank(raw, 0);
        assert_eq!(tied.records[0].user_id, "amy");
        assert_eq!(tied.records[1].user_id, "zed");
        assert_eq!(tied.records[0].nest, tied.records[1].nest);
        assert_eq!(tied.warnings.len(), 2);
    }

    fn order(scores: &NestScores) -> Vec<String> {
        scores.records.iter().map(|r| r.user_id.clone()).collect()
    }

    #[test]
    fn ranking_ignores_shift_and_common_scale() {
        let (m, hists) = small_population();
        let (raw, _) = user_surprises(&m, &hists, 32, 11).unwrap();
        let base = normalize_and_rank(raw.clone(), 0);
        let transformed = |f: &dyn Fn(f64) -> f64| {
            raw.iter()
                .map(|u| UserSurprise {
                    s_x: f(u.s_x),
                    s_delta: f(u.s_delta),
                    ..u.clone()
                })
                .collect::<Vec<_>>()
        };
        let shifted = normalize_and_rank(transformed(&|v| v + 123.0), 0);
        let scaled = normalize_and_rank(transformed(&|v| v * 7.5), 0);
        assert_eq!(order(&base), order(&shifted));
        assert_eq!(order(&base), order(&scaled));
        for (a, b) in base.records.iter().zip(&scaled.records) {
            assert!((a.nest - b.nest).abs() < 1e-9 * a.nest.abs().max(1.0));
        }
    }

    #[test]
    fn group_distributions_average_normalized_histograms() {
        let hists = vec![
            hist("a", &[0, 4], &[1, 0, 3]),
            hist("b", &[2, 2], &[0, 0, 0]),
            hist("c", &[1, 0], &[0, 0, 0]),
        ];
        let rec = |rank: usize, id: &str| SuspiciousnessRecord {
            rank,
            user_id: id.into(),
            nest: 0.0,
            s_x: 0.0,
            s_delta: 0.0,
            cluster: 1,
            n_ratings: 0,
        };
        let records = vec![rec(1, "a"), rec(2, "b"), rec(3, "c")];
        let [top, rest] = group_distributions(&hists, &records, 1).unwrap();
        assert_eq!(top.users, 1);
        assert_eq!(top.rating, vec![0.0, 1.0]);
        assert_eq!(top.temporal, vec![0.25, 0.0, 0.75]);
        assert_eq!(rest.rating, vec![0.75, 0.25]);
        assert_eq!(rest.temporal, vec![0.0; 3]);
    }

    #[test]
    fn mean_rating_draws_center_on_posterior_mean() {
        let m = model(vec![(1.0, vec![1.0; 5], vec![1.0, 1.0])]);
        let h = hist("bob", &[0, 0, 0, 0, 50], &[49, 0]);
        let draws = posterior_mean_rating_draws(&m, &h, 0, PLOT_DRAWS, 3, 0).unwrap();
        assert_eq!(draws.len(), PLOT_DRAWS);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let expected = (1.0 + 2.0 + 3.0 + 4.0 + 5.0 * 51.0) / 55.0;
        assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
        assert!(draws.iter().all(|&d| (1.0..=5.0).contains(&d)));
    }
}
